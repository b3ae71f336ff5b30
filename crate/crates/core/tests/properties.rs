use proptest::prelude::*;
use sparsedec_core::attention::{
    full_attention, page_estimate_select, exact_select, sparse_attention, window_select, GroupAggregation, LayerLoads,
};
use sparsedec_core::math::{arg_top_k, rope_apply, softmax_row, Matrix};

fn scores(max_len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-8.0f32..8.0, 1..max_len)
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(x in scores(256), c in -20.0f32..20.0) {
        let p = softmax_row(&x).unwrap();
        let sum: f64 = p.iter().map(|&v| v as f64).sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        let shifted: Vec<f32> = x.iter().map(|v| v + c).collect();
        let q = softmax_row(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn top_k_is_unchanged_by_softmax(x in scores(512), m in 1usize..64) {
        let m = m.min(x.len());
        prop_assert_eq!(arg_top_k(&x, m).unwrap(), arg_top_k(&softmax_row(&x).unwrap(), m).unwrap());
    }

    #[test]
    fn top_k_returns_distinct_sorted_in_range(x in scores(300), m in 1usize..300) {
        let m = m.min(x.len());
        let idx = arg_top_k(&x, m).unwrap();
        prop_assert_eq!(idx.len(), m);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < x.len()));
        let worst_in = idx.iter().map(|&i| x[i]).fold(f32::INFINITY, f32::min);
        for (i, &v) in x.iter().enumerate() {
            if !idx.contains(&i) {
                prop_assert!(v <= worst_in);
            }
        }
    }

    #[test]
    fn rope_preserves_pair_norms(x in prop::collection::vec(-4.0f32..4.0, 16), pos in 0usize..100_000) {
        let y = rope_apply(&x, pos, 8, 10_000.0).unwrap();
        for (a, b) in x.chunks(2).zip(y.chunks(2)) {
            let na = (a[0] as f64).hypot(a[1] as f64);
            let nb = (b[0] as f64).hypot(b[1] as f64);
            prop_assert!((na - nb).abs() < 1e-6);
        }
    }

    #[test]
    fn sparse_over_all_positions_equals_full(
        rows in 1usize..80,
        seed in prop::collection::vec(-1.0f32..1.0, 80 * 8 * 2 + 8),
    ) {
        let k = Matrix::from_vec(rows, 8, seed[..rows * 8].to_vec()).unwrap();
        let v = Matrix::from_vec(rows, 8, seed[640..640 + rows * 8].to_vec()).unwrap();
        let q = &seed[1280..1288];
        let all: Vec<usize> = (0..rows).collect();
        let mut loads = LayerLoads::default();
        let s = sparse_attention(&[q], k.view(), v.view(), &all, &mut loads).unwrap();
        let f = full_attention(q, k.view(), v.view(), &mut LayerLoads::default()).unwrap();
        for (a, b) in s[0].iter().zip(&f) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        prop_assert_eq!(loads.key_token_loads, rows as u64);
    }

    #[test]
    fn unit_pages_equal_exact_selection(
        rows in 1usize..100,
        data in prop::collection::vec(-2.0f32..2.0, 100 * 4 + 4),
        m in 1usize..100,
    ) {
        let m = m.min(rows);
        let k = Matrix::from_vec(rows, 4, data[..rows * 4].to_vec()).unwrap();
        let q = &data[400..404];
        let a = exact_select(&[q], k.view(), m, GroupAggregation::Sum, &mut LayerLoads::default()).unwrap();
        let b = page_estimate_select(&[q], k.view(), m, 1, GroupAggregation::Sum, &mut LayerLoads::default()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn window_excludes_only_the_middle(n in 0usize..5000, sinks in 0usize..10, window in 1usize..100, p in 0usize..5000) {
        let sel = window_select(n, sinks, window);
        if p < n {
            let inside = p < sinks || p + window >= n;
            prop_assert_eq!(sel.binary_search(&p).is_ok(), inside);
        }
    }
}

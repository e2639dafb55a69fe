use cloud_transform::losses::{chamfer_value, emd_matching};
use cloud_transform::raster::{gather_kernel, make_footprint, scatter_kernel, Aggregation};
use cloud_transform::Tensor;
use proptest::prelude::*;

fn keys_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (2usize..=3, 2usize..=40, 1usize..=12).prop_flat_map(|(dims, w, n)| {
        (
            Just(dims),
            Just(w),
            prop::collection::vec(0.0f64..=1.0, n * dims),
        )
    })
}

proptest! {
    #[test]
    fn weights_are_a_partition_of_unity((dims, w, keys) in keys_strategy()) {
        let n = keys.len() / dims;
        let fp = make_footprint(&Tensor::new(&[1, n, dims], keys).unwrap(), w).unwrap();
        for p in 0..n {
            let ws = fp.point_weights(p);
            prop_assert!(ws.iter().all(|x| (0.0..=1.0).contains(x)));
            prop_assert!((ws.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_grid_gathers_its_constant((dims, w, keys) in keys_strategy(), v in -5.0f64..5.0) {
        let n = keys.len() / dims;
        let fp = make_footprint(&Tensor::new(&[1, n, dims], keys).unwrap(), w).unwrap();
        let out = gather_kernel(&vec![v; fp.cells()], 1, &fp);
        prop_assert!(out.iter().all(|x| (x - v).abs() < 1e-12));
    }

    #[test]
    fn max_scatter_ignores_point_order((dims, w, keys) in keys_strategy(), seed in any::<u64>()) {
        let n = keys.len() / dims;
        let values: Vec<f64> = (0..n).map(|i| ((seed.wrapping_mul(i as u64 + 7) % 1000) as f64 - 500.0) / 250.0).collect();
        let forward = |keys: Vec<f64>, values: &[f64]| {
            let fp = make_footprint(&Tensor::new(&[1, n, dims], keys).unwrap(), w).unwrap();
            scatter_kernel(values, 1, &fp, Aggregation::Max).grid
        };
        let rev_keys: Vec<f64> = keys.chunks(dims).rev().flatten().copied().collect();
        let rev_values: Vec<f64> = values.iter().rev().copied().collect();
        prop_assert_eq!(forward(keys, &values), forward(rev_keys, &rev_values));
    }

    #[test]
    fn emd_is_symmetric_and_bounds_chamfer(
        a in prop::collection::vec(-1.0f64..1.0, 3..=24),
        b in prop::collection::vec(-1.0f64..1.0, 3..=24),
    ) {
        let n = a.len().min(b.len()) / 3 * 3;
        let (a, b) = (&a[..n], &b[..n]);
        let (_, ab) = emd_matching(a, b).unwrap();
        let (_, ba) = emd_matching(b, a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        // nearest-neighbour distances never exceed matched distances
        let directed = |x: &[f64], y: &[f64]| -> f64 {
            x.chunks(3)
                .map(|p| y.chunks(3).map(|q| (0..3).map(|i| (p[i] - q[i]).powi(2)).sum::<f64>().sqrt()).fold(f64::INFINITY, f64::min))
                .sum::<f64>() / (x.len() / 3) as f64
        };
        prop_assert!(directed(a, b) <= ab + 1e-12);
        prop_assert!(chamfer_value(a, b).unwrap() >= 0.0);
    }
}

use asf_core::geom::{knn_all, rbf_delta, uniform_delta};
use asf_core::net::forward;
use asf_core::sphharm::{project, reconstruct, NUM_COEFFS};
use asf_core::symfun::{power_sums, recover_multiset, Multiset};
use asf_core::train::{lr_schedule, split_dataset, TrainConfig};
use asf_core::{Architecture, LatLongMap, ModelParams, PointCloud, ShCoeffs};
use proptest::prelude::*;

fn cloud_strategy(min: usize, max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), min..max)
        .prop_map(|pts| PointCloud::from_xyz(&pts).unwrap())
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sh_projection_inverts_reconstruction(c in prop::array::uniform16(-2.0f64..2.0)) {
        let coeffs = ShCoeffs::new(500, c).unwrap();
        let map = LatLongMap::from_fn(18, 36, |t, p| reconstruct(&coeffs, t, p)).unwrap();
        let (back, residual) = project(&map, 500).unwrap();
        prop_assert!(residual < 1e-10);
        for i in 0..NUM_COEFFS {
            prop_assert!((back.coeffs[i] - c[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn differential_coordinates_follow_permutations(
        (cloud, perm) in cloud_strategy(8, 40).prop_flat_map(|c| { let n = c.len(); (Just(c), permutation(n)) })
    ) {
        let k = 4;
        let a = knn_all(&cloud, k).unwrap();
        let shuffled = cloud.permuted(&perm);
        let b = knn_all(&shuffled, k).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            let mapped: Vec<usize> = b[new_i].indices.iter().map(|&j| perm[j]).collect();
            prop_assert_eq!(&mapped, &a[old_i].indices);
            let da = uniform_delta(&cloud, old_i, &a[old_i]);
            let db = uniform_delta(&shuffled, new_i, &b[new_i]);
            prop_assert!((da - db).norm() < 1e-12);
            let ra = rbf_delta(&cloud, old_i, &a[old_i]).unwrap();
            let rb = rbf_delta(&shuffled, new_i, &b[new_i]).unwrap();
            prop_assert!((ra - rb).norm() < 1e-12);
        }
    }

    #[test]
    fn multiset_round_trip(values in prop::collection::vec(0.0f64..=1.0, 1..=8)) {
        let ms = Multiset::new(values).unwrap();
        let back = recover_multiset(&power_sums(&ms)).unwrap();
        prop_assert_eq!(back.len(), ms.len());
        for (a, b) in back.values().iter().zip(ms.values()) {
            prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn splits_partition_the_ids(n in 10usize..300, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
        let s = split_dataset(&ids, seed).unwrap();
        prop_assert_eq!(s.validation.len(), n / 10);
        prop_assert_eq!(s.test.len(), n / 10);
        let mut all: Vec<String> = s.train.iter().chain(&s.validation).chain(&s.test).cloned().collect();
        all.sort();
        let mut expect = ids.clone();
        expect.sort();
        prop_assert_eq!(all, expect);
    }

    #[test]
    fn learning_rate_decreases(n_train in 1usize..1000, a in 0u64..1_000_000, gap in 1u64..10_000) {
        let s = TrainConfig::new(125).schedule(n_train);
        let (x, y) = (lr_schedule(&s, a), lr_schedule(&s, a + gap));
        prop_assert!(y < x && y > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn network_output_ignores_point_order(
        (cloud, perm) in cloud_strategy(12, 48).prop_flat_map(|c| { let n = c.len(); (Just(c), permutation(n)) }),
        seed in 0u64..1000,
    ) {
        let mut arch = Architecture::new(250).unwrap();
        arch.input_points = 0;
        let p = ModelParams::init(arch, seed).unwrap();
        let a = forward(&p, &cloud).unwrap();
        let b = forward(&p, &cloud.permuted(&perm)).unwrap();
        for i in 0..NUM_COEFFS {
            prop_assert!((a.coeffs[i] - b.coeffs[i]).abs() <= 1e-9);
        }
    }
}

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gs6::numerics::{Graph, Tensor};
use gs6::params::ParamStore;
use gs6::sampling::{dist2, interpolation_weights, Downsample, SampleMap, Upsample};
use gs6::serialization::Point;

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_are_a_convex_combination(seed in any::<u64>(), nc in 1usize..12, np in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (child, parent) = (cloud(&mut rng, nc), cloud(&mut rng, np));
        let (_, w, k) = interpolation_weights(&child, &parent).unwrap();
        for row in w.chunks(k) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn down_then_up_keeps_shape(seed in any::<u64>(), n in 8usize..40, rate in 1usize..5, k in 1usize..8) {
        let k = k.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = cloud(&mut rng, n);
        let h = 4;
        let mut ps = ParamStore::<f64>::new(seed);
        let down = Downsample::new(&mut ps, "d", h);
        let up = Upsample::new(&mut ps, "u", h);
        let map = SampleMap::build(&coords, rate, k, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![n, h], |i| (i as f64).sin()));
        let y = down.forward(&mut g, &ps, &coords, x, &map).unwrap();
        prop_assert_eq!(g.value(y).shape(), &[n / rate, 2 * h]);
        let z = up.forward(&mut g, &ps, &map.center_coords(&coords), y, &coords, x).unwrap();
        prop_assert_eq!(g.value(z).shape(), &[n, h]);
    }
}

#[test]
fn max_pool_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, h, k) = (32, 3, 5);
    let coords = cloud(&mut rng, n);
    let feats = Tensor::from_fn(vec![n, h], |_| rng.random_range(-1.0..1.0));
    let mut ps = ParamStore::<f64>::new(1);
    let down = Downsample::new(&mut ps, "d", h);
    let map = SampleMap::build(&coords, 4, k, 0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(feats.clone());
    let y = down.forward(&mut g, &ps, &coords, x, &map).unwrap();
    let y = g.value(y).clone();

    // brute force: sort all points by distance to each centre, take K, run the MLP row by row
    let wt = ps.by_name("d.0.weight").unwrap().clone();
    let bias = ps.by_name("d.0.bias").cloned();
    assert_eq!(wt.shape(), [h + 3, 2 * h]);
    let silu = |v: f64| v / (1.0 + (-v).exp());
    for (ci, &c) in map.centers.iter().enumerate() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            dist2(&coords[a], &coords[c])
                .total_cmp(&dist2(&coords[b], &coords[c]))
                .then(a.cmp(&b))
        });
        for o in 0..2 * h {
            let best = order[..k]
                .iter()
                .map(|&p| {
                    let mut input: Vec<f64> = feats.row(p).to_vec();
                    input.extend((0..3).map(|a| coords[p][a] - coords[c][a]));
                    let mut acc = bias.as_ref().map_or(0.0, |b| b.data()[o]);
                    for (i, v) in input.iter().enumerate() {
                        acc += v * wt.data()[i * 2 * h + o];
                    }
                    silu(acc)
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((best - y.data()[ci * 2 * h + o]).abs() < 1e-12);
        }
    }
}

#[test]
fn interpolation_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (child, parent) = (cloud(&mut rng, 9), cloud(&mut rng, 14));
    let (idx, w, k) = interpolation_weights(&child, &parent).unwrap();
    assert_eq!(k, 3);
    for (pi, p) in parent.iter().enumerate() {
        let mut d: Vec<(f64, usize)> = child
            .iter()
            .enumerate()
            .map(|(i, c)| (dist2(c, p), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let inv: Vec<f64> = d[..3].iter().map(|(v, _)| 1.0 / (v + 1e-8)).collect();
        let s: f64 = inv.iter().sum();
        for j in 0..3 {
            assert_eq!(idx[pi * 3 + j], d[j].1);
            assert!((w[pi * 3 + j] - inv[j] / s).abs() < 1e-12);
        }
    }
}

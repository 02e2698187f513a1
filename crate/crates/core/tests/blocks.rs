mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gs6::blocks::{
    chained_bidirectional, parallel_bidirectional, BlockConfig, HexaBlock, MambaUnit, Structure,
};
use gs6::numerics::{Graph, Tensor};
use gs6::params::ParamStore;
use gs6::serialization::{AxisSet, Point};

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

fn hexa_out(
    block: &HexaBlock,
    ps: &ParamStore<f64>,
    coords: &[Point],
    x: &Tensor<f64>,
) -> Tensor<f64> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let y = block.forward(&mut g, ps, coords, xn).unwrap();
    g.value(y).clone()
}

#[test]
fn every_configuration_preserves_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let coords = cloud(&mut rng, 9);
    let x = Tensor::from_fn(vec![9, 6], |_| rng.random_range(-1.0..1.0));
    for axes in AxisSet::all_subsets() {
        for structure in [Structure::Chained, Structure::Parallel] {
            for (prompt, posemb) in [(true, true), (false, false), (true, false)] {
                let mut cfg = BlockConfig::new(6, 3, 3);
                cfg.axes = axes;
                cfg.structure = structure;
                cfg.prompt = prompt;
                cfg.posemb = posemb;
                let mut ps = ParamStore::<f64>::new(1);
                let block = HexaBlock::new(&mut ps, "h", cfg).unwrap();
                let y = hexa_out(&block, &ps, &coords, &x);
                assert_eq!(y.shape(), [9, 6]);
                assert!(y.is_finite());
            }
        }
    }
}

#[test]
fn chained_and_parallel_differ_at_length_eight() {
    let cfg = BlockConfig::new(4, 4, 2);
    let mut ps = ParamStore::<f64>::new(2);
    let f = MambaUnit::new(&mut ps, "f", &cfg).unwrap();
    let b = MambaUnit::new(&mut ps, "b", &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::from_fn(vec![8, 4], |_| rng.random_range(-1.0..1.0));
    let mut g = Graph::new();
    let xn = g.constant(x);
    let c = chained_bidirectional(&mut g, &ps, xn, &f, &b, false).unwrap();
    let p = parallel_bidirectional(&mut g, &ps, xn, &f, &b).unwrap();
    assert!(g.value(c).max_abs_diff(g.value(p)).unwrap() > 0.0);
}

#[test]
fn chained_receptive_field_is_global() {
    let len = 12;
    let cfg = BlockConfig::new(4, 4, 1);
    let mut ps = ParamStore::<f64>::new(3);
    let f = MambaUnit::new(&mut ps, "f", &cfg).unwrap();
    let b = MambaUnit::new(&mut ps, "b", &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(vec![len, 4], |_| rng.random_range(-1.0..1.0));
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let y = chained_bidirectional(&mut g, &ps, xn, &f, &b, false).unwrap();
        g.value(y).clone()
    };
    let base = run(&x);
    for j in 0..len {
        let mut xp = x.clone();
        xp.data_mut()[j * 4..(j + 1) * 4]
            .iter_mut()
            .for_each(|v| *v += 1e-3);
        let y = run(&xp);
        for i in 0..len {
            let moved = (0..4).any(|c| y.data()[i * 4 + c] != base.data()[i * 4 + c]);
            assert!(moved, "output {i} ignores input {j}");
        }
    }
}

#[test]
fn gradients_reach_the_input_at_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let coords = cloud(&mut rng, 10);
    let mut ps = ParamStore::<f64>::new(4);
    let block = HexaBlock::new(&mut ps, "h", BlockConfig::new(4, 4, 2)).unwrap();
    let mut g = Graph::new();
    let x = g.variable(Tensor::from_fn(vec![10, 4], |_| {
        rng.random_range(-1.0..1.0)
    }));
    let y = block.forward(&mut g, &ps, &coords, x).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    let gx = g.grad(x).unwrap();
    // the residual alone contributes 1 per entry
    let norm = gx.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm > 0.5 * (40f64).sqrt(), "{norm}");
}

#[test]
fn two_block_stack_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let coords = cloud(&mut rng, 8);
    let mut ps = ParamStore::<f64>::new(5);
    let a = HexaBlock::new(&mut ps, "a", BlockConfig::new(4, 2, 2)).unwrap();
    let mut cfg = BlockConfig::new(4, 2, 2);
    cfg.structure = Structure::Parallel;
    let b = HexaBlock::new(&mut ps, "b", cfg).unwrap();
    let x = Tensor::from_fn(vec![8, 4], |_| rng.random_range(-1.0..1.0));
    let w = Tensor::from_fn(vec![8, 4], |_| rng.random_range(-1.0..1.0));
    let ids: Vec<_> = ps.ids().collect();
    let err = common::fd_max_rel(&mut ps, &ids, |g, ps| {
        let xn = g.constant(x.clone());
        let h = a.forward(g, ps, &coords, xn)?;
        let y = b.forward(g, ps, &coords, h)?;
        let wn = g.constant(w.clone());
        let proj = g.mul(y, wn)?;
        Ok(g.sum(proj))
    });
    assert!(err < 1e-4, "{err}");
}

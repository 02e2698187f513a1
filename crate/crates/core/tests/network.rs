use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gs6::harness::{analytic_gradients, generate, train, SyntheticSpec, TrainConfig};
use gs6::network::{
    count_params_flops, load_checkpoint, save_checkpoint, Model, NetworkConfig, Task,
};

fn small(task: Task, classes: usize) -> NetworkConfig {
    let mut c = NetworkConfig::toy(task, classes);
    c.embed_width = 8;
    c.stages[0].width = 8;
    c.stages[1].width = 16;
    c.stages[0].state = 4;
    c.stages[1].state = 4;
    c
}

#[test]
fn toy_parameter_count() {
    for task in [Task::Recognition, Task::Segmentation] {
        let cfg = NetworkConfig::toy(task, 3);
        let m = Model::<f32>::new(cfg.clone()).unwrap();
        assert_eq!(
            count_params_flops(&cfg, 256).unwrap().params as usize,
            m.params.count()
        );
    }
    assert_eq!(
        count_params_flops(&NetworkConfig::toy(Task::Recognition, 3), 256)
            .unwrap()
            .params,
        299_427
    );
}

#[test]
fn segmentation_follows_input_permutation() {
    let data = generate(&SyntheticSpec::segmentation(64, 1, 3)).unwrap();
    let cloud = &data.clouds[0];
    let m = Model::<f64>::new(small(Task::Segmentation, 2)).unwrap();
    let base = m.logits(cloud).unwrap();
    let mut perm: Vec<usize> = (0..cloud.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let shuffled = m.logits(&cloud.permuted(&perm)).unwrap();
    for (r, &p) in perm.iter().enumerate() {
        for (a, b) in shuffled.row(r).iter().zip(base.row(p)) {
            assert!((a - b).abs() < 1e-9, "row {r}: {a} vs {b}");
        }
    }
}

#[test]
fn recognition_ignores_input_order() {
    let data = generate(&SyntheticSpec::recognition(64, 1, 4)).unwrap();
    let cloud = &data.clouds[1];
    let m = Model::<f64>::new(small(Task::Recognition, 3)).unwrap();
    let mut perm: Vec<usize> = (0..cloud.len()).collect();
    perm.reverse();
    let a = m.logits(cloud).unwrap();
    let b = m.logits(&cloud.permuted(&perm)).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
}

#[test]
fn every_parameter_receives_gradient() {
    for (task, spec) in [
        (Task::Recognition, SyntheticSpec::recognition(64, 1, 5)),
        (Task::Segmentation, SyntheticSpec::segmentation(64, 1, 5)),
    ] {
        let data = generate(&spec).unwrap();
        let m = Model::<f64>::new(small(task, spec.num_classes())).unwrap();
        let grads = analytic_gradients(&m, &data.clouds[0]).unwrap();
        for ((_, name, _), g) in m.params.iter().zip(&grads) {
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "{name} has zero gradient"
            );
        }
    }
}

#[test]
fn loss_drops_over_twenty_steps() {
    let data = generate(&SyntheticSpec::recognition(64, 2, 6)).unwrap();
    let mut m = Model::<f32>::new(small(Task::Recognition, 3)).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: data.len(),
        ..TrainConfig::default()
    };
    let report = train(&mut m, &data, &cfg).unwrap();
    assert_eq!(report.steps, 20);
    assert!(report.log[19].loss < report.log[0].loss, "{:?}", report.log);
}

#[test]
fn checkpoint_reproduces_logits() {
    let data = generate(&SyntheticSpec::segmentation(64, 1, 7)).unwrap();
    let cfg = small(Task::Segmentation, 2);
    let m = Model::<f32>::new(cfg.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &m.params).unwrap();
    let mut fresh = Model::<f32>::new(NetworkConfig { seed: 99, ..cfg }).unwrap();
    assert_ne!(
        fresh.logits(&data.clouds[0]).unwrap(),
        m.logits(&data.clouds[0]).unwrap()
    );
    load_checkpoint(dir.path(), &mut fresh.params).unwrap();
    assert_eq!(
        fresh.logits(&data.clouds[0]).unwrap(),
        m.logits(&data.clouds[0]).unwrap()
    );
}

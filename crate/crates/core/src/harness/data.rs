use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{PointCloud, Task};
use crate::serialization::Point;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    /// Unit sphere surface.
    Sphere,
    /// Surface of the cube inscribed in the unit sphere.
    Cube,
    /// Square in the `z = 0` plane inscribed in the unit circle.
    Plane,
    /// Lateral surface, radius 0.5, `|z| ≤ 0.8`.
    Cylinder,
    /// Two spheres of radius 0.25 at `x = ±0.75` joined by a bar of radius
    /// 0.1 over `|x| ≤ 0.5`. Part 1 is `|x| > 0.5`.
    Dumbbell,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::Sphere => "sphere",
            Generator::Cube => "cube",
            Generator::Plane => "plane",
            Generator::Cylinder => "cylinder",
            Generator::Dumbbell => "dumbbell",
        }
    }
}

/// Recipe for a synthetic dataset. Class `i` is drawn from `generators[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub task: Task,
    pub generators: Vec<Generator>,
    pub points: usize,
    pub noise: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Sphere, cube and plane, one class each.
    pub fn recognition(points: usize, samples_per_class: usize, seed: u64) -> Self {
        Self {
            task: Task::Recognition,
            generators: vec![Generator::Sphere, Generator::Cube, Generator::Plane],
            points,
            noise: 0.01,
            samples_per_class,
            seed,
        }
    }

    /// Dumbbells with two parts.
    pub fn segmentation(points: usize, samples: usize, seed: u64) -> Self {
        Self {
            task: Task::Segmentation,
            generators: vec![Generator::Dumbbell],
            points,
            noise: 0.01,
            samples_per_class: samples,
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.task {
            Task::Recognition => self.generators.len(),
            Task::Segmentation => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub task: Task,
    pub num_classes: usize,
    pub clouds: Vec<PointCloud>,
}

impl Dataset {
    /// SHA-256 over coordinates, features and labels, as lowercase hex.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.clouds {
            h.update((c.len() as u64).to_le_bytes());
            for p in &c.coords {
                for v in p {
                    h.update(v.to_le_bytes());
                }
            }
            for f in c.features.iter().flatten() {
                h.update(f.to_le_bytes());
            }
            h.update((c.label.map_or(u64::MAX, |l| l as u64)).to_le_bytes());
            for &l in c.point_labels.iter().flatten() {
                h.update((l as u64).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let v: Point = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn surface_point(gen: Generator, rng: &mut ChaCha8Rng) -> Point {
    match gen {
        Generator::Sphere => unit_vector(rng),
        Generator::Cube => {
            let s = 1.0 / 3f64.sqrt();
            let face = rng.random_range(0..6);
            let (a, b) = (rng.random_range(-s..=s), rng.random_range(-s..=s));
            let sign = if face % 2 == 0 { s } else { -s };
            match face / 2 {
                0 => [sign, a, b],
                1 => [a, sign, b],
                _ => [a, b, sign],
            }
        }
        Generator::Plane => {
            let s = 1.0 / 2f64.sqrt();
            [rng.random_range(-s..=s), rng.random_range(-s..=s), 0.0]
        }
        Generator::Cylinder => {
            let t = rng.random_range(0.0..2.0 * PI);
            [0.5 * t.cos(), 0.5 * t.sin(), rng.random_range(-0.8..=0.8)]
        }
        Generator::Dumbbell => {
            if rng.random::<f64>() < 0.6 {
                let u = unit_vector(rng);
                let cx = if rng.random::<bool>() { 0.75 } else { -0.75 };
                [cx + 0.25 * u[0], 0.25 * u[1], 0.25 * u[2]]
            } else {
                let t = rng.random_range(0.0..2.0 * PI);
                [rng.random_range(-0.5..=0.5), 0.1 * t.cos(), 0.1 * t.sin()]
            }
        }
    }
}

/// Isotropic Gaussian offset whose length is clamped to `3σ`.
fn noise(sigma: f64, rng: &mut ChaCha8Rng) -> Point {
    if sigma == 0.0 {
        return [0.0; 3];
    }
    let v: Point = [
        sigma * Distribution::<f64>::sample(&StandardNormal, rng),
        sigma * Distribution::<f64>::sample(&StandardNormal, rng),
        sigma * Distribution::<f64>::sample(&StandardNormal, rng),
    ];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let cap = 3.0 * sigma;
    if n > cap {
        v.map(|c| c * cap / n)
    } else {
        v
    }
}

/// One cloud from `gen`, with part labels when the generator defines parts
/// (all zero otherwise).
pub fn sample_cloud(gen: Generator, points: usize, sigma: f64, rng: &mut ChaCha8Rng) -> PointCloud {
    let coords: Vec<Point> = (0..points)
        .map(|_| {
            let p = surface_point(gen, rng);
            let e = noise(sigma, rng);
            [p[0] + e[0], p[1] + e[1], p[2] + e[2]]
        })
        .collect();
    let labels = coords
        .iter()
        .map(|p| usize::from(gen == Generator::Dumbbell && p[0].abs() > 0.5))
        .collect();
    let mut c = PointCloud::new(coords);
    c.point_labels = Some(labels);
    c
}

/// Deterministic dataset for `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.generators.is_empty() || spec.points == 0 || spec.samples_per_class == 0 {
        return Err(Error::Config(
            "synthetic spec needs generators, points and samples".into(),
        ));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::Config(format!(
            "noise σ = {} must be non-negative",
            spec.noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut clouds = Vec::with_capacity(spec.generators.len() * spec.samples_per_class);
    for _ in 0..spec.samples_per_class {
        for (class, &gen) in spec.generators.iter().enumerate() {
            let mut c = sample_cloud(gen, spec.points, spec.noise, &mut rng);
            c.label = Some(class);
            clouds.push(c);
        }
    }
    Ok(Dataset {
        task: spec.task,
        num_classes: spec.num_classes(),
        clouds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(p: &Point) -> f64 {
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
    }

    #[test]
    fn sphere_within_three_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = sample_cloud(Generator::Sphere, 500, 0.02, &mut rng);
        assert!(c
            .coords
            .iter()
            .all(|p| (norm(p) - 1.0).abs() <= 0.06 + 1e-12));
    }

    #[test]
    fn shapes_inside_unit_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for gen in [
            Generator::Cube,
            Generator::Plane,
            Generator::Cylinder,
            Generator::Dumbbell,
        ] {
            let c = sample_cloud(gen, 300, 0.0, &mut rng);
            assert!(
                c.coords.iter().all(|p| norm(p) <= 1.0 + 1e-12),
                "{}",
                gen.name()
            );
        }
    }

    #[test]
    fn dumbbell_labels_follow_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = sample_cloud(Generator::Dumbbell, 400, 0.02, &mut rng);
        let labels = c.point_labels.unwrap();
        for (p, l) in c.coords.iter().zip(labels) {
            assert_eq!(l == 1, p[0].abs() > 0.5);
        }
    }

    #[test]
    fn deterministic_with_hash() {
        let spec = SyntheticSpec::recognition(32, 2, 9);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash().len(), 64);
        let c = generate(&SyntheticSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }
}

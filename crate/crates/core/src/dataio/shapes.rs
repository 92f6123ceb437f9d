//! Synthetic labelled shapes: a desk-scale stand-in for CAD benchmarks.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{contract, Result};
use crate::geometry::PointCloud;
use crate::model::{Label, Sample};
use crate::tensor::{Real, Tensor};

/// Half-extent of the box outliers are drawn from.
pub const OUTLIER_BOX: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
    Torus,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Sphere, Shape::Cube, Shape::Cylinder, Shape::Torus];

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
            Shape::Torus => "torus",
        }
    }

    /// A uniform sample on the surface: unit sphere, cube of half-side 0.6,
    /// capped cylinder of radius 0.6 and half-height 0.6 around z, torus in
    /// the xy-plane with radii 0.7 and 0.25.
    pub fn sample_surface<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 3] {
        match self {
            Shape::Sphere => loop {
                let v: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-9 {
                    break v.map(|c| c / n);
                }
            },
            Shape::Cube => {
                let h = 0.6;
                let face = rng.random_range(0..6);
                let (a, b) = (rng.random_range(-h..h), rng.random_range(-h..h));
                let s = if face % 2 == 0 { h } else { -h };
                match face / 2 {
                    0 => [s, a, b],
                    1 => [a, s, b],
                    _ => [a, b, s],
                }
            }
            Shape::Cylinder => {
                let (r, h) = (0.6, 0.6);
                let side = TAU * r * 2.0 * h;
                let cap = std::f64::consts::PI * r * r;
                let u = rng.random_range(0.0..side + 2.0 * cap);
                let theta = rng.random_range(0.0..TAU);
                if u < side {
                    [r * theta.cos(), r * theta.sin(), rng.random_range(-h..h)]
                } else {
                    let rho = r * rng.random::<f64>().sqrt();
                    let z = if u < side + cap { h } else { -h };
                    [rho * theta.cos(), rho * theta.sin(), z]
                }
            }
            Shape::Torus => {
                let (big, small) = (0.7, 0.25);
                // Rejection on the tube angle keeps the density uniform in area.
                loop {
                    let (u, v) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
                    let w = (big + small * v.cos()) / (big + small);
                    if rng.random::<f64>() <= w {
                        let ring = big + small * v.cos();
                        break [ring * u.cos(), ring * u.sin(), small * v.sin()];
                    }
                }
            }
        }
    }
}

impl std::str::FromStr for Shape {
    type Err = crate::PatError;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| crate::PatError::Config(format!("unknown shape {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub classes: Vec<Shape>,
    pub n_per_class: usize,
    pub n_points: usize,
    pub noise_sigma: f64,
    pub outlier_frac: f64,
}

impl Default for ShapeSpec {
    fn default() -> Self {
        Self {
            classes: Shape::ALL.to_vec(),
            n_per_class: 250,
            n_points: 256,
            noise_sigma: 0.01,
            outlier_frac: 0.0,
        }
    }
}

/// Number of outlier points per cloud: `⌊frac · n⌋`.
pub fn outlier_count(n_points: usize, frac: f64) -> usize {
    (frac * n_points as f64).floor() as usize
}

/// One cloud of `shape`: jittered surface points, then `⌊frac·n⌋` uniform
/// box outliers as the final rows.
pub fn shape_cloud<T: Real, R: Rng + ?Sized>(
    shape: Shape,
    n_points: usize,
    noise_sigma: f64,
    outlier_frac: f64,
    rng: &mut R,
) -> Result<PointCloud<T>> {
    if n_points < 8 {
        return Err(contract(format!("shape clouds need at least 8 points, got {n_points}")));
    }
    let n_out = outlier_count(n_points, outlier_frac).min(n_points);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).map_err(|e| contract(e.to_string()))?;
    let mut data = Vec::with_capacity(3 * n_points);
    for _ in 0..n_points - n_out {
        let p = shape.sample_surface(rng);
        data.extend(p.map(|c| T::of(c + noise.sample(rng))));
    }
    for _ in 0..n_out {
        data.extend([0; 3].map(|_| T::of(rng.random_range(-OUTLIER_BOX..OUTLIER_BOX))));
    }
    PointCloud::new(Tensor::new(&[n_points, 3], data)?)
}

/// Balanced labelled dataset; sample `i` has class `i mod classes`.
pub fn gen_shapes<T: Real, R: Rng + ?Sized>(spec: &ShapeSpec, rng: &mut R) -> Result<Vec<Sample<T>>> {
    let k = spec.classes.len();
    if k == 0 {
        return Err(contract("need at least one shape class"));
    }
    (0..k * spec.n_per_class)
        .map(|i| {
            let cloud = shape_cloud(spec.classes[i % k], spec.n_points, spec.noise_sigma, spec.outlier_frac, rng)?;
            Ok(Sample {
                cloud,
                label: Label::Class(i % k),
            })
        })
        .collect()
}

/// SHA-256 over labels and the `f32` bytes of every point, hex encoded.
pub fn dataset_hash<T: Real>(samples: &[Sample<T>]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        match &s.label {
            Label::Class(c) => h.update((*c as u64).to_le_bytes()),
            Label::PerPoint(v) => v.iter().for_each(|c| h.update((*c as u64).to_le_bytes())),
        }
        h.update((s.cloud.len() as u64).to_le_bytes());
        for v in s.cloud.points().data() {
            h.update((v.f64() as f32).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Segmentation scene: `parts` shapes side by side along x, each with
/// `n_points / parts` points (the last takes the remainder); every point is
/// labelled with its shape's class.
pub fn gen_scene<T: Real, R: Rng + ?Sized>(
    classes: &[Shape],
    parts: usize,
    n_points: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Sample<T>> {
    if parts == 0 || n_points < parts {
        return Err(contract(format!("cannot split {n_points} points into {parts} parts")));
    }
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).map_err(|e| contract(e.to_string()))?;
    let mut data = Vec::with_capacity(3 * n_points);
    let mut labels = Vec::with_capacity(n_points);
    let base = n_points / parts;
    for part in 0..parts {
        let class = rng.random_range(0..classes.len());
        let count = if part + 1 == parts { n_points - base * (parts - 1) } else { base };
        let shift = 2.2 * (part as f64 - (parts - 1) as f64 / 2.0);
        for _ in 0..count {
            let p = classes[class].sample_surface(rng);
            data.extend([p[0] + shift, p[1], p[2]].map(|c| T::of(c + noise.sample(rng))));
            labels.push(class);
        }
    }
    Ok(Sample {
        cloud: PointCloud::new(Tensor::new(&[n_points, 3], data)?)?,
        label: Label::PerPoint(labels),
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn sphere_points_near_unit_radius() {
        let sigma = 0.01;
        let c: PointCloud<f64> = shape_cloud(Shape::Sphere, 256, sigma, 0.02, &mut rng(1)).unwrap();
        let n_out = outlier_count(256, 0.02);
        assert_eq!(n_out, 5);
        for i in 0..256 - n_out {
            let p = c.xyz(i);
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 1.0).abs() <= 4.0 * sigma, "radius {r}");
        }
        for i in 256 - n_out..256 {
            assert!(c.xyz(i).iter().all(|v| v.abs() <= OUTLIER_BOX));
        }
    }

    #[test]
    fn surfaces_are_where_they_should_be() {
        let mut r = rng(2);
        for _ in 0..500 {
            let p = Shape::Cube.sample_surface(&mut r);
            let m = p.iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!((m - 0.6).abs() < 1e-12);
            let p = Shape::Cylinder.sample_surface(&mut r);
            let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((rho - 0.6).abs() < 1e-12 || (p[2].abs() - 0.6).abs() < 1e-12);
            let p = Shape::Torus.sample_surface(&mut r);
            let ring = (p[0] * p[0] + p[1] * p[1]).sqrt() - 0.7;
            assert!((ring * ring + p[2] * p[2]).sqrt() - 0.25 < 1e-12);
        }
    }

    #[test]
    fn balanced_and_deterministic() {
        let spec = ShapeSpec {
            n_per_class: 5,
            n_points: 32,
            ..ShapeSpec::default()
        };
        let a: Vec<Sample<f32>> = gen_shapes(&spec, &mut rng(3)).unwrap();
        let b: Vec<Sample<f32>> = gen_shapes(&spec, &mut rng(3)).unwrap();
        let c: Vec<Sample<f32>> = gen_shapes(&spec, &mut rng(4)).unwrap();
        assert_eq!(dataset_hash(&a), dataset_hash(&b));
        assert_ne!(dataset_hash(&a), dataset_hash(&c));
        for k in 0..4 {
            assert_eq!(a.iter().filter(|s| s.label == Label::Class(k)).count(), 5);
        }
        assert!(shape_cloud::<f32, _>(Shape::Cube, 7, 0.0, 0.0, &mut rng(5)).is_err());
    }

    #[test]
    fn scenes_label_every_point() {
        let s: Sample<f32> = gen_scene(&Shape::ALL, 3, 100, 0.01, &mut rng(6)).unwrap();
        match &s.label {
            Label::PerPoint(v) => assert_eq!(v.len(), 100),
            _ => panic!(),
        }
        assert_eq!("torus".parse::<Shape>().unwrap(), Shape::Torus);
    }
}

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{normalize_unit_sphere, Point, PointCloud};
use crate::error::{invalid_arg, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RotationAxis {
    /// Rotate about the vertical (z) axis only.
    Up,
    /// Axis drawn uniformly on the unit sphere.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationSpec {
    pub axis: RotationAxis,
    /// Angles are drawn uniformly from `[-max_angle, max_angle]` radians.
    pub max_angle: f64,
}

/// Parameters of the stochastic view transform. Zero magnitudes disable a
/// stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub scale_range: (f64, f64),
    pub rotation: RotationSpec,
    pub translation_range: f64,
    pub dropout_prob: f64,
    /// (grid spacing, displacement magnitude)
    pub elastic: (f64, f64),
    pub jitter_sigma: f64,
    pub renormalize: bool,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            scale_range: (1.0, 1.0),
            rotation: RotationSpec {
                axis: RotationAxis::Up,
                max_angle: 0.0,
            },
            translation_range: 0.0,
            dropout_prob: 0.0,
            elastic: (0.0, 0.0),
            jitter_sigma: 0.0,
            renormalize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo <= hi && lo > 0.0) {
            return Err(invalid_arg!("scale range ({lo}, {hi})"));
        }
        let mags = [
            self.rotation.max_angle,
            self.translation_range,
            self.elastic.0,
            self.elastic.1,
            self.jitter_sigma,
        ];
        if mags.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(invalid_arg!("augmentation magnitudes must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(invalid_arg!("dropout probability {} outside [0, 1)", self.dropout_prob));
        }
        Ok(())
    }
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            scale_range: (0.8, 1.2),
            rotation: RotationSpec {
                axis: RotationAxis::Up,
                max_angle: std::f64::consts::PI,
            },
            translation_range: 0.1,
            dropout_prob: 0.1,
            elastic: (0.4, 0.04),
            jitter_sigma: 0.005,
            renormalize: true,
        }
    }
}

fn rotation_matrix(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

pub(crate) fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|x| x / n);
        }
    }
}

pub(crate) fn random_rotation<R: Rng + ?Sized>(spec: RotationSpec, rng: &mut R) -> [[f64; 3]; 3] {
    let axis = match spec.axis {
        RotationAxis::Up => [0.0, 0.0, 1.0],
        RotationAxis::Random => random_unit_vector(rng),
    };
    let angle = if spec.max_angle > 0.0 {
        rng.random_range(-spec.max_angle..=spec.max_angle)
    } else {
        0.0
    };
    rotation_matrix(axis, angle)
}

pub(crate) fn apply(r: &[[f64; 3]; 3], p: &Point) -> Point {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

/// Smooth displacement: Gaussian noise vectors on a lattice of the given
/// spacing, trilinearly interpolated at every point.
fn elastic<R: Rng + ?Sized>(pts: &mut [Point], spacing: f64, magnitude: f64, rng: &mut R) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in pts.iter() {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let dims: [usize; 3] = std::array::from_fn(|d| ((hi[d] - lo[d]) / spacing).floor() as usize + 2);
    let nodes = dims[0] * dims[1] * dims[2];
    let noise: Vec<[f64; 3]> = (0..nodes)
        .map(|_| [StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)])
        .collect();
    let at = |i: usize, j: usize, k: usize| &noise[(i * dims[1] + j) * dims[2] + k];
    for p in pts.iter_mut() {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for d in 0..3 {
            let u = (p[d] - lo[d]) / spacing;
            base[d] = (u.floor() as usize).min(dims[d] - 2);
            frac[d] = u - base[d] as f64;
        }
        let mut disp = [0.0; 3];
        for corner in 0..8 {
            let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let w: f64 = (0..3).map(|d| if off[d] == 1 { frac[d] } else { 1.0 - frac[d] }).product();
            let v = at(base[0] + off[0], base[1] + off[1], base[2] + off[2]);
            for d in 0..3 {
                disp[d] += w * v[d];
            }
        }
        for d in 0..3 {
            p[d] += magnitude * disp[d];
        }
    }
}

/// Applies the enabled stages in the order
/// scale, rotate, elastic, translate, jitter, dropout, renormalize.
pub fn augment<R: Rng + ?Sized>(cloud: &PointCloud, spec: &AugmentSpec, rng: &mut R) -> Result<PointCloud> {
    spec.validate()?;
    let mut pts = cloud.points().to_vec();
    let mut source: Vec<usize> = match cloud.source() {
        Some(s) => s.to_vec(),
        None => (0..pts.len()).collect(),
    };

    let (lo, hi) = spec.scale_range;
    if hi > lo || lo != 1.0 {
        let s: [f64; 3] = std::array::from_fn(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo });
        for p in &mut pts {
            for d in 0..3 {
                p[d] *= s[d];
            }
        }
    }
    if spec.rotation.max_angle > 0.0 {
        let r = random_rotation(spec.rotation, rng);
        for p in &mut pts {
            *p = apply(&r, p);
        }
    }
    let (spacing, magnitude) = spec.elastic;
    if spacing > 0.0 && magnitude > 0.0 {
        elastic(&mut pts, spacing, magnitude, rng);
    }
    if spec.translation_range > 0.0 {
        let t = spec.translation_range;
        let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-t..=t));
        for p in &mut pts {
            for d in 0..3 {
                p[d] += shift[d];
            }
        }
    }
    if spec.jitter_sigma > 0.0 {
        let dist = Normal::new(0.0, spec.jitter_sigma).map_err(|e| invalid_arg!("jitter: {e}"))?;
        for p in &mut pts {
            for x in p.iter_mut() {
                *x += dist.sample(rng);
            }
        }
    }
    if spec.dropout_prob > 0.0 {
        let n = pts.len();
        let floor = n.div_ceil(4);
        let mut keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= spec.dropout_prob).collect();
        let kept = keep.iter().filter(|&&k| k).count();
        if kept < floor {
            let dropped: Vec<usize> = (0..n).filter(|&i| !keep[i]).collect();
            for j in sample(rng, dropped.len(), floor - kept).into_iter() {
                keep[dropped[j]] = true;
            }
        }
        let mut it = keep.iter();
        pts.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        source.retain(|_| *it.next().unwrap());
    }

    let out = PointCloud::with_source(pts, source)?;
    if spec.renormalize {
        normalize_unit_sphere(&out)
    } else {
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sq_dist;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()).unwrap()
    }

    #[test]
    fn identity_spec_is_identity() {
        let c = random_cloud(50, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = augment(&c, &AugmentSpec::identity(), &mut rng).unwrap();
        assert_eq!(out.points(), c.points());
    }

    #[test]
    fn rotation_preserves_pairwise_distances() {
        let c = random_cloud(40, 2);
        let spec = AugmentSpec {
            rotation: RotationSpec {
                axis: RotationAxis::Random,
                max_angle: 3.0,
            },
            ..AugmentSpec::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = augment(&c, &spec, &mut rng).unwrap();
        assert_ne!(out.points(), c.points());
        for i in 0..40 {
            for j in 0..40 {
                let a = sq_dist(&c.points()[i], &c.points()[j]).sqrt();
                let b = sq_dist(&out.points()[i], &out.points()[j]).sqrt();
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dropout_never_empties_and_tracks_source() {
        let c = random_cloud(16, 3);
        let spec = AugmentSpec {
            dropout_prob: 0.99,
            ..AugmentSpec::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let out = augment(&c, &spec, &mut rng).unwrap();
            assert!(out.len() >= 4);
            for (p, &s) in out.points().iter().zip(out.source().unwrap()) {
                assert_eq!(*p, c.points()[s]);
            }
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let c = random_cloud(4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = AugmentSpec {
            scale_range: (2.0, 1.0),
            ..AugmentSpec::identity()
        };
        assert!(augment(&c, &bad, &mut rng).is_err());
    }
}

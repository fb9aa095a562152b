//! Point-cloud kernels: normalisation, farthest point sampling, k-NN
//! grouping, random masking and the stochastic augmentations.

pub(crate) mod augment;
mod io;
mod mask;
mod sampling;

pub use augment::{augment, AugmentSpec, RotationAxis, RotationSpec};
pub use io::{load_cloud, read_binary, read_text, save_cloud, write_binary, write_text, CloudFormat};
pub use mask::{mask_count, random_mask, random_mask_exact, MaskPartition};
pub use sampling::{farthest_point_sample, knn_group, PatchSet};

use crate::error::{MmptError, Result};

pub type Point = [f64; 3];

pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// An ordered set of 3D points, optionally tagged with the index each point
/// had in the cloud it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    source: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(MmptError::InvalidCloud("a cloud needs at least one point".into()));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(MmptError::InvalidCloud(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points, source: None })
    }

    pub fn with_source(points: Vec<Point>, source: Vec<usize>) -> Result<Self> {
        if source.len() != points.len() {
            return Err(MmptError::InvalidCloud(format!(
                "{} source indices for {} points",
                source.len(),
                points.len()
            )));
        }
        let mut c = Self::new(points)?;
        c.source = Some(source);
        Ok(c)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn source(&self) -> Option<&[usize]> {
        self.source.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        c.map(|x| x / n)
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounds(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }
}

/// Centers the cloud at the origin and scales its farthest point to norm 1.
/// A cloud whose points all coincide collapses onto the origin.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<PointCloud> {
    let c = cloud.centroid();
    let mut pts: Vec<Point> = cloud.points.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
    let max = pts.iter().map(norm).fold(0.0, f64::max);
    if max > 0.0 {
        for p in &mut pts {
            for x in p.iter_mut() {
                *x /= max;
            }
        }
    } else {
        pts.iter_mut().for_each(|p| *p = [0.0; 3]);
    }
    let out = PointCloud::new(pts)?;
    Ok(match &cloud.source {
        Some(s) => PointCloud {
            source: Some(s.clone()),
            ..out
        },
        None => out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(PointCloud::new(vec![]), Err(MmptError::InvalidCloud(_))));
        assert!(matches!(
            PointCloud::new(vec![[0.0, f64::NAN, 0.0]]),
            Err(MmptError::InvalidCloud(_))
        ));
    }

    #[test]
    fn two_points_on_a_line() {
        let c = PointCloud::new(vec![[2.0, 0.0, 0.0], [4.0, 0.0, 0.0]]).unwrap();
        let n = normalize_unit_sphere(&c).unwrap();
        assert_eq!(n.points(), &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn single_point_goes_to_origin() {
        let c = PointCloud::new(vec![[5.0, 5.0, 5.0]]).unwrap();
        assert_eq!(normalize_unit_sphere(&c).unwrap().points(), &[[0.0; 3]]);
    }

    #[test]
    fn random_cloud_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point> = (0..100)
            .map(|_| {
                [
                    rng.random_range(-3.0..7.0),
                    rng.random_range(0.0..2.0),
                    rng.random_range(-9.0..-1.0),
                ]
            })
            .collect();
        let n = normalize_unit_sphere(&PointCloud::new(pts).unwrap()).unwrap();
        assert!(norm(&n.centroid()) < 1e-9);
        let max = n.points().iter().map(norm).fold(0.0, f64::max);
        assert!((max - 1.0).abs() <= 1e-9);
    }
}

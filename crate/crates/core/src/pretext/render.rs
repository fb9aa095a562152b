use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{invalid_arg, Result};
use crate::geometry::augment::{apply, random_rotation};
use crate::geometry::{PointCloud, RotationAxis, RotationSpec};

/// Depth value of pixels no point projects onto.
pub const BACKGROUND: f64 = 1.0;

/// Row-major single-channel depth image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn covered_fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v != BACKGROUND).count() as f64 / self.data.len() as f64
    }

    /// Binary 8-bit PGM, darker is nearer.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }
}

fn pixel(coord: f64, extent: usize) -> Option<usize> {
    let u = (coord + 1.0) * 0.5 * extent as f64;
    if u < 0.0 || u > extent as f64 {
        return None;
    }
    Some((u.floor() as usize).min(extent - 1))
}

/// Orthographic z-buffer render of a unit-sphere cloud onto the xy-plane
/// after rotating by `rot`. Each pixel keeps the smallest z, mapped from
/// `[-1, 1]` to `[0, 1]`.
pub fn render_view(cloud: &PointCloud, rot: &[[f64; 3]; 3], height: usize, width: usize) -> Result<DepthImage> {
    if height < 8 || width < 8 {
        return Err(invalid_arg!("render resolution {height}x{width} below 8x8"));
    }
    let mut depth = vec![f64::INFINITY; height * width];
    for p in cloud.points() {
        let q = apply(rot, p);
        let (Some(col), Some(row)) = (pixel(q[0], width), pixel(q[1], height)) else {
            continue;
        };
        let slot = &mut depth[row * width + col];
        *slot = slot.min(q[2]);
    }
    let data = depth
        .into_iter()
        .map(|z| {
            if z.is_finite() {
                ((z + 1.0) * 0.5).clamp(0.0, 1.0)
            } else {
                BACKGROUND
            }
        })
        .collect();
    Ok(DepthImage { height, width, data })
}

/// Renders `n_views` depth images from independent random directions.
pub fn render_views<R: Rng + ?Sized>(
    cloud: &PointCloud,
    n_views: usize,
    (height, width): (usize, usize),
    rng: &mut R,
) -> Result<Vec<DepthImage>> {
    let spec = RotationSpec {
        axis: RotationAxis::Random,
        max_angle: std::f64::consts::PI,
    };
    (0..n_views)
        .map(|_| {
            let rot = random_rotation(spec, rng);
            render_view(cloud, &rot, height, width)
        })
        .collect()
}

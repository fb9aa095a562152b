use rand::seq::index::sample;
use rand::Rng;

use crate::error::{invalid_arg, Result};

/// Disjoint, sorted split of `0..m` into masked and visible patch indices.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPartition {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub ratio: f64,
}

impl MaskPartition {
    pub fn m(&self) -> usize {
        self.masked.len() + self.visible.len()
    }

    pub fn is_masked(&self, j: usize) -> bool {
        self.masked.binary_search(&j).is_ok()
    }
}

/// Round-half-up of `ratio * m`.
pub fn mask_count(m: usize, ratio: f64) -> usize {
    ((ratio * m as f64) + 0.5).floor() as usize
}

/// Masks `mask_count(m, ratio)` patches chosen uniformly without replacement.
pub fn random_mask<R: Rng + ?Sized>(m: usize, ratio: f64, rng: &mut R) -> Result<MaskPartition> {
    if m == 0 {
        return Err(invalid_arg!("cannot mask an empty patch set"));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(invalid_arg!("mask ratio {ratio} outside [0, 1)"));
    }
    random_mask_exact(m, mask_count(m, ratio).min(m), ratio, rng)
}

/// Masks exactly `count` of `m` patches; `ratio` is recorded as metadata.
pub fn random_mask_exact<R: Rng + ?Sized>(m: usize, count: usize, ratio: f64, rng: &mut R) -> Result<MaskPartition> {
    if count > m {
        return Err(invalid_arg!("cannot mask {count} of {m} patches"));
    }
    let mut masked = sample(rng, m, count).into_vec();
    masked.sort_unstable();
    let mut flags = vec![false; m];
    for &j in &masked {
        flags[j] = true;
    }
    let visible = (0..m).filter(|&j| !flags[j]).collect();
    Ok(MaskPartition { masked, visible, ratio })
}

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{invalid_arg, MmptError, Result};
use crate::geometry::{MaskPartition, PatchSet, Point};

/// Fraction by which the cloud's bounding box is enlarged for fake queries.
pub const BOX_INFLATION: f64 = 0.1;

/// Real queries (label 1) followed by fake queries (label 0).
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub queries: Vec<Point>,
    pub labels: Vec<f64>,
    pub n_real: usize,
    pub n_fake: usize,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.queries.iter().flatten().copied().collect()
    }
}

/// Box scaled about its center so every extent grows by `BOX_INFLATION`.
pub fn inflate_box((lo, hi): (Point, Point)) -> (Point, Point) {
    let mut a = lo;
    let mut b = hi;
    for d in 0..3 {
        let half = 0.5 * (hi[d] - lo[d]) * (1.0 + BOX_INFLATION);
        let mid = 0.5 * (hi[d] + lo[d]);
        a[d] = mid - half;
        b[d] = mid + half;
    }
    (a, b)
}

/// Draws `n_real` distinct masked-group points (world coordinates) and
/// `n_fake` points uniform in the inflated `bounds`.
pub fn sample_queries<R: Rng + ?Sized>(
    patches: &PatchSet,
    partition: &MaskPartition,
    n_real: usize,
    n_fake: usize,
    bounds: (Point, Point),
    rng: &mut R,
) -> Result<QueryBatch> {
    if partition.masked.is_empty() {
        return Err(MmptError::InvalidState("no masked groups to draw real queries from".into()));
    }
    let pool = partition.masked.len() * patches.k;
    if n_real > pool {
        return Err(invalid_arg!("{n_real} real queries requested from {pool} masked points"));
    }
    let mut queries = Vec::with_capacity(n_real + n_fake);
    for flat in sample(rng, pool, n_real).into_iter() {
        let j = partition.masked[flat / patches.k];
        let off = patches.patch(j)[flat % patches.k];
        let c = patches.centers[j];
        queries.push([off[0] + c[0], off[1] + c[1], off[2] + c[2]]);
    }
    let (lo, hi) = inflate_box(bounds);
    for _ in 0..n_fake {
        queries.push(std::array::from_fn(|d| {
            if hi[d] > lo[d] {
                rng.random_range(lo[d]..hi[d])
            } else {
                lo[d]
            }
        }));
    }
    let mut labels = vec![1.0; n_real];
    labels.resize(n_real + n_fake, 0.0);
    Ok(QueryBatch {
        queries,
        labels,
        n_real,
        n_fake,
    })
}

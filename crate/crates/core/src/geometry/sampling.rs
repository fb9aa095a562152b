use super::{sq_dist, Point, PointCloud};
use crate::error::{invalid_arg, Result};

/// Greedy farthest point sampling starting from `seed_index`.
///
/// Each step picks the unselected point whose squared distance to the
/// selected set is largest; ties go to the lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(invalid_arg!("cannot sample {m} centers from {n} points"));
    }
    if seed_index >= n {
        return Err(invalid_arg!("seed index {seed_index} out of range for {n} points"));
    }
    let pts = cloud.points();
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(m);
    let mut last = seed_index;
    loop {
        out.push(last);
        taken[last] = true;
        if out.len() == m {
            break;
        }
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = sq_dist(&pts[i], &pts[last]);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        last = best.expect("m <= n leaves an unselected point");
    }
    Ok(out)
}

/// Centers plus center-normalized neighborhoods of `k` points each.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point>,
    /// `m * k` offsets, patch-major: row `j * k + i` is neighbor `i` of center `j`.
    pub patches: Vec<Point>,
    /// Source-cloud index of every patch row, same layout as `patches`.
    pub neighbors: Vec<usize>,
    pub center_idx: Vec<usize>,
    pub m: usize,
    pub k: usize,
}

impl PatchSet {
    pub fn patch(&self, j: usize) -> &[Point] {
        &self.patches[j * self.k..(j + 1) * self.k]
    }

    /// Patch `j` moved back to world coordinates.
    pub fn world_patch(&self, j: usize) -> Vec<Point> {
        let c = self.centers[j];
        self.patch(j).iter().map(|p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]]).collect()
    }

    /// Flattened `(patches.len(), 3)` view of the selected patches.
    pub fn flat_patches(&self, which: &[usize]) -> Vec<f64> {
        which.iter().flat_map(|&j| self.patch(j).iter().flatten().copied()).collect()
    }

    pub fn flat_centers(&self, which: &[usize]) -> Vec<f64> {
        which.iter().flat_map(|&j| self.centers[j]).collect()
    }
}

/// Groups the `k` nearest points (ties by lowest index) around each center.
pub fn knn_group(cloud: &PointCloud, centers: &[usize], k: usize) -> Result<PatchSet> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(invalid_arg!("k = {k} must lie in 1..={n}"));
    }
    if let Some(&c) = centers.iter().find(|&&c| c >= n) {
        return Err(invalid_arg!("center index {c} out of range for {n} points"));
    }
    let pts = cloud.points();
    let mut patches = Vec::with_capacity(centers.len() * k);
    let mut neighbors = Vec::with_capacity(centers.len() * k);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &c in centers {
        let cp = pts[c];
        order.clear();
        order.extend(pts.iter().enumerate().map(|(i, p)| (sq_dist(p, &cp), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            order.select_nth_unstable_by(k - 1, cmp);
        }
        order[..k].sort_unstable_by(cmp);
        for &(_, i) in &order[..k] {
            let p = pts[i];
            patches.push([p[0] - cp[0], p[1] - cp[1], p[2] - cp[2]]);
            neighbors.push(i);
        }
    }
    Ok(PatchSet {
        centers: centers.iter().map(|&c| pts[c]).collect(),
        patches,
        neighbors,
        center_idx: centers.to_vec(),
        m: centers.len(),
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(p: &[Point]) -> PointCloud {
        PointCloud::new(p.to_vec()).unwrap()
    }

    #[test]
    fn fps_trivial_cases() {
        let single = cloud(&[[1.0, 2.0, 3.0]]);
        assert_eq!(farthest_point_sample(&single, 1, 0).unwrap(), vec![0]);
        let square = cloud(&[[0., 0., 0.], [1., 0., 0.], [0., 1., 0.], [1., 1., 0.]]);
        assert_eq!(farthest_point_sample(&square, 2, 0).unwrap(), vec![0, 3]);
        let line = cloud(&[[0., 0., 0.], [1., 0., 0.], [2., 0., 0.], [3., 0., 0.]]);
        assert_eq!(farthest_point_sample(&line, 3, 0).unwrap(), vec![0, 3, 1]);
    }

    #[test]
    fn fps_rejects_bad_arguments() {
        let c = cloud(&[[0.0; 3], [1.0; 3]]);
        assert!(farthest_point_sample(&c, 3, 0).is_err());
        assert!(farthest_point_sample(&c, 1, 2).is_err());
    }

    #[test]
    fn fps_with_duplicates_still_returns_distinct_indices() {
        let c = cloud(&[[0.0; 3], [0.0; 3], [0.0; 3]]);
        assert_eq!(farthest_point_sample(&c, 3, 1).unwrap(), vec![1, 0, 2]);
    }

    #[test]
    fn knn_k1_and_k_equals_n() {
        let c = cloud(&[[0., 0., 0.], [1., 0., 0.], [0., 2., 0.]]);
        let ps = knn_group(&c, &[0, 1, 2], 1).unwrap();
        assert!(ps.patches.iter().all(|p| *p == [0.0; 3]));
        let full = knn_group(&c, &[2], 3).unwrap();
        let mut shifted: Vec<Point> = c.points().iter().map(|p| [p[0], p[1] - 2.0, p[2]]).collect();
        let mut got = full.patches.clone();
        let key = |p: &Point| (p[0].to_bits(), p[1].to_bits());
        shifted.sort_by_key(key);
        got.sort_by_key(key);
        assert_eq!(got, shifted);
        assert!(knn_group(&c, &[0], 4).is_err());
    }
}

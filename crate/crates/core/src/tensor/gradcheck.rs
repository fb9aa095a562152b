use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    pub tol: f64,
    /// Check at most this many coordinates per parameter tensor (sampled
    /// without replacement); `None` checks all of them.
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub per_param: Vec<(String, f64)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// Relative error per coordinate is `|analytic - numeric| / (|numeric| + 1e-8)`.
/// `f` must be a deterministic function of the parameter values.
pub fn grad_check<F>(store: &mut ParamStore, mut f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let analytic = g.param_grads(store);
    drop(g);

    let eval = |store: &ParamStore, f: &mut F| -> Result<f64> {
        let mut g = Graph::inference();
        let loss = f(&mut g, store)?;
        Ok(g.scalar(loss))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_param: Vec::new(),
        checked: 0,
        tol: opts.tol,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let Some(grad) = analytic[id.index()].clone() else {
            continue;
        };
        let n = grad.len();
        let coords: Vec<usize> = match opts.max_per_param {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut worst_here: f64 = 0.0;
        for i in coords {
            let orig = store.get(id).data[i];
            store.get_mut(id).data[i] = orig + opts.h;
            let up = eval(store, &mut f);
            store.get_mut(id).data[i] = orig - opts.h;
            let down = eval(store, &mut f);
            store.get_mut(id).data[i] = orig;
            let numeric = (up? - down?) / (2.0 * opts.h);
            let err = (grad[i] - numeric).abs() / (numeric.abs() + 1e-8);
            report.checked += 1;
            worst_here = worst_here.max(err);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
        report.per_param.push((store.get(id).name.clone(), worst_here));
    }
    Ok(report)
}

use crate::error::{shape_err, Result};
use crate::tensor::ParamStore;

/// `max(floor, lr · ½(1 + cos(π t / total)))`, constant past `total`.
pub fn cosine_lr(step: usize, total: usize, lr: f64, floor: f64) -> f64 {
    let frac = if total == 0 { 1.0 } else { (step.min(total)) as f64 / total as f64 };
    (lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// One AdamW update of a single tensor. `t` is the 1-based step count used
/// for bias correction; weight decay is decoupled from the gradient.
pub fn adamw_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, h: &AdamHyper) -> Result<()> {
    if g.len() != p.len() || m.len() != p.len() || v.len() != p.len() {
        return Err(shape_err!(
            "adamw: {} params, {} grads, {}/{} moments",
            p.len(),
            g.len(),
            m.len(),
            v.len()
        ));
    }
    let c1 = 1.0 - h.beta1.powi(t as i32);
    let c2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        p[i] -= lr * h.weight_decay * p[i];
        p[i] -= lr * mhat / (vhat.sqrt() + h.eps);
    }
    Ok(())
}

/// AdamW state for a whole [`ParamStore`]. Decay applies to matrices only;
/// biases, norms and tokens are not decayed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub hyper: AdamHyper,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, hyper: AdamHyper) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
        Self {
            hyper,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update; parameters without a gradient are left as is.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(shape_err!("adamw: {} grads for {} parameters", grads.len(), store.len()));
        }
        self.t += 1;
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = store.get_mut(id);
            let hyper = AdamHyper {
                weight_decay: if p.shape.len() >= 2 { self.hyper.weight_decay } else { 0.0 },
                ..self.hyper
            };
            adamw_update(&mut p.data, g, &mut self.m[i], &mut self.v[i], self.t, lr, &hyper)?;
        }
        Ok(())
    }
}

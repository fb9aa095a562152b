use std::collections::VecDeque;

use crate::error::{invalid_arg, shape_err, Result};
use crate::tensor::ParamStore;

/// Exponential-moving-average copy of the online parameters plus a FIFO of
/// L2-normalized keys.
#[derive(Debug, Clone)]
pub struct MomentumKeys {
    pub store: ParamStore,
    pub momentum: f64,
    pub capacity: usize,
    pub dim: usize,
    queue: VecDeque<Vec<f64>>,
}

impl MomentumKeys {
    pub fn new(online: &ParamStore, momentum: f64, capacity: usize, dim: usize) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(invalid_arg!("momentum must lie in (0, 1), got {momentum}"));
        }
        if dim == 0 {
            return Err(invalid_arg!("key width must be positive"));
        }
        Ok(Self {
            store: online.clone(),
            momentum,
            capacity,
            dim,
            queue: VecDeque::with_capacity(capacity),
        })
    }

    /// `key ← m·key + (1 − m)·online` for every parameter.
    pub fn update(&mut self, online: &ParamStore) -> Result<()> {
        if online.len() != self.store.len() {
            return Err(shape_err!(
                "{} online parameters vs {} key parameters",
                online.len(),
                self.store.len()
            ));
        }
        let m = self.momentum;
        for (id, p) in online.iter() {
            let k = self.store.get_mut(id);
            if k.data.len() != p.data.len() {
                return Err(shape_err!("parameter {} changed size", p.name));
            }
            for (kv, &qv) in k.data.iter_mut().zip(&p.data) {
                *kv = m * *kv + (1.0 - m) * qv;
            }
        }
        Ok(())
    }

    /// Appends keys (normalizing each), evicting the oldest past capacity.
    pub fn enqueue(&mut self, key: &[f64]) -> Result<()> {
        if key.len() != self.dim {
            return Err(shape_err!("key of width {} for queue width {}", key.len(), self.dim));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        let n = key.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        self.queue.push_back(key.iter().map(|x| x / n).collect());
        while self.queue.len() > self.capacity {
            self.queue.pop_front();
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Queue rows, oldest first, flattened row-major.
    pub fn queue_flat(&self) -> Vec<f64> {
        self.queue.iter().flatten().copied().collect()
    }

    /// Replaces the queue contents (oldest first), e.g. when restoring state.
    pub fn set_queue(&mut self, flat: &[f64]) -> Result<()> {
        if !flat.len().is_multiple_of(self.dim) || flat.len() / self.dim > self.capacity {
            return Err(shape_err!(
                "{} queue values for width {} and capacity {}",
                flat.len(),
                self.dim,
                self.capacity
            ));
        }
        self.queue = flat.chunks(self.dim).map(<[f64]>::to_vec).collect();
        Ok(())
    }
}

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid_arg, MmptError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named, ordered parameter tensors. Ids are dense insertion indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(invalid_arg!("duplicate parameter name {name}"));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(MmptError::Shape(format!(
                "parameter {name}: shape {shape:?} vs {} values",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(MmptError::Numeric(format!("parameter {name} has non-finite values")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Gaussian init with standard deviation `std`.
    pub fn add_normal<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| invalid_arg!("init std {std}: {e}"))?;
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, shape, data)
    }

    /// Xavier-uniform weights for a `fan_in × fan_out` matrix.
    pub fn add_xavier<R: Rng + ?Sized>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, &[fan_in, fan_out], data)
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![value; n])
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.data.clone(),
            })
            .collect()
    }

    /// Overwrites values from a tensor table; every parameter must be present
    /// with a matching shape.
    pub fn load_named(&mut self, tensors: &[NamedTensor], prefix: &str) -> Result<()> {
        let lookup: BTreeMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for p in &mut self.params {
            let key = format!("{prefix}{}", p.name);
            let t = lookup
                .get(key.as_str())
                .ok_or_else(|| MmptError::Checkpoint(format!("missing tensor {key}")))?;
            if t.shape != p.shape {
                return Err(MmptError::Checkpoint(format!(
                    "tensor {key}: stored shape {:?}, expected {:?}",
                    t.shape, p.shape
                )));
            }
            p.data.clone_from(&t.data);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn put_u32<W: Write>(w: &mut W, x: u32) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn get_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Table layout: u32 count, then per tensor: u32 name length, UTF-8 name,
/// u32 rank, u64 extents, raw little-endian f64 payload.
pub fn write_tensor_table<W: Write>(w: &mut W, tensors: &[NamedTensor]) -> Result<()> {
    put_u32(w, tensors.len() as u32)?;
    for t in tensors {
        put_u32(w, t.name.len() as u32)?;
        w.write_all(t.name.as_bytes())?;
        put_u32(w, t.shape.len() as u32)?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensor_table<R: Read>(r: &mut R) -> Result<Vec<NamedTensor>> {
    let count = get_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = get_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| MmptError::Checkpoint(format!("tensor name: {e}")))?;
        let rank = get_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

//! Shared feature extractor: mini-PointNet patch embedding, positional MLP,
//! pre-norm transformer encoder, and the lightweight masked-token decoder.

use rand::Rng;

use crate::error::{invalid_arg, shape_err, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub decoder_depth: usize,
    /// Stochastic depth rate per residual branch.
    pub drop_path: f64,
}

impl BackboneConfig {
    pub fn desk() -> Self {
        Self {
            depth: 4,
            dim: 64,
            heads: 4,
            ffn_ratio: 4,
            decoder_depth: 2,
            drop_path: 0.1,
        }
    }

    pub fn paper() -> Self {
        Self {
            depth: 12,
            dim: 384,
            heads: 6,
            ffn_ratio: 4,
            decoder_depth: 4,
            drop_path: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(invalid_arg!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.depth == 0 {
            return Err(invalid_arg!("encoder depth must be at least 1"));
        }
        if self.ffn_ratio == 0 {
            return Err(invalid_arg!("ffn_ratio must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(invalid_arg!("drop_path {} outside [0, 1)", self.drop_path));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_xavier(&format!("{name}.w"), fan_in, fan_out, rng)?;
        let b = if bias {
            Some(store.add_const(&format!("{name}.b"), &[fan_out], 0.0)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// `fc2(gelu(fc1(x)))`
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut R) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims[0], dims[1], true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), dims[1], dims[2], true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, store, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_const(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.add_const(&format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_row(n, gamma)?;
        g.add_row(y, beta)
    }
}

/// Multi-head scaled dot-product attention of `q` rows over `k`/`v` rows.
/// Pushes each head's attention matrix into `trace` when given.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, mut trace: Option<&mut Vec<Var>>) -> Result<Var> {
    let dim = g.shape(q)[1];
    if !dim.is_multiple_of(heads) || g.shape(k)[1] != dim || g.shape(v)[1] != dim {
        return Err(shape_err!(
            "attention widths {:?} {:?} {:?} with {heads} heads",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        ));
    }
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * dh, dh)?;
        let kh = g.slice(k, 1, h * dh, dh)?;
        let vh = g.slice(v, 1, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let att = g.softmax(scores)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(att);
        }
        outs.push(g.matmul(att, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, 1)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, ffn_ratio: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, false, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), [dim, dim * ffn_ratio, dim], rng)?,
        })
    }

    /// `weights` multiply the attention and MLP branches; a zero weight skips
    /// the branch entirely.
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        heads: usize,
        weights: [f64; 2],
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let dim = g.shape(x)[1];
        let mut x = x;
        if weights[0] != 0.0 {
            let h = self.ln1.forward(g, store, x)?;
            let qkv = self.qkv.forward(g, store, h)?;
            let q = g.slice(qkv, 1, 0, dim)?;
            let k = g.slice(qkv, 1, dim, dim)?;
            let v = g.slice(qkv, 1, 2 * dim, dim)?;
            let a = attention(g, q, k, v, heads, trace)?;
            let mut a = self.proj.forward(g, store, a)?;
            if weights[0] != 1.0 {
                a = g.scale(a, weights[0])?;
            }
            x = g.add(x, a)?;
        }
        if weights[1] != 0.0 {
            let h = self.ln2.forward(g, store, x)?;
            let mut m = self.mlp.forward(g, store, h)?;
            if weights[1] != 1.0 {
                m = g.scale(m, weights[1])?;
            }
            x = g.add(x, m)?;
        }
        Ok(x)
    }
}

/// Stochastic-depth plan for one encoder pass.
#[derive(Debug, Clone, PartialEq)]
pub enum DropPath {
    /// Every branch is kept at full weight.
    Off,
    /// Evaluation: each branch is scaled by its keep probability.
    Eval(f64),
    /// Training: per-branch keep decisions (two per block).
    Sampled(Vec<bool>),
}

impl DropPath {
    pub fn sample<R: Rng + ?Sized>(rate: f64, depth: usize, rng: &mut R) -> Self {
        if rate <= 0.0 {
            return DropPath::Off;
        }
        DropPath::Sampled((0..2 * depth).map(|_| rng.random::<f64>() >= rate).collect())
    }

    pub fn eval(rate: f64) -> Self {
        if rate <= 0.0 {
            DropPath::Off
        } else {
            DropPath::Eval(rate)
        }
    }

    fn weights(&self, block: usize) -> [f64; 2] {
        match self {
            DropPath::Off => [1.0, 1.0],
            DropPath::Eval(rate) => [1.0 - rate; 2],
            DropPath::Sampled(keep) => {
                let w = |i: usize| if keep.get(i).copied().unwrap_or(true) { 1.0 } else { 0.0 };
                [w(2 * block), w(2 * block + 1)]
            }
        }
    }
}

/// Parameters of the shared encoder plus the masked-token decoder.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub k: usize,
    pub patch_embed: Mlp,
    pub pos_embed: Mlp,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub cls_token: ParamId,
    pub cls_pos: ParamId,
    pub mask_token: ParamId,
    pub dec_blocks: Vec<Block>,
    pub dec_norm: LayerNorm,
    pub head: Linear,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: BackboneConfig, k: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let patch_embed = Mlp::new(store, "embed.patch", [3, d, d], rng)?;
        let pos_embed = Mlp::new(store, "embed.pos", [3, d, d], rng)?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("encoder.{i}"), d, cfg.ffn_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "encoder.norm", d)?;
        let cls_token = store.add_normal("encoder.cls_token", &[1, d], 0.02, rng)?;
        let cls_pos = store.add_normal("encoder.cls_pos", &[1, d], 0.02, rng)?;
        let mask_token = store.add_normal("decoder.mask_token", &[1, d], 0.02, rng)?;
        let dec_blocks = (0..cfg.decoder_depth)
            .map(|i| Block::new(store, &format!("decoder.{i}"), d, cfg.ffn_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = LayerNorm::new(store, "decoder.norm", d)?;
        let head = Linear::new(store, "decoder.head", d, 3 * k, true, rng)?;
        Ok(Self {
            cfg,
            k,
            patch_embed,
            pos_embed,
            blocks,
            norm,
            cls_token,
            cls_pos,
            mask_token,
            dec_blocks,
            dec_norm,
            head,
        })
    }

    /// Mini-PointNet: the shared point MLP on every point of every patch,
    /// then max-pooling over each patch. `patches` is `groups * k * 3` values.
    pub fn embed_patches(&self, g: &mut Graph, store: &ParamStore, patches: &[f64], k: usize) -> Result<Var> {
        if patches.is_empty() || k == 0 {
            return Err(invalid_arg!("embed_patches needs at least one non-empty patch"));
        }
        if !patches.len().is_multiple_of(3 * k) {
            return Err(shape_err!("{} patch values do not form K={k} patches of 3D points", patches.len()));
        }
        let groups = patches.len() / (3 * k);
        let x = g.constant(&[groups * k, 3], patches.to_vec())?;
        let h = self.patch_embed.forward(g, store, x)?;
        let h = g.reshape(h, &[groups, k, self.cfg.dim])?;
        g.max_over_axis(h, 1)
    }

    /// Positional MLP on `n * 3` center (or query) coordinates.
    pub fn embed_positions(&self, g: &mut Graph, store: &ParamStore, coords: &[f64]) -> Result<Var> {
        if coords.is_empty() || !coords.len().is_multiple_of(3) {
            return Err(shape_err!("{} coordinate values are not a list of 3D points", coords.len()));
        }
        let x = g.constant(&[coords.len() / 3, 3], coords.to_vec())?;
        self.pos_embed.forward(g, store, x)
    }

    /// Prepends the learnable class token and its positional slot.
    pub fn with_cls(&self, g: &mut Graph, store: &ParamStore, tokens: Var, pos: Var) -> Result<(Var, Var)> {
        let cls = g.param(store, self.cls_token);
        let cls_pos = g.param(store, self.cls_pos);
        Ok((g.concat(&[cls, tokens], 0)?, g.concat(&[cls_pos, pos], 0)?))
    }

    /// Encoder blocks. `pos` is added to the block input at every layer; no
    /// trailing norm is applied (see [`Backbone::final_norm`]).
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, tokens: Var, pos: Var, drop: &DropPath) -> Result<Var> {
        self.encode_traced(g, store, tokens, pos, drop, None)
    }

    pub fn encode_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        pos: Var,
        drop: &DropPath,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        if g.shape(tokens) != g.shape(pos) {
            return Err(shape_err!("tokens {:?} vs pos {:?}", g.shape(tokens), g.shape(pos)));
        }
        let mut x = tokens;
        for (i, block) in self.blocks.iter().enumerate() {
            x = g.add(x, pos)?;
            x = block.forward(g, store, x, self.cfg.heads, drop.weights(i), trace.as_deref_mut())?;
        }
        Ok(x)
    }

    pub fn final_norm(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.norm.forward(g, store, x)
    }

    /// Decodes the masked tokens. `enc_visible` holds the encoded visible
    /// tokens in `visible` order; `pos_all` holds positional embeddings for
    /// all M patches. Returns one row per masked patch, in `masked` order.
    pub fn decode_tlr(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc_visible: Var,
        visible: &[usize],
        masked: &[usize],
        pos_all: Var,
    ) -> Result<Var> {
        if masked.is_empty() {
            return Err(invalid_arg!("decode_tlr needs at least one masked patch"));
        }
        if g.shape(enc_visible)[0] != visible.len() {
            return Err(shape_err!(
                "{} encoded rows for {} visible patches",
                g.shape(enc_visible)[0],
                visible.len()
            ));
        }
        let mask_token = g.param(store, self.mask_token);
        let mask_rows = g.gather_rows(mask_token, &vec![0; masked.len()])?;
        let x = if visible.is_empty() {
            mask_rows
        } else {
            g.concat(&[enc_visible, mask_rows], 0)?
        };
        let order: Vec<usize> = visible.iter().chain(masked).copied().collect();
        let pos = g.gather_rows(pos_all, &order)?;
        let mut x = x;
        for block in &self.dec_blocks {
            x = g.add(x, pos)?;
            x = block.forward(g, store, x, self.cfg.heads, [1.0, 1.0], None)?;
        }
        let x = self.dec_norm.forward(g, store, x)?;
        g.slice(x, 0, visible.len(), masked.len())
    }

    /// Linear map of decoded tokens to `(n, k, 3)` predicted patches.
    pub fn reconstruct_head(&self, g: &mut Graph, store: &ParamStore, h_mask: Var) -> Result<Var> {
        let n = g.shape(h_mask)[0];
        let y = self.head.forward(g, store, h_mask)?;
        g.reshape(y, &[n, self.k, 3])
    }
}

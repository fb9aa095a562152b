//! The three pretext tasks on the shared backbone: masked-patch
//! reconstruction (TLR), real/fake query discrimination (PLR) and
//! multi-view plus image contrast (MCL).

mod image;
mod momentum;
mod queries;
mod render;

pub use image::ImageEncoder;
pub use momentum::MomentumKeys;
pub use queries::{inflate_box, sample_queries, QueryBatch, BOX_INFLATION};
pub use render::{render_view, render_views, DepthImage, BACKGROUND};

use rand::Rng;

use crate::backbone::{attention, Backbone, BackboneConfig, DropPath, LayerNorm, Linear, Mlp};
use crate::error::{invalid_arg, Result};
use crate::geometry::{
    augment, farthest_point_sample, knn_group, mask_count, random_mask_exact, AugmentSpec, MaskPartition, PatchSet, PointCloud,
};
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    /// Number of FPS groups M.
    pub groups: usize,
    /// Points per group K.
    pub group_size: usize,
    pub mask_ratio: f64,
    pub n_real: usize,
    pub n_fake: usize,
    /// Width of every contrastive projection.
    pub proj_dim: usize,
    /// Square depth-image resolution.
    pub image_size: usize,
    pub image_channels: Vec<usize>,
    pub n_views: usize,
    pub tau: f64,
    /// Augmentation drawn independently for the two 3D views.
    pub view_augment: AugmentSpec,
}

impl TaskConfig {
    pub fn desk() -> Self {
        Self {
            groups: 32,
            group_size: 16,
            mask_ratio: 0.8,
            n_real: 16,
            n_fake: 16,
            proj_dim: 32,
            image_size: 32,
            image_channels: vec![8, 16, 32],
            n_views: 1,
            tau: 0.1,
            view_augment: AugmentSpec::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            groups: 64,
            group_size: 32,
            proj_dim: 128,
            image_size: 64,
            image_channels: vec![16, 32, 64],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups < 2 || self.group_size == 0 {
            return Err(invalid_arg!(
                "need at least 2 groups of at least 1 point, got {}x{}",
                self.groups,
                self.group_size
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(invalid_arg!("mask ratio must lie in [0, 1), got {}", self.mask_ratio));
        }
        if self.proj_dim == 0 || self.image_channels.is_empty() || self.image_channels.contains(&0) {
            return Err(invalid_arg!("projection and image widths must be positive"));
        }
        if self.image_size < 8 {
            return Err(invalid_arg!("image size {} below 8", self.image_size));
        }
        if self.n_views == 0 {
            return Err(invalid_arg!("need at least one rendered view"));
        }
        if !(self.tau > 0.0) {
            return Err(invalid_arg!("temperature must be positive, got {}", self.tau));
        }
        let masked = self.masked_count();
        if self.n_real > masked * self.group_size {
            return Err(invalid_arg!(
                "{} real queries exceed {} masked points",
                self.n_real,
                masked * self.group_size
            ));
        }
        self.view_augment.validate()
    }

    /// Masked groups per cloud: the rounded ratio, kept within `1..M`.
    pub fn masked_count(&self) -> usize {
        mask_count(self.groups, self.mask_ratio).clamp(1, self.groups - 1)
    }
}

/// One-layer cross-attention decoder turning query tokens into logits.
#[derive(Debug, Clone)]
pub struct PlrHead {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub wq: Linear,
    pub wkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub head: Mlp,
}

impl PlrHead {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, ffn_ratio: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            ln_q: LayerNorm::new(store, "plr.ln_q", dim)?,
            ln_kv: LayerNorm::new(store, "plr.ln_kv", dim)?,
            wq: Linear::new(store, "plr.wq", dim, dim, false, rng)?,
            wkv: Linear::new(store, "plr.wkv", dim, 2 * dim, false, rng)?,
            proj: Linear::new(store, "plr.proj", dim, dim, true, rng)?,
            ln2: LayerNorm::new(store, "plr.ln2", dim)?,
            mlp: Mlp::new(store, "plr.mlp", [dim, dim * ffn_ratio, dim], rng)?,
            head: Mlp::new(store, "plr.head", [dim, dim, 1], rng)?,
        })
    }

    /// `queries` is `Q×D`, `context` is `V×D`; returns `Q` logits.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, context: Var, heads: usize) -> Result<Var> {
        let dim = g.shape(queries)[1];
        let q = self.ln_q.forward(g, store, queries)?;
        let q = self.wq.forward(g, store, q)?;
        let kv = self.ln_kv.forward(g, store, context)?;
        let kv = self.wkv.forward(g, store, kv)?;
        let k = g.slice(kv, 1, 0, dim)?;
        let v = g.slice(kv, 1, dim, dim)?;
        let a = attention(g, q, k, v, heads, None)?;
        let a = self.proj.forward(g, store, a)?;
        let x = g.add(queries, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.mlp.forward(g, store, h)?;
        let x = g.add(x, h)?;
        let y = self.head.forward(g, store, x)?;
        let n = g.shape(y)[0];
        g.reshape(y, &[n])
    }
}

/// Projection heads of the contrastive branch.
#[derive(Debug, Clone)]
pub struct ProjectionHeads {
    pub g3d: Mlp,
    pub logits: Mlp,
    pub f2d: ImageEncoder,
    pub g2d: Mlp,
}

/// Backbone, task heads and task settings. Parameters live in a separate
/// [`ParamStore`] so that the momentum encoder can reuse the same ids.
#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: Backbone,
    pub plr: PlrHead,
    pub heads: ProjectionHeads,
    pub task: TaskConfig,
}

/// Visible-group encoding shared by TLR and PLR.
#[derive(Debug, Clone)]
pub struct MaskedEncoding {
    pub patches: PatchSet,
    pub partition: MaskPartition,
    /// Normalized encoder output, `(V+1)×D`, class token first.
    pub tokens: Var,
    /// Positional embeddings of the visible centers, `V×D`.
    pub pos_visible: Var,
}

#[derive(Debug, Clone)]
pub struct TlrOutput {
    /// Predicted masked patches, `n_mask×K×3`.
    pub pred: Var,
    /// Ground-truth masked patches (center-relative), same shape.
    pub gt: Var,
}

#[derive(Debug, Clone)]
pub struct PlrOutput {
    /// One logit per query.
    pub logits: Var,
    pub queries: QueryBatch,
}

#[derive(Debug, Clone)]
pub struct MclOutput {
    pub z_t1: Var,
    pub z_t2: Var,
    /// Mean of the two view projections, `1×P`.
    pub z3d: Var,
    /// Logits-head projection of the masked-encoding global feature, `1×P`.
    pub s3d: Var,
    /// Mean image-branch projection over the rendered views, `1×P`.
    pub z2d: Var,
    pub views: (PointCloud, PointCloud),
}

impl Model {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: BackboneConfig, task: TaskConfig, rng: &mut R) -> Result<Self> {
        task.validate()?;
        let backbone = Backbone::new(store, cfg, task.group_size, rng)?;
        let d = cfg.dim;
        let plr = PlrHead::new(store, d, cfg.ffn_ratio, rng)?;
        let f2d = ImageEncoder::new(store, "mcl.f2d", &task.image_channels, rng)?;
        let heads = ProjectionHeads {
            g3d: Mlp::new(store, "mcl.g3d", [2 * d, d, task.proj_dim], rng)?,
            logits: Mlp::new(store, "mcl.logits", [2 * d, d, task.proj_dim], rng)?,
            g2d: Mlp::new(store, "mcl.g2d", [f2d.out_dim(), d, task.proj_dim], rng)?,
            f2d,
        };
        Ok(Self {
            backbone,
            plr,
            heads,
            task,
        })
    }

    pub fn dim(&self) -> usize {
        self.backbone.cfg.dim
    }

    /// Drop-path plan: sampled when training, expectation-scaled otherwise.
    pub fn drop_path<R: Rng + ?Sized>(&self, train: bool, rng: &mut R) -> DropPath {
        let rate = self.backbone.cfg.drop_path;
        if train {
            DropPath::sample(rate, self.backbone.cfg.depth, rng)
        } else {
            DropPath::eval(rate)
        }
    }

    /// FPS (seeded at point 0) followed by k-NN grouping.
    pub fn group(&self, cloud: &PointCloud) -> Result<PatchSet> {
        let centers = farthest_point_sample(cloud, self.task.groups, 0)?;
        knn_group(cloud, &centers, self.task.group_size)
    }

    pub fn draw_partition<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<MaskPartition> {
        random_mask_exact(self.task.groups, self.task.masked_count(), self.task.mask_ratio, rng)
    }

    /// Encodes only the visible groups (plus the class token). Coordinates
    /// of masked groups are never read.
    pub fn encode_masked(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patches: PatchSet,
        partition: MaskPartition,
        drop: &DropPath,
    ) -> Result<MaskedEncoding> {
        if partition.visible.is_empty() {
            return Err(invalid_arg!("masked encoding needs at least one visible group"));
        }
        let tokens = self
            .backbone
            .embed_patches(g, store, &patches.flat_patches(&partition.visible), patches.k)?;
        let pos_visible = self.backbone.embed_positions(g, store, &patches.flat_centers(&partition.visible))?;
        let (x, pos) = self.backbone.with_cls(g, store, tokens, pos_visible)?;
        let x = self.backbone.encode(g, store, x, pos, drop)?;
        let tokens = self.backbone.final_norm(g, store, x)?;
        Ok(MaskedEncoding {
            patches,
            partition,
            tokens,
            pos_visible,
        })
    }

    /// Concatenation of the class token and the max over the other tokens.
    pub fn global_feature(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let n = g.shape(tokens)[0];
        let cls = g.slice(tokens, 0, 0, 1)?;
        let rest = g.slice(tokens, 0, 1, n - 1)?;
        let pooled = g.max_over_axis(rest, 0)?;
        let pooled = g.reshape(pooled, &[1, self.dim()])?;
        g.concat(&[cls, pooled], 1)
    }

    pub fn tlr_decode(&self, g: &mut Graph, store: &ParamStore, enc: &MaskedEncoding) -> Result<TlrOutput> {
        let (p, part) = (&enc.patches, &enc.partition);
        let v = part.visible.len();
        let enc_visible = g.slice(enc.tokens, 0, 1, v)?;
        let pos_all = self
            .backbone
            .embed_positions(g, store, &p.flat_centers(&(0..p.m).collect::<Vec<_>>()))?;
        let h = self
            .backbone
            .decode_tlr(g, store, enc_visible, &part.visible, &part.masked, pos_all)?;
        let pred = self.backbone.reconstruct_head(g, store, h)?;
        let gt = g.constant(&[part.masked.len(), p.k, 3], p.flat_patches(&part.masked))?;
        Ok(TlrOutput { pred, gt })
    }

    pub fn plr_decode(&self, g: &mut Graph, store: &ParamStore, enc: &MaskedEncoding, queries: &QueryBatch) -> Result<Var> {
        let v = enc.partition.visible.len();
        let t = g.slice(enc.tokens, 0, 1, v)?;
        let context = g.add(t, enc.pos_visible)?;
        let q = self.backbone.embed_positions(g, store, &queries.flat())?;
        self.plr.forward(g, store, q, context, self.backbone.cfg.heads)
    }

    /// Group, mask and encode, then reconstruct the masked patches.
    pub fn tlr_forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cloud: &PointCloud,
        train: bool,
        rng: &mut R,
    ) -> Result<TlrOutput> {
        let patches = self.group(cloud)?;
        let partition = self.draw_partition(rng)?;
        let drop = self.drop_path(train, rng);
        let enc = self.encode_masked(g, store, patches, partition, &drop)?;
        self.tlr_decode(g, store, &enc)
    }

    /// Group, mask and encode, then classify freshly drawn queries.
    pub fn plr_forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cloud: &PointCloud,
        train: bool,
        rng: &mut R,
    ) -> Result<PlrOutput> {
        let patches = self.group(cloud)?;
        let partition = self.draw_partition(rng)?;
        let drop = self.drop_path(train, rng);
        let enc = self.encode_masked(g, store, patches, partition, &drop)?;
        let queries = sample_queries(
            &enc.patches,
            &enc.partition,
            self.task.n_real,
            self.task.n_fake,
            cloud.bounds(),
            rng,
        )?;
        let logits = self.plr_decode(g, store, &enc, &queries)?;
        Ok(PlrOutput { logits, queries })
    }

    /// Global feature of a whole cloud: every group encoded.
    pub fn f3d(&self, g: &mut Graph, store: &ParamStore, cloud: &PointCloud, drop: &DropPath) -> Result<Var> {
        let p = self.group(cloud)?;
        let all: Vec<usize> = (0..p.m).collect();
        let tokens = self.backbone.embed_patches(g, store, &p.flat_patches(&all), p.k)?;
        let pos = self.backbone.embed_positions(g, store, &p.flat_centers(&all))?;
        let (x, pos) = self.backbone.with_cls(g, store, tokens, pos)?;
        let x = self.backbone.encode(g, store, x, pos, drop)?;
        let x = self.backbone.final_norm(g, store, x)?;
        self.global_feature(g, x)
    }

    /// `g_3D(f_3D(view))`.
    pub fn project_view(&self, g: &mut Graph, store: &ParamStore, view: &PointCloud, drop: &DropPath) -> Result<Var> {
        let f = self.f3d(g, store, view, drop)?;
        self.heads.g3d.forward(g, store, f)
    }

    /// Mean of `g_2D(f_2D(image))` over the images.
    pub fn project_images(&self, g: &mut Graph, store: &ParamStore, images: &[DepthImage]) -> Result<Var> {
        if images.is_empty() {
            return Err(invalid_arg!("need at least one rendered view"));
        }
        let rows = images
            .iter()
            .map(|img| {
                let f = self.heads.f2d.forward(g, store, img)?;
                self.heads.g2d.forward(g, store, f)
            })
            .collect::<Result<Vec<_>>>()?;
        let stacked = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
        let mean = g.mean_over_axis(stacked, 0)?;
        g.reshape(mean, &[1, self.task.proj_dim])
    }

    /// Momentum-encoder key for one view: the logits head on the full-cloud
    /// global feature, L2-normalized. Evaluated against `store`, which must
    /// share this model's parameter layout.
    pub fn key(&self, store: &ParamStore, view: &PointCloud) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let f = self.f3d(&mut g, store, view, &DropPath::eval(self.backbone.cfg.drop_path))?;
        let s = self.heads.logits.forward(&mut g, store, f)?;
        let s = g.l2_normalize(s)?;
        Ok(g.value(s).to_vec())
    }

    /// Draws the two augmented views and the rendered images of one cloud.
    pub fn mcl_inputs<R: Rng + ?Sized>(&self, cloud: &PointCloud, rng: &mut R) -> Result<(PointCloud, PointCloud, Vec<DepthImage>)> {
        let t1 = augment(cloud, &self.task.view_augment, rng)?;
        let t2 = augment(cloud, &self.task.view_augment, rng)?;
        let size = self.task.image_size;
        let images = render_views(cloud, self.task.n_views, (size, size), rng)?;
        Ok((t1, t2, images))
    }

    /// Contrastive projections of one cloud. `masked_global` is the global
    /// feature of the cloud's masked encoding and feeds the logits head.
    pub fn mcl_forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cloud: &PointCloud,
        masked_global: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<MclOutput> {
        let (t1, t2, images) = self.mcl_inputs(cloud, rng)?;
        let d1 = self.drop_path(train, rng);
        let d2 = self.drop_path(train, rng);
        self.mcl_project(g, store, (t1, t2), &images, masked_global, (&d1, &d2))
    }

    /// Deterministic part of [`Model::mcl_forward`].
    pub fn mcl_project(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        views: (PointCloud, PointCloud),
        images: &[DepthImage],
        masked_global: Var,
        drops: (&DropPath, &DropPath),
    ) -> Result<MclOutput> {
        let z_t1 = self.project_view(g, store, &views.0, drops.0)?;
        let z_t2 = self.project_view(g, store, &views.1, drops.1)?;
        let sum = g.add(z_t1, z_t2)?;
        let z3d = g.scale(sum, 0.5)?;
        let s3d = self.heads.logits.forward(g, store, masked_global)?;
        let z2d = self.project_images(g, store, images)?;
        Ok(MclOutput {
            z_t1,
            z_t2,
            z3d,
            s3d,
            z2d,
            views,
        })
    }
}

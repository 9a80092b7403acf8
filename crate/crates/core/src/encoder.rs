//! PointBERT-style cloud encoder: farthest-point group centers, kNN
//! sub-clouds, a shared mini point network per group, a transformer over
//! the group tokens plus a learned global token, and a two-layer projection
//! of `[global, maxpool(regional)]` to the conditioning latent.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use sculpt_nn::layers::{LayerNorm, Linear, MultiHeadAttention};
use sculpt_nn::{kaiming_uniform, Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::pointcloud::{farthest_point_indices, lex_cmp, KdTree, Point, PointCloud};

pub const PREFIX: &str = "encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub groups: usize,
    pub group_size: usize,
    pub token_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub latent_dim: usize,
    /// Hidden width of the per-point network.
    pub point_hidden: usize,
    /// Transformer MLP width as a multiple of `token_dim`.
    pub mlp_ratio: usize,
    /// Expected points per cloud.
    pub cloud_size: usize,
    /// Group centers are expressed relative to this point...
    pub origin: [f64; 3],
    /// ...and divided by this length.
    pub position_scale: f64,
    /// Within-group offsets are divided by this length.
    pub local_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            groups: 64,
            group_size: 32,
            token_dim: 128,
            layers: 3,
            heads: 4,
            latent_dim: 512,
            point_hidden: 64,
            mlp_ratio: 2,
            cloud_size: 2048,
            origin: [0.0; 3],
            position_scale: 0.03,
            local_scale: 0.006,
        }
    }
}

impl EncoderConfig {
    /// Desk-scale variant used for end-to-end training on a single machine.
    pub fn lite() -> Self {
        Self { token_dim: 64, layers: 2, latent_dim: 64, point_hidden: 32, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("groups", self.groups),
            ("group_size", self.group_size),
            ("token_dim", self.token_dim),
            ("heads", self.heads),
            ("latent_dim", self.latent_dim),
            ("point_hidden", self.point_hidden),
            ("mlp_ratio", self.mlp_ratio),
            ("cloud_size", self.cloud_size),
        ] {
            if v == 0 {
                return invalid(format!("encoder.{name} must be > 0"));
            }
        }
        if self.token_dim % self.heads != 0 {
            return invalid("encoder.token_dim must be divisible by encoder.heads");
        }
        if self.groups > self.cloud_size {
            return invalid("encoder.groups must not exceed encoder.cloud_size");
        }
        if !(self.position_scale > 0.0 && self.local_scale > 0.0) {
            return invalid("encoder scales must be > 0");
        }
        Ok(())
    }
}

/// Group centers and center-relative neighborhoods of one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Grouping {
    pub centers: Vec<Point>,
    /// `groups × group_size` offsets, row-major by group.
    pub neighborhoods: Vec<Point>,
    pub group_size: usize,
}

impl Grouping {
    pub fn groups(&self) -> usize {
        self.centers.len()
    }

    pub fn group(&self, i: usize) -> &[Point] {
        &self.neighborhoods[i * self.group_size..(i + 1) * self.group_size]
    }
}

/// Farthest-point centers, each with its `group_size` nearest points. Both
/// steps run on a lexicographically sorted copy, so the result depends only
/// on the point set.
pub fn group(cloud: &PointCloud, cfg: &EncoderConfig) -> Result<Grouping> {
    if cloud.len() < cfg.groups {
        return invalid(format!("cloud has {} points, fewer than {} groups", cloud.len(), cfg.groups));
    }
    if cfg.group_size == 0 || cfg.groups == 0 {
        return invalid("groups and group_size must be > 0");
    }
    let mut sorted = cloud.points().to_vec();
    sorted.sort_by(lex_cmp);
    let centers: Vec<Point> = farthest_point_indices(&sorted, cfg.groups).into_iter().map(|i| sorted[i]).collect();
    let tree = KdTree::new(&sorted);
    let k = cfg.group_size.min(sorted.len());
    let mut neighborhoods = Vec::with_capacity(cfg.groups * cfg.group_size);
    for c in &centers {
        let nn = tree.knn(c, k);
        for j in 0..cfg.group_size {
            // clouds smaller than group_size repeat their farthest neighbor
            let p = sorted[nn[j.min(k - 1)].1];
            neighborhoods.push([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        }
    }
    Ok(Grouping { centers, neighborhoods, group_size: cfg.group_size })
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Parameter names of the encoder; tensors live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct PointEncoder {
    pub cfg: EncoderConfig,
    point1: Linear,
    point2: Linear,
    pos1: Linear,
    pos2: Linear,
    cls: String,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head1: Linear,
    head2: Linear,
}

/// Graph handles for one batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    /// `[B, token_dim]`
    pub global: Var,
    /// `[B, groups, token_dim]`
    pub regional: Var,
    /// `[B, latent_dim]`
    pub latent: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderFeatures {
    pub global: Vec<f32>,
    pub regional: Vec<Vec<f32>>,
    pub latent: Vec<f32>,
}

impl PointEncoder {
    /// Registers freshly initialized parameters under `encoder.` in `store`.
    pub fn init<T: Scalar, R: Rng>(cfg: &EncoderConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.token_dim;
        let p = |name: &str| format!("{PREFIX}.{name}");
        let point1 = Linear::init(store, &p("point1"), 3, cfg.point_hidden, rng);
        let point2 = Linear::init(store, &p("point2"), cfg.point_hidden, d, rng);
        let pos1 = Linear::init(store, &p("pos1"), 3, d, rng);
        let pos2 = Linear::init(store, &p("pos2"), d, d, rng);
        let cls = p("cls");
        store.insert(&cls, kaiming_uniform(&[d], d, rng));
        let blocks = (0..cfg.layers)
            .map(|i| {
                let b = |name: &str| p(&format!("block{i}.{name}"));
                Block {
                    norm1: LayerNorm::init(store, &b("norm1"), d),
                    attn: MultiHeadAttention::init(store, &b("attn"), d, cfg.heads, rng),
                    norm2: LayerNorm::init(store, &b("norm2"), d),
                    fc1: Linear::init(store, &b("fc1"), d, cfg.mlp_ratio * d, rng),
                    fc2: Linear::init(store, &b("fc2"), cfg.mlp_ratio * d, d, rng),
                }
            })
            .collect();
        let norm = LayerNorm::init(store, &p("norm"), d);
        let head1 = Linear::init(store, &p("head1"), 2 * d, cfg.latent_dim, rng);
        let head2 = Linear::init(store, &p("head2"), cfg.latent_dim, cfg.latent_dim, rng);
        Ok(Self { cfg: cfg.clone(), point1, point2, pos1, pos2, cls, blocks, norm, head1, head2 })
    }

    /// Layer names only, for use with an existing parameter store.
    pub fn named(cfg: &EncoderConfig) -> Result<Self> {
        let mut scratch = ParamStore::<f32>::new();
        Self::init(cfg, &mut scratch, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))
    }

    pub fn group(&self, cloud: &PointCloud) -> Result<Grouping> {
        if cloud.len() != self.cfg.cloud_size {
            return invalid(format!("cloud has {} points, expected {}", cloud.len(), self.cfg.cloud_size));
        }
        group(cloud, &self.cfg)
    }

    /// Batched forward pass over pre-grouped clouds. Parameters must already
    /// be bound in `g`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, batch: &[Arc<Grouping>]) -> Result<EncoderVars> {
        let cfg = &self.cfg;
        let (b, gr, s, d) = (batch.len(), cfg.groups, cfg.group_size, cfg.token_dim);
        if b == 0 {
            return invalid("encoder batch is empty");
        }
        let mut local = Vec::with_capacity(b * gr * s * 3);
        let mut centers = Vec::with_capacity(b * gr * 3);
        for item in batch {
            if item.groups() != gr || item.group_size != s {
                return invalid(format!("grouping is {}x{}, encoder expects {gr}x{s}", item.groups(), item.group_size));
            }
            for p in &item.neighborhoods {
                local.extend(p.iter().map(|v| T::of(v / cfg.local_scale)));
            }
            for c in &item.centers {
                centers.extend((0..3).map(|i| T::of((c[i] - cfg.origin[i]) / cfg.position_scale)));
            }
        }
        let local = g.constant(Tensor::new(&[b, gr, s, 3], local)?)?;
        let centers = g.constant(Tensor::new(&[b, gr, 3], centers)?)?;

        let h = self.point1.forward(g, local)?;
        let h = g.gelu(h)?;
        let h = self.point2.forward(g, h)?;
        let tokens = g.max_pool(h, 2)?;

        let pos = self.pos1.forward(g, centers)?;
        let pos = g.gelu(pos)?;
        let pos = self.pos2.forward(g, pos)?;
        let tokens = g.add(tokens, pos)?;

        let cls = g.named(&self.cls)?;
        let cls = g.expand(cls, b)?;
        let cls = g.reshape(cls, &[b, 1, d])?;
        let mut x = g.concat(&[cls, tokens], 1)?;
        for blk in &self.blocks {
            let h = blk.norm1.forward(g, x)?;
            let h = blk.attn.forward(g, h)?;
            x = g.add(x, h)?;
            let h = blk.norm2.forward(g, x)?;
            let h = blk.fc1.forward(g, h)?;
            let h = g.gelu(h)?;
            let h = blk.fc2.forward(g, h)?;
            x = g.add(x, h)?;
        }
        let x = self.norm.forward(g, x)?;
        let global = g.narrow(x, 1, 0, 1)?;
        let global = g.reshape(global, &[b, d])?;
        let regional = g.narrow(x, 1, 1, gr)?;
        let pooled = g.max_pool(regional, 1)?;
        let h = g.concat(&[global, pooled], 1)?;
        let h = self.head1.forward(g, h)?;
        let h = g.gelu(h)?;
        let latent = self.head2.forward(g, h)?;
        Ok(EncoderVars { global, regional, latent })
    }

    /// Inference on one cloud.
    pub fn encode(&self, cloud: &PointCloud, params: &ParamStore<f32>) -> Result<EncoderFeatures> {
        let grouping = Arc::new(self.group(cloud)?);
        let mut g = Graph::<f32>::new();
        params.with_prefix(&format!("{PREFIX}.")).bind(&mut g, false)?;
        let vars = self.forward(&mut g, &[grouping])?;
        let d = self.cfg.token_dim;
        Ok(EncoderFeatures {
            global: g.value(vars.global).data().to_vec(),
            regional: g.value(vars.regional).data().chunks(d).map(<[f32]>::to_vec).collect(),
            latent: g.value(vars.latent).data().to_vec(),
        })
    }
}

/// Convenience wrapper matching the single-cloud API.
pub fn encode(cloud: &PointCloud, cfg: &EncoderConfig, params: &ParamStore<f32>) -> Result<EncoderFeatures> {
    PointEncoder::named(cfg)?.encode(cloud, params)
}

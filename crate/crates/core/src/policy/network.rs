//! FiLM-conditioned 1-D convolutional U-Net predicting the noise in an
//! action sequence. The temporal axis is the action horizon, which is too
//! short to resample, so levels differ only in width.

use rand::Rng;
use sculpt_nn::layers::{Conv1d, FilmProjection, GroupNorm, Linear};
use sculpt_nn::{Graph, ParamStore, Scalar, Tensor, Var};

use crate::error::{invalid, Result};

pub const PREFIX: &str = "policy";

/// Anything that maps `(A^k, k, O_t)` to a noise estimate.
pub trait NoisePredictor<T: Scalar> {
    /// `noisy` is `[B, H, D]`, `obs` is `[B, obs_dim]`; returns `[B, H, D]`.
    fn predict(&self, g: &mut Graph<T>, noisy: Var, steps: &[usize], obs: Var) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnetShape {
    pub action_dim: usize,
    pub obs_dim: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub norm_groups: usize,
    pub time_dim: usize,
}

impl UnetShape {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return invalid("policy.channels must be a non-empty list of positive widths");
        }
        if self.kernel % 2 == 0 {
            return invalid("policy.kernel must be odd");
        }
        if self.norm_groups == 0 || self.channels.iter().any(|c| c % self.norm_groups != 0) {
            return invalid("policy.norm_groups must divide every channel width");
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return invalid("policy.time_dim must be even and >= 2");
        }
        if self.action_dim == 0 || self.obs_dim == 0 {
            return invalid("action and observation dims must be > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv1d,
    norm: GroupNorm,
}

impl ConvBlock {
    fn init<T: Scalar, R: Rng>(
        s: &mut ParamStore<T>,
        p: &str,
        cin: usize,
        cout: usize,
        shape: &UnetShape,
        rng: &mut R,
    ) -> Self {
        let k = shape.kernel;
        Self {
            conv: Conv1d::init(s, &format!("{p}.conv"), cin, cout, k, 1, k / 2, rng),
            norm: GroupNorm::init(s, &format!("{p}.norm"), cout, shape.norm_groups),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, x)?;
        let h = self.norm.forward(g, h)?;
        Ok(g.gelu(h)?)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    block1: ConvBlock,
    film: FilmProjection,
    block2: ConvBlock,
    residual: Option<Conv1d>,
}

impl ResBlock {
    fn init<T: Scalar, R: Rng>(
        s: &mut ParamStore<T>,
        p: &str,
        cin: usize,
        cout: usize,
        cond: usize,
        shape: &UnetShape,
        rng: &mut R,
    ) -> Self {
        Self {
            block1: ConvBlock::init(s, &format!("{p}.block1"), cin, cout, shape, rng),
            film: FilmProjection::init(s, &format!("{p}.film"), cond, cout),
            block2: ConvBlock::init(s, &format!("{p}.block2"), cout, cout, shape, rng),
            residual: (cin != cout).then(|| Conv1d::init(s, &format!("{p}.residual"), cin, cout, 1, 1, 0, rng)),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, cond: Var) -> Result<Var> {
        let h = self.block1.forward(g, x)?;
        let (scale, shift) = self.film.forward(g, cond)?;
        let h = g.film(h, scale, shift)?;
        let h = self.block2.forward(g, h)?;
        let r = match &self.residual {
            Some(c) => c.forward(g, x)?,
            None => x,
        };
        Ok(g.add(h, r)?)
    }
}

#[derive(Clone, Debug)]
pub struct ConditionalUnet1d {
    pub shape: UnetShape,
    time1: Linear,
    time2: Linear,
    down: Vec<[ResBlock; 2]>,
    mid: [ResBlock; 2],
    up: Vec<[ResBlock; 2]>,
    final_block: ConvBlock,
    final_conv: Conv1d,
}

impl ConditionalUnet1d {
    pub fn init<T: Scalar, R: Rng>(shape: &UnetShape, s: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let p = |name: &str| format!("{PREFIX}.{name}");
        let td = shape.time_dim;
        let time1 = Linear::init(s, &p("time1"), td, 2 * td, rng);
        let time2 = Linear::init(s, &p("time2"), 2 * td, td, rng);
        let cond = td + shape.obs_dim;
        let ch = &shape.channels;
        let mut down = Vec::new();
        let mut cin = shape.action_dim;
        for (i, &c) in ch.iter().enumerate() {
            down.push([
                ResBlock::init(s, &p(&format!("down{i}.0")), cin, c, cond, shape, rng),
                ResBlock::init(s, &p(&format!("down{i}.1")), c, c, cond, shape, rng),
            ]);
            cin = c;
        }
        let last = *ch.last().unwrap();
        let mid = [
            ResBlock::init(s, &p("mid.0"), last, last, cond, shape, rng),
            ResBlock::init(s, &p("mid.1"), last, last, cond, shape, rng),
        ];
        // each up level consumes the matching down output as a skip input
        let mut up = Vec::new();
        for i in (1..ch.len()).rev() {
            up.push([
                ResBlock::init(s, &p(&format!("up{i}.0")), 2 * ch[i], ch[i - 1], cond, shape, rng),
                ResBlock::init(s, &p(&format!("up{i}.1")), ch[i - 1], ch[i - 1], cond, shape, rng),
            ]);
        }
        let final_block = ConvBlock::init(s, &p("final.block"), ch[0], ch[0], shape, rng);
        let final_conv = Conv1d::init(s, &p("final.conv"), ch[0], shape.action_dim, 1, 1, 0, rng);
        Ok(Self { shape: shape.clone(), time1, time2, down, mid, up, final_block, final_conv })
    }

    /// Sinusoidal embedding of the diffusion step, `[B, time_dim]`.
    pub fn step_embedding<T: Scalar>(&self, steps: &[usize]) -> Tensor<T> {
        let half = self.shape.time_dim / 2;
        let scale = (10_000f64).ln() / (half.max(2) - 1) as f64;
        let mut data = Vec::with_capacity(steps.len() * 2 * half);
        for &k in steps {
            let freqs = (0..half).map(|i| k as f64 * (-scale * i as f64).exp());
            let f: Vec<f64> = freqs.collect();
            data.extend(f.iter().map(|v| T::of(v.sin())));
            data.extend(f.iter().map(|v| T::of(v.cos())));
        }
        Tensor::new(&[steps.len(), 2 * half], data).expect("embedding shape")
    }
}

impl<T: Scalar> NoisePredictor<T> for ConditionalUnet1d {
    fn predict(&self, g: &mut Graph<T>, noisy: Var, steps: &[usize], obs: Var) -> Result<Var> {
        let s = g.shape(noisy).to_vec();
        if s.len() != 3 || s[2] != self.shape.action_dim || s[0] != steps.len() {
            return invalid(format!(
                "noisy actions have shape {s:?}, expected [{}, H, {}]",
                steps.len(),
                self.shape.action_dim
            ));
        }
        if g.shape(obs) != [s[0], self.shape.obs_dim] {
            return invalid(format!(
                "observation has shape {:?}, expected [{}, {}]",
                g.shape(obs),
                s[0],
                self.shape.obs_dim
            ));
        }
        let t = g.constant(self.step_embedding(steps))?;
        let t = self.time1.forward(g, t)?;
        let t = g.gelu(t)?;
        let t = self.time2.forward(g, t)?;
        let cond = g.concat(&[t, obs], 1)?;
        let cond = g.gelu(cond)?;

        let mut x = g.permute(noisy, [0, 2, 1])?;
        let mut skips = Vec::new();
        for [a, b] in &self.down {
            x = a.forward(g, x, cond)?;
            x = b.forward(g, x, cond)?;
            skips.push(x);
        }
        for blk in &self.mid {
            x = blk.forward(g, x, cond)?;
        }
        for [a, b] in &self.up {
            let skip = skips.pop().expect("one skip per level");
            x = g.concat(&[x, skip], 1)?;
            x = a.forward(g, x, cond)?;
            x = b.forward(g, x, cond)?;
        }
        let x = self.final_block.forward(g, x)?;
        let x = self.final_conv.forward(g, x)?;
        Ok(g.permute(x, [0, 2, 1])?)
    }
}

//! Transformer sublayers on top of [`Graph`].
//!
//! Parameters are looked up by name under a prefix, e.g. `speech.layer0.attn.q.w`.
//! The matching `init_*` functions create them in a [`ParamStore`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Real;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Linear,
}

/// Inverted dropout. Inactive in eval mode (no RNG) or when `rate == 0`.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn eval() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0 && self.rng.is_some()
    }

    pub fn apply<T: Real>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let rate = self.rate;
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let keep = T::of(1.0 / (1.0 - rate));
        let n = g.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        g.mul_const(x, mask)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockConfig {
    pub hidden: usize,
    pub heads: usize,
    pub intermediate: usize,
    /// Clip distance of the learned relative position bias; `None` disables it.
    pub rel_clip: Option<usize>,
    pub activation: Activation,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.intermediate == 0 {
            return Err(Error::Config("intermediate size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Output of one attention call; `weights` holds the per-head `Lq×Lkv` matrices.
pub struct Attention {
    pub out: Var,
    pub weights: Vec<Var>,
}

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn init_linear<T: Real>(
    ps: &mut ParamStore<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    ps.insert_uniform(&format!("{prefix}.w"), &[fan_in, fan_out], xavier(fan_in, fan_out), rng)?;
    ps.insert_filled(&format!("{prefix}.b"), &[fan_out], 0.0)?;
    Ok(())
}

pub fn init_layer_norm<T: Real>(ps: &mut ParamStore<T>, prefix: &str, hidden: usize) -> Result<()> {
    ps.insert_filled(&format!("{prefix}.gamma"), &[hidden], 1.0)?;
    ps.insert_filled(&format!("{prefix}.beta"), &[hidden], 0.0)?;
    Ok(())
}

pub fn init_attention<T: Real>(
    ps: &mut ParamStore<T>,
    prefix: &str,
    cfg: &BlockConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for part in ["q", "k", "v", "o"] {
        init_linear(ps, &format!("{prefix}.{part}"), cfg.hidden, cfg.hidden, rng)?;
    }
    // a key bias only shifts each score row by a constant, which softmax ignores
    ps.remove(&format!("{prefix}.k.b"));
    if let Some(clip) = cfg.rel_clip {
        ps.insert_filled(&format!("{prefix}.rel"), &[cfg.heads, 2 * clip + 1], 0.0)?;
    }
    Ok(())
}

pub fn init_feed_forward<T: Real>(
    ps: &mut ParamStore<T>,
    prefix: &str,
    cfg: &BlockConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    init_linear(ps, &format!("{prefix}.fc1"), cfg.hidden, cfg.intermediate, rng)?;
    init_linear(ps, &format!("{prefix}.fc2"), cfg.intermediate, cfg.hidden, rng)
}

pub fn init_encoder_block<T: Real>(
    ps: &mut ParamStore<T>,
    prefix: &str,
    cfg: &BlockConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    init_attention(ps, &format!("{prefix}.attn"), cfg, rng)?;
    init_layer_norm(ps, &format!("{prefix}.ln1"), cfg.hidden)?;
    init_feed_forward(ps, &format!("{prefix}.ffn"), cfg, rng)?;
    init_layer_norm(ps, &format!("{prefix}.ln2"), cfg.hidden)
}

/// `x · W + b` with `W`/`b` at `{prefix}.w` / `{prefix}.b`.
pub fn linear<T: Real>(g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

pub fn layer_norm<T: Real>(g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.gamma"))?;
    let beta = g.param(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Scaled dot-product attention over `heads` heads.
///
/// `key_mask[j] == false` removes key `j` from every softmax. The relative
/// position bias is only legal for self-attention (`q_in == kv_in`).
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    cfg: &BlockConfig,
    key_mask: Option<&[bool]>,
) -> Result<Attention> {
    cfg.validate()?;
    if cfg.rel_clip.is_some() && q_in != kv_in {
        return Err(Error::Config("relative position bias requires self-attention".into()));
    }
    let lq = g.value(q_in).rows();
    let lk = g.value(kv_in).rows();
    let q = linear(g, &format!("{prefix}.q"), q_in)?;
    let wk = g.param(&format!("{prefix}.k.w"))?;
    let k = g.matmul(kv_in, wk)?;
    let v = linear(g, &format!("{prefix}.v"), kv_in)?;
    let d = cfg.hidden / cfg.heads;
    let scale = T::of(1.0 / (d as f64).sqrt());
    let rel = match cfg.rel_clip {
        Some(clip) => Some((g.param(&format!("{prefix}.rel"))?, clip)),
        None => None,
    };
    let mut contexts = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice_cols(q, h * d, d)?;
        let kh = g.slice_cols(k, h * d, d)?;
        let vh = g.slice_cols(v, h * d, d)?;
        let scores = g.matmul_t(qh, kh)?;
        let mut scores = g.scale(scores, scale);
        if let Some((table, clip)) = rel {
            let bias = g.rel_bias(table, h, clip, lq, lk)?;
            scores = g.add(scores, bias)?;
        }
        let w = g.softmax(scores, key_mask)?;
        contexts.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let ctx = if contexts.len() == 1 {
        contexts[0]
    } else {
        g.concat_cols(&contexts)?
    };
    let out = linear(g, &format!("{prefix}.o"), ctx)?;
    Ok(Attention { out, weights })
}

pub fn feed_forward<T: Real>(g: &mut Graph<T>, prefix: &str, x: Var, activation: Activation) -> Result<Var> {
    let h = linear(g, &format!("{prefix}.fc1"), x)?;
    let h = match activation {
        Activation::Gelu => g.gelu(h),
        Activation::Linear => h,
    };
    linear(g, &format!("{prefix}.fc2"), h)
}

/// Post-norm encoder block: `x' = LN(x + Attn(x))`, `out = LN(x' + FFN(x'))`.
pub fn encoder_block<T: Real>(
    g: &mut Graph<T>,
    prefix: &str,
    x: Var,
    cfg: &BlockConfig,
    key_mask: Option<&[bool]>,
    dropout: &mut Dropout,
) -> Result<Var> {
    let att = multi_head_attention(g, &format!("{prefix}.attn"), x, x, cfg, key_mask)?;
    let a = dropout.apply(g, att.out)?;
    let x1 = g.add(x, a)?;
    let x1 = layer_norm(g, &format!("{prefix}.ln1"), x1)?;
    let f = feed_forward(g, &format!("{prefix}.ffn"), x1, cfg.activation)?;
    let f = dropout.apply(g, f)?;
    let x2 = g.add(x1, f)?;
    layer_norm(g, &format!("{prefix}.ln2"), x2)
}

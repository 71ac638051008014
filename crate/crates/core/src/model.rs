//! The matching network: speech encoder over posteriorgrams, knowledge encoder
//! over entity phonemes, and a bridge of cross-attention blocks whose softmax
//! head predicts the entity phonemes from the speech memory.
//!
//! The bridge has no residual path from its query (the knowledge memory): the
//! knowledge side can only select what to read from speech, never copy itself
//! to the output.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::layers::{
    encoder_block, feed_forward, init_attention, init_encoder_block, init_feed_forward, init_layer_norm, init_linear,
    layer_norm, linear, multi_head_attention, Activation, BlockConfig, Dropout,
};
use crate::neural::{Graph, ParamStore, Real, Tensor, Var};
use crate::phoneme::{Posteriorgram, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub layers_speech: usize,
    pub layers_knowledge: usize,
    pub layers_bridge: usize,
    pub max_speech_len: usize,
    pub max_slot_len: usize,
    pub rel_clip: usize,
    pub dropout: f64,
    /// Inventory size, PAD and BLANK included.
    pub vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 576,
            intermediate: 1600,
            heads: 8,
            layers_speech: 4,
            layers_knowledge: 4,
            layers_bridge: 2,
            max_speech_len: 40,
            max_slot_len: 10,
            rel_clip: 8,
            dropout: 0.1,
            vocab: 62,
        }
    }
}

impl ModelConfig {
    /// Small preset that trains on a laptop CPU.
    pub fn desk() -> Self {
        ModelConfig {
            hidden: 64,
            intermediate: 128,
            heads: 4,
            layers_speech: 2,
            layers_knowledge: 2,
            layers_bridge: 1,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("hidden", self.hidden),
            ("intermediate", self.intermediate),
            ("heads", self.heads),
            ("layers_speech", self.layers_speech),
            ("layers_knowledge", self.layers_knowledge),
            ("layers_bridge", self.layers_bridge),
            ("max_speech_len", self.max_speech_len),
            ("max_slot_len", self.max_slot_len),
            ("rel_clip", self.rel_clip),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.vocab < 3 {
            return Err(Error::Config("model.vocab must cover PAD, BLANK and a phoneme".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("model.dropout must lie in [0, 1)".into()));
        }
        self.encoder_block().validate()
    }

    pub fn encoder_block(&self) -> BlockConfig {
        BlockConfig {
            hidden: self.hidden,
            heads: self.heads,
            intermediate: self.intermediate,
            rel_clip: Some(self.rel_clip),
            activation: Activation::Gelu,
        }
    }

    pub fn bridge_block(&self) -> BlockConfig {
        BlockConfig {
            rel_clip: None,
            ..self.encoder_block()
        }
    }
}

const EMBED_SCALE: f64 = 1.0;

fn init_knowledge_into<T: Real>(ps: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    ps.insert_uniform("knowledge.embed", &[cfg.vocab, cfg.hidden], EMBED_SCALE, rng)?;
    let blk = cfg.encoder_block();
    for l in 0..cfg.layers_knowledge {
        init_encoder_block(ps, &format!("knowledge.layer{l}"), &blk, rng)?;
    }
    Ok(())
}

/// Full parameter set. Names are grouped under `speech.`, `knowledge.` and `bridge.`.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new(seed);
    ps.insert_uniform("speech.embed", &[cfg.vocab, cfg.hidden], EMBED_SCALE, &mut rng)?;
    let blk = cfg.encoder_block();
    for l in 0..cfg.layers_speech {
        init_encoder_block(&mut ps, &format!("speech.layer{l}"), &blk, &mut rng)?;
    }
    init_linear(&mut ps, "speech.mask_head", cfg.hidden, cfg.vocab, &mut rng)?;
    init_knowledge_into(&mut ps, cfg, &mut rng)?;
    let bb = cfg.bridge_block();
    for l in 0..cfg.layers_bridge {
        let p = format!("bridge.layer{l}");
        init_attention(&mut ps, &format!("{p}.attn"), &bb, &mut rng)?;
        init_layer_norm(&mut ps, &format!("{p}.ln1"), cfg.hidden)?;
        init_feed_forward(&mut ps, &format!("{p}.ffn"), &bb, &mut rng)?;
        init_layer_norm(&mut ps, &format!("{p}.ln2"), cfg.hidden)?;
    }
    init_linear(&mut ps, "bridge.out", cfg.hidden, cfg.vocab, &mut rng)?;
    Ok(ps)
}

/// Knowledge encoder plus a reconstruction head, for pretraining on the entity db.
pub fn init_knowledge_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4b4e_4f57);
    let mut ps = ParamStore::new(seed);
    init_knowledge_into(&mut ps, cfg, &mut rng)?;
    init_linear(&mut ps, "knowledge.mlm_head", cfg.hidden, cfg.vocab, &mut rng)?;
    Ok(ps)
}

/// Frames to hide for the masked-frame objective: 10-15% of `t`, at least one.
pub fn mask_frames(t: usize, rng: &mut impl Rng) -> Vec<usize> {
    if t == 0 {
        return Vec::new();
    }
    let f: f64 = rng.gen_range(0.10..=0.15);
    let count = ((f * t as f64).round() as usize).clamp(1, t);
    let mut idx = sample(rng, t, count).into_vec();
    idx.sort_unstable();
    idx
}

/// Speech encoder input: posterior rows, optionally padded with PAD rows, with
/// `masked` rows replaced by one-hot PAD.
#[derive(Debug, Clone)]
pub struct SpeechInput<T: Real> {
    pub frames: Tensor<T>,
    /// `true` for real frames, `false` for padding.
    pub frame_mask: Vec<bool>,
    pub masked: Vec<usize>,
}

impl<T: Real> SpeechInput<T> {
    pub fn new(pg: &Posteriorgram, masked: &[usize], pad_to: Option<usize>) -> Result<Self> {
        let t = pg.num_frames();
        let v = pg.num_phonemes();
        let total = pad_to.unwrap_or(t).max(t);
        if let Some(&bad) = masked.iter().find(|&&i| i >= t) {
            return Err(Error::Shape(format!("mask index {bad} outside {t} frames")));
        }
        let mut data = Vec::with_capacity(total * v);
        for r in 0..total {
            if r < t && !masked.contains(&r) {
                data.extend(pg.row(r).iter().map(|&x| T::of(x as f64)));
            } else {
                data.extend((0..v).map(|c| if c == PAD { T::one() } else { T::zero() }));
            }
        }
        Ok(SpeechInput {
            frames: Tensor::new(vec![total, v], data)?,
            frame_mask: (0..total).map(|r| r < t).collect(),
            masked: masked.to_vec(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

pub struct SpeechMemory {
    pub hidden: Var,
    pub frame_mask: Vec<bool>,
    /// One row of V-way logits per masked frame, in `SpeechInput::masked` order.
    pub mask_logits: Option<Var>,
}

impl SpeechMemory {
    fn key_mask(&self) -> Option<&[bool]> {
        if self.frame_mask.iter().all(|&m| m) {
            None
        } else {
            Some(&self.frame_mask)
        }
    }
}

pub fn speech_encode<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    input: &SpeechInput<T>,
    dropout: &mut Dropout,
) -> Result<SpeechMemory> {
    let t = input.num_frames();
    if t == 0 || t > cfg.max_speech_len {
        return Err(Error::Shape(format!(
            "{t} frames, the speech encoder accepts 1..={}",
            cfg.max_speech_len
        )));
    }
    if input.frames.cols() != cfg.vocab {
        return Err(Error::Shape(format!(
            "posteriorgram has {} phonemes, model expects {}",
            input.frames.cols(),
            cfg.vocab
        )));
    }
    let x = g.input(input.frames.clone());
    let embed = g.param("speech.embed")?;
    let mut h = g.matmul(x, embed)?;
    let blk = cfg.encoder_block();
    let all_real = input.frame_mask.iter().all(|&m| m);
    let key_mask = (!all_real).then_some(input.frame_mask.as_slice());
    for l in 0..cfg.layers_speech {
        h = encoder_block(g, &format!("speech.layer{l}"), h, &blk, key_mask, dropout)?;
    }
    let mask_logits = if input.masked.is_empty() {
        None
    } else {
        let hm = g.gather_rows(h, &input.masked)?;
        Some(linear(g, "speech.mask_head", hm)?)
    };
    Ok(SpeechMemory {
        hidden: h,
        frame_mask: input.frame_mask.clone(),
        mask_logits,
    })
}

/// Speech memory of the same shape with every hidden state set to zero.
pub fn zero_speech_memory<T: Real>(g: &mut Graph<T>, sm: &SpeechMemory) -> SpeechMemory {
    let shape = g.value(sm.hidden).shape().to_vec();
    SpeechMemory {
        hidden: g.input(Tensor::zeros(&shape)),
        frame_mask: sm.frame_mask.clone(),
        mask_logits: None,
    }
}

pub fn knowledge_encode<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    phonemes: &[usize],
    dropout: &mut Dropout,
) -> Result<Var> {
    if phonemes.is_empty() || phonemes.len() > cfg.max_slot_len {
        return Err(Error::Shape(format!(
            "entity of length {}, the knowledge encoder accepts 1..={}",
            phonemes.len(),
            cfg.max_slot_len
        )));
    }
    let embed = g.param("knowledge.embed")?;
    let mut h = g.gather_rows(embed, phonemes)?;
    let blk = cfg.encoder_block();
    for l in 0..cfg.layers_knowledge {
        h = encoder_block(g, &format!("knowledge.layer{l}"), h, &blk, None, dropout)?;
    }
    Ok(h)
}

/// Bridge output after the last block, before the softmax head.
pub fn bridge_hidden<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    km: Var,
    sm: &SpeechMemory,
    key_mask: Option<&[bool]>,
    dropout: &mut Dropout,
) -> Result<Var> {
    if g.value(km).cols() != cfg.hidden || g.value(sm.hidden).cols() != cfg.hidden {
        return Err(Error::Shape("memories do not match the model hidden size".into()));
    }
    let key_mask = key_mask.or_else(|| sm.key_mask());
    let bb = cfg.bridge_block();
    let mut h = km;
    for l in 0..cfg.layers_bridge {
        let p = format!("bridge.layer{l}");
        let att = multi_head_attention(g, &format!("{p}.attn"), h, sm.hidden, &bb, key_mask)?;
        let a = dropout.apply(g, att.out)?;
        // no residual from `h` here
        h = layer_norm(g, &format!("{p}.ln1"), a)?;
        let f = feed_forward(g, &format!("{p}.ffn"), h, bb.activation)?;
        let f = dropout.apply(g, f)?;
        let r = g.add(h, f)?;
        h = layer_norm(g, &format!("{p}.ln2"), r)?;
    }
    Ok(h)
}

/// Per-position phoneme logits `L×V`.
pub fn bridge_forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    km: Var,
    sm: &SpeechMemory,
    key_mask: Option<&[bool]>,
    dropout: &mut Dropout,
) -> Result<Var> {
    let h = bridge_hidden(g, cfg, km, sm, key_mask, dropout)?;
    linear(g, "bridge.out", h)
}

/// Mean log-probability of `phonemes` under `logits`, as a 1×1 node.
pub fn score_from_logits<T: Real>(g: &mut Graph<T>, logits: Var, phonemes: &[usize]) -> Result<Var> {
    let lp = g.log_softmax(logits);
    let picked = g.pick(lp, phonemes)?;
    Ok(g.mean(picked))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScoreOptions {
    /// Replace the speech memory by zeros (leakage probe).
    pub zero_speech: bool,
    /// Restrict bridge attention to this inclusive frame range.
    pub span: Option<(usize, usize)>,
}

fn span_mask(t: usize, span: (usize, usize)) -> Vec<bool> {
    (0..t).map(|i| i >= span.0 && i <= span.1).collect()
}

/// Eval-mode scores of `candidates` against one utterance.
pub fn score_candidates<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    pg: &Posteriorgram,
    candidates: &[&[usize]],
    opts: &ScoreOptions,
) -> Result<Vec<T>> {
    let mut g = Graph::new(params);
    let mut off = Dropout::eval();
    let input = SpeechInput::new(pg, &[], None)?;
    let mut sm = speech_encode(&mut g, cfg, &input, &mut off)?;
    if opts.zero_speech {
        sm = zero_speech_memory(&mut g, &sm);
    }
    let key_mask = match opts.span {
        Some(s) if s.0 <= s.1 && s.1 < input.num_frames() => Some(span_mask(input.num_frames(), s)),
        Some(s) => return Err(Error::Shape(format!("span {s:?} outside the utterance"))),
        None => None,
    };
    candidates
        .iter()
        .map(|ph| {
            let km = knowledge_encode(&mut g, cfg, ph, &mut off)?;
            let logits = bridge_forward(&mut g, cfg, km, &sm, key_mask.as_deref(), &mut off)?;
            let s = score_from_logits(&mut g, logits, ph)?;
            Ok(g.scalar(s))
        })
        .collect()
}

/// Score of a single candidate plus its per-position log-probabilities.
pub fn score_candidate<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    pg: &Posteriorgram,
    phonemes: &[usize],
) -> Result<(T, Vec<T>)> {
    let mut g = Graph::new(params);
    let mut off = Dropout::eval();
    let input = SpeechInput::new(pg, &[], None)?;
    let sm = speech_encode(&mut g, cfg, &input, &mut off)?;
    let km = knowledge_encode(&mut g, cfg, phonemes, &mut off)?;
    let logits = bridge_forward(&mut g, cfg, km, &sm, None, &mut off)?;
    let lp = g.log_softmax(logits);
    let picked = g.pick(lp, phonemes)?;
    let per: Vec<T> = g.value(picked).data().to_vec();
    let m = g.mean(picked);
    Ok((g.scalar(m), per))
}

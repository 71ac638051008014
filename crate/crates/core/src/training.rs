//! Joint optimization of the matching loss and the masked-frame loss, plus
//! optional knowledge-encoder pretraining by masked-phoneme reconstruction.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    bridge_forward, init_knowledge_params, init_params, knowledge_encode, mask_frames, score_candidates,
    score_from_logits, speech_encode, ModelConfig, ScoreOptions, SpeechInput,
};
use crate::neural::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::neural::layers::{linear, Dropout};
use crate::neural::{adam_step, AdamConfig, Grads, Graph, ParamStore, Real, Targets, Tensor, Var};
use crate::phoneme::{EntityDb, Posteriorgram, PAD};
use crate::synth::{mix_seed, LoadedSample};
use crate::trie::collapse_path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub mask_loss_weight: f64,
    /// Random distractor entities per sample for the candidate-softmax term; 0 disables it.
    pub negatives: usize,
    /// Extra distractors cut from the utterance's own decoded phonemes (near
    /// misses such as sub-spans of the slot).
    pub hard_negatives: usize,
    pub freeze_knowledge: bool,
    pub seed: u64,
    /// Share of the training samples held out to calibrate the score threshold.
    pub calib_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-5,
            epochs: 20,
            batch: 16,
            mask_loss_weight: 1.0,
            negatives: 4,
            hard_negatives: 4,
            freeze_knowledge: false,
            seed: 0,
            calib_fraction: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            lr: 3e-4,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be at least 1".into()));
        }
        if self.mask_loss_weight.is_nan() || self.mask_loss_weight < 0.0 {
            return Err(Error::Config("train.mask_loss_weight must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.calib_fraction) {
            return Err(Error::Config("train.calib_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Nodes of one sample's loss.
pub struct LossParts {
    pub total: Var,
    pub matching: Var,
    pub mask: Option<Var>,
    pub gold_logits: Var,
    pub gold_score: Var,
    pub negative_scores: Vec<Var>,
}

/// `L_match`: per-position cross entropy of the gold phonemes, plus the
/// candidate-softmax cross entropy when negative scores are given.
pub fn matching_loss<T: Real>(
    g: &mut Graph<T>,
    gold_logits: Var,
    gold: &[usize],
    gold_score: Var,
    negative_scores: &[Var],
) -> Result<Var> {
    let ce = g.cross_entropy(gold_logits, Targets::Hard(gold.to_vec()), None)?;
    if negative_scores.is_empty() {
        return Ok(ce);
    }
    let mut all = vec![gold_score];
    all.extend_from_slice(negative_scores);
    let row = g.concat_cols(&all)?;
    let cand = g.cross_entropy(row, Targets::Hard(vec![0]), None)?;
    g.add(ce, cand)
}

/// `L_mask`: soft-target cross entropy between masked-frame logits and the original rows.
pub fn mask_loss<T: Real>(g: &mut Graph<T>, logits: Var, pg: &Posteriorgram, masked: &[usize]) -> Result<Var> {
    let v = pg.num_phonemes();
    let mut data = Vec::with_capacity(masked.len() * v);
    for &t in masked {
        data.extend(pg.row(t).iter().map(|&x| T::of(x as f64)));
    }
    let target = Tensor::new(vec![masked.len(), v], data)?;
    g.cross_entropy(logits, Targets::Soft(target), None)
}

/// Builds the full training loss of one utterance.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    pg: &Posteriorgram,
    gold: &[usize],
    negatives: &[&[usize]],
    masked: &[usize],
    dropout: &mut Dropout,
) -> Result<LossParts> {
    let input = SpeechInput::new(pg, masked, None)?;
    let sm = speech_encode(g, cfg, &input, dropout)?;
    let km = knowledge_encode(g, cfg, gold, dropout)?;
    let gold_logits = bridge_forward(g, cfg, km, &sm, None, dropout)?;
    let gold_score = score_from_logits(g, gold_logits, gold)?;
    let mut negative_scores = Vec::with_capacity(negatives.len());
    for neg in negatives {
        let kn = knowledge_encode(g, cfg, neg, dropout)?;
        let ln = bridge_forward(g, cfg, kn, &sm, None, dropout)?;
        negative_scores.push(score_from_logits(g, ln, neg)?);
    }
    let matching = matching_loss(g, gold_logits, gold, gold_score, &negative_scores)?;
    let (total, mask) = match sm.mask_logits {
        Some(logits) if tcfg.mask_loss_weight > 0.0 => {
            let lm = mask_loss(g, logits, pg, masked)?;
            let weighted = g.scale(lm, T::of(tcfg.mask_loss_weight));
            (g.add(matching, weighted)?, Some(lm))
        }
        _ => (matching, None),
    };
    Ok(LossParts {
        total,
        matching,
        mask,
        gold_logits,
        gold_score,
        negative_scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub matching_loss: f64,
    pub mask_loss: f64,
    /// Share of samples whose gold score beats every sampled distractor
    /// (greedy per-position decoding when no distractors are drawn).
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: u64,
    pub train_samples: usize,
    pub calibration_samples: usize,
    /// Score threshold; `None` when no samples were held out.
    pub threshold: Option<f64>,
    pub wall_time_s: f64,
}

struct StepResult {
    grads: Grads<f32>,
    matching: f64,
    mask: f64,
    correct: bool,
}

fn per_sample_rng(seed: u64, epoch: usize, idx: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, epoch as u64 + 1), idx as u64))
}

/// `n` distinct entities drawn uniformly from `pool`, never the gold entity.
fn draw_negatives(rng: &mut ChaCha8Rng, pool: &[usize], gold: usize, n: usize) -> Vec<usize> {
    let others = pool.iter().filter(|&&e| e != gold).count();
    let n = n.min(others);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let e = pool[rng.gen_range(0..pool.len())];
        if e != gold && !out.contains(&e) {
            out.push(e);
        }
    }
    out
}

/// Near-miss distractors cut from the utterance's own decoded phonemes: up to
/// `n` distinct windows that differ from `gold`, preferring windows that share
/// a phoneme with it.
pub fn window_negatives(
    rng: &mut ChaCha8Rng,
    decoded: &[usize],
    gold: &[usize],
    max_len: usize,
    n: usize,
) -> Vec<Vec<usize>> {
    let mut windows: Vec<&[usize]> = Vec::new();
    for i in 0..decoded.len() {
        for j in i + 1..=decoded.len().min(i + max_len) {
            let w = &decoded[i..j];
            if w != gold && !windows.contains(&w) {
                windows.push(w);
            }
        }
    }
    let overlapping: Vec<&[usize]> = windows
        .iter()
        .copied()
        .filter(|w| w.iter().any(|p| gold.contains(p)))
        .collect();
    let src = if overlapping.len() >= n { overlapping } else { windows };
    let take = n.min(src.len());
    sample(rng, src.len(), take)
        .into_iter()
        .map(|i| src[i].to_vec())
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    db: &EntityDb,
    pool: &[usize],
    decoded: &[usize],
    s: &LoadedSample,
    epoch: usize,
    idx: usize,
) -> Result<StepResult> {
    let mut rng = per_sample_rng(tcfg.seed, epoch, idx);
    let masked = if tcfg.mask_loss_weight > 0.0 {
        mask_frames(s.pg.num_frames(), &mut rng)
    } else {
        Vec::new()
    };
    let negs = draw_negatives(&mut rng, pool, s.entity, tcfg.negatives);
    let gold = &db.entities()[s.entity].phonemes;
    let windows = window_negatives(&mut rng, decoded, gold, cfg.max_slot_len, tcfg.hard_negatives);
    let mut neg_ph: Vec<&[usize]> = negs.iter().map(|&e| db.entities()[e].phonemes.as_slice()).collect();
    neg_ph.extend(windows.iter().map(Vec::as_slice));
    let mut dropout = Dropout::train(cfg.dropout, ChaCha8Rng::seed_from_u64(rng.gen()));
    let mut g = Graph::new(params);
    let parts = sample_loss(&mut g, cfg, tcfg, &s.pg, gold, &neg_ph, &masked, &mut dropout)?;
    let matching = g.scalar(parts.matching) as f64;
    let mask = parts.mask.map_or(0.0, |m| g.scalar(m) as f64);
    let correct = if parts.negative_scores.is_empty() {
        let logits = g.value(parts.gold_logits);
        (0..logits.rows()).all(|l| {
            let row = logits.row(l);
            let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)));
            best == Some(gold[l])
        })
    } else {
        let gs = g.scalar(parts.gold_score);
        parts.negative_scores.iter().all(|&n| g.scalar(n) < gs)
    };
    let total = g.scalar(parts.total);
    if !total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss on sample '{}' in epoch {epoch}",
            s.sample.id
        )));
    }
    let grads = g.backward(parts.total)?;
    Ok(StepResult {
        grads,
        matching,
        mask,
        correct,
    })
}

/// Nearest-rank percentile of `values` (`q` in [0, 1]).
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

pub const THRESHOLD_PERCENTILE: f64 = 0.05;

/// Trains on `samples`; `init` (e.g. a pretrained knowledge encoder) overrides
/// the matching parameters of the fresh initialization.
pub fn train(
    samples: &[LoadedSample],
    db: &EntityDb,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    init: Option<&ParamStore<f32>>,
) -> Result<(ParamStore<f32>, TrainReport)> {
    let t0 = Instant::now();
    cfg.validate()?;
    tcfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("the training split is empty".into()));
    }
    let mut params: ParamStore<f32> = init_params(cfg, tcfg.seed)?;
    if let Some(src) = init {
        params.load_matching(src)?;
    }
    if tcfg.freeze_knowledge {
        params.set_frozen("knowledge.", true);
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(tcfg.seed, 0xCA1B)));
    let n_calib = (samples.len() as f64 * tcfg.calib_fraction).round() as usize;
    let n_calib = if samples.len() > 1 {
        n_calib.min(samples.len() - 1)
    } else {
        0
    };
    let (calib_idx, train_idx) = order.split_at(n_calib);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let pool: Vec<usize> = train_idx
        .iter()
        .map(|&i| samples[i].entity)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let decoded: Vec<Vec<usize>> = if tcfg.hard_negatives > 0 {
        samples.par_iter().map(|s| collapse_path(&s.pg, 1).phonemes()).collect()
    } else {
        vec![Vec::new(); samples.len()]
    };

    let adam = tcfg.adam();
    let mut step: u64 = 0;
    let mut epochs = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let mut ord = train_idx.clone();
        ord.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            tcfg.seed,
            0xE90C + epoch as u64,
        )));
        let (mut sum_match, mut sum_mask, mut correct) = (0.0, 0.0, 0usize);
        for batch in ord.chunks(tcfg.batch) {
            let results: Vec<Result<StepResult>> = batch
                .par_iter()
                .map(|&i| train_step(&params, cfg, tcfg, db, &pool, &decoded[i], &samples[i], epoch, i))
                .collect();
            let mut total = Grads::empty(params.len());
            for r in results {
                let r = r.map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("{m} (step {})", step + 1)),
                    other => other,
                })?;
                total.add(&r.grads);
                sum_match += r.matching;
                sum_mask += r.mask;
                correct += usize::from(r.correct);
            }
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in epoch {epoch}, step {}",
                    step + 1
                )));
            }
            params.zero_grads();
            params.accumulate(&total, 1.0 / batch.len() as f32);
            step += 1;
            adam_step(&mut params, &adam, step)?;
            params.clear_grads();
        }
        let n = ord.len() as f64;
        epochs.push(EpochStats {
            epoch,
            matching_loss: sum_match / n,
            mask_loss: sum_mask / n,
            train_accuracy: correct as f64 / n,
        });
    }

    let gold_scores: Vec<f64> = calib_idx
        .par_iter()
        .map(|&i| {
            let s = &samples[i];
            let ph = db.entities()[s.entity].phonemes.as_slice();
            score_candidates(&params, cfg, &s.pg, &[ph], &ScoreOptions::default()).map(|v| v[0] as f64)
        })
        .collect::<Result<_>>()?;
    let report = TrainReport {
        epochs,
        steps: step,
        train_samples: train_idx.len(),
        calibration_samples: calib_idx.len(),
        threshold: percentile(&gold_scores, THRESHOLD_PERCENTILE),
        wall_time_s: t0.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

/// Number of positions hidden per entity during knowledge pretraining.
pub fn pretrain_mask_count(len: usize) -> usize {
    ((0.15 * len as f64).round() as usize).clamp(1, len.max(1))
}

/// Masked-phoneme reconstruction loss of one entity.
pub fn knowledge_mlm_loss<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    phonemes: &[usize],
    masked: &[usize],
    dropout: &mut Dropout,
) -> Result<Var> {
    let mut input = phonemes.to_vec();
    for &m in masked {
        input[m] = PAD;
    }
    let h = knowledge_encode(g, cfg, &input, dropout)?;
    let hm = g.gather_rows(h, masked)?;
    let logits = linear(g, "knowledge.mlm_head", hm)?;
    let targets = masked.iter().map(|&m| phonemes[m]).collect();
    g.cross_entropy(logits, Targets::Hard(targets), None)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    /// Mean reconstruction loss per epoch.
    pub losses: Vec<f64>,
    /// Loss of the initial parameters under the evaluation mask.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub wall_time_s: f64,
}

fn eval_masks(db: &EntityDb, seed: u64) -> Vec<Vec<usize>> {
    db.iter()
        .enumerate()
        .map(|(i, e)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ 0xE7A1, i as u64));
            let mut m = sample(&mut rng, e.phonemes.len(), pretrain_mask_count(e.phonemes.len())).into_vec();
            m.sort_unstable();
            m
        })
        .collect()
}

fn mlm_eval(params: &ParamStore<f32>, cfg: &ModelConfig, db: &EntityDb, masks: &[Vec<usize>]) -> Result<f64> {
    let losses: Vec<f64> = db
        .entities()
        .par_iter()
        .zip(masks)
        .map(|(e, m)| {
            let mut g = Graph::new(params);
            let l = knowledge_mlm_loss(&mut g, cfg, &e.phonemes, m, &mut Dropout::eval())?;
            Ok(g.scalar(l) as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Pretrains the knowledge encoder on every entity of the db.
pub fn pretrain_knowledge(
    db: &EntityDb,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(ParamStore<f32>, PretrainReport)> {
    let t0 = Instant::now();
    cfg.validate()?;
    tcfg.validate()?;
    if db.is_empty() {
        return Err(Error::Data("the entity db is empty".into()));
    }
    let mut params: ParamStore<f32> = init_knowledge_params(cfg, tcfg.seed)?;
    let masks = eval_masks(db, tcfg.seed);
    let initial_loss = mlm_eval(&params, cfg, db, &masks)?;
    let adam = tcfg.adam();
    let mut step = 0u64;
    let mut losses = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let mut ord: Vec<usize> = (0..db.len()).collect();
        ord.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            tcfg.seed,
            0x9E7 + epoch as u64,
        )));
        let mut sum = 0.0;
        for batch in ord.chunks(tcfg.batch) {
            let results: Vec<Result<(f64, Grads<f32>)>> = batch
                .par_iter()
                .map(|&i| {
                    let e = &db.entities()[i];
                    let mut rng = per_sample_rng(tcfg.seed, epoch, i);
                    let l = e.phonemes.len();
                    let mut m = sample(&mut rng, l, pretrain_mask_count(l)).into_vec();
                    m.sort_unstable();
                    let mut dropout = Dropout::train(cfg.dropout, ChaCha8Rng::seed_from_u64(rng.gen()));
                    let mut g = Graph::new(&params);
                    let loss = knowledge_mlm_loss(&mut g, cfg, &e.phonemes, &m, &mut dropout)?;
                    let v = g.scalar(loss) as f64;
                    if !v.is_finite() {
                        return Err(Error::Numerical(format!(
                            "non-finite pretraining loss on entity '{}' in epoch {epoch}",
                            e.id
                        )));
                    }
                    Ok((v, g.backward(loss)?))
                })
                .collect();
            let mut total = Grads::empty(params.len());
            for r in results {
                let (v, gr) = r?;
                sum += v;
                total.add(&gr);
            }
            params.zero_grads();
            params.accumulate(&total, 1.0 / batch.len() as f32);
            step += 1;
            adam_step(&mut params, &adam, step)?;
            params.clear_grads();
        }
        losses.push(sum / db.len() as f64);
    }
    let final_loss = mlm_eval(&params, cfg, db, &masks)?;
    Ok((
        params,
        PretrainReport {
            losses,
            initial_loss,
            final_loss,
            wall_time_s: t0.elapsed().as_secs_f64(),
        },
    ))
}

/// Finite-difference check of the full training loss (matching, two
/// distractors, masked-frame reconstruction) in 64-bit with dropout off, on a
/// random soft posteriorgram. Relative-position tables start at zero, so they
/// are jittered first to keep the check away from that symmetric point.
pub fn model_grad_check(cfg: &ModelConfig, seed: u64, coords_per_param: usize) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6C));
    let v = cfg.vocab;
    let t = cfg.max_speech_len.min(12);
    let rows: Vec<Vec<f32>> = (0..t)
        .map(|_| {
            let r: Vec<f64> = (0..v).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = r.iter().sum();
            r.iter().map(|x| (x / s) as f32).collect()
        })
        .collect();
    let pg = Posteriorgram::new(Tensor::from_rows(&rows))?;
    let mut phonemes = |n: usize| -> Vec<usize> { (0..n).map(|_| rng.gen_range(2..v)).collect() };
    let len = cfg.max_slot_len.min(4);
    let gold = phonemes(len);
    let negs = [phonemes(len), phonemes(len.saturating_sub(1).max(1))];
    let neg_refs: Vec<&[usize]> = negs.iter().map(|n| n.as_slice()).collect();
    let masked = mask_frames(t, &mut rng);
    let tcfg = TrainConfig {
        negatives: negs.len(),
        ..TrainConfig::desk()
    };
    let mut ps: ParamStore<f64> = init_params(cfg, seed)?;
    for (name, p) in ps.iter_mut() {
        if name.ends_with(".rel") {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = rng.gen_range(-0.1..0.1));
        }
    }
    grad_check(
        &mut ps,
        |ps| {
            let mut g = Graph::new(ps);
            let parts = sample_loss(&mut g, cfg, &tcfg, &pg, &gold, &neg_refs, &masked, &mut Dropout::eval())?;
            Ok((g.scalar(parts.total), g.backward(parts.total)?))
        },
        &GradCheckConfig {
            seed,
            coords_per_param,
            ..Default::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phoneme::{Entity, PhonemeInventory};

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            intermediate: 12,
            heads: 2,
            layers_speech: 1,
            layers_knowledge: 1,
            layers_bridge: 1,
            rel_clip: 2,
            vocab: 10,
            dropout: 0.0,
            ..ModelConfig::desk()
        }
    }

    fn pg(rows: &[&[f32]]) -> Posteriorgram {
        Posteriorgram::new(Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())).unwrap()
    }

    fn soft_pg(t: usize, v: usize, seed: u64) -> Posteriorgram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f32>> = (0..t)
            .map(|_| {
                let r: Vec<f64> = (0..v).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = r.iter().sum();
                r.iter().map(|x| (x / s) as f32).collect()
            })
            .collect();
        Posteriorgram::new(Tensor::from_rows(&rows)).unwrap()
    }

    #[test]
    fn forced_gold_logits_give_zero_loss() {
        let ps = ParamStore::<f64>::new(0);
        let mut g = Graph::new(&ps);
        let gold = [2usize, 5];
        let neg = [3usize, 4];
        let mut data = vec![0.0; 2 * 10];
        for (l, &p) in gold.iter().enumerate() {
            data[l * 10 + p] = 1e3;
        }
        let logits = g.input(Tensor::new(vec![2, 10], data).unwrap());
        let gs = score_from_logits(&mut g, logits, &gold).unwrap();
        let ns = score_from_logits(&mut g, logits, &neg).unwrap();
        let plain = matching_loss(&mut g, logits, &gold, gs, &[]).unwrap();
        assert!(g.scalar(plain).abs() < 1e-9);
        let with_neg = matching_loss(&mut g, logits, &gold, gs, &[ns]).unwrap();
        assert!(g.scalar(with_neg).abs() < 1e-9);
    }

    #[test]
    fn no_negatives_is_plain_cross_entropy() {
        let ps = ParamStore::<f64>::new(0);
        let mut g = Graph::new(&ps);
        let data: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let logits = g.input(Tensor::new(vec![3, 10], data).unwrap());
        let gold = [2usize, 3, 9];
        let gs = score_from_logits(&mut g, logits, &gold).unwrap();
        let m = matching_loss(&mut g, logits, &gold, gs, &[]).unwrap();
        let ce = g.cross_entropy(logits, Targets::Hard(gold.to_vec()), None).unwrap();
        assert_eq!(g.scalar(m), g.scalar(ce));
        // and equals minus the score
        assert!((g.scalar(m) + g.scalar(gs)).abs() < 1e-12);
    }

    #[test]
    fn mask_loss_bounded_by_target_entropy() {
        let cfg = tiny();
        let ps: ParamStore<f64> = init_params(&cfg, 3).unwrap();
        let p = soft_pg(12, 10, 1);
        let masked = [1usize, 4, 7];
        let mut g = Graph::new(&ps);
        let input = SpeechInput::new(&p, &masked, None).unwrap();
        let sm = speech_encode(&mut g, &cfg, &input, &mut Dropout::eval()).unwrap();
        let lm = mask_loss(&mut g, sm.mask_logits.unwrap(), &p, &masked).unwrap();
        let entropy: f64 = masked
            .iter()
            .map(|&t| -p.row(t).iter().map(|&x| x as f64 * (x as f64).ln()).sum::<f64>())
            .sum::<f64>()
            / 3.0;
        assert!(g.scalar(lm) >= entropy - 1e-6);
        assert!(g.scalar(lm) >= 0.0);
    }

    #[test]
    fn full_loss_gradient_check() {
        let cfg = tiny();
        let tcfg = TrainConfig {
            negatives: 2,
            ..TrainConfig::desk()
        };
        let p = soft_pg(7, 10, 2);
        let gold = [2usize, 6, 3];
        let negs: Vec<&[usize]> = vec![&[4, 5], &[7, 8, 9, 2]];
        let masked = [1usize, 5];
        for seed in 0..2 {
            let mut ps: ParamStore<f64> = init_params(&cfg, seed).unwrap();
            for l in 0..cfg.layers_speech {
                if let Some(t) = ps.get_mut(&format!("speech.layer{l}.attn.rel")) {
                    t.data_mut()
                        .iter_mut()
                        .enumerate()
                        .for_each(|(i, v)| *v = 0.05 * (i as f64).cos());
                }
            }
            let report = grad_check(
                &mut ps,
                |ps| {
                    let mut g = Graph::new(ps);
                    let parts = sample_loss(&mut g, &cfg, &tcfg, &p, &gold, &negs, &masked, &mut Dropout::eval())?;
                    Ok((g.scalar(parts.total), g.backward(parts.total)?))
                },
                &GradCheckConfig {
                    seed,
                    ..Default::default()
                },
            )
            .unwrap();
            assert!(report.passed(), "{:?} {}", report.flagged, report.max_rel_err);
        }
    }

    #[test]
    fn window_negatives_are_distinct_near_misses() {
        let decoded = [7usize, 8, 2, 3, 4, 9];
        let gold = [2usize, 3, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = window_negatives(&mut rng, &decoded, &gold, 3, 6);
        assert_eq!(w.len(), 6);
        for (i, x) in w.iter().enumerate() {
            assert_ne!(x.as_slice(), &gold);
            assert!(!x.is_empty() && x.len() <= 3);
            assert!(decoded.windows(x.len()).any(|d| d == x.as_slice()));
            assert!(x.iter().any(|p| gold.contains(p)));
            assert!(w[..i].iter().all(|y| y != x));
        }
        // only two windows in total besides the gold itself
        let w = window_negatives(&mut rng, &[2, 3], &[2, 3], 3, 5);
        assert_eq!(w.len(), 2);
    }

    #[test]
    fn model_grad_check_on_tiny_config() {
        let r = model_grad_check(&tiny(), 5, 4).unwrap();
        assert!(r.passed(), "{:?} {}", r.flagged, r.max_rel_err);
        assert!(r.params.iter().any(|p| p.name.ends_with(".rel")));
    }

    #[test]
    fn speech_parameters_receive_gradient() {
        let cfg = tiny();
        let tcfg = TrainConfig {
            mask_loss_weight: 0.0,
            negatives: 0,
            ..TrainConfig::desk()
        };
        let ps: ParamStore<f64> = init_params(&cfg, 4).unwrap();
        let p = soft_pg(6, 10, 3);
        let mut g = Graph::new(&ps);
        let parts = sample_loss(&mut g, &cfg, &tcfg, &p, &[2, 3], &[], &[], &mut Dropout::eval()).unwrap();
        let grads = g.backward(parts.total).unwrap();
        let idx = ps.require("speech.layer0.ffn.fc1.w").unwrap();
        let norm: f64 = grads.get(idx).unwrap().iter().map(|x| x * x).sum();
        assert!(norm > 0.0);
    }

    fn toy_set(n: usize) -> (EntityDb, Vec<LoadedSample>) {
        let inv = PhonemeInventory::synthetic(8).unwrap();
        let ents: Vec<Entity> = (0..4)
            .map(|i| Entity {
                id: format!("e{i}"),
                phonemes: vec![2 + i, 3 + i, 2 + (i + 3) % 8],
                surface: None,
            })
            .collect();
        let db = EntityDb::new(ents, &inv, 10).unwrap();
        let samples = (0..n)
            .map(|k| {
                let e = k % 4;
                let ph = &db.entities()[e].phonemes;
                let rows: Vec<Vec<f32>> = ph
                    .iter()
                    .map(|&p| {
                        (0..10)
                            .map(|c| {
                                if c == p {
                                    0.8
                                } else if c == 1 {
                                    0.2
                                } else {
                                    0.0
                                }
                            })
                            .collect()
                    })
                    .collect();
                let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
                LoadedSample {
                    sample: crate::synth::Sample {
                        id: format!("s{k}"),
                        posterior: String::new(),
                        slot_id: format!("e{e}"),
                        pattern_id: "p".into(),
                        split: crate::synth::Split::Train,
                        oov: false,
                    },
                    pg: pg(&refs),
                    entity: e,
                }
            })
            .collect();
        (db, samples)
    }

    #[test]
    fn training_is_deterministic_and_freezes() {
        let (db, samples) = toy_set(8);
        let cfg = ModelConfig { dropout: 0.1, ..tiny() };
        let tcfg = TrainConfig {
            epochs: 2,
            batch: 3,
            negatives: 2,
            freeze_knowledge: true,
            calib_fraction: 0.25,
            ..TrainConfig::desk()
        };
        let (a, ra) = train(&samples, &db, &cfg, &tcfg, None).unwrap();
        let (b, _) = train(&samples, &db, &cfg, &tcfg, None).unwrap();
        let init: ParamStore<f32> = init_params(&cfg, tcfg.seed).unwrap();
        for ((name, pa), (_, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(pa.value.data(), pb.value.data(), "{name}");
            if name.starts_with("knowledge.") {
                assert_eq!(pa.value.data(), init.get(name).unwrap().data(), "{name}");
            }
        }
        assert_ne!(
            a.get("bridge.out.w").unwrap().data(),
            init.get("bridge.out.w").unwrap().data()
        );
        assert_eq!(ra.calibration_samples, 2);
        assert!(ra.threshold.is_some());
        assert!(ra.epochs.iter().all(|e| e.matching_loss.is_finite()));
    }

    #[test]
    fn loss_decreases_on_one_repeated_sample() {
        let (db, samples) = toy_set(1);
        let cfg = ModelConfig {
            dropout: 0.0,
            ..ModelConfig::desk()
        };
        let cfg = ModelConfig { vocab: 10, ..cfg };
        let tcfg = TrainConfig {
            epochs: 50,
            batch: 1,
            calib_fraction: 0.0,
            ..TrainConfig::desk()
        };
        let (_, report) = train(&samples, &db, &cfg, &tcfg, None).unwrap();
        let losses: Vec<f64> = report.epochs.iter().map(|e| e.matching_loss).collect();
        assert!(losses.last().unwrap() < &(0.5 * losses[0]), "{losses:?}");
        assert_eq!(report.threshold, None);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.05), Some(5.0));
        assert_eq!(percentile(&[3.0], 0.05), Some(3.0));
        assert_eq!(percentile(&[], 0.05), None);
    }

    #[test]
    fn pretraining_reduces_loss_and_loads() {
        let (db, _) = toy_set(0);
        let cfg = tiny();
        let tcfg = TrainConfig {
            epochs: 30,
            batch: 2,
            ..TrainConfig::desk()
        };
        let (ps, report) = pretrain_knowledge(&db, &cfg, &tcfg).unwrap();
        assert!(report.final_loss < report.initial_loss);
        let mut full: ParamStore<f32> = init_params(&cfg, 1).unwrap();
        let n = full.load_matching(&ps).unwrap();
        assert_eq!(n, ps.len() - 2);
        assert_eq!(pretrain_mask_count(1), 1);
        assert_eq!(pretrain_mask_count(10), 2);
        assert_eq!(pretrain_mask_count(3), 1);
    }
}

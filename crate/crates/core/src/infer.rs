//! Test-time matching: trie detection, candidate scoring, argmax and the
//! confidence threshold.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{score_candidates, ModelConfig, ScoreOptions};
use crate::neural::checkpoint;
use crate::neural::ParamStore;
use crate::phoneme::{EntityDb, PhonemeInventory, Posteriorgram};
use crate::trie::{collapse_path, detect_spans, Trie, DEFAULT_EDIT_BUDGET, DEFAULT_MAX_CANDIDATES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub edit_budget: usize,
    pub max_candidates: usize,
    /// Alternatives per collapsed segment accepted by the detector at no cost.
    pub top_k: usize,
    /// Ranking uses `score - cost_weight * edit_cost`; 0 ranks by model score alone.
    pub cost_weight: f64,
    /// Let the bridge attend only to the detected span of each candidate.
    pub span_restricted: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            edit_budget: DEFAULT_EDIT_BUDGET,
            max_candidates: DEFAULT_MAX_CANDIDATES,
            top_k: 1,
            cost_weight: 0.0,
            span_restricted: false,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_candidates == 0 || self.top_k == 0 {
            return Err(Error::Config(
                "infer.max_candidates and infer.top_k must be positive".into(),
            ));
        }
        if !(self.cost_weight >= 0.0 && self.cost_weight.is_finite()) {
            return Err(Error::Config(
                "infer.cost_weight must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredCandidate {
    pub id: String,
    pub score: f64,
    pub cost: usize,
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceResult {
    pub best: Option<String>,
    /// Score of the top-ranked candidate, reported even when it falls below the threshold.
    pub score: Option<f64>,
    pub span: Option<(usize, usize)>,
    pub candidates: Vec<ScoredCandidate>,
}

/// Ranking order: combined score desc, edit cost asc, id asc.
fn better(a: &ScoredCandidate, b: &ScoredCandidate, w: f64) -> std::cmp::Ordering {
    let ka = a.score - w * a.cost as f64;
    let kb = b.score - w * b.cost as f64;
    kb.total_cmp(&ka).then(a.cost.cmp(&b.cost)).then(a.id.cmp(&b.id))
}

#[allow(clippy::too_many_arguments)]
pub fn infer_slot(
    pg: &Posteriorgram,
    db: &EntityDb,
    trie: &Trie,
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    threshold: f64,
    icfg: &InferConfig,
    zero_speech: bool,
) -> Result<InferenceResult> {
    if pg.num_phonemes() != cfg.vocab {
        return Err(Error::Shape(format!(
            "posteriorgram has {} phonemes, the model was built for {}",
            pg.num_phonemes(),
            cfg.vocab
        )));
    }
    let path = collapse_path(pg, icfg.top_k);
    let spans = detect_spans(&path, trie, icfg.edit_budget, icfg.max_candidates);
    let mut candidates = Vec::with_capacity(spans.len());
    if icfg.span_restricted {
        for s in &spans {
            let ph = db.entities()[s.entity_index].phonemes.as_slice();
            let opts = ScoreOptions {
                zero_speech,
                span: Some((s.start_frame, s.end_frame)),
            };
            let score = score_candidates(params, cfg, pg, &[ph], &opts)?[0];
            candidates.push((s, score));
        }
    } else if !spans.is_empty() {
        let phs: Vec<&[usize]> = spans
            .iter()
            .map(|s| db.entities()[s.entity_index].phonemes.as_slice())
            .collect();
        let opts = ScoreOptions {
            zero_speech,
            span: None,
        };
        let scores = score_candidates(params, cfg, pg, &phs, &opts)?;
        candidates.extend(spans.iter().zip(scores));
    }
    let mut scored: Vec<ScoredCandidate> = candidates
        .into_iter()
        .map(|(s, score)| ScoredCandidate {
            id: s.entity_id.clone(),
            score: score as f64,
            cost: s.edit_cost,
            span: (s.start_frame, s.end_frame),
        })
        .collect();
    scored.sort_by(|a, b| better(a, b, icfg.cost_weight));
    let top = scored.first();
    let accepted = top.filter(|c| c.score >= threshold);
    Ok(InferenceResult {
        best: accepted.map(|c| c.id.clone()),
        score: top.map(|c| c.score),
        span: accepted.map(|c| c.span),
        candidates: scored,
    })
}

/// A trained model together with everything inference needs.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub cfg: ModelConfig,
    pub params: ParamStore<f32>,
    pub inventory: PhonemeInventory,
    pub db: EntityDb,
    /// Calibrated confidence threshold; `-inf` when none was calibrated.
    pub threshold: f64,
    pub infer: InferConfig,
    /// Additional metadata stored verbatim (e.g. the training configuration).
    pub extra: Map<String, Value>,
}

pub const CHECKPOINT_KIND: &str = "speech2slot";

impl TrainedModel {
    pub fn trie(&self) -> Trie {
        Trie::build(&self.db)
    }

    fn metadata(&self) -> Map<String, Value> {
        let mut m = self.extra.clone();
        m.insert("kind".into(), CHECKPOINT_KIND.into());
        m.insert("model".into(), serde_json::to_value(self.cfg).expect("serializable"));
        m.insert("infer".into(), serde_json::to_value(self.infer).expect("serializable"));
        m.insert(
            "threshold".into(),
            if self.threshold.is_finite() {
                self.threshold.into()
            } else {
                Value::Null
            },
        );
        m.insert("inventory".into(), self.inventory.symbols().to_vec().into());
        m.insert("entities".into(), self.db.to_text(&self.inventory).into());
        m
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(&self.params, &self.metadata())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params, &self.metadata())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        Self::from_checkpoint(ck).map_err(|e| crate::phoneme::with_path(e, path))
    }

    pub fn from_checkpoint(ck: checkpoint::Checkpoint) -> Result<Self> {
        let mut extra = ck.extra;
        let get = |m: &mut Map<String, Value>, key: &str| {
            m.remove(key)
                .ok_or_else(|| Error::Data(format!("checkpoint metadata lacks '{key}'")))
        };
        if get(&mut extra, "kind")? != CHECKPOINT_KIND {
            return Err(Error::Data("not a full model checkpoint".into()));
        }
        let bad = |e: serde_json::Error| Error::Data(format!("checkpoint metadata: {e}"));
        let cfg: ModelConfig = serde_json::from_value(get(&mut extra, "model")?).map_err(bad)?;
        let infer: InferConfig = serde_json::from_value(get(&mut extra, "infer")?).map_err(bad)?;
        let threshold = match get(&mut extra, "threshold")? {
            Value::Null => f64::NEG_INFINITY,
            v => v
                .as_f64()
                .ok_or_else(|| Error::Data("threshold is not a number".into()))?,
        };
        let symbols: Vec<String> = serde_json::from_value(get(&mut extra, "inventory")?).map_err(bad)?;
        let inventory = PhonemeInventory::parse(&(symbols.join("\n") + "\n"))?;
        let entities = get(&mut extra, "entities")?;
        let db = EntityDb::parse(
            entities
                .as_str()
                .ok_or_else(|| Error::Data("entities is not a string".into()))?,
            &inventory,
            cfg.max_slot_len,
        )?;
        let expected: ParamStore<f32> = crate::model::init_params(&cfg, 0)?;
        let mut params = ck.params;
        for (name, p) in expected.iter() {
            match params.get(name) {
                Some(t) if t.shape() == p.value.shape() => {}
                Some(t) => {
                    return Err(Error::Data(format!(
                        "parameter '{name}' has shape {:?}, expected {:?}",
                        t.shape(),
                        p.value.shape()
                    )))
                }
                None => return Err(Error::Data(format!("checkpoint lacks parameter '{name}'"))),
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Data("checkpoint has unexpected parameters".into()));
        }
        params.clear_grads();
        Ok(TrainedModel {
            cfg,
            params,
            inventory,
            db,
            threshold,
            infer,
            extra,
        })
    }

    pub fn infer(&self, pg: &Posteriorgram, trie: &Trie, threshold: f64) -> Result<InferenceResult> {
        infer_slot(
            pg,
            &self.db,
            trie,
            &self.params,
            &self.cfg,
            threshold,
            &self.infer,
            false,
        )
    }
}

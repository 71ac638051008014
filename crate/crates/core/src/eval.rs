//! Slot accuracy split by OOV / non-OOV, for the matching model and for a
//! phoneme-level "decode then look up" pipeline baseline.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::infer::{infer_slot, TrainedModel};
use crate::phoneme::EntityDb;
use crate::synth::{LoadedSample, QueryPattern};
use crate::trie::collapse_path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Record {
    pub id: String,
    pub gold: String,
    pub predicted: Option<String>,
    pub correct: bool,
    pub oov: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub total: usize,
    pub correct: usize,
    pub non_oov_total: usize,
    pub non_oov_correct: usize,
    pub oov_total: usize,
    pub oov_correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy_entire: f64,
    pub accuracy_non_oov: f64,
    pub accuracy_oov: f64,
    pub counts: Counts,
    /// Accuracy of picking uniformly among each sample's candidates (0 when there are none).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chance: Option<f64>,
    pub records: Vec<Record>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    pub fn from_records(records: Vec<Record>) -> Self {
        let mut c = Counts::default();
        for r in &records {
            c.total += 1;
            c.correct += usize::from(r.correct);
            if r.oov {
                c.oov_total += 1;
                c.oov_correct += usize::from(r.correct);
            } else {
                c.non_oov_total += 1;
                c.non_oov_correct += usize::from(r.correct);
            }
        }
        EvalReport {
            accuracy_entire: ratio(c.correct, c.total),
            accuracy_non_oov: ratio(c.non_oov_correct, c.non_oov_total),
            accuracy_oov: ratio(c.oov_correct, c.oov_total),
            counts: c,
            chance: None,
            records,
        }
    }

    /// `accuracy_non_oov - accuracy_oov`.
    pub fn oov_gap(&self) -> f64 {
        self.accuracy_non_oov - self.accuracy_oov
    }

    pub fn records_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "gold", "predicted", "correct", "oov"])
            .map_err(|e| Error::Data(e.to_string()))?;
        for r in &self.records {
            w.write_record([
                r.id.as_str(),
                r.gold.as_str(),
                r.predicted.as_deref().unwrap_or(""),
                if r.correct { "true" } else { "false" },
                if r.oov { "true" } else { "false" },
            ])
            .map_err(|e| Error::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }
}

fn check_split(samples: &[LoadedSample], db: &EntityDb, require_both: bool) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    if require_both && (samples.iter().all(|s| s.sample.oov) || samples.iter().all(|s| !s.sample.oov)) {
        return Err(Error::Data("evaluation needs both OOV and non-OOV samples".into()));
    }
    for s in samples {
        match db.entities().get(s.entity) {
            Some(e) if e.id == s.sample.slot_id => {}
            _ => {
                return Err(Error::Data(format!(
                    "sample '{}' gold '{}' is not in the entity db",
                    s.sample.id, s.sample.slot_id
                )))
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Predictions scoring below this are NONE.
    pub threshold: f64,
    /// Replace the speech memory by zeros.
    pub zero_speech: bool,
    /// Demand both OOV classes in the input.
    pub require_both_classes: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: f64::NEG_INFINITY,
            zero_speech: false,
            require_both_classes: true,
        }
    }
}

/// Exact entity-id accuracy of the matching model.
pub fn evaluate(samples: &[LoadedSample], model: &TrainedModel, opts: &EvalOptions) -> Result<EvalReport> {
    check_split(samples, &model.db, opts.require_both_classes)?;
    let trie = model.trie();
    let rows: Vec<(Record, f64)> = samples
        .par_iter()
        .map(|s| {
            let r = infer_slot(
                &s.pg,
                &model.db,
                &trie,
                &model.params,
                &model.cfg,
                opts.threshold,
                &model.infer,
                opts.zero_speech,
            )?;
            let chance = if r.candidates.is_empty() {
                0.0
            } else {
                1.0 / r.candidates.len() as f64
            };
            let correct = r.best.as_deref() == Some(s.sample.slot_id.as_str());
            Ok((
                Record {
                    id: s.sample.id.clone(),
                    gold: s.sample.slot_id.clone(),
                    predicted: r.best,
                    correct,
                    oov: s.sample.oov,
                },
                chance,
            ))
        })
        .collect::<Result<_>>()?;
    let chance = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    let mut report = EvalReport::from_records(rows.into_iter().map(|r| r.0).collect());
    report.chance = Some(chance);
    Ok(report)
}

pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Middle of `path` after removing the carrier phrase that covers the most phonemes.
/// The middle is kept non-empty; with no matching pattern the whole path is returned.
pub fn strip_pattern<'a>(path: &'a [usize], patterns: &[QueryPattern]) -> &'a [usize] {
    let mut best: Option<(usize, usize)> = None;
    for p in patterns {
        let (a, b) = (p.prefix.len(), p.suffix.len());
        if a + b >= path.len() || !path.starts_with(&p.prefix) || !path.ends_with(&p.suffix) {
            continue;
        }
        if best.is_none_or(|(x, y)| a + b > x + y) {
            best = Some((a, b));
        }
    }
    match best {
        Some((a, b)) => &path[a..path.len() - b],
        None => path,
    }
}

/// Entity nearest to `hyp` by phoneme edit distance; ties go to the smaller id.
pub fn nearest_entity<'a>(hyp: &[usize], db: &'a EntityDb) -> Option<&'a str> {
    db.iter()
        .map(|e| (levenshtein(hyp, &e.phonemes), e.id.as_str()))
        .min()
        .map(|(_, id)| id)
}

/// Greedy decode, strip the carrier phrase, look up the nearest entity.
pub fn pipeline_baseline(
    samples: &[LoadedSample],
    db: &EntityDb,
    patterns: &[QueryPattern],
    require_both_classes: bool,
) -> Result<EvalReport> {
    if patterns.is_empty() {
        return Err(Error::Config("the baseline needs the query patterns".into()));
    }
    check_split(samples, db, require_both_classes)?;
    let records: Vec<Record> = samples
        .par_iter()
        .map(|s| {
            let path = collapse_path(&s.pg, 1).phonemes();
            let hyp = strip_pattern(&path, patterns);
            let predicted = nearest_entity(hyp, db).map(str::to_string);
            Record {
                id: s.sample.id.clone(),
                gold: s.sample.slot_id.clone(),
                correct: predicted.as_deref() == Some(s.sample.slot_id.as_str()),
                predicted,
                oov: s.sample.oov,
            }
        })
        .collect();
    Ok(EvalReport::from_records(records))
}

//! Synthetic voice-navigation corpus: query patterns filled with entities and
//! rendered as noisy posteriorgrams, split into train / test and OOV / non-OOV.
//!
//! The acoustic model is replaced by a parameterized noise process. Each
//! phoneme is held for a random number of frames, every frame leaks
//! `confusion_eps` of its mass onto nearby inventory entries, and CTC-style
//! blank frames are scattered between phonemes.

use std::collections::{BTreeSet, HashSet};
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::Tensor;
use crate::phoneme::{
    parse_tokens, read_posteriorgram, read_text, with_path, write_posteriorgram, Entity, EntityDb, PhonemeInventory,
    Posteriorgram, BLANK, DEFAULT_MAX_SPEECH_LEN,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryPattern {
    pub id: String,
    pub prefix: Vec<usize>,
    pub suffix: Vec<usize>,
}

impl QueryPattern {
    pub fn len(&self) -> usize {
        self.prefix.len() + self.suffix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn parse_patterns(text: &str, inv: &PhonemeInventory) -> Result<Vec<QueryPattern>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!(
                "pattern line {lineno} needs 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let id = fields[0].trim();
        if id.is_empty() || !ids.insert(id.to_string()) {
            return Err(Error::Data(format!("empty or duplicate pattern id at line {lineno}")));
        }
        out.push(QueryPattern {
            id: id.to_string(),
            prefix: parse_tokens(fields[1], inv, lineno)?,
            suffix: parse_tokens(fields[2], inv, lineno)?,
        });
    }
    Ok(out)
}

pub fn patterns_to_text(patterns: &[QueryPattern], inv: &PhonemeInventory) -> String {
    let join = |ids: &[usize]| -> String {
        ids.iter()
            .map(|&p| inv.symbol(p).expect("valid index"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    patterns
        .iter()
        .map(|p| format!("{}\t{}\t{}\n", p.id, join(&p.prefix), join(&p.suffix)))
        .collect()
}

pub fn load_patterns(path: &Path, inv: &PhonemeInventory) -> Result<Vec<QueryPattern>> {
    let text = read_text(path)?;
    parse_patterns(&text, inv).map_err(|e| with_path(e, path))
}

/// Five carrier phrases shaped like the navigation templates
/// ("navigate to X", "I want to go to X", "the route to X", "go to X", "search X").
pub fn default_patterns(inv: &PhonemeInventory, seed: u64) -> Vec<QueryPattern> {
    let shapes: [(&str, usize, usize); 5] = [
        ("navigate", 4, 0),
        ("want-to-go", 5, 0),
        ("route-to", 2, 4),
        ("go-to", 2, 0),
        ("search", 3, 0),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5041_5454);
    let ids: Vec<usize> = inv.phoneme_ids().collect();
    let mut draw = |n: usize| -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(n);
        while out.len() < n {
            let p = *ids.choose(&mut rng).expect("non-empty inventory");
            if out.last() != Some(&p) {
                out.push(p);
            }
        }
        out
    };
    shapes
        .iter()
        .map(|&(id, pre, suf)| QueryPattern {
            id: id.to_string(),
            prefix: draw(pre),
            suffix: draw(suf),
        })
        .collect()
}

/// Random entity database with distinct sequences and no immediately repeated phoneme.
pub fn synthetic_entities(
    inv: &PhonemeInventory,
    count: usize,
    min_len: usize,
    max_len: usize,
    max_slot_len: usize,
    seed: u64,
) -> Result<EntityDb> {
    if min_len == 0 || min_len > max_len || max_len > max_slot_len {
        return Err(Error::Config(format!(
            "entity lengths {min_len}..={max_len} invalid for max slot length {max_slot_len}"
        )));
    }
    let ids: Vec<usize> = inv.phoneme_ids().collect();
    if ids.len() < 2 {
        return Err(Error::Config("inventory too small for synthetic entities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x454e_5449);
    let mut seen = HashSet::with_capacity(count);
    let mut entities = Vec::with_capacity(count);
    let width = count.saturating_sub(1).to_string().len().max(4);
    let mut attempts = 0usize;
    while entities.len() < count {
        attempts += 1;
        if attempts > 100 * count + 1000 {
            return Err(Error::Config(format!(
                "could not draw {count} distinct entities from this inventory"
            )));
        }
        let len = rng.gen_range(min_len..=max_len);
        let mut seq: Vec<usize> = Vec::with_capacity(len);
        while seq.len() < len {
            let p = *ids.choose(&mut rng).expect("non-empty");
            if seq.last() != Some(&p) {
                seq.push(p);
            }
        }
        if seen.insert(seq.clone()) {
            entities.push(Entity {
                id: format!("e{:0width$}", entities.len()),
                phonemes: seq,
                surface: None,
            });
        }
    }
    EntityDb::new(entities, inv, max_slot_len)
}

/// Rendered query and the inclusive phoneme positions of the slot.
pub fn render_query(
    pattern: &QueryPattern,
    entity: &Entity,
    max_speech_len: usize,
) -> Result<(Vec<usize>, (usize, usize))> {
    let total = pattern.len() + entity.phonemes.len();
    if total > max_speech_len {
        return Err(Error::Data(format!(
            "pattern '{}' with entity '{}' has {total} phonemes, limit is {max_speech_len}",
            pattern.id, entity.id
        )));
    }
    let mut q = Vec::with_capacity(total);
    q.extend_from_slice(&pattern.prefix);
    q.extend_from_slice(&entity.phonemes);
    q.extend_from_slice(&pattern.suffix);
    let start = pattern.prefix.len();
    Ok((q, (start, start + entity.phonemes.len() - 1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Probability mass moved off the true phoneme in every frame.
    pub confusion_eps: f64,
    /// Chance of a blank frame between two phonemes.
    pub blank_insert_prob: f64,
    pub dur_min: usize,
    pub dur_max: usize,
    /// Number of neighbouring inventory entries receiving the confusion mass.
    pub confusable_k: usize,
    pub seed: u64,
    /// When false, no blank frames are ever emitted.
    pub emit_blank: bool,
    pub max_speech_len: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            confusion_eps: 0.2,
            blank_insert_prob: 0.1,
            dur_min: 1,
            dur_max: 2,
            confusable_k: 2,
            seed: 0,
            emit_blank: true,
            max_speech_len: DEFAULT_MAX_SPEECH_LEN,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        NoiseConfig {
            confusion_eps: 0.0,
            blank_insert_prob: 0.0,
            dur_min: 1,
            dur_max: 1,
            ..NoiseConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.confusion_eps) {
            return Err(Error::Config("confusion_eps must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.blank_insert_prob) {
            return Err(Error::Config("blank_insert_prob must lie in [0, 1)".into()));
        }
        if self.dur_min == 0 || self.dur_min > self.dur_max {
            return Err(Error::Config("durations need 1 <= dur_min <= dur_max".into()));
        }
        if self.confusable_k == 0 {
            return Err(Error::Config("confusable_k must be at least 1".into()));
        }
        if self.max_speech_len == 0 {
            return Err(Error::Config("max_speech_len must be positive".into()));
        }
        Ok(())
    }
}

/// The `k` cyclically nearest phoneme indices to `p`, alternating +1, -1, +2, -2, ...
pub fn confusable_neighbors(p: usize, k: usize, inv: &PhonemeInventory) -> Vec<usize> {
    let ids = inv.phoneme_ids();
    let n = ids.len();
    let base = ids.start;
    let pos = p - base;
    let mut out = Vec::with_capacity(k);
    let mut step = 1;
    while out.len() < k.min(n - 1) {
        for cand in [(pos + step) % n, (pos + n - step % n) % n] {
            if out.len() < k.min(n - 1) && cand != pos && !out.contains(&(cand + base)) {
                out.push(cand + base);
            }
        }
        step += 1;
        if step > n {
            break;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Synthesized {
    pub pg: Posteriorgram,
    /// Inclusive frame range covering exactly the slot phonemes.
    pub frame_span: (usize, usize),
}

/// Renders a phoneme query as a posteriorgram.
///
/// Two equal neighbouring phonemes are always separated by a blank frame, as a
/// CTC acoustic model cannot emit a repeated label otherwise.
pub fn synthesize_posteriorgram(
    query: &[usize],
    slot: (usize, usize),
    cfg: &NoiseConfig,
    inv: &PhonemeInventory,
    rng: &mut impl Rng,
) -> Result<Synthesized> {
    cfg.validate()?;
    if query.is_empty() || slot.0 > slot.1 || slot.1 >= query.len() {
        return Err(Error::Data("invalid query or slot span".into()));
    }
    if let Some(&bad) = query.iter().find(|&&p| p <= BLANK || p >= inv.len()) {
        return Err(Error::Data(format!("query uses invalid phoneme index {bad}")));
    }
    // (label, true phoneme context) per frame
    let mut labels: Vec<usize> = Vec::new();
    let mut span = (0, 0);
    for (i, &ph) in query.iter().enumerate() {
        if i > 0 && cfg.emit_blank {
            let forced = query[i - 1] == ph;
            if forced || rng.gen::<f64>() < cfg.blank_insert_prob {
                labels.push(BLANK);
            }
        }
        let d = rng.gen_range(cfg.dur_min..=cfg.dur_max);
        if i == slot.0 {
            span.0 = labels.len();
        }
        labels.extend(std::iter::repeat_n(ph, d));
        if i == slot.1 {
            span.1 = labels.len() - 1;
        }
    }
    if labels.len() > cfg.max_speech_len {
        return Err(Error::Data(format!(
            "{} frames exceed max_speech_len {}",
            labels.len(),
            cfg.max_speech_len
        )));
    }
    let p = inv.len();
    let t = labels.len();
    let mut data = vec![0.0f64; t * p];
    let eps = cfg.confusion_eps;
    for (f, &lab) in labels.iter().enumerate() {
        let row = &mut data[f * p..(f + 1) * p];
        let spill: Vec<usize> = if lab == BLANK {
            // blank frames smear onto the phonemes on either side
            let mut s = Vec::new();
            if let Some(&prev) = labels[..f].iter().rev().find(|&&l| l != BLANK) {
                s.push(prev);
            }
            if let Some(&next) = labels[f + 1..].iter().find(|&&l| l != BLANK) {
                if !s.contains(&next) {
                    s.push(next);
                }
            }
            s
        } else {
            confusable_neighbors(lab, cfg.confusable_k, inv)
        };
        if spill.is_empty() || eps == 0.0 {
            row[lab] = 1.0;
        } else {
            row[lab] = 1.0 - eps;
            let share = eps / spill.len() as f64;
            for &s in &spill {
                row[s] += share;
            }
        }
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    let frames = Tensor::new(vec![t, p], data.into_iter().map(|v| v as f32).collect())?;
    Ok(Synthesized {
        pg: Posteriorgram::new(frames)?,
        frame_span: span,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    /// Posteriorgram path relative to the manifest directory.
    pub posterior: String,
    pub slot_id: String,
    pub pattern_id: String,
    pub split: Split,
    pub oov: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
    pub test_oov: usize,
    pub test_non_oov: usize,
}

impl Manifest {
    pub fn counts(&self) -> SplitCounts {
        let mut c = SplitCounts {
            train: 0,
            test: 0,
            test_oov: 0,
            test_non_oov: 0,
        };
        for s in &self.samples {
            match s.split {
                Split::Train => c.train += 1,
                Split::Test => {
                    c.test += 1;
                    if s.oov {
                        c.test_oov += 1;
                    } else {
                        c.test_non_oov += 1;
                    }
                }
            }
        }
        c
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Checks the OOV flags against the training split and the entity db.
    pub fn validate(&self, db: &EntityDb) -> Result<()> {
        let train: HashSet<&str> = self.split(Split::Train).map(|s| s.slot_id.as_str()).collect();
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id '{}'", s.id)));
            }
            if db.get(&s.slot_id).is_none() {
                return Err(Error::Data(format!(
                    "sample '{}' refers to unknown entity '{}'",
                    s.id, s.slot_id
                )));
            }
            let seen = train.contains(s.slot_id.as_str());
            if s.split == Split::Test && s.oov == seen {
                return Err(Error::Data(format!(
                    "sample '{}' has oov={} but its entity {} in training",
                    s.id,
                    s.oov,
                    if seen { "appears" } else { "never appears" }
                )));
            }
            if s.split == Split::Train && s.oov {
                return Err(Error::Data(format!("training sample '{}' flagged oov", s.id)));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for sample in &self.samples {
            s.push_str(&serde_json::to_string(sample).expect("serializable"));
            s.push('\n');
        }
        s
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample =
                serde_json::from_str(line).map_err(|e| Error::Data(format!("manifest line {}: {e}", n + 1)))?;
            samples.push(s);
        }
        Ok(Manifest { samples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        Self::parse_jsonl(&text).map_err(|e| with_path(e, path))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// A manifest sample with its posteriorgram loaded and its entity resolved.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub sample: Sample,
    pub pg: Posteriorgram,
    /// Position of the gold entity in the db.
    pub entity: usize,
}

/// Reads every sample of `split` (all samples if `None`), resolving paths against `root`.
pub fn load_split(
    manifest: &Manifest,
    root: &Path,
    inv: &PhonemeInventory,
    db: &EntityDb,
    split: Option<Split>,
) -> Result<Vec<LoadedSample>> {
    manifest
        .samples
        .par_iter()
        .filter(|s| split.is_none_or(|sp| s.split == sp))
        .map(|s| {
            let entity = db
                .position(&s.slot_id)
                .ok_or_else(|| Error::Data(format!("sample '{}' refers to unknown entity '{}'", s.id, s.slot_id)))?;
            let pg = read_posteriorgram(&root.join(&s.posterior), inv)?;
            Ok(LoadedSample {
                sample: s.clone(),
                pg,
                entity,
            })
        })
        .collect()
}

impl GeneratedSample {
    pub fn loaded(&self, db: &EntityDb) -> LoadedSample {
        LoadedSample {
            sample: self.sample.clone(),
            pg: self.pg.clone(),
            entity: db.position(&self.sample.slot_id).expect("generated from this db"),
        }
    }
}

/// A sample together with its rendered posteriorgram.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub sample: Sample,
    pub query: Vec<usize>,
    pub pg: Posteriorgram,
    pub frame_span: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Share of the entity db held back from training to serve the OOV test half.
    pub oov_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 2000,
            n_test: 200,
            oov_fraction: 0.2,
        }
    }
}

/// SplitMix64 finalizer; derives independent per-sample seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const RENDER_ATTEMPTS: usize = 64;

fn render_one(
    pattern: &QueryPattern,
    entity: &Entity,
    cfg: &NoiseConfig,
    inv: &PhonemeInventory,
    seed: u64,
) -> Result<(Vec<usize>, Synthesized)> {
    let (query, slot) = render_query(pattern, entity, cfg.max_speech_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..RENDER_ATTEMPTS {
        match synthesize_posteriorgram(&query, slot, cfg, inv, &mut rng) {
            Ok(s) => return Ok((query, s)),
            Err(Error::Data(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    // shortest possible rendering: minimum durations, only the mandatory blanks
    let tight = NoiseConfig {
        dur_max: cfg.dur_min,
        blank_insert_prob: 0.0,
        ..*cfg
    };
    synthesize_posteriorgram(&query, slot, &tight, inv, &mut rng)
        .map(|s| (query, s))
        .map_err(|_| {
            Error::Config(format!(
                "pattern '{}' with entity '{}' cannot fit in {} frames",
                pattern.id, entity.id, cfg.max_speech_len
            ))
        })
}

/// Draws every sample of the corpus in memory. Pure in `(db, patterns, sizes, noise)`.
pub fn generate_samples(
    db: &EntityDb,
    patterns: &[QueryPattern],
    data: &DatasetConfig,
    noise: &NoiseConfig,
    inv: &PhonemeInventory,
) -> Result<Vec<GeneratedSample>> {
    noise.validate()?;
    if patterns.is_empty() {
        return Err(Error::Config("at least one query pattern is required".into()));
    }
    if !(0.0..1.0).contains(&data.oov_fraction) {
        return Err(Error::Config("oov_fraction must lie in [0, 1)".into()));
    }
    let n_oov_test = data.n_test / 2;
    let n_non_oov_test = data.n_test - n_oov_test;
    let mut order: Vec<usize> = (0..db.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(noise.seed, 0xDA7A));
    order.shuffle(&mut rng);
    let oov_pool_len = if n_oov_test == 0 {
        0
    } else {
        ((db.len() as f64 * data.oov_fraction).round() as usize).max(1)
    };
    if oov_pool_len >= db.len() || (data.n_train == 0 && n_non_oov_test > 0) {
        return Err(Error::Config(format!(
            "{} entities cannot be split into disjoint train-visible and OOV pools",
            db.len()
        )));
    }
    let (oov_pool, visible) = order.split_at(oov_pool_len);

    let mut plan: Vec<(Split, bool, usize, usize)> = Vec::new();
    let mut used_in_train = BTreeSet::new();
    for _ in 0..data.n_train {
        let e = visible[rng.gen_range(0..visible.len())];
        used_in_train.insert(e);
        plan.push((Split::Train, false, e, rng.gen_range(0..patterns.len())));
    }
    let seen: Vec<usize> = used_in_train.into_iter().collect();
    for k in 0..data.n_test {
        let oov = k < n_oov_test;
        let e = if oov {
            oov_pool[rng.gen_range(0..oov_pool.len())]
        } else {
            seen[rng.gen_range(0..seen.len())]
        };
        plan.push((Split::Test, oov, e, rng.gen_range(0..patterns.len())));
    }

    let mut train_no = 0;
    let mut test_no = 0;
    let ids: Vec<String> = plan
        .iter()
        .map(|p| match p.0 {
            Split::Train => {
                train_no += 1;
                format!("train-{:06}", train_no - 1)
            }
            Split::Test => {
                test_no += 1;
                format!("test-{:06}", test_no - 1)
            }
        })
        .collect();

    plan.par_iter()
        .zip(ids.par_iter())
        .enumerate()
        .map(|(n, (&(split, oov, e, pat), id))| {
            let entity = &db.entities()[e];
            let pattern = &patterns[pat];
            let seed = mix_seed(noise.seed, n as u64 + 1);
            let (query, synth) = render_one(pattern, entity, noise, inv, seed)?;
            Ok(GeneratedSample {
                sample: Sample {
                    id: id.clone(),
                    posterior: format!("posteriors/{id}.s2sp"),
                    slot_id: entity.id.clone(),
                    pattern_id: pattern.id.clone(),
                    split,
                    oov,
                },
                query,
                pg: synth.pg,
                frame_span: synth.frame_span,
            })
        })
        .collect()
}

/// Generates the corpus and writes `manifest.jsonl` plus `posteriors/*.s2sp` under `out_dir`.
pub fn build_dataset(
    db: &EntityDb,
    patterns: &[QueryPattern],
    data: &DatasetConfig,
    noise: &NoiseConfig,
    inv: &PhonemeInventory,
    out_dir: &Path,
) -> Result<Manifest> {
    let generated = generate_samples(db, patterns, data, noise, inv)?;
    let pg_dir = out_dir.join("posteriors");
    std::fs::create_dir_all(&pg_dir).map_err(|e| Error::io(&pg_dir, e))?;
    generated
        .par_iter()
        .try_for_each(|g| write_posteriorgram(&out_dir.join(&g.sample.posterior), &g.pg))?;
    let manifest = Manifest {
        samples: generated.into_iter().map(|g| g.sample).collect(),
    };
    manifest.validate(db)?;
    let path = out_dir.join("manifest.jsonl");
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.to_jsonl().as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phoneme::one_hot_sequence;

    fn inv() -> PhonemeInventory {
        PhonemeInventory::synthetic(20).unwrap()
    }

    fn entity(ph: &[usize]) -> Entity {
        Entity {
            id: "e".into(),
            phonemes: ph.to_vec(),
            surface: None,
        }
    }

    #[test]
    fn render_examples() {
        let p = QueryPattern {
            id: "p".into(),
            prefix: vec![5, 6],
            suffix: vec![],
        };
        let (q, span) = render_query(&p, &entity(&[2, 3]), 40).unwrap();
        assert_eq!(q, vec![5, 6, 2, 3]);
        assert_eq!(span, (2, 3));

        let bare = QueryPattern {
            id: "b".into(),
            prefix: vec![],
            suffix: vec![],
        };
        let (q, span) = render_query(&bare, &entity(&[4, 7, 9]), 40).unwrap();
        assert_eq!(q, vec![4, 7, 9]);
        assert_eq!(span, (0, 2));

        let long = QueryPattern {
            id: "l".into(),
            prefix: vec![3; 30],
            suffix: vec![],
        };
        assert!(render_query(&long, &entity(&[2; 15]), 40).is_err());
    }

    #[test]
    fn degenerate_noise_is_one_hot() {
        let q = [2, 5, 3, 8];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = synthesize_posteriorgram(&q, (1, 2), &NoiseConfig::noiseless(), &inv(), &mut rng).unwrap();
        assert_eq!(s.pg, one_hot_sequence(&q, &inv()).unwrap());
        assert_eq!(s.frame_span, (1, 2));
    }

    #[test]
    fn repeated_phonemes_get_a_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = synthesize_posteriorgram(&[4, 4], (0, 1), &NoiseConfig::noiseless(), &inv(), &mut rng).unwrap();
        assert_eq!(s.pg.num_frames(), 3);
        assert_eq!(s.pg.argmax(1), BLANK);
        assert_eq!(s.frame_span, (0, 2));
    }

    #[test]
    fn moderate_confusion_keeps_argmax() {
        let cfg = NoiseConfig {
            confusion_eps: 0.3,
            blank_insert_prob: 0.3,
            dur_max: 3,
            ..NoiseConfig::default()
        };
        let q: Vec<usize> = (2..14).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = synthesize_posteriorgram(&q, (3, 6), &cfg, &inv(), &mut rng).unwrap();
        let mut recovered = vec![];
        for t in 0..s.pg.num_frames() {
            let a = s.pg.argmax(t);
            let row_sum: f32 = s.pg.row(t).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-5);
            if a != BLANK && recovered.last() != Some(&a) {
                recovered.push(a);
            }
        }
        assert_eq!(recovered, q);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let cfg = NoiseConfig::default();
        let q = [3, 9, 4, 12, 7];
        let a = synthesize_posteriorgram(&q, (1, 3), &cfg, &inv(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = synthesize_posteriorgram(&q, (1, 3), &cfg, &inv(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.pg.to_bytes(), b.pg.to_bytes());
    }

    #[test]
    fn oversized_rendering_rejected() {
        let cfg = NoiseConfig {
            dur_min: 4,
            dur_max: 4,
            max_speech_len: 10,
            ..NoiseConfig::noiseless()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(synthesize_posteriorgram(&[2, 3, 4], (0, 2), &cfg, &inv(), &mut rng).is_err());
    }

    #[test]
    fn neighbors_are_cyclic_and_skip_reserved() {
        let i = inv(); // ids 2..22
        assert_eq!(confusable_neighbors(2, 2, &i), vec![3, 21]);
        assert_eq!(confusable_neighbors(21, 3, &i), vec![2, 20, 3]);
    }

    #[test]
    fn pattern_file_round_trip() {
        let i = inv();
        let pats = default_patterns(&i, 3);
        assert_eq!(pats.len(), 5);
        let text = patterns_to_text(&pats, &i);
        assert_eq!(parse_patterns(&text, &i).unwrap(), pats);
        assert!(parse_patterns("x\tp00\n", &i).is_err());
        assert_eq!(parse_patterns("x\t\t\n", &i).unwrap()[0].len(), 0);
    }

    #[test]
    fn dataset_splits_and_oov_invariant() {
        let i = PhonemeInventory::synthetic(60).unwrap();
        let db = synthetic_entities(&i, 300, 3, 8, 10, 1).unwrap();
        let pats = default_patterns(&i, 1);
        let data = DatasetConfig {
            n_train: 400,
            n_test: 200,
            oov_fraction: 0.2,
        };
        let gen = generate_samples(&db, &pats, &data, &NoiseConfig::default(), &i).unwrap();
        let m = Manifest {
            samples: gen.iter().map(|g| g.sample.clone()).collect(),
        };
        let c = m.counts();
        assert_eq!((c.train, c.test, c.test_oov, c.test_non_oov), (400, 200, 100, 100));
        m.validate(&db).unwrap();
        let train: HashSet<&str> = m.split(Split::Train).map(|s| s.slot_id.as_str()).collect();
        for s in m.split(Split::Test) {
            assert_eq!(s.oov, !train.contains(s.slot_id.as_str()));
        }
        for g in &gen {
            assert!(g.frame_span.1 < g.pg.num_frames());
            assert!(g.pg.num_frames() <= 40);
        }
    }

    #[test]
    fn odd_test_size_balanced_within_one() {
        let i = PhonemeInventory::synthetic(30).unwrap();
        let db = synthetic_entities(&i, 100, 3, 6, 10, 2).unwrap();
        let data = DatasetConfig {
            n_train: 50,
            n_test: 7,
            oov_fraction: 0.3,
        };
        let gen = generate_samples(&db, &default_patterns(&i, 0), &data, &NoiseConfig::default(), &i).unwrap();
        let m = Manifest {
            samples: gen.into_iter().map(|g| g.sample).collect(),
        };
        let c = m.counts();
        assert_eq!(c.test, 7);
        assert!(c.test_oov.abs_diff(c.test_non_oov) <= 1);
    }

    #[test]
    fn too_few_entities_is_config_error() {
        let i = inv();
        let db = synthetic_entities(&i, 1, 2, 3, 10, 0).unwrap();
        let err = generate_samples(
            &db,
            &default_patterns(&i, 0),
            &DatasetConfig::default(),
            &NoiseConfig::default(),
            &i,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn manifest_jsonl_schema() {
        let s = Sample {
            id: "train-000000".into(),
            posterior: "posteriors/train-000000.s2sp".into(),
            slot_id: "e0001".into(),
            pattern_id: "go-to".into(),
            split: Split::Train,
            oov: false,
        };
        let line = serde_json::to_string(&s).unwrap();
        assert_eq!(
            line,
            r#"{"id":"train-000000","posterior":"posteriors/train-000000.s2sp","slot_id":"e0001","pattern_id":"go-to","split":"train","oov":false}"#
        );
        let m = Manifest::parse_jsonl(&format!("{line}\n")).unwrap();
        assert_eq!(m.samples, vec![s]);
        assert!(Manifest::parse_jsonl("{\"id\":1}\n").is_err());
    }
}

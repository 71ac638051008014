//! `speech2slot`: data generation, training, evaluation, inference, gradient
//! checking and the pipeline baseline behind one subcommand-style binary.
//!
//! Diagnostics go to stderr; machine output is JSON on stdout or in the
//! `--out` / `--report` files.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};

use s2s_core::eval::{evaluate, pipeline_baseline, EvalOptions};
use s2s_core::infer::TrainedModel;
use s2s_core::model::ModelConfig;
use s2s_core::neural::checkpoint;
use s2s_core::phoneme::{load_entity_db, load_inventory, read_posteriorgram, EntityDb, PhonemeInventory};
use s2s_core::synth::{build_dataset, load_patterns, load_split, patterns_to_text, LoadedSample, Manifest, Split};
use s2s_core::training::{model_grad_check, pretrain_knowledge, train};
use s2s_core::{Error, Result};

use config::Config;

const INVENTORY_FILE: &str = "inventory.txt";
const ENTITIES_FILE: &str = "entities.tsv";
const PATTERNS_FILE: &str = "patterns.txt";
const MANIFEST_FILE: &str = "manifest.jsonl";
const KNOWLEDGE_KIND: &str = "knowledge";

#[derive(Debug, Parser)]
#[command(
    name = "speech2slot",
    version,
    about = "Slot filling by matching phoneme posteriorgrams against an entity database"
)]
struct Cli {
    /// Worker threads for sample generation, training and evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a corpus: inventory, entity db, patterns, manifest and posteriorgrams.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the entity, pattern and noise seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on the train split of a corpus; prints the training report.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Replace the speech memory by zeros (knowledge-only probe).
        #[arg(long, default_value_t = false)]
        zero_speech: bool,
    },
    /// Greedy decode + nearest-entity lookup on the test split.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Fill the slot of one posteriorgram file.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        posterior: PathBuf,
        /// Score threshold (`inf` rejects everything); defaults to the calibrated one.
        #[arg(long, allow_hyphen_values = true)]
        threshold: Option<f64>,
    },
    /// Pretrain the knowledge encoder on the configured entity db.
    PretrainKnowledge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full loss on the desk preset.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates sampled per parameter tensor.
        #[arg(long, default_value_t = 8)]
        coords: usize,
    },
}

fn print_json<T: Serialize>(v: &T) {
    let text = serde_json::to_string_pretty(v).expect("serializable");
    // a closed pipe (e.g. `| head`) is not an error of the command
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "data directory '{}' does not exist",
            dir.display()
        )))
    }
}

struct Corpus {
    inv: PhonemeInventory,
    db: EntityDb,
    manifest: Manifest,
}

fn load_corpus(dir: &Path, max_slot_len: Option<usize>) -> Result<Corpus> {
    require_dir(dir)?;
    let inv = load_inventory(&dir.join(INVENTORY_FILE))?;
    let max_slot_len = max_slot_len.unwrap_or(usize::MAX);
    let db = load_entity_db(&dir.join(ENTITIES_FILE), &inv, max_slot_len)?;
    let manifest = Manifest::load(&dir.join(MANIFEST_FILE))?;
    manifest.validate(&db)?;
    Ok(Corpus { inv, db, manifest })
}

fn split_samples(dir: &Path, c: &Corpus, split: Split) -> Result<Vec<LoadedSample>> {
    load_split(&c.manifest, dir, &c.inv, &c.db, Some(split))
}

fn gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<Value> {
    let mut cfg = Config::load(config)?;
    if let Some(s) = seed {
        cfg.reseed_data(s);
    }
    let inv = cfg.load_inventory()?;
    let model = cfg.model(&inv)?;
    let db = cfg.load_entities(&inv, model.max_slot_len)?;
    let patterns = cfg.load_patterns(&inv)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(INVENTORY_FILE, inv.to_text())?;
    write(ENTITIES_FILE, db.to_text(&inv))?;
    write(PATTERNS_FILE, patterns_to_text(&patterns, &inv))?;
    let manifest = build_dataset(&db, &patterns, &cfg.data, &cfg.noise, &inv, out)?;
    Ok(json!({
        "out": out.display().to_string(),
        "entities": db.len(),
        "patterns": patterns.len(),
        "counts": manifest.counts(),
    }))
}

fn train_cmd(data: &Path, config: &Path, out: &Path, seed: Option<u64>) -> Result<Value> {
    let mut cfg = Config::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let corpus = load_corpus(data, None)?;
    let model = cfg.model(&corpus.inv)?;
    let db = EntityDb::new(corpus.db.entities().to_vec(), &corpus.inv, model.max_slot_len)?;
    let samples = split_samples(data, &corpus, Split::Train)?;
    let init = match &cfg.knowledge_init {
        Some(p) => Some(load_knowledge(p, &model)?),
        None => None,
    };
    let (params, report) = train(&samples, &db, &model, &cfg.train, init.as_ref())?;
    let mut extra = Map::new();
    extra.insert("train".into(), serde_json::to_value(cfg.train).expect("serializable"));
    let trained = TrainedModel {
        cfg: model,
        params,
        inventory: corpus.inv,
        db,
        threshold: report.threshold.unwrap_or(f64::NEG_INFINITY),
        infer: cfg.infer,
        extra,
    };
    trained.save(out)?;
    Ok(serde_json::to_value(report).expect("serializable"))
}

fn load_knowledge(path: &Path, model: &ModelConfig) -> Result<s2s_core::neural::ParamStore<f32>> {
    let ck = checkpoint::load(path)?;
    if ck.extra.get("kind").and_then(Value::as_str) != Some(KNOWLEDGE_KIND) {
        return Err(Error::Data(format!(
            "'{}' is not a knowledge-encoder checkpoint",
            path.display()
        )));
    }
    let stored: ModelConfig = ck
        .extra
        .get("model")
        .cloned()
        .and_then(|v| serde_json::from_value(v).ok())
        .ok_or_else(|| Error::Data(format!("'{}' lacks its model configuration", path.display())))?;
    if (
        stored.hidden,
        stored.intermediate,
        stored.heads,
        stored.layers_knowledge,
        stored.vocab,
    ) != (
        model.hidden,
        model.intermediate,
        model.heads,
        model.layers_knowledge,
        model.vocab,
    ) {
        return Err(Error::Config(format!(
            "knowledge checkpoint '{}' was built for a different model shape",
            path.display()
        )));
    }
    Ok(ck.params)
}

fn check_inventory(model: &TrainedModel, inv: &PhonemeInventory) -> Result<()> {
    if model.inventory.symbols() != inv.symbols() {
        return Err(Error::Data(
            "checkpoint and corpus use different phoneme inventories".into(),
        ));
    }
    Ok(())
}

fn eval_cmd(data: &Path, ckpt: &Path, report: &Path, zero_speech: bool) -> Result<Value> {
    let corpus = load_corpus(data, None)?;
    let model = TrainedModel::load(ckpt)?;
    check_inventory(&model, &corpus.inv)?;
    let samples = split_samples(data, &corpus, Split::Test)?;
    let opts = EvalOptions {
        zero_speech,
        ..EvalOptions::default()
    };
    let r = evaluate(&samples, &model, &opts)?;
    write_json(report, &r)?;
    Ok(summary(&r))
}

fn summary(r: &s2s_core::eval::EvalReport) -> Value {
    json!({
        "accuracy_entire": r.accuracy_entire,
        "accuracy_non_oov": r.accuracy_non_oov,
        "accuracy_oov": r.accuracy_oov,
        "counts": r.counts,
    })
}

fn baseline_cmd(data: &Path, config: &Path, report: &Path) -> Result<Value> {
    let cfg = Config::load(config)?;
    let corpus = load_corpus(data, None)?;
    // a pattern file named in the config overrides the one stored with the corpus
    let pattern_file = cfg.patterns.path.clone().unwrap_or_else(|| data.join(PATTERNS_FILE));
    let patterns = load_patterns(&pattern_file, &corpus.inv)?;
    let samples = split_samples(data, &corpus, Split::Test)?;
    let r = pipeline_baseline(&samples, &corpus.db, &patterns, true)?;
    write_json(report, &r)?;
    Ok(summary(&r))
}

fn infer_cmd(ckpt: &Path, posterior: &Path, threshold: Option<f64>) -> Result<Value> {
    let model = TrainedModel::load(ckpt)?;
    let pg = read_posteriorgram(posterior, &model.inventory)?;
    let theta = threshold.unwrap_or(model.threshold);
    if theta.is_nan() {
        return Err(Error::Config("threshold must not be NaN".into()));
    }
    let r = model.infer(&pg, &model.trie(), theta)?;
    Ok(serde_json::to_value(r).expect("serializable"))
}

fn pretrain_cmd(config: &Path, out: &Path) -> Result<Value> {
    let cfg = Config::load(config)?;
    let inv = cfg.load_inventory()?;
    let model = cfg.model(&inv)?;
    let db = cfg.load_entities(&inv, model.max_slot_len)?;
    let (params, report) = pretrain_knowledge(&db, &model, &cfg.train)?;
    let mut extra = Map::new();
    extra.insert("kind".into(), KNOWLEDGE_KIND.into());
    extra.insert("model".into(), serde_json::to_value(model).expect("serializable"));
    checkpoint::save(out, &params, &extra)?;
    Ok(serde_json::to_value(report).expect("serializable"))
}

fn gradcheck_cmd(seed: u64, coords: usize) -> Result<Value> {
    let r = model_grad_check(&ModelConfig::desk(), seed, coords)?;
    let passed = r.passed();
    let v = json!({
        "seed": seed,
        "passed": passed,
        "max_rel_err": r.max_rel_err,
        "tol": r.tol,
        "flagged": r.flagged,
        "params": r.params,
    });
    if !passed {
        print_json(&v);
        return Err(Error::Numerical(format!(
            "gradient check failed for {:?} (max relative error {:e})",
            r.flagged, r.max_rel_err
        )));
    }
    Ok(v)
}

fn run(cli: Cli) -> Result<Value> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    }
    match cli.cmd {
        Command::GenData { config, out, seed } => gen_data(&config, &out, seed),
        Command::Train {
            data,
            config,
            out,
            seed,
        } => train_cmd(&data, &config, &out, seed),
        Command::Eval {
            data,
            ckpt,
            report,
            zero_speech,
        } => eval_cmd(&data, &ckpt, &report, zero_speech),
        Command::Baseline { data, config, report } => baseline_cmd(&data, &config, &report),
        Command::Infer {
            ckpt,
            posterior,
            threshold,
        } => infer_cmd(&ckpt, &posterior, threshold),
        Command::PretrainKnowledge { config, out } => pretrain_cmd(&config, &out),
        Command::Gradcheck { seed, coords } => gradcheck_cmd(seed, coords),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            print_json(&v);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("speech2slot: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

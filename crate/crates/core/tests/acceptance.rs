//! Acceptance suite: every criterion runs at its stated tolerance and prints
//! one PASS/FAIL line; the test fails if any criterion does.
//!
//! Run with `cargo test --release -p s2s-core --test acceptance -- --nocapture`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2s_core::eval::{evaluate, pipeline_baseline, EvalOptions, EvalReport};
use s2s_core::infer::{InferConfig, TrainedModel};
use s2s_core::model::{
    bridge_forward, init_params, knowledge_encode, mask_frames, speech_encode, ModelConfig, SpeechInput,
};
use s2s_core::neural::layers::Dropout;
use s2s_core::neural::{Graph, ParamStore, Tensor};
use s2s_core::phoneme::{Entity, EntityDb, PhonemeInventory, Posteriorgram, PAD};
use s2s_core::synth::{
    build_dataset, default_patterns, generate_samples, synthetic_entities, DatasetConfig, GeneratedSample,
    LoadedSample, NoiseConfig, Split,
};
use s2s_core::training::{model_grad_check, train, TrainConfig};
use s2s_core::trie::{build_trie, collapse_path, detect_all, detect_spans, CollapsedPath, DEFAULT_MAX_CANDIDATES};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn inventory() -> PhonemeInventory {
    PhonemeInventory::synthetic(60).unwrap()
}

// -- 1 ---------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut flagged = Vec::new();
    for seed in 0..5 {
        let r = model_grad_check(&ModelConfig::desk(), seed, 8).unwrap();
        worst = worst.max(r.max_rel_err);
        flagged.extend(r.flagged.iter().map(|n| format!("seed {seed}: {n}")));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        flagged.is_empty() && worst < 1e-3 && secs < 120.0,
        format!("5 seeds, max rel err {worst:.2e} (< 1e-3), {secs:.1}s (< 120s), flagged {flagged:?}"),
    )
}

// -- 2 ---------------------------------------------------------------------

fn bridge_without_query_residual() -> Outcome {
    let cfg = ModelConfig::desk();
    let mut ps: ParamStore<f32> = init_params(&cfg, 11).unwrap();
    for l in 0..cfg.layers_bridge {
        ps.get_mut(&format!("bridge.layer{l}.attn.o.w"))
            .unwrap()
            .data_mut()
            .fill(0.0);
    }
    let inv = inventory();
    let pg = generate_one(&inv, 3).pg;
    let input = SpeechInput::new(&pg, &[], None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut outputs: Vec<Vec<f32>> = Vec::new();
    for _ in 0..10 {
        let phonemes: Vec<usize> = (0..6).map(|_| rng.gen_range(inv.phoneme_ids())).collect();
        let mut g = Graph::new(&ps);
        let sm = speech_encode(&mut g, &cfg, &input, &mut Dropout::eval()).unwrap();
        let km = knowledge_encode(&mut g, &cfg, &phonemes, &mut Dropout::eval()).unwrap();
        let out = bridge_forward(&mut g, &cfg, km, &sm, None, &mut Dropout::eval()).unwrap();
        outputs.push(g.value(out).data().to_vec());
    }
    let identical = outputs
        .iter()
        .all(|o| o.iter().map(|x| x.to_bits()).eq(outputs[0].iter().map(|x| x.to_bits())));
    outcome(identical, "10 random knowledge inputs, bridge logits compared bitwise")
}

fn generate_one(inv: &PhonemeInventory, seed: u64) -> GeneratedSample {
    let db = synthetic_entities(inv, 20, 2, 10, 10, seed).unwrap();
    let data = DatasetConfig {
        n_train: 1,
        n_test: 0,
        oov_fraction: 0.2,
    };
    let noise = NoiseConfig {
        confusion_eps: 0.35,
        seed,
        ..NoiseConfig::default()
    };
    generate_samples(&db, &default_patterns(inv, seed), &data, &noise, inv)
        .unwrap()
        .remove(0)
}

// -- 3 ---------------------------------------------------------------------

fn masking_contract() -> Outcome {
    let inv = inventory();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let rows: Vec<Vec<f32>> = (0..40)
        .map(|_| {
            let r: Vec<f32> = (0..inv.len()).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f32 = r.iter().sum();
            r.iter().map(|x| x / s).collect()
        })
        .collect();
    let pg = Posteriorgram::new(Tensor::from_rows(&rows)).unwrap();
    let mut counts = BTreeSet::new();
    let mut bad_rows = 0;
    let mut bad_counts = 0;
    for _ in 0..1000 {
        let plan = mask_frames(40, &mut rng);
        counts.insert(plan.len());
        if !(4..=6).contains(&plan.len()) || plan.iter().collect::<BTreeSet<_>>().len() != plan.len() {
            bad_counts += 1;
        }
        let input = SpeechInput::<f32>::new(&pg, &plan, None).unwrap();
        for t in 0..40 {
            let row = &input.frames.data()[t * inv.len()..(t + 1) * inv.len()];
            let want: Vec<f32> = if plan.contains(&t) {
                (0..inv.len()).map(|c| if c == PAD { 1.0 } else { 0.0 }).collect()
            } else {
                pg.row(t).to_vec()
            };
            if row.iter().map(|x| x.to_bits()).ne(want.iter().map(|x| x.to_bits())) {
                bad_rows += 1;
            }
        }
    }
    outcome(
        bad_counts == 0 && bad_rows == 0,
        format!("1000 plans at T=40, mask sizes seen {counts:?}, bad plans {bad_counts}, bad rows {bad_rows}"),
    )
}

// -- 4 ---------------------------------------------------------------------

fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    d[0] = (0..=b.len()).collect();
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn trie_oracle() -> Outcome {
    let inv = PhonemeInventory::synthetic(12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut hits = 0;
    for _ in 0..200 {
        let alphabet = rng.gen_range(3..7);
        let entities: Vec<Entity> = (0..rng.gen_range(1..=50))
            .map(|k| Entity {
                id: format!("x{k:03}"),
                phonemes: (0..rng.gen_range(1..=6))
                    .map(|_| 2 + rng.gen_range(0..alphabet))
                    .collect(),
                surface: None,
            })
            .collect();
        let db = EntityDb::new(entities, &inv, 10).unwrap();
        let path: Vec<usize> = (0..rng.gen_range(1..=20))
            .map(|_| 2 + rng.gen_range(0..alphabet))
            .collect();
        let trie = build_trie(&db);
        let cp = CollapsedPath::from_phonemes(&path);
        for budget in [0usize, 1] {
            let mut oracle = BTreeSet::new();
            for e in db.iter() {
                for i in 0..path.len() {
                    for j in i..path.len() {
                        let d = levenshtein(&e.phonemes, &path[i..=j]);
                        if d <= budget {
                            oracle.insert((e.id.clone(), i, j, d));
                        }
                    }
                }
            }
            hits += oracle.len();
            let all: BTreeSet<_> = detect_all(&cp, &trie, budget)
                .into_iter()
                .map(|c| (c.entity_id, c.start_segment, c.end_segment, c.edit_cost))
                .collect();
            // the ranked list keeps one best hit per entity
            let ranked = detect_spans(&cp, &trie, budget, usize::MAX);
            let entities: BTreeSet<_> = oracle.iter().map(|h| h.0.clone()).collect();
            let ranked_ok = ranked.len() == entities.len()
                && ranked.iter().all(|c| {
                    oracle.contains(&(c.entity_id.clone(), c.start_segment, c.end_segment, c.edit_cost))
                        && oracle.iter().filter(|h| h.0 == c.entity_id).all(|h| h.3 >= c.edit_cost)
                });
            if all != oracle || !ranked_ok {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("200 instances x budgets 0,1, {hits} oracle hits, {mismatches} mismatches"),
    )
}

// -- 5 ---------------------------------------------------------------------

fn noiseless_recall() -> Outcome {
    let inv = inventory();
    let db = synthetic_entities(&inv, 1000, 2, 10, 10, 5).unwrap();
    let trie = build_trie(&db);
    let data = DatasetConfig {
        n_train: 500,
        n_test: 0,
        oov_fraction: 0.2,
    };
    let gen = generate_samples(&db, &default_patterns(&inv, 5), &data, &NoiseConfig::noiseless(), &inv).unwrap();
    let found = gen
        .iter()
        .filter(|g| {
            detect_spans(&collapse_path(&g.pg, 1), &trie, 0, DEFAULT_MAX_CANDIDATES)
                .iter()
                .any(|c| c.entity_id == g.sample.slot_id && (c.start_frame, c.end_frame) == g.frame_span)
        })
        .count();
    outcome(
        found == gen.len(),
        format!("{found}/{} gold entities with exact frame span", gen.len()),
    )
}

// -- 6 ---------------------------------------------------------------------

fn model_of(cfg: ModelConfig, params: ParamStore<f32>, inv: &PhonemeInventory, db: &EntityDb) -> TrainedModel {
    TrainedModel {
        cfg,
        params,
        inventory: inv.clone(),
        db: db.clone(),
        threshold: f64::NEG_INFINITY,
        infer: InferConfig::default(),
        extra: Default::default(),
    }
}

fn overfit() -> Outcome {
    let inv = inventory();
    let db = synthetic_entities(&inv, 1000, 2, 10, 10, 1).unwrap();
    let noise = NoiseConfig {
        confusion_eps: 0.35,
        seed: 1,
        ..NoiseConfig::default()
    };
    let data = DatasetConfig {
        n_train: 50,
        n_test: 0,
        oov_fraction: 0.2,
    };
    let gen = generate_samples(&db, &default_patterns(&inv, 1), &data, &noise, &inv).unwrap();
    let samples: Vec<LoadedSample> = gen.iter().map(|g| g.loaded(&db)).collect();
    let cfg = ModelConfig::desk();
    let tcfg = TrainConfig {
        epochs: 100,
        calib_fraction: 0.0,
        ..TrainConfig::desk()
    };
    let (p1, r1) = train(&samples, &db, &cfg, &tcfg, None).unwrap();
    let (p2, _) = train(&samples, &db, &cfg, &tcfg, None).unwrap();
    let same = p1.iter().zip(p2.iter()).all(|((a, x), (b, y))| {
        a == b
            && x.value
                .data()
                .iter()
                .map(|v| v.to_bits())
                .eq(y.value.data().iter().map(|v| v.to_bits()))
    });
    let m = model_of(cfg, p1, &inv, &db);
    let rep = evaluate(
        &samples,
        &m,
        &EvalOptions {
            require_both_classes: false,
            ..Default::default()
        },
    )
    .unwrap();
    outcome(
        rep.accuracy_entire >= 0.95 && same && r1.train_samples == 50,
        format!(
            "50 samples, {} epochs, matching accuracy {:.3} (>= 0.95), rerun bit-identical {same}",
            tcfg.epochs, rep.accuracy_entire
        ),
    )
}

// -- 7 & 9 -----------------------------------------------------------------

struct TrendRun {
    seed: u64,
    s2s: EvalReport,
    base: EvalReport,
    zero: EvalReport,
}

const TREND_EPOCHS: usize = 10;

fn trend_run(seed: u64) -> TrendRun {
    let inv = inventory();
    let db = synthetic_entities(&inv, 1000, 2, 10, 10, seed).unwrap();
    let patterns = default_patterns(&inv, seed);
    let noise = NoiseConfig {
        confusion_eps: 0.35,
        blank_insert_prob: 0.1,
        seed,
        ..NoiseConfig::default()
    };
    let data = DatasetConfig {
        n_train: 2000,
        n_test: 200,
        oov_fraction: 0.2,
    };
    let gen = generate_samples(&db, &patterns, &data, &noise, &inv).unwrap();
    let (train_set, test_set): (Vec<LoadedSample>, Vec<LoadedSample>) = gen
        .iter()
        .map(|g| g.loaded(&db))
        .partition(|s| s.sample.split == Split::Train);
    let cfg = ModelConfig::desk();
    let tcfg = TrainConfig {
        epochs: TREND_EPOCHS,
        seed,
        ..TrainConfig::desk()
    };
    let (params, _) = train(&train_set, &db, &cfg, &tcfg, None).unwrap();
    let m = model_of(cfg, params, &inv, &db);
    TrendRun {
        seed,
        s2s: evaluate(&test_set, &m, &EvalOptions::default()).unwrap(),
        base: pipeline_baseline(&test_set, &db, &patterns, true).unwrap(),
        zero: evaluate(
            &test_set,
            &m,
            &EvalOptions {
                zero_speech: true,
                ..Default::default()
            },
        )
        .unwrap(),
    }
}

fn trend(runs: &[TrendRun]) -> Outcome {
    let mut lines = Vec::new();
    let mut wins = 0;
    for r in runs {
        let a = r.s2s.accuracy_oov > r.base.accuracy_oov;
        let b = r.s2s.oov_gap() < r.base.oov_gap();
        wins += usize::from(a && b);
        lines.push(format!(
            "seed {}: oov s2s {:.3} vs base {:.3} [{}], gap s2s {:.3} vs base {:.3} [{}], entire s2s {:.3} base {:.3}",
            r.seed,
            r.s2s.accuracy_oov,
            r.base.accuracy_oov,
            if a { "ok" } else { "no" },
            r.s2s.oov_gap(),
            r.base.oov_gap(),
            if b { "ok" } else { "no" },
            r.s2s.accuracy_entire,
            r.base.accuracy_entire,
        ));
    }
    outcome(
        2 * wins > runs.len(),
        format!(
            "{wins}/{} seeds satisfy (a) and (b)\n      {}",
            runs.len(),
            lines.join("\n      ")
        ),
    )
}

fn leakage(runs: &[TrendRun]) -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    for r in runs {
        let chance = r.zero.chance.unwrap();
        ok &= r.zero.accuracy_entire < 2.0 * chance;
        lines.push(format!(
            "seed {}: zero-speech accuracy {:.3} vs 2 x chance {:.3}",
            r.seed,
            r.zero.accuracy_entire,
            2.0 * chance
        ));
    }
    outcome(ok, lines.join("; "))
}

// -- 8 ---------------------------------------------------------------------

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let inv = inventory();
    let db = synthetic_entities(&inv, 200, 2, 10, 10, 8).unwrap();
    let patterns = default_patterns(&inv, 8);
    let noise = NoiseConfig {
        confusion_eps: 0.35,
        seed: 8,
        ..NoiseConfig::default()
    };
    let data = DatasetConfig {
        n_train: 60,
        n_test: 20,
        oov_fraction: 0.2,
    };
    let tmp = tempfile::tempdir().unwrap();
    let mut corpora = Vec::new();
    let mut ckpts = Vec::new();
    let mut reports = Vec::new();
    for (k, threads) in [1usize, 3].into_iter().enumerate() {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let dir = tmp.path().join(format!("run{k}"));
            let manifest = build_dataset(&db, &patterns, &data, &noise, &inv, &dir).unwrap();
            corpora.push(dir_bytes(&dir));
            let all = s2s_core::synth::load_split(&manifest, &dir, &inv, &db, None).unwrap();
            let (tr, te): (Vec<_>, Vec<_>) = all.into_iter().partition(|s| s.sample.split == Split::Train);
            let cfg = ModelConfig::desk();
            let tcfg = TrainConfig {
                epochs: 2,
                seed: 8,
                ..TrainConfig::desk()
            };
            let (params, rep) = train(&tr, &db, &cfg, &tcfg, None).unwrap();
            let mut m = model_of(cfg, params, &inv, &db);
            m.threshold = rep.threshold.unwrap();
            let ck = dir.join("model.ckpt");
            m.save(&ck).unwrap();
            ckpts.push(std::fs::read(&ck).unwrap());
            let loaded = TrainedModel::load(&ck).unwrap();
            let r = evaluate(&te, &loaded, &EvalOptions::default()).unwrap();
            let mut bytes = serde_json::to_vec(&r).unwrap();
            bytes.extend(r.records_csv().unwrap().into_bytes());
            reports.push(bytes);
        });
    }
    let corpus_same = corpora[0] == corpora[1];
    let ckpt_same = ckpts[0] == ckpts[1];
    let report_same = reports[0] == reports[1];
    outcome(
        corpus_same && ckpt_same && report_same,
        format!(
            "two runs (1 and 3 threads): corpus {} files identical {corpus_same}, checkpoint identical {ckpt_same}, report identical {report_same}",
            corpora[0].len()
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut timed = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!(
            "criterion {n} ({name}): {} [{secs:.1}s] {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o, secs));
    };
    timed(1, "gradient correctness", &mut gradient_correctness);
    timed(2, "bridge residual removal", &mut bridge_without_query_residual);
    timed(3, "masking contract", &mut masking_contract);
    timed(4, "trie oracle equivalence", &mut trie_oracle);
    timed(5, "noiseless end-to-end recall", &mut noiseless_recall);
    timed(6, "overfit capacity", &mut overfit);
    let t = Instant::now();
    let runs: Vec<TrendRun> = (0..3).map(trend_run).collect();
    println!(
        "trend runs: 3 seeds x {TREND_EPOCHS} epochs in {:.1}s",
        t.elapsed().as_secs_f64()
    );
    timed(7, "desk-scale trend", &mut || trend(&runs));
    timed(8, "determinism", &mut determinism);
    timed(9, "leakage probe", &mut || leakage(&runs));

    println!("\nsummary");
    for (n, name, o, _) in &results {
        println!("  {n}. {name}: {}", if o.pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

//! Command implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use pki_core::ablate::{run_ablation_suite, AblationTable, Preset};
use pki_core::checkpoint::Checkpoint;
use pki_core::corpus::{synthesize_corpus, Corpus};
use pki_core::model::Model;
use pki_core::train::{
    eval_image_stream, evaluate, harmonic_mean, prepare, prepare_with_corpus, train_classes,
    ExperimentConfig, Prepared,
};
use serde::Serialize;

use crate::manifest::{guard_out_dir, RunManifest};
use crate::{AblateArgs, CliError, CorpusSynthArgs, EvalArgs, Overrides, TrainArgs};

// ── config plumbing ──────────────────────────────────────────────────────

fn load_config(path: Option<&Path>) -> Result<(ExperimentConfig, Option<Vec<u8>>), CliError> {
    match path {
        None => Ok((ExperimentConfig::default(), None)),
        Some(p) => {
            let bytes = fs::read(p)
                .map_err(|e| CliError::usage(format!("cannot read {}: {e}", p.display())))?;
            let text = String::from_utf8(bytes.clone())
                .map_err(|_| CliError::usage(format!("{} is not UTF-8", p.display())))?;
            let cfg: ExperimentConfig = toml::from_str(&text)
                .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
            Ok((cfg, Some(bytes)))
        }
    }
}

/// Seed precedence: `--seed` flag over `PKI_SEED` over the config file.
fn apply_env_seed(cfg: &mut ExperimentConfig) -> Result<(), CliError> {
    if let Ok(raw) = std::env::var("PKI_SEED") {
        cfg.seed = raw
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("PKI_SEED must be an unsigned integer, got {raw:?}")))?;
    }
    Ok(())
}

fn apply_overrides(cfg: &mut ExperimentConfig, ov: &Overrides) {
    if let Some(v) = ov.seed {
        cfg.seed = v;
    }
    if let Some(v) = ov.corpus_seed {
        cfg.corpus.seed = v;
    }
    if let Some(v) = ov.steps {
        cfg.optim.steps = v;
    }
    if let Some(v) = ov.batch {
        cfg.optim.batch = v;
    }
    if let Some(v) = ov.lr {
        cfg.optim.lr = v;
    }
    if let Some(v) = ov.shots {
        cfg.data.shots = v;
    }
    if let Some(v) = ov.eval_per_class {
        cfg.data.eval_per_class = v;
    }
    if let Some(v) = ov.image_noise {
        cfg.data.image_noise = v;
    }
    if let Some(v) = ov.inject_depth {
        cfg.model.inject_depth = v;
    }
    if let Some(v) = ov.prompt_len {
        cfg.model.prompt_len = v;
    }
    if let Some(v) = ov.lambda_text {
        cfg.model.lambda_text = v;
    }
    if let Some(v) = ov.knowledge {
        cfg.use_knowledge = v;
    }
    if let Some(v) = ov.vision_prompts {
        cfg.model.vision_prompts = v;
    }
}

fn resolve_config(
    path: Option<&Path>,
    ov: &Overrides,
) -> Result<(ExperimentConfig, Option<Vec<u8>>), CliError> {
    let (mut cfg, bytes) = load_config(path)?;
    apply_env_seed(&mut cfg)?;
    apply_overrides(&mut cfg, ov);
    cfg.validate()?;
    Ok((cfg, bytes))
}

fn write_artifact(out_dir: &Path, name: &str, contents: &[u8]) -> Result<(), CliError> {
    fs::write(out_dir.join(name), contents)
        .map_err(|e| CliError::usage(format!("cannot write {name}: {e}")))
}

// ── corpus ───────────────────────────────────────────────────────────────

pub fn corpus_synth(args: &CorpusSynthArgs) -> Result<(), CliError> {
    if args.out.exists() && !args.force {
        return Err(CliError::usage(format!(
            "{} exists; pass --force to overwrite",
            args.out.display()
        )));
    }
    let corpus = synthesize_corpus(args.seed, args.classes, args.attrs, args.pool, args.sharing)?;
    corpus.save(&args.out)?;
    println!(
        "wrote {} classes x {} attributes to {}",
        corpus.entries.len(),
        args.attrs,
        args.out.display()
    );
    Ok(())
}

pub fn corpus_validate(file: &Path) -> Result<(), CliError> {
    let corpus = Corpus::load(file)?;
    corpus.validate()?;
    let attrs: Vec<usize> = corpus.entries.iter().map(|e| e.attributes.len()).collect();
    let lo = attrs.iter().min().copied().unwrap_or(0);
    let hi = attrs.iter().max().copied().unwrap_or(0);
    println!(
        "corpus OK: {} classes, {}..{} attributes per class",
        corpus.entries.len(),
        lo,
        hi
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────────

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let (cfg, cfg_bytes) = resolve_config(args.config.as_deref(), &args.overrides)?;
    guard_out_dir(&args.out, args.force)?;

    let prep = prepare(&cfg)?;
    let split: Vec<usize> = match args.train_split.as_str() {
        "all" => (0..prep.corpus.entries.len()).collect(),
        _ => prep.base.clone(),
    };
    let outcome = train_classes(&cfg, &prep, &split, None)?;

    Checkpoint::from_model(
        &outcome.model,
        cfg.optim.steps as u64,
        cfg.seed,
        outcome.rng_word_pos,
    )
    .save(&args.out.join("checkpoint.pki"))?;

    let mut log = String::new();
    for record in &outcome.log {
        let line = serde_json::to_string(record)
            .map_err(|e| CliError::usage(format!("cannot serialise step record: {e}")))?;
        log.push_str(&line);
        log.push('\n');
    }
    write_artifact(&args.out, "train_log.jsonl", log.as_bytes())?;

    let mut manifest = RunManifest::new("train", &args.out, &[cfg.seed])
        .with_config(args.config.as_deref(), cfg_bytes.as_deref());
    manifest.record(&args.out, "checkpoint.pki")?;
    manifest.record(&args.out, "train_log.jsonl")?;
    manifest.write(&args.out)?;

    let last = outcome.log.last().expect("at least one step");
    println!(
        "trained {} steps on {} classes; final loss {:.6}; artifacts in {}",
        outcome.log.len(),
        split.len(),
        last.loss_total,
        args.out.display()
    );
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct EvalRowJson {
    seed: u64,
    metrics: Vec<(String, f64)>,
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    protocol: String,
    seeds: Vec<u64>,
    config: &'a ExperimentConfig,
    rows: Vec<EvalRowJson>,
    means: Vec<(String, f64)>,
}

fn restore_model(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<Model, CliError> {
    if ckpt.config != cfg.model {
        return Err(CliError::usage(
            "checkpoint model config differs from the supplied config",
        ));
    }
    let mut model = Model::new(&cfg.model, ckpt.seed)?;
    ckpt.apply_to(&mut model)?;
    Ok(model)
}

/// Metric rows for one protocol: per-seed accuracy draws on freshly
/// synthesized evaluation images.
fn eval_rows(
    protocol: &str,
    model: &Model,
    prep: &Prepared,
    target: Option<&Prepared>,
    cfg: &ExperimentConfig,
    seeds: &[u64],
) -> Result<Vec<EvalRowJson>, CliError> {
    let per_class = cfg.data.eval_per_class;
    let noise = cfg.data.image_noise;
    let all: Vec<usize> = (0..prep.corpus.entries.len()).collect();
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = eval_image_stream(seed);
        let metrics = match protocol {
            "base_to_novel" => {
                let b = evaluate(model, prep, &prep.base, per_class, noise, &mut rng)?;
                let n = evaluate(model, prep, &prep.novel, per_class, noise, &mut rng)?;
                vec![
                    ("base".to_string(), b),
                    ("novel".to_string(), n),
                    ("hm".to_string(), harmonic_mean(b, n)),
                ]
            }
            "few_shot" => {
                let acc = evaluate(model, prep, &all, per_class, noise, &mut rng)?;
                vec![("accuracy".to_string(), acc)]
            }
            "cross_dataset" => {
                let tprep = target.expect("target corpus prepared");
                let tall: Vec<usize> = (0..tprep.corpus.entries.len()).collect();
                let s = evaluate(model, prep, &all, per_class, noise, &mut rng)?;
                let mut trng = eval_image_stream(seed);
                let t = evaluate(model, tprep, &tall, per_class, noise, &mut trng)?;
                vec![("source".to_string(), s), ("target".to_string(), t)]
            }
            other => return Err(CliError::usage(format!("unknown protocol {other}"))),
        };
        rows.push(EvalRowJson { seed, metrics });
    }
    Ok(rows)
}

/// Column means, with the harmonic-mean column recomputed from the mean
/// base and novel accuracies so the recomputation identity holds on every
/// CSV line including the mean row.
fn eval_means(protocol: &str, rows: &[EvalRowJson]) -> Vec<(String, f64)> {
    let names: Vec<String> = rows[0].metrics.iter().map(|(n, _)| n.clone()).collect();
    let mut means: Vec<(String, f64)> = names
        .iter()
        .map(|name| {
            let sum: f64 = rows
                .iter()
                .map(|r| r.metrics.iter().find(|(n, _)| n == name).unwrap().1)
                .sum();
            (name.clone(), sum / rows.len() as f64)
        })
        .collect();
    if protocol == "base_to_novel" {
        let base = means[0].1;
        let novel = means[1].1;
        means[2].1 = harmonic_mean(base, novel);
    }
    means
}

fn eval_csv(protocol: &str, rows: &[EvalRowJson], means: &[(String, f64)]) -> String {
    let mut out = String::from("protocol,seed");
    for (name, _) in &rows[0].metrics {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{protocol},{}", row.seed);
        for (_, v) in &row.metrics {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    let _ = write!(out, "{protocol},mean");
    for (_, v) in means {
        let _ = write!(out, ",{v:.6}");
    }
    out.push('\n');
    out
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let (cfg, cfg_bytes) = resolve_config(args.config.as_deref(), &args.overrides)?;
    if args.seeds.is_empty() {
        return Err(CliError::usage("need at least one evaluation seed"));
    }
    let protocol = args.protocol.replace('-', "_");
    guard_out_dir(&args.out, args.force)?;

    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = restore_model(&cfg, &ckpt)?;
    let prep = prepare(&cfg)?;
    let target = match (protocol.as_str(), args.target_corpus.as_deref()) {
        ("cross_dataset", Some(path)) => {
            let corpus = Corpus::load(path)?;
            Some(prepare_with_corpus(&cfg, corpus)?)
        }
        ("cross_dataset", None) => {
            return Err(CliError::usage(
                "cross-dataset protocol needs --target-corpus",
            ))
        }
        _ => None,
    };

    let rows = eval_rows(&protocol, &model, &prep, target.as_ref(), &cfg, &args.seeds)?;
    let means = eval_means(&protocol, &rows);
    let csv = eval_csv(&protocol, &rows, &means);
    let summary = EvalSummary {
        protocol: protocol.clone(),
        seeds: args.seeds.clone(),
        config: &cfg,
        rows,
        means,
    };
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::usage(format!("cannot serialise summary: {e}")))?;

    let csv_name = format!("eval_{protocol}.csv");
    let json_name = format!("eval_{protocol}.json");
    write_artifact(&args.out, &csv_name, csv.as_bytes())?;
    write_artifact(&args.out, &json_name, json.as_bytes())?;

    let mut manifest = RunManifest::new("eval", &args.out, &args.seeds)
        .with_config(args.config.as_deref(), cfg_bytes.as_deref());
    manifest.record(&args.out, &csv_name)?;
    manifest.record(&args.out, &json_name)?;
    manifest.write(&args.out)?;

    print!("{csv}");
    Ok(())
}

// ── ablate ───────────────────────────────────────────────────────────────

const PRESET_LIST: &str = "components, depth, prompts, attrs, pki, prompt-and-attrs";

pub fn ablate(args: &AblateArgs) -> Result<(), CliError> {
    let (cfg, cfg_bytes) = resolve_config(args.config.as_deref(), &args.overrides)?;
    guard_out_dir(&args.out, args.force)?;

    let table = match args.preset.as_str() {
        // Combined prompt-count and attribute-count sweep.
        "prompt-and-attrs" => {
            let mut first = run_ablation_suite(&cfg, Preset::Prompts, &args.seeds)?;
            let second = run_ablation_suite(&cfg, Preset::Attrs, &args.seeds)?;
            first.rows.extend(second.rows);
            first.wall_secs += second.wall_secs;
            AblationTable {
                preset: "prompt-and-attrs".to_string(),
                ..first
            }
        }
        name => match Preset::from_name(name) {
            Some(preset) => run_ablation_suite(&cfg, preset, &args.seeds)?,
            None => {
                return Err(CliError::usage(format!(
                    "unknown preset {name:?}; available presets: {PRESET_LIST}"
                )))
            }
        },
    };

    let csv = table.to_csv();
    let json = table.to_json()?;
    let csv_name = format!("ablation_{}.csv", table.preset);
    let json_name = format!("ablation_{}.json", table.preset);
    write_artifact(&args.out, &csv_name, csv.as_bytes())?;
    write_artifact(&args.out, &json_name, json.as_bytes())?;

    let mut manifest = RunManifest::new("ablate", &args.out, &args.seeds)
        .with_config(args.config.as_deref(), cfg_bytes.as_deref());
    manifest.record(&args.out, &csv_name)?;
    manifest.record(&args.out, &json_name)?;
    manifest.write(&args.out)?;

    for row in &table.rows {
        println!(
            "{:24} base {:.3}  novel {:.3}  hm {:.3}",
            row.label, row.mean_base, row.mean_novel, row.mean_hm
        );
    }
    println!(
        "{} rows x {} seeds in {:.1}s; table in {}",
        table.rows.len(),
        table.seeds.len(),
        table.wall_secs,
        args.out.display()
    );
    Ok(())
}

// ── inspect ──────────────────────────────────────────────────────────────

pub fn inspect(checkpoint: &Path) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    print!("{}", ckpt.describe());
    Ok(())
}

//! Ablation presets and the consolidated results table.
//!
//! Each preset is a named list of config variants sharing one base
//! configuration; every variant runs the base-to-novel protocol once per
//! seed, and the table carries both the per-seed reports and per-variant
//! means. The component grid toggles one mechanism at a time (attribute
//! knowledge in the text input, the attribute-aware fusion blocks, the
//! text-to-vision prompt projection); the remaining presets sweep fusion
//! depth, prompt count, and attribute count.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::train::{harmonic_mean, run_base_to_novel, ExperimentConfig, ProtocolReport};

/// Named sweep over config variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Five-row on/off grid over knowledge, fusion, and projection.
    Components,
    /// Fusion depth `J` from 0 to the number of text layers.
    Depth,
    /// Learnable prompt count `M`.
    Prompts,
    /// Attributes per class `N` (regenerates the corpus per row).
    Attrs,
    /// Paired rows: full mechanism vs. plain learnable prompts.
    Pki,
}

impl Preset {
    pub const NAMES: [&'static str; 5] = ["components", "depth", "prompts", "attrs", "pki"];

    pub fn from_name(name: &str) -> Option<Preset> {
        match name {
            "components" => Some(Preset::Components),
            "depth" => Some(Preset::Depth),
            "prompts" => Some(Preset::Prompts),
            "attrs" => Some(Preset::Attrs),
            "pki" => Some(Preset::Pki),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Components => "components",
            Preset::Depth => "depth",
            Preset::Prompts => "prompts",
            Preset::Attrs => "attrs",
            Preset::Pki => "pki",
        }
    }
}

/// One config variant with its per-seed results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// One base-to-novel report per seed, in seed order.
    pub reports: Vec<ProtocolReport>,
    pub mean_base: f64,
    pub mean_novel: f64,
    /// Harmonic mean averaged over seeds (not the HM of the mean accuracies).
    pub mean_hm: f64,
}

/// Consolidated result of one preset run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub preset: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub wall_secs: f64,
}

impl AblationTable {
    /// Stable-column CSV: one line per (row, seed) plus a `mean` line per
    /// row. Accuracies are printed with six decimals so files diff cleanly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("preset,row,protocol,seed,base,novel,hm\n");
        for row in &self.rows {
            for rep in &row.reports {
                let base = rep.metric("base_acc").unwrap_or(f64::NAN);
                let novel = rep.metric("novel_acc").unwrap_or(f64::NAN);
                let hm = rep.metric("harmonic_mean").unwrap_or(f64::NAN);
                let _ = writeln!(
                    out,
                    "{},{},{},{},{:.6},{:.6},{:.6}",
                    self.preset, row.label, rep.protocol, rep.seed, base, novel, hm
                );
            }
            let _ = writeln!(
                out,
                "{},{},base_to_novel,mean,{:.6},{:.6},{:.6}",
                self.preset, row.label, row.mean_base, row.mean_novel, row.mean_hm
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("cannot serialise ablation table: {e}")))
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Per-seed harmonic means of one row, in seed order — the unit the paired
/// significance test consumes.
pub fn row_hms(row: &AblationRow) -> Vec<f64> {
    row.reports
        .iter()
        .map(|r| r.metric("harmonic_mean").unwrap_or(f64::NAN))
        .collect()
}

/// One-sided paired t-test on per-seed differences, testing whether the
/// mean difference is greater than zero. Returns `(t, p)`.
///
/// A zero-variance sample is decided by the sign of its mean: uniformly
/// positive differences give p = 0, uniformly negative give p = 1, and an
/// all-zero sample is the indifferent p = 0.5.
pub fn paired_one_sided_t(diffs: &[f64]) -> Result<(f64, f64)> {
    if diffs.len() < 2 {
        return Err(Error::Usage(format!(
            "paired test needs at least two differences, got {}",
            diffs.len()
        )));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Domain("non-finite difference in paired test".into()));
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Ok(match mean.partial_cmp(&0.0).expect("finite mean") {
            std::cmp::Ordering::Greater => (f64::INFINITY, 0.0),
            std::cmp::Ordering::Less => (f64::NEG_INFINITY, 1.0),
            std::cmp::Ordering::Equal => (0.0, 0.5),
        });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::Domain(format!("t distribution: {e}")))?;
    Ok((t, 1.0 - dist.cdf(t)))
}

fn variants(base: &ExperimentConfig, preset: Preset) -> Vec<(String, ExperimentConfig)> {
    let with = |label: &str, edit: &dyn Fn(&mut ExperimentConfig)| {
        let mut cfg = base.clone();
        edit(&mut cfg);
        (label.to_string(), cfg)
    };
    match preset {
        Preset::Components => vec![
            with("prompts_only", &|c| {
                c.use_knowledge = false;
                c.model.inject_depth = 0;
                c.model.vision_prompts = false;
            }),
            with("knowledge", &|c| {
                c.model.inject_depth = 0;
                c.model.vision_prompts = false;
            }),
            with("knowledge_fusion", &|c| {
                c.model.vision_prompts = false;
            }),
            with("knowledge_projection", &|c| {
                c.model.inject_depth = 0;
            }),
            with("full", &|_| {}),
        ],
        Preset::Depth => (0..=base.model.text_layers)
            .map(|j| with(&format!("depth_{j}"), &|c| c.model.inject_depth = j))
            .collect(),
        Preset::Prompts => [1usize, 2, 4, 6, 8]
            .iter()
            .map(|&m| with(&format!("prompts_{m}"), &|c| c.model.prompt_len = m))
            .collect(),
        Preset::Attrs => [2usize, 4, 8, 12]
            .iter()
            .map(|&n| with(&format!("attrs_{n}"), &|c| c.corpus.attrs_per_class = n))
            .collect(),
        Preset::Pki => vec![
            with("pki_on", &|_| {}),
            with("pki_off", &|c| {
                c.use_knowledge = false;
                c.model.inject_depth = 0;
                c.model.vision_prompts = false;
            }),
        ],
    }
}

/// Run every variant of `preset` under each seed (the seed overrides only
/// the run seed; corpus and data stay as configured) and consolidate the
/// base-to-novel reports.
pub fn run_ablation_suite(
    base: &ExperimentConfig,
    preset: Preset,
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one seed".into()));
    }
    let start = Instant::now();
    let mut rows = Vec::new();
    for (label, cfg) in variants(base, preset) {
        cfg.validate()?;
        let mut reports = Vec::with_capacity(seeds.len());
        let (mut sb, mut sn, mut sh) = (0.0, 0.0, 0.0);
        for &seed in seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = seed;
            let (report, _) = run_base_to_novel(&run_cfg)?;
            sb += report.metric("base_acc").expect("protocol metric");
            sn += report.metric("novel_acc").expect("protocol metric");
            sh += report.metric("harmonic_mean").expect("protocol metric");
            reports.push(report);
        }
        let n = seeds.len() as f64;
        rows.push(AblationRow {
            label,
            reports,
            mean_base: sb / n,
            mean_novel: sn / n,
            mean_hm: sh / n,
        });
    }
    Ok(AblationTable {
        preset: preset.name().to_string(),
        seeds: seeds.to_vec(),
        rows,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// `harmonic_mean` re-exported check helper: recompute a report's HM from
/// its own accuracies.
pub fn report_hm_consistent(report: &ProtocolReport, tol: f64) -> bool {
    match (
        report.metric("base_acc"),
        report.metric("novel_acc"),
        report.metric("harmonic_mean"),
    ) {
        (Some(b), Some(n), Some(h)) => (harmonic_mean(b, n) - h).abs() <= tol,
        _ => false,
    }
}

//! Paired ablation over loss weighting, adapter fine-tuning and condition
//! groups, with a markdown and JSON report.
//!
//! One unit is a (γ, group set, seed) triple: a model is trained in full
//! mode, evaluated with adapters bypassed, then adapter-finetuned and
//! evaluated again. Both evaluations use the same sampling noise.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::data::{DataError, SyntheticSet, SyntheticSetConfig};
use super::model::{ModelConfig, ModelError, ToyDenoiser};
use super::sample::{reconstruction_error, ReconError, SampleConfig, SampleError};
use super::train::{train, TrainConfig, TrainError, TrainMode};

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("invalid ablation config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sample(#[from] SampleError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub data: SyntheticSetConfig,
    /// Model template; `groups` and `seed` are set per unit.
    pub model: ModelConfig,
    /// Stage-one training; `gamma`, `seed` and `mode` are set per unit.
    pub train: TrainConfig,
    /// Adapter fine-tuning; `gamma`, `seed` and `mode` are set per unit.
    pub finetune: TrainConfig,
    pub sample: SampleConfig,
    /// Sampling noise draws per held-out clip.
    pub eval_draws: usize,
    pub gammas: Vec<f64>,
    pub group_sets: Vec<Vec<String>>,
    pub seeds: Vec<u64>,
    /// Also train an unconditioned model per seed at the larger gamma.
    pub baseline: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            data: SyntheticSetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                steps: 300,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                steps: 150,
                mode: TrainMode::AdapterFinetune,
                ..TrainConfig::default()
            },
            sample: SampleConfig::default(),
            eval_draws: 4,
            gammas: vec![0.0, 2.0],
            group_sets: vec![vec!["sem_dep".into()], vec!["mpi_coor".into()]],
            seeds: vec![0, 1, 2],
            baseline: true,
        }
    }
}

/// Seed offset separating fine-tuning batches from stage-one batches.
const FINETUNE_SEED_OFFSET: u64 = 0x5eed_0f7e;

impl AblationConfig {
    pub fn validate(&self) -> Result<(), AblationError> {
        let err = |m: &str| Err(AblationError::Config(m.into()));
        if self.gammas.len() != 2 {
            return err("exactly two gamma values are compared");
        }
        if self.gammas[0] == self.gammas[1] {
            return err("gamma values must differ");
        }
        if self.group_sets.is_empty() || self.group_sets.iter().any(Vec::is_empty) {
            return err("every group set needs at least one group");
        }
        if self.seeds.is_empty() {
            return err("no seeds");
        }
        if self.eval_draws == 0 {
            return err("eval_draws must be positive");
        }
        self.train.validate()?;
        self.finetune.validate()?;
        Ok(())
    }

    fn units(&self) -> Vec<(f64, Vec<String>, u64)> {
        let mut out = Vec::new();
        for &g in &self.gammas {
            for set in &self.group_sets {
                for &s in &self.seeds {
                    out.push((g, set.clone(), s));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitResult {
    pub gamma: f64,
    pub groups: Vec<String>,
    pub seed: u64,
    pub final_loss: f64,
    pub adapter_off: ReconError,
    pub adapter_on: ReconError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub gamma: f64,
    pub adapter: bool,
    pub groups: Vec<String>,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<ReconError>,
    pub mean: ReconError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub claim: String,
    /// Seeds where the claimed direction holds.
    pub wins: usize,
    pub seeds: usize,
    pub pass: bool,
    pub per_seed: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub gamma: f64,
    pub seed: u64,
    pub final_loss: f64,
    pub error: ReconError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub units: Vec<UnitResult>,
    pub rows: Vec<CellRow>,
    pub baseline: Vec<BaselineResult>,
    pub mask_loss: Verdict,
    pub adapter: Verdict,
    /// Every group set beats the unconditioned model; absent without a baseline.
    pub groups: Option<Verdict>,
}

fn held_out_error(model: &ToyDenoiser, set: &SyntheticSet, cfg: &AblationConfig, seed: u64, adapter: bool) -> Result<ReconError, AblationError> {
    let mut total = ReconError::default();
    for draw in 0..cfg.eval_draws {
        let sample = SampleConfig {
            seed: seed.wrapping_mul(1000).wrapping_add(draw as u64),
            ..cfg.sample.clone()
        };
        let e = reconstruction_error(model, &set.heldout, &sample, adapter)?;
        total.all += e.all;
        total.fg += e.fg;
        total.bg += e.bg;
    }
    let n = cfg.eval_draws as f64;
    Ok(ReconError {
        all: total.all / n,
        fg: total.fg / n,
        bg: total.bg / n,
    })
}

/// Trains and evaluates one unit.
pub fn run_unit(
    cfg: &AblationConfig,
    set: &SyntheticSet,
    gamma: f64,
    groups: &[String],
    seed: u64,
) -> Result<UnitResult, AblationError> {
    let mut model = ToyDenoiser::new(ModelConfig {
        groups: groups.to_vec(),
        seed,
        ..cfg.model.clone()
    })?;
    let stage1 = TrainConfig {
        gamma,
        seed,
        mode: TrainMode::Full,
        ..cfg.train.clone()
    };
    let log = train(&mut model, &set.train, &stage1, |_| {})?;
    let adapter_off = held_out_error(&model, set, cfg, seed, false)?;
    let stage2 = TrainConfig {
        gamma,
        seed: seed ^ FINETUNE_SEED_OFFSET,
        mode: TrainMode::AdapterFinetune,
        ..cfg.finetune.clone()
    };
    train(&mut model, &set.train, &stage2, |_| {})?;
    let adapter_on = held_out_error(&model, set, cfg, seed, true)?;
    log::info!(
        "unit gamma={gamma} groups={} seed={seed}: off fg {:.4} all {:.4}, on fg {:.4} all {:.4}",
        groups.join("+"),
        adapter_off.fg,
        adapter_off.all,
        adapter_on.fg,
        adapter_on.all
    );
    Ok(UnitResult {
        gamma,
        groups: groups.to_vec(),
        seed,
        final_loss: log.last().map_or(f64::NAN, |l| l.loss),
        adapter_off,
        adapter_on,
    })
}

/// Trains and evaluates an unconditioned model.
pub fn run_baseline(cfg: &AblationConfig, set: &SyntheticSet, gamma: f64, seed: u64) -> Result<BaselineResult, AblationError> {
    let mut model = ToyDenoiser::new(ModelConfig {
        groups: Vec::new(),
        seed,
        ..cfg.model.clone()
    })?;
    let stage1 = TrainConfig {
        gamma,
        seed,
        mode: TrainMode::Full,
        ..cfg.train.clone()
    };
    let log = train(&mut model, &set.train, &stage1, |_| {})?;
    let error = held_out_error(&model, set, cfg, seed, false)?;
    log::info!("baseline gamma={gamma} seed={seed}: all {:.4}", error.all);
    Ok(BaselineResult {
        gamma,
        seed,
        final_loss: log.last().map_or(f64::NAN, |l| l.loss),
        error,
    })
}

enum Job {
    Unit(f64, Vec<String>, u64),
    Baseline(f64, u64),
}

enum Outcome {
    Unit(UnitResult),
    Baseline(BaselineResult),
}

/// Runs every unit on `jobs` worker threads. Results do not depend on
/// `jobs`: each unit is seeded independently and trains single-threaded.
pub fn run_ablation(cfg: &AblationConfig, jobs: usize) -> Result<AblationReport, AblationError> {
    cfg.validate()?;
    let set = cfg.data.build()?;
    let mut work: Vec<Job> = cfg.units().into_iter().map(|(g, groups, s)| Job::Unit(g, groups, s)).collect();
    if cfg.baseline {
        let hi = cfg.gammas[0].max(cfg.gammas[1]);
        work.extend(cfg.seeds.iter().map(|&s| Job::Baseline(hi, s)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| AblationError::Config(e.to_string()))?;
    let results: Result<Vec<Outcome>, AblationError> = pool.install(|| {
        work.par_iter()
            .map(|job| match job {
                Job::Unit(g, groups, s) => run_unit(cfg, &set, *g, groups, *s).map(Outcome::Unit),
                Job::Baseline(g, s) => run_baseline(cfg, &set, *g, *s).map(Outcome::Baseline),
            })
            .collect()
    });
    let (mut units, mut baseline) = (Vec::new(), Vec::new());
    for r in results? {
        match r {
            Outcome::Unit(u) => units.push(u),
            Outcome::Baseline(b) => baseline.push(b),
        }
    }
    Ok(summarize(cfg, units, baseline))
}

fn mean_error(errs: &[ReconError]) -> ReconError {
    let n = errs.len().max(1) as f64;
    ReconError {
        all: errs.iter().map(|e| e.all).sum::<f64>() / n,
        fg: errs.iter().map(|e| e.fg).sum::<f64>() / n,
        bg: errs.iter().map(|e| e.bg).sum::<f64>() / n,
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Builds cell rows and verdicts from unit results.
pub fn summarize(cfg: &AblationConfig, units: Vec<UnitResult>, baseline: Vec<BaselineResult>) -> AblationReport {
    let mut rows = Vec::new();
    for &gamma in &cfg.gammas {
        for adapter in [false, true] {
            for set in &cfg.group_sets {
                let per_seed: Vec<ReconError> = cfg
                    .seeds
                    .iter()
                    .filter_map(|&s| {
                        units
                            .iter()
                            .find(|u| u.gamma == gamma && &u.groups == set && u.seed == s)
                            .map(|u| if adapter { u.adapter_on } else { u.adapter_off })
                    })
                    .collect();
                rows.push(CellRow {
                    gamma,
                    adapter,
                    groups: set.clone(),
                    seeds: cfg.seeds.clone(),
                    mean: mean_error(&per_seed),
                    per_seed,
                });
            }
        }
    }

    let (lo, hi) = (cfg.gammas[0].min(cfg.gammas[1]), cfg.gammas[0].max(cfg.gammas[1]));
    let of_seed = |s: u64| units.iter().filter(move |u| u.seed == s);
    let mask_pairs: Vec<(f64, f64)> = cfg
        .seeds
        .iter()
        .map(|&s| {
            let fg = |g: f64| mean(of_seed(s).filter(|u| u.gamma == g).map(|u| u.adapter_off.fg));
            (fg(hi), fg(lo))
        })
        .collect();
    let adapter_pairs: Vec<(f64, f64)> = cfg
        .seeds
        .iter()
        .map(|&s| {
            (
                mean(of_seed(s).map(|u| u.adapter_on.all)),
                mean(of_seed(s).map(|u| u.adapter_off.all)),
            )
        })
        .collect();
    let verdict = |claim: String, pairs: Vec<(f64, f64)>, strict: bool| {
        let wins = pairs
            .iter()
            .filter(|(a, b)| if strict { a < b } else { a <= b })
            .count();
        Verdict {
            claim,
            wins,
            seeds: pairs.len(),
            pass: 2 * wins > pairs.len(),
            per_seed: pairs,
        }
    };
    let groups = (!baseline.is_empty()).then(|| {
        let pairs: Vec<(f64, f64)> = cfg
            .seeds
            .iter()
            .filter_map(|&s| {
                let base = baseline.iter().find(|b| b.seed == s)?;
                let worst = of_seed(s)
                    .filter(|u| u.gamma == base.gamma)
                    .map(|u| u.adapter_off.all)
                    .fold(f64::NEG_INFINITY, f64::max);
                Some((worst, base.error.all))
            })
            .collect();
        verdict(
            format!("every group set has lower held-out error than the unconditioned model (gamma={hi}, adapter off)"),
            pairs,
            true,
        )
    });
    AblationReport {
        baseline,
        groups,
        mask_loss: verdict(
            format!("foreground error with gamma={hi} is below gamma={lo} (adapter off, mean over group sets)"),
            mask_pairs,
            true,
        ),
        adapter: verdict(
            "held-out error with adapter fine-tuning is not above the stage-one model (mean over gamma and group sets)".into(),
            adapter_pairs,
            false,
        ),
        config: cfg.clone(),
        units,
        rows,
    }
}

impl AblationReport {
    pub fn to_markdown(&self) -> String {
        let mut md = String::from("# Ablation report\n\n");
        let _ = writeln!(md, "Held-out reconstruction error (MSE on generated latent frames), mean over seeds {:?}.\n", self.config.seeds);
        md.push_str("| gamma | adapter | groups | all | foreground | background | per-seed foreground |\n");
        md.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let per: Vec<String> = r.per_seed.iter().map(|e| format!("{:.4}", e.fg)).collect();
            let _ = writeln!(
                md,
                "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {} |",
                r.gamma,
                if r.adapter { "on" } else { "off" },
                r.groups.join("+"),
                r.mean.all,
                r.mean.fg,
                r.mean.bg,
                per.join(", ")
            );
        }
        for b in &self.baseline {
            let _ = writeln!(
                md,
                "| {} | off | none (seed {}) | {:.4} | {:.4} | {:.4} | |",
                b.gamma, b.seed, b.error.all, b.error.fg, b.error.bg
            );
        }
        md.push_str("\n## Verdicts\n\n");
        for v in [Some(&self.mask_loss), Some(&self.adapter), self.groups.as_ref()].into_iter().flatten() {
            let pairs: Vec<String> = v.per_seed.iter().map(|(a, b)| format!("{a:.4} vs {b:.4}")).collect();
            let _ = writeln!(
                md,
                "- {}: {} ({}/{} seeds; {})",
                v.claim,
                if v.pass { "PASS" } else { "FAIL" },
                v.wins,
                v.seeds,
                pairs.join(", ")
            );
        }
        md
    }
}

//! Presets, run configuration and the paired-arm experiment.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correspondence::write_correspondences;
use crate::dataset::{read_dataset, write_dataset};
use crate::model::{denoiser_forward, save_checkpoint, supervised_distributions, ForwardOptions, ModelConfig, NoiseSchedule};
use crate::nn::Real;
use crate::probe::{evaluate_pairs, MatchSource, PrecisionReport, ProbePair};
use crate::report::{self, ArmMetrics, Chart, LineChart, Series};
use crate::scene::SceneSetSpec;
use crate::train::{self, eval_input, init_params, prepare_scene, EvalResult, SceneData, TrainConfig};

pub const PRESETS: [&str; 2] = ["tiny", "small"];

/// Iterations at the end of a run whose losses are averaged for comparisons.
pub const TAIL: usize = 200;

/// Everything an experiment depends on besides its input files. Written as
/// `config.json` next to the outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    /// Floating-point width of training and inference, 32 or 64.
    pub precision: u32,
    /// Worker threads; `None` leaves the choice to the runtime.
    pub threads: Option<usize>,
    /// The full scene set; the first `train_scenes` are used for training and
    /// the rest for evaluation.
    pub scenes: SceneSetSpec,
    pub train_scenes: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Alignment weight of each arm; the first is the baseline.
    pub lambdas: Vec<f64>,
}

impl RunConfig {
    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        let cfg = match name {
            "tiny" => Self {
                preset: name.into(),
                seed,
                precision: 32,
                threads: None,
                scenes: SceneSetSpec { scenes: 64, ..SceneSetSpec::tiny() },
                train_scenes: 32,
                model: ModelConfig::tiny(),
                train: TrainConfig { seed, ..TrainConfig::default() },
                lambdas: vec![0.0, 0.02],
            },
            "small" => Self {
                preset: name.into(),
                seed,
                precision: 32,
                threads: None,
                scenes: SceneSetSpec { scenes: 128, ..SceneSetSpec::tiny() },
                train_scenes: 96,
                model: ModelConfig { dim: 48, blocks: 3, supervised_block: 1, ..ModelConfig::tiny() },
                train: TrainConfig { seed, iterations: 4000, batch_size: 2, eval_every: 400, ..TrainConfig::default() },
                lambdas: vec![0.0, 0.02],
            },
            _ => return None,
        };
        Some(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.precision != 32 && self.precision != 64 {
            return Err(format!("precision must be 32 or 64, got {}", self.precision));
        }
        if self.threads == Some(0) {
            return Err("threads must be positive".into());
        }
        if self.train_scenes == 0 || self.train_scenes >= self.scenes.scenes {
            return Err(format!("train_scenes must lie in 1..{}", self.scenes.scenes));
        }
        if self.scenes.views != self.model.views {
            return Err(format!("scenes have {} views, model expects {}", self.scenes.views, self.model.views));
        }
        if self.lambdas.is_empty() {
            return Err("at least one arm is required".into());
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err("lambdas must be non-negative".into());
        }
        self.model.validate().map_err(|e| e.to_string())?;
        TrainConfig { lambda: self.lambdas[0], ..self.train.clone() }.validate().map_err(|e| e.to_string())?;
        Ok(())
    }
}

pub fn arm_name(lambda: f64) -> String {
    format!("lambda_{lambda}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Synth,
    Corr,
    Train,
    Probe,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Synth => "synth",
            Stage::Corr => "corr",
            Stage::Train => "train",
            Stage::Probe => "probe",
            Stage::Report => "report",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("[{stage}] {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

fn at<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError { stage, message: e.to_string() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub iter: usize,
    pub median: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub lambda: f64,
    pub checkpoints: Vec<CheckpointSummary>,
    /// Median held-out precision at the last checkpoint.
    pub final_precision: f64,
    pub precision_monotone: bool,
    /// Means over the last [`TAIL`] iterations.
    pub tail_loss_denoise: f64,
    pub tail_loss_cameo: f64,
    /// Held-out pairs of the final checkpoint, binned by relative rotation.
    pub bins: PrecisionReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub aligned: String,
    /// Final precision difference in absolute percentage points.
    pub precision_gap_points: f64,
    /// Aligned over baseline tail denoising loss.
    pub denoise_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbedPair {
    pub scene: String,
    pub pair: (usize, usize),
    pub precision: f64,
    pub precision_perturbed: f64,
    pub self_floor: f64,
    pub masked_ce: Option<f64>,
    pub masked_ce_perturbed: Option<f64>,
}

impl PerturbedPair {
    pub fn at_floor(&self) -> bool {
        (self.precision_perturbed - self.self_floor).abs() <= 1e-12
    }

    pub fn ce_increased(&self) -> bool {
        matches!((self.masked_ce, self.masked_ce_perturbed), (Some(a), Some(b)) if b > a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub arm: String,
    pub block: usize,
    pub pairs: Vec<PerturbedPair>,
    pub at_floor: usize,
    pub ce_increased: usize,
}

/// Identity-perturbs the supervised block and compares every held-out pair
/// against the unperturbed model.
pub fn perturbation_report<T: Real>(
    arm: &str,
    model: &ModelConfig,
    params: &crate::model::DenoiserParams<T>,
    scenes: &[SceneData],
    k: usize,
    rho: f64,
) -> Result<PerturbationReport, train::TrainError> {
    let before = train::evaluate(model, params, scenes, false, k, rho, 0)?;
    let after = train::evaluate(model, params, scenes, true, k, rho, 0)?;
    let pairs: Vec<PerturbedPair> = before
        .pairs
        .iter()
        .zip(&after.pairs)
        .map(|(b, a)| PerturbedPair {
            scene: b.scene.clone(),
            pair: b.pair,
            precision: b.precision,
            precision_perturbed: a.precision,
            self_floor: a.self_floor,
            masked_ce: b.masked_ce,
            masked_ce_perturbed: a.masked_ce,
        })
        .collect();
    Ok(PerturbationReport {
        arm: arm.into(),
        block: model.supervised_block,
        at_floor: pairs.iter().filter(|p| p.at_floor()).count(),
        ce_increased: pairs.iter().filter(|p| p.ce_increased()).count(),
        pairs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub preset: String,
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub arms: Vec<ArmReport>,
    pub comparison: Option<Comparison>,
    pub perturbation: Option<PerturbationReport>,
}

/// Supervised-block maps of held-out pairs as probe inputs.
pub fn attention_pairs<T: Real>(
    model: &ModelConfig,
    params: &crate::model::DenoiserParams<T>,
    scenes: &[SceneData],
) -> Result<Vec<ProbePair>, train::TrainError> {
    let mut out = Vec::new();
    for s in scenes {
        let state = denoiser_forward(model, params, &eval_input::<T>(s), ForwardOptions::default())?;
        let pairs: Vec<(usize, usize)> = s.corr.iter().map(|c| c.pair).collect();
        for d in supervised_distributions(model, params, &state, &pairs)? {
            let (i, j) = d.pair();
            out.push(ProbePair {
                id: format!("{}:{i}-{j}", s.name),
                theta_deg: s.theta(i, j),
                geom_a: s.views[i].grid.clone(),
                geom_b: s.views[j].grid.clone(),
                source: MatchSource::Attention(d.map()),
            });
        }
    }
    Ok(out)
}

fn is_monotone(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] >= w[0])
}

fn tail(rows: &[train::MetricRow], f: fn(&train::MetricRow) -> f64) -> f64 {
    let t = &rows[rows.len().saturating_sub(TAIL)..];
    if t.is_empty() {
        0.0
    } else {
        t.iter().map(f).sum::<f64>() / t.len() as f64
    }
}

struct ArmRun {
    metrics: ArmMetrics,
    report: ArmReport,
    perturbation: Option<PerturbationReport>,
}

fn run_arm<T: Real>(
    cfg: &RunConfig,
    lambda: f64,
    train_set: &[SceneData],
    eval_set: &[SceneData],
    out: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<ArmRun, PipelineError> {
    let arm = arm_name(lambda);
    let dir = out.join("arms").join(&arm);
    let tcfg = TrainConfig { lambda, seed: cfg.seed, ..cfg.train.clone() };
    let sched = NoiseSchedule::default();
    let init = init_params::<T>(&cfg.model, cfg.seed).map_err(at(Stage::Train))?;
    let outcome = train::train(&cfg.model, init, train_set, eval_set, &tcfg, &sched, |ev: &EvalResult, p| {
        progress(&format!("{arm}: iteration {} median precision {:.3}", ev.iter, ev.median));
        save_checkpoint(&dir.join(format!("iter_{:06}", ev.iter)), &cfg.model, p, ev.iter, serde_json::json!({ "lambda": lambda }))?;
        Ok(())
    })
    .map_err(at(Stage::Train))?;
    save_checkpoint(&dir.join("final"), &cfg.model, &outcome.averaged, tcfg.iterations, serde_json::json!({ "lambda": lambda }))
        .map_err(at(Stage::Train))?;

    let pairs = attention_pairs(&cfg.model, &outcome.averaged, eval_set).map_err(at(Stage::Probe))?;
    let bins = evaluate_pairs(&pairs, tcfg.top_k, tcfg.rho).map_err(at(Stage::Probe))?;
    let perturbation = (lambda > 0.0)
        .then(|| perturbation_report(&arm, &cfg.model, &outcome.averaged, eval_set, tcfg.top_k, tcfg.rho))
        .transpose()
        .map_err(at(Stage::Probe))?;

    let checkpoints: Vec<CheckpointSummary> =
        outcome.checkpoints.iter().map(|c| CheckpointSummary { iter: c.iter, median: c.median, mean: c.mean }).collect();
    let medians: Vec<f64> = checkpoints.iter().map(|c| c.median).collect();
    let report = ArmReport {
        arm: arm.clone(),
        lambda,
        final_precision: medians.last().copied().unwrap_or(0.0),
        precision_monotone: is_monotone(&medians),
        tail_loss_denoise: tail(&outcome.log, |r| r.loss_denoise),
        tail_loss_cameo: tail(&outcome.log, |r| r.loss_cameo),
        checkpoints,
        bins,
    };
    Ok(ArmRun { metrics: ArmMetrics { arm, rows: outcome.log }, report, perturbation })
}

fn curves(runs: &[ArmRun]) -> String {
    let mut charts = report::loss_and_precision_charts(&runs.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>());
    charts.truncate(1);
    charts.push(Chart::Line(LineChart {
        title: "Held-out supervised-layer precision".into(),
        x_label: "iteration".into(),
        y_label: "median Precision@ρ over pairs".into(),
        series: runs
            .iter()
            .map(|r| Series {
                label: r.report.arm.clone(),
                points: r.report.checkpoints.iter().map(|c| (c.iter as f64, c.median)).collect(),
            })
            .collect(),
    }));
    charts.push(report::bin_chart(&runs.iter().map(|r| (r.report.arm.clone(), r.report.bins.clone())).collect::<Vec<_>>()));
    report::render_svg(&charts, 3)
}

/// Token grids, latents and correspondences of every scene, in input order.
pub fn prepare_all(
    raw: &[(crate::scene::Scene, Vec<crate::scene::Pointmap>)],
    model: &ModelConfig,
    tau: f64,
) -> Result<Vec<SceneData>, train::TrainError> {
    let prep = |(scene, pms): &(crate::scene::Scene, Vec<crate::scene::Pointmap>)| prepare_scene(scene, pms, model, tau);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        raw.par_iter().map(prep).collect()
    }
    #[cfg(not(feature = "parallel"))]
    raw.iter().map(prep).collect()
}

/// Runs synth → corr → train (one arm per λ) → probe → report into `out`,
/// writing `config.json`, `metrics.csv`, `report.json` and `curves.svg`.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, progress: &mut dyn FnMut(&str)) -> Result<PipelineReport, PipelineError> {
    cfg.validate().map_err(at(Stage::Config))?;
    std::fs::create_dir_all(out).map_err(at(Stage::Config))?;
    let json = serde_json::to_string_pretty(cfg).map_err(at(Stage::Config))?;
    std::fs::write(out.join("config.json"), json + "\n").map_err(at(Stage::Config))?;

    progress(&format!("synth: {} scenes", cfg.scenes.scenes));
    let data_dir = out.join("data");
    write_dataset(&data_dir, &cfg.scenes, cfg.seed).map_err(at(Stage::Synth))?;

    progress("corr: token correspondences");
    let raw = read_dataset(&data_dir).map_err(at(Stage::Corr))?;
    let prepared = prepare_all(&raw, &cfg.model, cfg.train.tau).map_err(at(Stage::Corr))?;
    for s in &prepared {
        write_correspondences(&out.join("corr").join(&s.name), &s.corr).map_err(at(Stage::Corr))?;
    }
    let (train_set, eval_set) = prepared.split_at(cfg.train_scenes);

    let mut runs = Vec::new();
    for &lambda in &cfg.lambdas {
        progress(&format!("train: {}", arm_name(lambda)));
        let run = if cfg.precision == 64 {
            run_arm::<f64>(cfg, lambda, train_set, eval_set, out, progress)?
        } else {
            run_arm::<f32>(cfg, lambda, train_set, eval_set, out, progress)?
        };
        runs.push(run);
    }

    progress("report");
    let comparison = (runs.len() >= 2).then(|| {
        let (b, a) = (&runs[0].report, &runs[runs.len() - 1].report);
        Comparison {
            baseline: b.arm.clone(),
            aligned: a.arm.clone(),
            precision_gap_points: 100.0 * (a.final_precision - b.final_precision),
            denoise_ratio: a.tail_loss_denoise / b.tail_loss_denoise,
        }
    });
    let report = PipelineReport {
        preset: cfg.preset.clone(),
        seed: cfg.seed,
        train_scenes: train_set.len(),
        eval_scenes: eval_set.len(),
        arms: runs.iter().map(|r| r.report.clone()).collect(),
        comparison,
        perturbation: runs.iter().rev().find_map(|r| r.perturbation.clone()),
    };
    let metrics: Vec<ArmMetrics> = runs.iter().map(|r| r.metrics.clone()).collect();
    let write = |name: &str, text: String| std::fs::write(out.join(name), text).map_err(at(Stage::Report));
    write("metrics.csv", report::metrics_csv(&metrics))?;
    write("report.json", serde_json::to_string_pretty(&report).map_err(at(Stage::Report))? + "\n")?;
    write("curves.svg", curves(&runs))?;
    Ok(report)
}

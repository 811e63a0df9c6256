//! The five subcommands as library functions.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cfm_core::datasets::{sample as draw, DistributionSpec};
use cfm_core::field::Field;
use cfm_core::losses::Teacher;
use cfm_core::metrics::{
    consistency_residual, energy_distance, straightness, wasserstein2_exact, EnergyForm,
};
use cfm_core::nd::NumArray;
use cfm_core::net::{ParamSet, VelocityField};
use cfm_core::paths::{path_points, PathSpec};
use cfm_core::rng::{stream_rng, uniform, Stream};
use cfm_core::sampler::{record_trajectory, sample_counted, uniform_grid};
use cfm_core::theory::{run_suite, CheckRow, Suite};
use cfm_core::trainer::{StepReport, Trainer};
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, RngDescriptor};
use crate::config::{LossKind, RunConfig};
use crate::error::CliError;
use crate::output::{csv_writer, float, scatter_ppm, OutputLock};

pub const CHECKPOINT_NAME: &str = "checkpoint.cfm";
pub const METRICS_NAME: &str = "metrics.csv";
pub const SAMPLES_NAME: &str = "samples.csv";
pub const SCATTER_NAME: &str = "samples.ppm";
pub const EVAL_NAME: &str = "eval.csv";
pub const VERIFY_NAME: &str = "verify.csv";

pub const METRICS_HEADER: [&str; 9] = [
    "step",
    "loss_total",
    "loss_f",
    "loss_v",
    "grad_norm",
    "w2_eval",
    "energy_eval",
    "consistency_residual",
    "wall_seconds",
];
pub const EVAL_HEADER: [&str; 5] = ["nfe", "w2", "energy", "straightness", "residual"];
pub const VERIFY_HEADER: [&str; 5] = ["check_name", "parameter", "residual", "tolerance", "pass"];

/// Step of the forward difference in the residual probe.
pub const RESIDUAL_STEP: f64 = 1e-3;
/// Probe count for the residual probe.
pub const RESIDUAL_PROBES: usize = 256;

/// Uniform Euler with `nfe` steps; for `nfe = K m` this is exactly the
/// per-segment sampler with `m` steps in each of `K` segments.
pub fn generate(field: &dyn Field, x0: &NumArray, nfe: usize) -> cfm_core::Result<NumArray> {
    Ok(sample_counted(field, x0, 1, nfe)?.0)
}

/// Evaluation draws: sources then an independent reference set, both from
/// the `Eval` stream of `seed`.
pub fn eval_sets(
    source: &DistributionSpec,
    target: &DistributionSpec,
    n: usize,
    seed: u64,
) -> cfm_core::Result<(NumArray, NumArray)> {
    let mut rng = stream_rng(seed, Stream::Eval);
    let x0 = draw(source, n, &mut rng)?;
    let reference = draw(target, n, &mut rng)?;
    Ok((x0, reference))
}

/// Probe points for the material-derivative residual: a segment drawn
/// uniformly, `t` inside it with room for the difference step, `x_t` on the
/// training path.
pub fn residual_probes(
    path: &PathSpec,
    segments: usize,
    n: usize,
    seed: u64,
) -> cfm_core::Result<(Vec<f64>, NumArray)> {
    let mut rng = stream_rng(seed, Stream::Probe);
    let (x0, x1) = path.coupling.sample_pair(n, &mut rng)?;
    let k = segments as f64;
    let t: Vec<f64> = (0..n)
        .map(|_| {
            let i = uniform(&mut rng, 0.0, k).floor().min(k - 1.0);
            uniform(&mut rng, i / k, (i + 1.0) / k - RESIDUAL_STEP)
        })
        .collect();
    let x = path_points(&path.path, &x0, &x1, &t)?;
    Ok((t, x))
}

struct Evaluator {
    x0: NumArray,
    reference: NumArray,
    probe_t: Vec<f64>,
    probe_x: NumArray,
    nfe: usize,
}

impl Evaluator {
    fn new(cfg: &RunConfig, path: &PathSpec) -> cfm_core::Result<Self> {
        let (x0, reference) = eval_sets(&cfg.source, &cfg.target, cfg.eval_samples, cfg.seed)?;
        let (probe_t, probe_x) = residual_probes(path, cfg.segments, RESIDUAL_PROBES, cfg.seed)?;
        Ok(Self {
            x0,
            reference,
            probe_t,
            probe_x,
            nfe: cfg.eval_nfe,
        })
    }

    fn row(
        &self,
        report: &StepReport,
        field: &VelocityField,
        wall: f64,
    ) -> cfm_core::Result<Vec<String>> {
        let ema = field.view(ParamSet::Ema);
        let samples = generate(&ema, &self.x0, self.nfe)?;
        let w2 = wasserstein2_exact(&samples, &self.reference)?;
        let energy = energy_distance(&samples, &self.reference, EnergyForm::Unbiased)?;
        let residual =
            consistency_residual(&ema, &self.probe_t, &self.probe_x, RESIDUAL_STEP)?.value;
        let l = &report.loss;
        Ok(vec![
            report.step.to_string(),
            float(l.total),
            float(l.f_term),
            float(l.v_term),
            float(report.grad_norm),
            float(w2),
            float(energy),
            float(residual),
            float(wall),
        ])
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

fn snapshot(cfg: &RunConfig, trainer: &Trainer) -> Checkpoint {
    let rng = RngDescriptor {
        generator: "chacha8".into(),
        seed: cfg.seed,
        stream: Stream::Data as u64,
        word_pos: trainer.rng_word_pos(),
    };
    Checkpoint::new(
        cfg.clone(),
        trainer.step_count(),
        rng,
        trainer.field.clone(),
    )
}

fn run_loop(
    cfg: &RunConfig,
    path: &PathSpec,
    field: VelocityField,
    teacher: Option<&VelocityField>,
) -> Result<TrainOutcome, CliError> {
    let _lock = OutputLock::acquire(&cfg.out_dir)?;
    let checkpoint_path = cfg.out_dir.join(CHECKPOINT_NAME);
    let metrics_path = cfg.out_dir.join(METRICS_NAME);
    let mut trainer = Trainer::new(field, cfg.objective()?, cfg.train.clone(), cfg.seed)?;
    let evaluator = Evaluator::new(cfg, path)?;
    let mut metrics = csv_writer(&metrics_path, "metrics", &METRICS_HEADER)?;
    let started = Instant::now();
    for step in 1..=cfg.steps {
        let report = match trainer.step(path, teacher.map(|t| Teacher::Net(t, ParamSet::Ema))) {
            Ok(r) => r,
            Err(e) => {
                snapshot(cfg, &trainer).save(&checkpoint_path)?;
                metrics.flush()?;
                return Err(CliError::Runtime(format!(
                    "aborted at step {step}: {e}; last good state saved to {}",
                    checkpoint_path.display()
                )));
            }
        };
        let due = (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps;
        if due {
            let wall = if cfg.log_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            };
            metrics.write_record(evaluator.row(&report, &trainer.field, wall)?)?;
            metrics.flush()?;
            snapshot(cfg, &trainer).save(&checkpoint_path)?;
        }
    }
    let checkpoint = snapshot(cfg, &trainer);
    checkpoint.save(&checkpoint_path)?;
    Ok(TrainOutcome {
        checkpoint,
        checkpoint_path,
        metrics_path,
    })
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    if cfg.loss == LossKind::Distill {
        return Err(CliError::Usage(
            "loss \"distill\" runs through the distill command".into(),
        ));
    }
    let field = VelocityField::init(cfg.net.clone(), cfg.seed)?;
    run_loop(cfg, &cfg.path_spec()?, field, None)
}

/// Trains a student against a flow-matching teacher. Training points come
/// from the teacher's own training path.
pub fn distill(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    if cfg.loss != LossKind::Distill {
        return Err(CliError::Usage(format!(
            "distill needs loss \"distill\", got {:?}",
            cfg.loss
        )));
    }
    let teacher_path = cfg.teacher.as_ref().expect("validated");
    let teacher = Checkpoint::load(teacher_path)?;
    let path = teacher.meta.config.path_spec()?;
    if teacher.field.dim() != cfg.net.data_dim {
        return Err(CliError::Usage(format!(
            "teacher has dimension {} but the student has {}",
            teacher.field.dim(),
            cfg.net.data_dim
        )));
    }
    let field = if cfg.init_from_teacher {
        if teacher.field.config() != &cfg.net {
            return Err(CliError::Usage(
                "init_from_teacher needs the student net to match the teacher's".into(),
            ));
        }
        let ema = teacher.field.params(ParamSet::Ema).to_vec();
        VelocityField::from_params(cfg.net.clone(), ema.clone(), ema)?
    } else {
        VelocityField::init(cfg.net.clone(), cfg.seed)?
    };
    run_loop(cfg, &path, field, Some(&teacher.field))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutcome {
    pub points: NumArray,
    pub nfe: usize,
}

/// `K` segments with `m` Euler steps each, from the checkpoint's EMA field,
/// starting at source draws from the `Sample` stream of `seed`.
pub fn sample(
    ckpt: &Checkpoint,
    k: usize,
    m: usize,
    n: usize,
    seed: u64,
) -> Result<SampleOutcome, CliError> {
    if k == 0 || m == 0 {
        return Err(CliError::Usage(format!(
            "need --nfe-k >= 1 and --steps-per-segment >= 1, got {k} and {m}"
        )));
    }
    let x0 = draw(
        &ckpt.meta.config.source,
        n,
        &mut stream_rng(seed, Stream::Sample),
    )?;
    let ema = ckpt.field.view(ParamSet::Ema);
    let (points, calls) = sample_counted(&ema, &x0, k, m)?;
    Ok(SampleOutcome { points, nfe: calls })
}

pub fn cmd_sample(
    ckpt_path: &Path,
    k: usize,
    m: usize,
    n: usize,
    out: &Path,
    ppm: bool,
    seed: u64,
) -> Result<SampleOutcome, CliError> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let outcome = sample(&ckpt, k, m, n, seed)?;
    let _lock = OutputLock::acquire(out)?;
    let d = ckpt.field.dim();
    let header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut w = csv_writer(
        &out.join(SAMPLES_NAME),
        &format!("samples nfe={} k={k} m={m} seed={seed}", outcome.nfe),
        &header,
    )?;
    for row in outcome.points.iter_rows() {
        w.write_record(row.iter().map(|v| float(*v)))?;
    }
    w.flush()?;
    if ppm {
        std::fs::write(out.join(SCATTER_NAME), scatter_ppm(&outcome.points)?)?;
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub nfe: usize,
    pub w2: f64,
    pub energy: f64,
    pub straightness: f64,
    pub residual: f64,
}

/// One row per NFE. Samples start from the `Eval` stream of `seed` and are
/// compared against a reference draw of `target` from the same stream.
pub fn evaluate(
    ckpt: &Checkpoint,
    target: &DistributionSpec,
    nfes: &[usize],
    n: usize,
    seed: u64,
) -> Result<Vec<EvalRow>, CliError> {
    let cfg = &ckpt.meta.config;
    if nfes.is_empty() || nfes.contains(&0) {
        return Err(CliError::Usage(format!(
            "NFE values must be >= 1, got {nfes:?}"
        )));
    }
    if !(2..=cfm_core::metrics::MAX_EXACT_W2).contains(&n) {
        return Err(CliError::Usage(format!(
            "--n must be in 2..={}",
            cfm_core::metrics::MAX_EXACT_W2
        )));
    }
    if target.dim() != ckpt.field.dim() {
        return Err(CliError::Usage(format!(
            "target dimension {} but checkpoint dimension {}",
            target.dim(),
            ckpt.field.dim()
        )));
    }
    let (x0, reference) = eval_sets(&cfg.source, target, n, seed)?;
    let (pt, px) = residual_probes(&cfg.path_spec()?, cfg.segments, RESIDUAL_PROBES, seed)?;
    let ema = ckpt.field.view(ParamSet::Ema);
    let residual = consistency_residual(&ema, &pt, &px, RESIDUAL_STEP)?.value;
    nfes.par_iter()
        .map(|&nfe| {
            let traj = record_trajectory(&ema, &x0, &uniform_grid(nfe + 1)?)?;
            let samples = traj.endpoint();
            Ok(EvalRow {
                nfe,
                w2: wasserstein2_exact(samples, &reference)?,
                energy: energy_distance(samples, &reference, EnergyForm::Unbiased)?,
                // A single step is its own chord.
                straightness: if nfe == 1 {
                    0.0
                } else {
                    straightness(&traj)?.value
                },
                residual,
            })
        })
        .collect::<cfm_core::Result<Vec<_>>>()
        .map_err(CliError::from)
}

pub fn cmd_eval(
    ckpt_path: &Path,
    dataset: Option<&Path>,
    nfes: &[usize],
    n: usize,
    out: &Path,
    seed: u64,
) -> Result<Vec<EvalRow>, CliError> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let target = match dataset {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| {
                CliError::Usage(format!("invalid dataset spec {}: {e}", p.display()))
            })?
        }
        None => ckpt.meta.config.target.clone(),
    };
    let rows = evaluate(&ckpt, &target, nfes, n, seed)?;
    let _lock = OutputLock::acquire(out)?;
    let mut w = csv_writer(&out.join(EVAL_NAME), "eval", &EVAL_HEADER)?;
    for r in &rows {
        w.write_record([
            r.nfe.to_string(),
            float(r.w2),
            float(r.energy),
            float(r.straightness),
            float(r.residual),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}

/// Writes every check row, then fails with `CheckFailed` if any row failed.
pub fn cmd_verify(suite: Suite, out: &Path, seed: u64) -> Result<Vec<CheckRow>, CliError> {
    let _lock = OutputLock::acquire(out)?;
    let rows = run_suite(suite, seed)?;
    let mut w = csv_writer(
        &out.join(VERIFY_NAME),
        &format!("verify suite={suite} seed={seed}"),
        &VERIFY_HEADER,
    )?;
    for r in &rows {
        w.write_record([
            r.check_name.clone(),
            r.parameter.clone(),
            float(r.residual),
            float(r.tolerance),
            r.pass.to_string(),
        ])?;
    }
    w.flush()?;
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.check_name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(rows)
    } else {
        Err(CliError::CheckFailed(format!(
            "{} of {} checks failed: {}",
            failed.len(),
            rows.len(),
            failed.join(", ")
        )))
    }
}

//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion on stderr
//! (uncaptured, so the lines show without `--nocapture`) and fails at the end
//! if any criterion failed.
//!
//! Everything runs inside a single test so the timed criteria do not compete
//! with each other for cores.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use cfm_core::datasets::{sample, DistributionSpec};
use cfm_core::losses::{multisegment_loss, velocity_consistency_loss, SegmentSchedule};
use cfm_core::metrics::wasserstein2_exact;
use cfm_core::nd::{check_gradient_fd, Activation, AdamConfig, NumArray, Tape, Var};
use cfm_core::net::{NetConfig, VelocityField};
use cfm_core::paths::{Coupling, PathSpec};
use cfm_core::rng::{normal, stream_rng, Rng, Stream};
use cfm_core::sampler::{sample_euler, sample_segment_jumps};
use cfm_core::theory::{
    analytic_family, corollary_config, corollary_recovery_test, run_suite, theorem2_grid_oracle,
    AffineOracle, CheckRow, GridProblem, Suite,
};
use cfm_core::trainer::{LrSchedule, TrainSettings};
use cfm_lab::checkpoint::Checkpoint;
use cfm_lab::commands::{self, EvalRow, CHECKPOINT_NAME, METRICS_NAME};
use cfm_lab::config::{LossKind, RunConfig};

const SEED: u64 = 0;
const EVAL_SEED: u64 = 1;
const EVAL_N: usize = 512;
const STEPS: u64 = 20_000;
const DISTILL_STEPS: u64 = 10_000;

struct Report {
    failed: Vec<String>,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "[acceptance] criterion {id}: {verdict} ({detail})");
        if !pass {
            self.failed.push(id.to_string());
        }
    }
}

fn rows_pass(rows: &[CheckRow], prefix: &str) -> (bool, usize) {
    let picked: Vec<&CheckRow> = rows
        .iter()
        .filter(|r| r.check_name.starts_with(prefix))
        .collect();
    (
        !picked.is_empty() && picked.iter().all(|r| r.pass),
        picked.len(),
    )
}

fn theorem2_oracle(report: &mut Report) {
    let start = Instant::now();
    let mut rng = stream_rng(SEED, Stream::Probe);
    let mut worst = 0.0f64;
    let mut solved = 0;
    for alpha in [0.1, 1.0, 10.0] {
        for _ in 0..50 {
            let p = GridProblem::random(&mut rng, 1, 20, 0.05, alpha).unwrap();
            let r = theorem2_grid_oracle(&p).unwrap();
            worst = worst.max(r.max_discrepancy).max(r.max_direct_discrepancy);
            solved += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report.line(
        "1 theorem-2 oracle",
        worst < 1e-10 && secs < 5.0,
        format!("{solved} problems, max discrepancy {worst:.2e} < 1e-10, {secs:.2}s < 5s"),
    );
}

fn corollary(report: &mut Report) {
    let start = Instant::now();
    let cfg = corollary_config(SEED);
    let r = corollary_recovery_test(&AffineOracle::translation(vec![2.0, 2.0]), &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass =
        r.final_error < 0.05 && cfg.steps <= 20_000 && cfg.settings.batch == 256 && secs < 600.0;
    report.line(
        "2 corollary recovery",
        pass,
        format!(
            "max grid error {:.4} < 0.05 over {} points (init {:.3}), {} steps, batch {}, {secs:.0}s < 600s",
            r.final_error, r.grid_points_used, r.initial_error, cfg.steps, cfg.settings.batch
        ),
    );
}

fn theorem1(report: &mut Report) {
    let start = Instant::now();
    let rows = run_suite(Suite::Theorem1, SEED).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let gap = rows
        .iter()
        .find(|r| r.check_name == "theorem1.ratio_gap")
        .unwrap();
    let gaps: Vec<String> = rows
        .iter()
        .filter(|r| r.check_name == "theorem1.gap_decreases")
        .map(|r| format!("{:.4}", r.residual))
        .collect();
    let pass = rows.iter().all(|r| r.pass) && secs < 60.0;
    report.line(
        "3 theorem-1 scaling",
        pass,
        format!(
            "|ratio-1| at dt=0.0125 is {:.4} <= 0.05, later gaps {} decreasing, {secs:.1}s < 60s",
            gap.residual,
            gaps.join(" > ")
        ),
    );
}

fn lemmas(report: &mut Report) {
    let mut rows = run_suite(Suite::Lemma1, SEED).unwrap();
    rows.extend(run_suite(Suite::Lemma2, SEED).unwrap());
    let (conds, n_conds) = rows_pass(&rows, "lemma1.cond");
    let (pde, n_pde) = rows_pass(&rows, "lemma2.pde");
    let time_linear: Vec<&CheckRow> = rows
        .iter()
        .filter(|r| r.parameter == "time-linear")
        .collect();
    let t_detected = time_linear.len() == 3
        && time_linear
            .iter()
            .all(|r| r.check_name.ends_with(".detect") && r.pass);
    let mixed = rows
        .iter()
        .find(|r| r.check_name == "lemma1.mixed_quadrant")
        .unwrap();
    let family = analytic_family().len();
    report.line(
        "4 lemma suite",
        conds && pde && t_detected && mixed.pass && family == 20,
        format!(
            "{n_conds} condition rows and {n_pde} PDE rows pass, v=t flagged by all three checks: {t_detected}, \
             mixed outcomes {} over {family} fields",
            mixed.residual
        ),
    );
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> NumArray {
    NumArray::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| normal(rng)).collect(),
    )
    .unwrap()
}

/// `sum(w ⊙ op(params))` with a fixed random weighting `w`.
fn weighted_root(tape: &mut Tape, out: Var, rng: &mut Rng) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let w = NumArray::new(
        shape.clone(),
        (0..shape.iter().product()).map(|_| normal(rng)).collect(),
    )
    .unwrap();
    let w = tape.constant(w).unwrap();
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod).unwrap()
}

fn gradient_checks(rng: &mut Rng) -> Vec<(String, f64)> {
    type Build = fn(&mut Tape, Var, Var) -> Var;
    let binary: [(&str, Build); 6] = [
        ("add", |t, a, _| {
            let b = t
                .param(
                    NumArray::from_rows(&[[0.3, -0.2, 0.9], [0.1, 0.4, -0.6], [1.2, -0.8, 0.5]])
                        .unwrap(),
                )
                .unwrap();
            t.add(a, b).unwrap()
        }),
        ("sub", |t, a, _| {
            let b = t
                .param(
                    NumArray::from_rows(&[[0.7, 0.2, -0.4], [-1.1, 0.3, 0.8], [0.2, 0.6, -0.9]])
                        .unwrap(),
                )
                .unwrap();
            t.sub(a, b).unwrap()
        }),
        ("mul", |t, a, _| t.mul(a, a).unwrap()),
        ("matmul", |t, a, b| t.matmul(a, b).unwrap()),
        ("add_bias", |t, a, _| {
            let bias = t
                .param(NumArray::from_rows(&[[0.5, -1.5, 0.25]]).unwrap())
                .unwrap();
            t.add_bias(a, bias).unwrap()
        }),
        ("scale", |t, a, _| t.scale(a, -1.7).unwrap()),
    ];
    let mut out = Vec::new();
    for (name, build) in binary {
        let mut tape = Tape::new();
        let a = tape.param(random_matrix(rng, 3, 3)).unwrap();
        let b = tape.param(random_matrix(rng, 3, 2)).unwrap();
        let y = build(&mut tape, a, b);
        let root = weighted_root(&mut tape, y, rng);
        out.push((
            name.to_string(),
            check_gradient_fd(&mut tape, root, 1e-6).unwrap(),
        ));
    }
    for act in [
        Activation::Gelu,
        Activation::Softplus,
        Activation::Silu,
        Activation::Tanh,
    ] {
        let mut tape = Tape::new();
        let a = tape.param(random_matrix(rng, 4, 3)).unwrap();
        let y = tape.activation(a, act).unwrap();
        let root = weighted_root(&mut tape, y, rng);
        out.push((
            format!("{act:?}").to_lowercase(),
            check_gradient_fd(&mut tape, root, 1e-6).unwrap(),
        ));
    }
    let mut tape = Tape::new();
    let a = tape.param(random_matrix(rng, 2, 5)).unwrap();
    let s = tape.sum(a).unwrap();
    let sq = tape.mul(s, s).unwrap();
    out.push((
        "sum".into(),
        check_gradient_fd(&mut tape, sq, 1e-6).unwrap(),
    ));
    out
}

fn small_run(out: &Path) -> RunConfig {
    RunConfig {
        net: NetConfig {
            hidden: vec![16, 16],
            ..NetConfig::default()
        },
        train: TrainSettings {
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            ema_decay: 0.9,
            batch: 64,
            ..TrainSettings::default()
        },
        steps: 200,
        eval_every: 50,
        eval_samples: 128,
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

fn engineering(report: &mut Report) {
    let mut rng = stream_rng(SEED, Stream::Probe);
    let grads = gradient_checks(&mut rng);
    let worst_grad = grads.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let grads_ok = worst_grad < 1e-5;

    // The config records its output directory, so both runs share one.
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str| std::fs::read(dir.path().join(name)).unwrap();
    let run = commands::train(&small_run(dir.path())).unwrap();
    let first = (read(CHECKPOINT_NAME), read(METRICS_NAME));
    let loaded = Checkpoint::load(&run.checkpoint_path).unwrap();
    let round_trip = loaded == run.checkpoint && loaded.to_bytes().unwrap() == first.0;
    commands::train(&small_run(dir.path())).unwrap();
    let deterministic = first == (read(CHECKPOINT_NAME), read(METRICS_NAME));

    let field = VelocityField::init(
        NetConfig {
            hidden: vec![32, 32],
            ..NetConfig::default()
        },
        5,
    )
    .unwrap();
    let view = field.view(cfm_core::net::ParamSet::Online);
    let x0 = sample(
        &DistributionSpec::StandardGaussian { dim: 2 },
        64,
        &mut stream_rng(SEED, Stream::Sample),
    )
    .unwrap();
    let euler_ok = (1..=8).all(|k| {
        let euler = sample_euler(&view, &x0, k, 1).unwrap();
        let jumps = sample_segment_jumps(&view, &x0, k).unwrap();
        euler
            .data()
            .iter()
            .zip(jumps.data())
            .all(|(p, q)| p.to_bits() == q.to_bits())
    });

    let path = PathSpec::linear(Coupling::Independent {
        source: DistributionSpec::StandardGaussian { dim: 2 },
        target: DistributionSpec::eight_gaussians(),
    });
    let schedule = SegmentSchedule::new(1, vec![1.0], 0.01, 0.1).unwrap();
    let ms = multisegment_loss(
        &field,
        &path,
        &schedule,
        64,
        &mut stream_rng(SEED, Stream::Data),
    )
    .unwrap();
    let single = velocity_consistency_loss(
        &field,
        &path,
        64,
        0.01,
        0.1,
        &mut stream_rng(SEED, Stream::Data),
    )
    .unwrap();
    let loss_ok = ms.report.total.to_bits() == single.report.total.to_bits()
        && ms.grads.iter().zip(&single.grads).all(|(p, q)| {
            p.data()
                .iter()
                .zip(q.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });

    report.line(
        "9 engineering invariants",
        grads_ok && deterministic && round_trip && euler_ok && loss_ok,
        format!(
            "gradient checks on {} primitives worst {worst_grad:.1e} < 1e-5, checkpoint round trip {round_trip}, \
             run determinism {deterministic}, Euler m=1 = jumps {euler_ok}, K=1 loss identity {loss_ok}",
            grads.len()
        ),
    );
}

/// Shared toy-problem setup for the trained-model criteria.
fn eight_gaussians_run(loss: LossKind, segments: usize, steps: u64, out: &Path) -> RunConfig {
    RunConfig {
        loss,
        segments,
        alpha: 1e-3,
        dt: 0.01,
        net: NetConfig {
            hidden: vec![64; 3],
            ..NetConfig::default()
        },
        train: TrainSettings {
            adam: AdamConfig {
                lr: 5e-4,
                ..AdamConfig::default()
            },
            ema_decay: 0.95,
            batch: 256,
            lr_schedule: LrSchedule::Cosine { steps, floor: 0.0 },
            grad_clip: None,
        },
        steps,
        seed: SEED,
        eval_every: 0,
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

struct Trained {
    checkpoint: Checkpoint,
    seconds: f64,
}

fn train(cfg: &RunConfig) -> Trained {
    let start = Instant::now();
    let outcome = if cfg.loss == LossKind::Distill {
        commands::distill(cfg)
    } else {
        commands::train(cfg)
    }
    .unwrap();
    Trained {
        checkpoint: outcome.checkpoint,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn w2_at(rows: &[EvalRow], nfe: usize) -> f64 {
    rows.iter()
        .find(|r| r.nfe == nfe)
        .expect("evaluated NFE")
        .w2
}

fn trained_models(report: &mut Report) {
    let dir = tempfile::tempdir().unwrap();
    let target = DistributionSpec::eight_gaussians();
    let nfes = [1, 2, 4];

    let consistency = train(&eight_gaussians_run(
        LossKind::Consistency,
        1,
        STEPS,
        &dir.path().join("consistency"),
    ));
    let cons_eval =
        commands::evaluate(&consistency.checkpoint, &target, &nfes, EVAL_N, EVAL_SEED).unwrap();
    let cons_seconds = consistency.seconds;
    let cfm = train(&eight_gaussians_run(
        LossKind::Cfm,
        1,
        STEPS,
        &dir.path().join("cfm"),
    ));
    let cfm_eval = commands::evaluate(&cfm.checkpoint, &target, &nfes, EVAL_N, EVAL_SEED).unwrap();

    let (_, reference) = commands::eval_sets(
        &DistributionSpec::StandardGaussian { dim: 2 },
        &target,
        EVAL_N,
        EVAL_SEED,
    )
    .unwrap();
    let fresh = sample(&target, EVAL_N, &mut stream_rng(EVAL_SEED, Stream::Sample)).unwrap();
    let baseline = wasserstein2_exact(&fresh, &reference).unwrap();
    let (cons2, cfm2) = (w2_at(&cons_eval, 2), w2_at(&cfm_eval, 2));
    report.line(
        "5 generative quality",
        cons2 <= 1.5 * baseline && cons2 < cfm2 && cons_seconds < 900.0,
        format!(
            "NFE 2 w2 {cons2:.4} <= 1.5 x self-distance {baseline:.4} = {:.4}, CFM NFE 2 w2 {cfm2:.4}, \
             training {cons_seconds:.0}s < 900s",
            1.5 * baseline
        ),
    );

    let multi = train(&eight_gaussians_run(
        LossKind::Multisegment,
        4,
        STEPS,
        &dir.path().join("multisegment"),
    ));
    let multi_eval =
        commands::evaluate(&multi.checkpoint, &target, &[4], EVAL_N, EVAL_SEED).unwrap();
    let (k4, k1) = (w2_at(&multi_eval, 4), w2_at(&cons_eval, 4));
    report.line(
        "6 multi-segment benefit",
        k4 <= k1,
        format!("NFE 4 w2: K=4 {k4:.4} <= K=1 {k1:.4}"),
    );

    let straight = |c: &Checkpoint| {
        commands::evaluate(c, &target, &[64], 256, EVAL_SEED).unwrap()[0].straightness
    };
    let (s_cons, s_cfm) = (straight(&consistency.checkpoint), straight(&cfm.checkpoint));
    report.line(
        "7 straightness direction",
        s_cons < s_cfm,
        format!("mean straightness over 256 trajectories, 65 grid points: consistency {s_cons:.3e} < CFM {s_cfm:.3e}"),
    );

    let mut distill_cfg = eight_gaussians_run(
        LossKind::Distill,
        1,
        DISTILL_STEPS,
        &dir.path().join("distill"),
    );
    distill_cfg.teacher = Some(dir.path().join("cfm").join(CHECKPOINT_NAME));
    distill_cfg.init_from_teacher = true;
    let student = train(&distill_cfg);
    let student1 = w2_at(
        &commands::evaluate(&student.checkpoint, &target, &[1], EVAL_N, EVAL_SEED).unwrap(),
        1,
    );
    let teacher1 = w2_at(&cfm_eval, 1);
    report.line(
        "8 distillation",
        student1 < teacher1,
        format!("1-step w2: student {student1:.4} < teacher {teacher1:.4} ({DISTILL_STEPS} steps)"),
    );
}

#[test]
fn acceptance_criteria() {
    let mut report = Report { failed: Vec::new() };
    theorem2_oracle(&mut report);
    theorem1(&mut report);
    lemmas(&mut report);
    engineering(&mut report);
    corollary(&mut report);
    trained_models(&mut report);
    assert!(
        report.failed.is_empty(),
        "failed criteria: {:?}",
        report.failed
    );
}

//! Subcommand implementations. Each returns an [`Outcome`] on completion or a
//! [`CliError`]; `main` turns both into exit codes.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use mfresnet_core::data::{gen_teacher_student, load_csv, save_csv};
use mfresnet_core::diagnostics::{
    adjoint_bound_check, depth_sweep, descent_probe, grad_check, homogeneity_degree,
    stability_probe,
};
use mfresnet_core::training::{init_state, run_epochs};
use mfresnet_core::{Dataset, Error, Mode, ModelConfig, Reduction, SeededRng, TailMode, TrainState};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::CliError;

/// Result of a subcommand that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    CheckFailed,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Pass => 0,
            Outcome::CheckFailed => 1,
        }
    }

    fn from_verdict(pass: bool) -> Self {
        if pass {
            Outcome::Pass
        } else {
            Outcome::CheckFailed
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum DiagKind {
    Gradcheck,
    Stability,
    Expansion,
    Adjointbound,
    Homogeneity,
    Descent,
}

impl DiagKind {
    pub fn name(self) -> &'static str {
        match self {
            DiagKind::Gradcheck => "gradcheck",
            DiagKind::Stability => "stability",
            DiagKind::Expansion => "expansion",
            DiagKind::Adjointbound => "adjointbound",
            DiagKind::Homogeneity => "homogeneity",
            DiagKind::Descent => "descent",
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// Training data and optional evaluation data, either from CSV or drawn
/// from the teacher.
pub fn load_data(cfg: &RunConfig, model: &ModelConfig) -> Result<(Dataset, Option<Dataset>), CliError> {
    let train = match &cfg.data.train_csv {
        Some(path) => load_csv(path, model.d1())?,
        None => gen_teacher_student(
            &cfg.teacher,
            model,
            cfg.data.n_train,
            &mut SeededRng::stream(cfg.data.seed, 0),
        )?,
    };
    let eval = match &cfg.data.eval_csv {
        Some(path) => Some(load_csv(path, model.d1())?),
        None if cfg.data.n_eval > 0 => Some(gen_teacher_student(
            &cfg.teacher,
            model,
            cfg.data.n_eval,
            &mut SeededRng::stream(cfg.data.seed, 1),
        )?),
        None => None,
    };
    Ok((train, eval))
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub lr: f64,
    pub wallclock: f64,
    pub mode: Mode,
    pub tail_mode: TailMode,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete, leaving a checkpoint.
    pub stop_after: Option<u64>,
}

pub const FINAL_CHECKPOINT: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Sections that must agree between a checkpoint and the config used to
/// resume it. `train.epochs` may grow; output and diagnostic settings are free.
fn check_resumable(cfg: &RunConfig, saved: &RunConfig) -> Result<(), CliError> {
    let mut a = cfg.train.clone();
    let mut b = saved.train.clone();
    a.epochs = 0;
    b.epochs = 0;
    let mismatch = [
        ("model", cfg.model != saved.model),
        ("train", a != b),
        ("teacher", cfg.teacher != saved.teacher),
        ("data", cfg.data != saved.data),
    ];
    for (section, differs) in mismatch {
        if differs {
            return Err(CliError::Config(format!(
                "[{section}] differs from the checkpoint being resumed"
            )));
        }
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, opts: &TrainOptions) -> Result<Outcome, CliError> {
    cfg.validate()?;
    let model = cfg.model.build()?;
    ensure_dir(&opts.out)?;
    let (train, eval) = load_data(cfg, &model)?;

    let mut state = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            check_resumable(cfg, &ck.config)?;
            ck.restore().map_err(|reason| CliError::Checkpoint {
                path: path.clone(),
                reason,
            })?
        }
        None => init_state(&cfg.train, &model),
    };
    write_text(&opts.out.join("config.toml"), &cfg.to_toml())?;

    let metrics_path = opts.out.join(METRICS_FILE);
    let metrics_file = if opts.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .map_err(|e| CliError::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(metrics_file);

    let start = Instant::now();
    let every = cfg.output.checkpoint_every;
    let stop_after = opts.stop_after;
    let mut sink_error: Option<CliError> = None;
    let result = if stop_after.is_some_and(|s| state.epoch >= s) {
        Ok(())
    } else {
        run_epochs(&mut state, &train, eval.as_ref(), &model, &cfg.train, |st, rec| {
            let line = MetricsRecord {
                step: rec.step,
                epoch: rec.epoch,
                train_loss: rec.train_loss,
                eval_loss: rec.eval_loss,
                lr: rec.lr,
                wallclock: start.elapsed().as_secs_f64(),
                mode: cfg.train.mode,
                tail_mode: cfg.model.tail_mode,
            };
            let written = serde_json::to_writer(&mut metrics, &line)
                .map_err(std::io::Error::from)
                .and_then(|_| metrics.write_all(b"\n"))
                .and_then(|_| metrics.flush());
            if let Err(e) = written {
                sink_error = Some(CliError::io(&metrics_path, e));
                return Ok(ControlFlow::Break(()));
            }
            if every > 0 && st.epoch % every == 0 {
                let path = opts.out.join(format!("checkpoint_{}.json", st.epoch));
                if let Err(e) = Checkpoint::capture(cfg, st).save(&path) {
                    sink_error = Some(e);
                    return Ok(ControlFlow::Break(()));
                }
            }
            if stop_after.is_some_and(|s| st.epoch >= s) {
                return Ok(ControlFlow::Break(()));
            }
            Ok(ControlFlow::Continue(()))
        })
    };
    // The state only ever holds committed updates, so it is always a valid
    // checkpoint, including after a numeric failure.
    Checkpoint::capture(cfg, &state).save(&opts.out.join(FINAL_CHECKPOINT))?;
    if let Some(e) = sink_error {
        return Err(e);
    }
    result?;
    Ok(Outcome::Pass)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[derive(Clone, Debug, Default)]
pub struct DiagOptions {
    pub out: PathBuf,
    /// Take the ensemble from this checkpoint instead of a fresh initialization.
    pub resume: Option<PathBuf>,
}

/// Runs one diagnostic, writes `diag_<which>.json`, and passes iff the
/// diagnostic's verdict holds.
pub fn cmd_diag(cfg: &RunConfig, which: DiagKind, opts: &DiagOptions) -> Result<Outcome, CliError> {
    cfg.validate()?;
    let model = cfg.model.build()?;
    let eff = cfg.train.effective_model(&model);
    ensure_dir(&opts.out)?;
    let state: TrainState = match &opts.resume {
        Some(path) => Checkpoint::load(path)?.restore().map_err(|reason| CliError::Checkpoint {
            path: path.clone(),
            reason,
        })?,
        None => init_state(&cfg.train, &model),
    };
    let e = state.ensemble.sort_by_tau();
    let (train, _) = load_data(cfg, &model)?;
    let batch = &train.samples()[..cfg.diag.batch_size.min(train.len())];
    let mut rng = SeededRng::new(cfg.diag.seed);
    let d = &cfg.diag;

    let (pass, report) = match which {
        DiagKind::Gradcheck => {
            if !eff.activation().is_smooth() {
                return Err(CliError::Precondition(format!(
                    "gradcheck requires a smooth activation, got {}",
                    eff.activation()
                )));
            }
            let r = grad_check(&e, batch, &eff, d.h)?;
            (r.max_rel_err < d.grad_tol, json!({ "tolerance": d.grad_tol, "result": r }))
        }
        DiagKind::Stability => {
            let r = stability_probe(&e, batch, &eff, &d.scales, &mut rng)?;
            (r.bounded(), json!(r))
        }
        DiagKind::Expansion => {
            let r = depth_sweep(&d.expansion, eff.activation())?;
            (r.passes(), json!({ "sweep": d.expansion, "result": r }))
        }
        DiagKind::Adjointbound => {
            let r = adjoint_bound_check(&e, batch, &eff)?;
            (r.verdict, json!(r))
        }
        DiagKind::Homogeneity => {
            let theta = &e
                .particles()
                .first()
                .ok_or_else(|| CliError::Precondition("ensemble is empty".into()))?
                .theta;
            let x0 = eff.embed(&batch[0].0)?;
            let r = homogeneity_degree(&eff, &x0, theta, &d.lambdas)?;
            (r.homogeneous, json!({ "activation": eff.activation(), "result": r }))
        }
        DiagKind::Descent => {
            let r = descent_probe(&e, batch, &eff, &d.descent, &mut rng).map_err(|err| match err {
                Error::AlreadyAtGlobalMinimum { .. } => CliError::Precondition(err.to_string()),
                other => other.into(),
            })?;
            let support = r.direction.weights.iter().filter(|&&w| w > 0.0).count();
            let report = json!({
                "pairing": r.pairing,
                "loss": r.loss,
                "t_star": r.direction.t_star,
                "layer": r.direction.layer,
                "reference_weight": r.direction.weights[0],
                "support": support,
                "n_candidates": r.direction.candidates.len() - 1,
                "layer_weights": r.direction.layer_weights,
                "fit_residual": r.fit_residual,
                "warning": r.warning,
            });
            if let Some(w) = &r.warning {
                eprintln!("warning: {w}");
            }
            (r.pairing < 0.0, report)
        }
    };
    let doc = json!({ "which": which.name(), "pass": pass, "report": report });
    write_json(&opts.out.join(format!("diag_{}.json", which.name())), &doc)?;
    println!("{}: {}", which.name(), if pass { "pass" } else { "fail" });
    Ok(Outcome::from_verdict(pass))
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_spread(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct CompareRun {
    pub seed: u64,
    pub mode: Mode,
    pub final_train_loss: f64,
    pub final_eval_loss: Option<f64>,
    /// `(epoch, train_loss, eval_loss)` per epoch, for plotting.
    pub history: Vec<(u64, f64, Option<f64>)>,
}

impl CompareRun {
    /// Eval loss when an eval set exists, otherwise train loss.
    pub fn score(&self) -> f64 {
        self.final_eval_loss.unwrap_or(self.final_train_loss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct CompareReport {
    pub metric: String,
    pub seeds: Vec<u64>,
    pub meanfield: ModeSummary,
    pub vanilla: ModeSummary,
    pub runs: Vec<CompareRun>,
}

fn train_run(
    cfg: &RunConfig,
    model: &ModelConfig,
    train: &Dataset,
    eval: Option<&Dataset>,
    seed: u64,
    mode: Mode,
) -> Result<CompareRun, CliError> {
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    tc.mode = mode;
    let mut state = init_state(&tc, model);
    run_epochs(&mut state, train, eval, model, &tc, |_, _| Ok(ControlFlow::Continue(())))?;
    let eff = tc.effective_model(model);
    let final_train = mfresnet_core::dynamics::loss(&state.ensemble, train.samples(), &eff)?;
    let final_eval = eval
        .map(|d| mfresnet_core::dynamics::loss(&state.ensemble, d.samples(), &eff))
        .transpose()?;
    Ok(CompareRun {
        seed,
        mode,
        final_train_loss: final_train,
        final_eval_loss: final_eval,
        history: state
            .history
            .iter()
            .map(|r| (r.epoch, r.train_loss, r.eval_loss))
            .collect(),
    })
}

/// Trains both modes for every seed on the same data with the same budget,
/// one thread per run.
pub fn run_compare(cfg: &RunConfig) -> Result<CompareReport, CliError> {
    cfg.validate()?;
    if cfg.compare.seeds.is_empty() {
        return Err(CliError::Config("compare.seeds: must list at least one seed".into()));
    }
    let model = cfg.model.build()?;
    let (train, eval) = load_data(cfg, &model)?;
    let jobs: Vec<(u64, Mode)> = cfg
        .compare
        .seeds
        .iter()
        .flat_map(|&s| [(s, Mode::Meanfield), (s, Mode::Vanilla)])
        .collect();
    let runs: Vec<CompareRun> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(seed, mode)| {
                let (model, train, eval) = (&model, &train, eval.as_ref());
                scope.spawn(move || train_run(cfg, model, train, eval, seed, mode))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect::<Result<_, _>>()
    })?;
    let summary = |mode: Mode| {
        let scores: Vec<f64> = runs.iter().filter(|r| r.mode == mode).map(CompareRun::score).collect();
        let (mean, spread) = mean_spread(&scores);
        ModeSummary {
            mode,
            scores,
            mean,
            spread,
        }
    };
    Ok(CompareReport {
        metric: if eval.is_some() { "eval_loss" } else { "train_loss" }.into(),
        seeds: cfg.compare.seeds.clone(),
        meanfield: summary(Mode::Meanfield),
        vanilla: summary(Mode::Vanilla),
        runs,
    })
}

pub fn compare_table(report: &CompareReport) -> String {
    let mut out = format!(
        "| mode | final {} (mean ± std) | per seed |\n|---|---|---|\n",
        report.metric
    );
    for s in [&report.meanfield, &report.vanilla] {
        let per: Vec<String> = s.scores.iter().map(|v| format!("{v:.4e}")).collect();
        let name = match s.mode {
            Mode::Meanfield => "meanfield",
            Mode::Vanilla => "vanilla",
        };
        out += &format!("| {name} | {:.4e} ± {:.2e} | {} |\n", s.mean, s.spread, per.join(", "));
    }
    out
}

/// Writes `compare.json` and `compare.md`. Passes once both columns are filled.
pub fn cmd_compare(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let report = run_compare(cfg)?;
    ensure_dir(out)?;
    write_json(&out.join("compare.json"), &report)?;
    let table = compare_table(&report);
    write_text(&out.join("compare.md"), &table)?;
    print!("{table}");
    Ok(Outcome::Pass)
}

/// Writes `train.csv` and, if configured, `eval.csv`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    cfg.validate()?;
    let model = cfg.model.build()?;
    let (train, eval) = load_data(cfg, &model)?;
    ensure_dir(out)?;
    save_csv(&train, out.join("train.csv"))?;
    if let Some(eval) = eval {
        save_csv(&eval, out.join("eval.csv"))?;
    }
    Ok(Outcome::Pass)
}

/// Forces single-threaded batch reduction.
pub fn make_deterministic(cfg: &mut RunConfig) {
    cfg.train.reduction = Reduction::Serial;
}

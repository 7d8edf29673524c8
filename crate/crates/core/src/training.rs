//! Particle training loop.
//!
//! Every step re-sorts the particles by `τ`, evaluates exact gradients for
//! both `θ` and `τ`, applies momentum SGD, and projects back onto
//! `Q_r × [0, 1]`. With small steps this is a particle discretization of the
//! Wasserstein gradient flow of the loss. `Mode::Vanilla` freezes `τ` on the
//! uniform grid and uses constant `1/n` steps, i.e. a standard ResNet.

use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dynamics::{gradients_with, loss, ModelConfig, Reduction, Sample, StepRule};
use crate::ensemble::{clamp_particles, Ensemble, Particle};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// `θ` and `τ` both trained; steps are `τ` gaps.
    #[default]
    Meanfield,
    /// Only `θ` trained; steps fixed at `1/n`.
    Vanilla,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauInit {
    /// `τ_i = (i+1)/n`.
    #[default]
    UniformGrid,
    /// i.i.d. `U[0,1]`, then sorted.
    UniformRandom,
}

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_particles: usize,
    pub lr: f64,
    /// Multiplier on `lr` for `τ` updates.
    pub tau_lr_scale: f64,
    /// `(epoch, factor)`: from `epoch` on, the rate is multiplied by `factor`.
    /// Factors compound.
    pub lr_schedule: Vec<(u64, f64)>,
    pub momentum: f64,
    /// Applied to `θ` only.
    pub weight_decay: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    pub tau_init: TauInit,
    /// Entry std of initial blocks is `theta_init_scale / √d₂`.
    pub theta_init_scale: f64,
    pub reduction: Reduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_particles: 32,
            lr: 0.1,
            tau_lr_scale: 1.0,
            lr_schedule: vec![(1000, 0.1), (1500, 0.1)],
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 2000,
            batch_size: 256,
            seed: 0,
            mode: Mode::Meanfield,
            tau_init: TauInit::UniformGrid,
            theta_init_scale: 1.0,
            reduction: Reduction::Serial,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::config("n_particles", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.tau_lr_scale >= 0.0 && self.tau_lr_scale.is_finite()) {
            return Err(Error::config("tau_lr_scale", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", format!("must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.theta_init_scale >= 0.0 && self.theta_init_scale.is_finite()) {
            return Err(Error::config("theta_init_scale", "must be non-negative"));
        }
        for w in self.lr_schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::config("lr_schedule", "epochs must be strictly increasing"));
            }
        }
        if self.lr_schedule.iter().any(|&(_, f)| !(f > 0.0 && f.is_finite())) {
            return Err(Error::config("lr_schedule", "factors must be positive"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: u64) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|&&(e, _)| e <= epoch)
            .fold(self.lr, |lr, &(_, f)| lr * f)
    }

    /// The model as seen by this training mode.
    pub fn effective_model(&self, model: &ModelConfig) -> ModelConfig {
        match self.mode {
            Mode::Meanfield => model.clone(),
            Mode::Vanilla => model.clone().with_step_rule(StepRule::Uniform),
        }
    }
}

/// One metrics record, emitted at the end of each epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub ensemble: Ensemble,
    /// Momentum buffers aligned with `ensemble.particles()`.
    pub vel_theta: Vec<Matrix>,
    pub vel_tau: Vec<f64>,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(ensemble: Ensemble) -> Self {
        let vel_theta = ensemble
            .particles()
            .iter()
            .map(|p| Matrix::zeros(p.theta.rows(), p.theta.cols()))
            .collect();
        let vel_tau = vec![0.0; ensemble.len()];
        TrainState {
            ensemble,
            vel_theta,
            vel_tau,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        }
    }

    /// Sorts particles by `τ`, carrying the momentum buffers along.
    fn sort(&mut self) {
        let perm = self.ensemble.sort_permutation();
        self.vel_theta = perm.iter().map(|&i| self.vel_theta[i].clone()).collect();
        self.vel_tau = perm.iter().map(|&i| self.vel_tau[i]).collect();
        self.ensemble = self.ensemble.sort_by_tau();
    }
}

/// Stream id reserved for initialization; epoch `k` shuffles with stream `k + 1`.
const INIT_STREAM: u64 = 0;

/// `n` particles with `θ` entries `N(0, scale²/d₂)`, `τ` per `tau_init`,
/// clamped to `Q_r` and returned sorted.
pub fn sample_particles(
    n: usize,
    d2: usize,
    scale: f64,
    tau_init: TauInit,
    r: f64,
    rng: &mut SeededRng,
) -> Ensemble {
    let std = scale / (d2 as f64).sqrt();
    let thetas: Vec<Matrix> = (0..n).map(|_| rng.normal_matrix(d2, d2, std)).collect();
    let taus: Vec<f64> = match tau_init {
        TauInit::UniformGrid => (0..n).map(|i| (i + 1) as f64 / n as f64).collect(),
        TauInit::UniformRandom => (0..n).map(|_| rng.uniform()).collect(),
    };
    let mut particles: Vec<Particle> = thetas
        .into_iter()
        .zip(taus)
        .enumerate()
        .map(|(i, (theta, tau))| Particle::new(i as u64, theta, tau))
        .collect();
    clamp_particles(&mut particles, r);
    Ensemble::new(particles).sort_by_tau()
}

pub fn init_ensemble(cfg: &TrainConfig, model: &ModelConfig, rng: &mut SeededRng) -> Ensemble {
    let tau_init = match cfg.mode {
        Mode::Meanfield => cfg.tau_init,
        Mode::Vanilla => TauInit::UniformGrid,
    };
    sample_particles(
        cfg.n_particles,
        model.d2(),
        cfg.theta_init_scale,
        tau_init,
        model.r(),
        rng,
    )
}

/// Fresh state from the run seed.
pub fn init_state(cfg: &TrainConfig, model: &ModelConfig) -> TrainState {
    let mut rng = SeededRng::stream(cfg.seed, INIT_STREAM);
    TrainState::new(init_ensemble(cfg, model, &mut rng))
}

/// One optimizer step on `batch`; returns the batch loss before the update.
///
/// The state is only modified if the whole update is finite.
pub fn train_step(
    state: &mut TrainState,
    batch: &[Sample],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    state.sort();
    let eff = cfg.effective_model(model);
    let grads = gradients_with(&state.ensemble, batch, &eff, cfg.reduction).map_err(|e| match e {
        e if e.is_numeric() => Error::NonFiniteUpdate { step: state.step },
        e => e,
    })?;

    let lr = cfg.lr_at(state.epoch);
    let mu = cfg.momentum;
    let train_tau = cfg.mode == Mode::Meanfield;

    let mut particles = state.ensemble.particles().to_vec();
    let mut vel_theta = state.vel_theta.clone();
    let mut vel_tau = state.vel_tau.clone();
    for (i, p) in particles.iter_mut().enumerate() {
        let v = &mut vel_theta[i];
        let g = &grads.dtheta[i];
        for ((vk, gk), tk) in v
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(p.theta.as_mut_slice())
        {
            *vk = mu * *vk + (gk + cfg.weight_decay * *tk);
            *tk -= lr * *vk;
        }
        if train_tau {
            vel_tau[i] = mu * vel_tau[i] + grads.dtau[i];
            p.tau -= lr * cfg.tau_lr_scale * vel_tau[i];
        }
        if !p.theta.is_finite() || !p.tau.is_finite() {
            return Err(Error::NonFiniteUpdate { step: state.step });
        }
    }
    clamp_particles(&mut particles, model.r());

    state.ensemble = Ensemble::new(particles);
    state.vel_theta = vel_theta;
    state.vel_tau = vel_tau;
    state.step += 1;
    Ok(grads.loss)
}

/// Generator that shuffles the data in `epoch` (0-based). All randomness
/// after initialization comes from these streams, so `(seed, epoch)` is the
/// complete generator state of a training run.
pub fn epoch_rng(seed: u64, epoch: u64) -> SeededRng {
    SeededRng::stream(seed, epoch + 1)
}

/// Runs epochs until `cfg.epochs` have completed or `on_epoch` breaks.
///
/// Minibatches come from a permutation of the data seeded by
/// `(cfg.seed, epoch)`, so resuming from a saved state replays exactly.
pub fn run_epochs(
    state: &mut TrainState,
    data: &Dataset,
    eval: Option<&Dataset>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState, &EpochRecord) -> Result<ControlFlow<()>>,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    data.check_against(model)?;
    if let Some(eval) = eval {
        eval.check_against(model)?;
    }
    let eff = cfg.effective_model(model);
    let mut batch: Vec<Sample> = Vec::with_capacity(cfg.batch_size.min(data.len()));
    while state.epoch < cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        epoch_rng(cfg.seed, state.epoch).shuffle(&mut order);
        let lr = cfg.lr_at(state.epoch);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data.samples()[i].clone()));
            train_step(state, &batch, model, cfg)?;
        }
        state.epoch += 1;
        let record = EpochRecord {
            epoch: state.epoch,
            step: state.step,
            lr,
            train_loss: loss(&state.ensemble, data.samples(), &eff)?,
            eval_loss: eval.map(|d| loss(&state.ensemble, d.samples(), &eff)).transpose()?,
        };
        state.history.push(record.clone());
        if on_epoch(state, &record)?.is_break() {
            break;
        }
    }
    Ok(())
}

/// Initializes from the seed and trains for `cfg.epochs` epochs.
pub fn train(
    data: &Dataset,
    eval: Option<&Dataset>,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    cfg.validate()?;
    let mut state = init_state(cfg, model);
    run_epochs(&mut state, data, eval, model, cfg, |_, _| Ok(ControlFlow::Continue(())))?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_teacher_student, TeacherSpec};
    use crate::dynamics::forward;
    use crate::numerics::{Activation, Vector};

    fn small_problem(seed: u64) -> (Dataset, ModelConfig) {
        let model = ModelConfig::standard(4, 4, Activation::Tanh).unwrap();
        let spec = TeacherSpec {
            n_teacher: 6,
            seed: 77,
            scale: 1.5,
            noise: 0.0,
        };
        let data = gen_teacher_student(&spec, &model, 64, &mut SeededRng::new(seed)).unwrap();
        (data, model)
    }

    #[test]
    fn uniform_grid_init() {
        let model = ModelConfig::standard(3, 3, Activation::Relu).unwrap();
        let cfg = TrainConfig {
            n_particles: 4,
            ..TrainConfig::default()
        };
        let e = init_ensemble(&cfg, &model, &mut SeededRng::new(1));
        let taus: Vec<f64> = e.particles().iter().map(|p| p.tau).collect();
        assert_eq!(taus, vec![0.25, 0.5, 0.75, 1.0]);
        assert!(e.is_sorted());
    }

    #[test]
    fn random_tau_init_is_sorted_and_in_range() {
        let model = ModelConfig::standard(3, 3, Activation::Relu).unwrap();
        let cfg = TrainConfig {
            n_particles: 20,
            tau_init: TauInit::UniformRandom,
            ..TrainConfig::default()
        };
        let e = init_ensemble(&cfg, &model, &mut SeededRng::new(1));
        let taus: Vec<f64> = e.particles().iter().map(|p| p.tau).collect();
        assert!(taus.windows(2).all(|w| w[0] <= w[1]));
        assert!(taus.iter().all(|t| (0.0..=1.0).contains(t)));
    }

    #[test]
    fn zero_scale_init_is_identity_map() {
        let model = ModelConfig::standard(3, 3, Activation::Relu).unwrap();
        let cfg = TrainConfig {
            n_particles: 5,
            theta_init_scale: 0.0,
            ..TrainConfig::default()
        };
        let e = init_ensemble(&cfg, &model, &mut SeededRng::new(1));
        assert!(e.particles().iter().all(|p| p.theta == Matrix::zeros(3, 3)));
        let x = Vector::from_vec(vec![0.2, -0.4, 0.1]);
        assert_eq!(forward(&e, &x, &model).unwrap().final_state(), &x);
    }

    #[test]
    fn init_is_deterministic() {
        let model = ModelConfig::standard(3, 3, Activation::Tanh).unwrap();
        let cfg = TrainConfig::default();
        assert_eq!(init_state(&cfg, &model), init_state(&cfg, &model));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { lr: -1.0, ..TrainConfig::default() },
            TrainConfig { n_particles: 0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { lr_schedule: vec![(5, 0.1), (5, 0.1)], ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::InvalidConfig { .. })), "{cfg:?}");
        }
    }

    #[test]
    fn lr_schedule_compounds() {
        let cfg = TrainConfig {
            lr: 0.1,
            lr_schedule: vec![(80, 0.1), (120, 0.1)],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.1);
        assert_eq!(cfg.lr_at(79), 0.1);
        assert!((cfg.lr_at(80) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(150) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let model = ModelConfig::standard(3, 3, Activation::Tanh).unwrap();
        let cfg = TrainConfig {
            n_particles: 4,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut state = init_state(&cfg, &model);
        let before = state.ensemble.particles().to_vec();
        let mut rng = SeededRng::new(2);
        let batch: Vec<Sample> = (0..8)
            .map(|_| {
                let x = rng.normal_vector(3, 0.3);
                let y = model.readout(forward(&state.ensemble, &x, &model).unwrap().final_state());
                (x, y)
            })
            .collect();
        let l = train_step(&mut state, &batch, &model, &cfg).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(state.ensemble.particles(), &before[..]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (data, model) = small_problem(1);
        let cfg = TrainConfig {
            n_particles: 6,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let mut state = init_state(&cfg, &model);
        let before = state.ensemble.particles().to_vec();
        train_step(&mut state, data.samples(), &model, &cfg).unwrap();
        assert_eq!(state.ensemble.particles(), &before[..]);
    }

    #[test]
    fn single_step_matches_hand_arithmetic() {
        // d = 1, one particle, identity embedding, w1 = 1, Tanh.
        // X0 = x = 0.5; θ = 0.4; τ = 0.6; z = 0.2; X1 = 0.5 + 0.6 tanh(0.2).
        let model = ModelConfig::standard(1, 1, Activation::Tanh).unwrap();
        let (theta, tau, x, y) = (0.4f64, 0.6f64, 0.5f64, 1.0f64);
        let cfg = TrainConfig {
            n_particles: 1,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
            tau_lr_scale: 2.0,
            ..TrainConfig::default()
        };
        let e = Ensemble::new(vec![Particle::new(0, Matrix::from_vec(1, 1, vec![theta]).unwrap(), tau)]);
        let mut state = TrainState::new(e);
        state.vel_theta[0][(0, 0)] = 0.05;
        state.vel_tau[0] = -0.02;
        let batch = vec![(Vector::from_vec(vec![x]), y)];
        train_step(&mut state, &batch, &model, &cfg).unwrap();

        let z = theta * x;
        let x1 = x + tau * z.tanh();
        let res = x1 - y;
        let g_theta = res * tau * (1.0 - z.tanh().powi(2)) * x;
        let g_tau = res * z.tanh();
        let v_theta = 0.9 * 0.05 + (g_theta + 0.01 * theta);
        let v_tau = 0.9 * -0.02 + g_tau;
        let p = &state.ensemble.particles()[0];
        assert!((p.theta[(0, 0)] - (theta - 0.1 * v_theta)).abs() < 1e-15);
        assert!((p.tau - (tau - 0.1 * 2.0 * v_tau)).abs() < 1e-15);
        assert!((state.vel_theta[0][(0, 0)] - v_theta).abs() < 1e-15);
    }

    #[test]
    fn invariants_hold_after_every_step() {
        let (data, model) = small_problem(3);
        let model = ModelConfig::new(
            model.w2().clone(),
            model.w1().clone(),
            Activation::Tanh,
            1.0,
            1.0,
            10.0,
        )
        .unwrap();
        let cfg = TrainConfig {
            n_particles: 8,
            lr: 0.5,
            tau_lr_scale: 5.0,
            batch_size: 8,
            theta_init_scale: 3.0,
            ..TrainConfig::default()
        };
        let mut state = init_state(&cfg, &model);
        for chunk in data.samples().chunks(8).cycle().take(40) {
            train_step(&mut state, chunk, &model, &cfg).unwrap();
            for p in state.ensemble.particles() {
                assert!((0.0..=1.0).contains(&p.tau));
                assert!(p.theta.frobenius_norm() <= model.r() * (1.0 + 1e-12));
            }
            assert_eq!(state.vel_theta.len(), state.ensemble.len());
        }
    }

    #[test]
    fn vanilla_mode_is_standard_resnet() {
        let (data, model) = small_problem(5);
        let cfg = TrainConfig {
            n_particles: 7,
            mode: Mode::Vanilla,
            epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let state = train(&data, None, &model, &cfg).unwrap();
        let taus: Vec<f64> = state.ensemble.sort_by_tau().particles().iter().map(|p| p.tau).collect();
        let grid: Vec<f64> = (0..7).map(|i| (i + 1) as f64 / 7.0).collect();
        assert_eq!(taus, grid);

        // Hand-rolled fixed-step ResNet.
        let sorted = state.ensemble.sort_by_tau();
        let eff = cfg.effective_model(&model);
        for (x, _) in data.samples().iter().take(10) {
            let mut h = x.clone();
            for p in sorted.particles() {
                let z = crate::numerics::matvec(&p.theta, &h).unwrap();
                for (hi, zi) in h.as_mut_slice().iter_mut().zip(z.iter()) {
                    *hi += (1.0 / 7.0) * zi.tanh();
                }
            }
            assert_eq!(forward(&state.ensemble, x, &eff).unwrap().final_state(), &h);
        }
    }

    #[test]
    fn small_full_batch_step_descends() {
        for seed in 0..20 {
            let (data, model) = small_problem(100 + seed);
            let base = TrainConfig {
                n_particles: 6,
                momentum: 0.0,
                weight_decay: 0.0,
                seed,
                ..TrainConfig::default()
            };
            let state0 = init_state(&base, &model);
            let l0 = loss(&state0.ensemble, data.samples(), &model).unwrap();
            let mut lr = 0.5;
            let mut ok = false;
            for _ in 0..=10 {
                let cfg = TrainConfig { lr, ..base.clone() };
                let mut s = state0.clone();
                train_step(&mut s, data.samples(), &model, &cfg).unwrap();
                if loss(&s.ensemble, data.samples(), &model).unwrap() <= l0 {
                    ok = true;
                    break;
                }
                lr /= 2.0;
            }
            assert!(ok, "seed {seed}");
        }
    }

    #[test]
    fn particle_exchangeability() {
        let (data, model) = small_problem(9);
        let cfg = TrainConfig {
            n_particles: 6,
            epochs: 4,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let init = init_state(&cfg, &model).ensemble;
        let shuffled = init.permuted(&[4, 0, 5, 2, 1, 3]);
        let run = |e: Ensemble| {
            let mut s = TrainState::new(e);
            run_epochs(&mut s, &data, None, &model, &cfg, |_, _| Ok(ControlFlow::Continue(()))).unwrap();
            s.history
        };
        assert_eq!(run(init), run(shuffled));
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let (data, model) = small_problem(2);
        let cfg = TrainConfig {
            epochs: 0,
            n_particles: 4,
            ..TrainConfig::default()
        };
        let s = train(&data, None, &model, &cfg).unwrap();
        assert_eq!(s, init_state(&cfg, &model));
        assert!(s.history.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (data, model) = small_problem(4);
        let cfg = TrainConfig {
            n_particles: 8,
            epochs: 20,
            batch_size: 16,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let a = train(&data, Some(&data), &model, &cfg).unwrap();
        let b = train(&data, Some(&data), &model, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        let l0 = loss(&init_state(&cfg, &model).ensemble, data.samples(), &model).unwrap();
        let last = a.history.last().unwrap();
        assert!(last.train_loss < l0);
        assert_eq!(last.eval_loss, Some(last.train_loss));
        assert!(a.history.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (data, model) = small_problem(6);
        let cfg = TrainConfig {
            n_particles: 5,
            epochs: 6,
            batch_size: 20,
            ..TrainConfig::default()
        };
        let full = train(&data, None, &model, &cfg).unwrap();
        let mut partial = init_state(&cfg, &model);
        run_epochs(&mut partial, &data, None, &model, &cfg, |s, _| {
            Ok(if s.epoch == 2 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) })
        })
        .unwrap();
        assert_eq!(partial.epoch, 2);
        let mut resumed = partial.clone();
        run_epochs(&mut resumed, &data, None, &model, &cfg, |_, _| Ok(ControlFlow::Continue(()))).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn rejects_out_of_bounds_data() {
        let model = ModelConfig::standard(2, 2, Activation::Tanh).unwrap();
        let data = Dataset::new(vec![(Vector::from_vec(vec![3.0, 0.0]), 0.0)]);
        let cfg = TrainConfig { n_particles: 2, ..TrainConfig::default() };
        assert!(matches!(train(&data, None, &model, &cfg), Err(Error::DataOutOfBounds { .. })));
        assert!(matches!(train(&Dataset::default(), None, &model, &cfg), Err(Error::EmptyBatch)));
    }
}

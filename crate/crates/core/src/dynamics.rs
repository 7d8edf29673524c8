//! Forward Euler dynamics of the particle ResNet and its exact discrete adjoint.
//!
//! With particles sorted by `τ`, layer `ℓ` applies
//!
//! ```text
//! X^{ℓ+1} = X^ℓ + Δ^ℓ σ(θ^ℓ X^ℓ),   Δ^ℓ = τ^ℓ − τ^{ℓ−1},  τ^{−1} = 0,
//! ```
//!
//! starting from `X^0 = w₂ x`, and the per-sample loss is
//! `½(⟨w₁, X^n⟩ − y)²`. The backward pass is reverse-mode differentiation of
//! exactly this recursion, so analytic gradients agree with finite differences
//! of [`loss`] up to the finite-difference truncation error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::numerics::{matvec, Activation, Matrix, Vector};

/// One labelled input `(x, y)`.
pub type Sample = (Vector, f64);

/// What happens on `[τ^{n−1}, 1]` after the last block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailMode {
    /// The tail carries no dynamics.
    #[default]
    Drop,
    /// The last block is applied once more with step `1 − τ^{n−1}`.
    ExtendLast,
}

/// How Euler step sizes are derived from the ensemble.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Steps are the gaps between consecutive sorted `τ` values.
    #[default]
    TauGaps,
    /// Every block gets step `1/n`, as in a standard ResNet. `τ` only fixes order.
    Uniform,
}

/// Fixed (untrained) parts of the model plus the assumption bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    d1: usize,
    d2: usize,
    w2: Matrix,
    w1: Vector,
    act: Activation,
    r: f64,
    r1: f64,
    r2: f64,
    sigma_min: f64,
    sigma_max: f64,
    tail_mode: TailMode,
    step_rule: StepRule,
}

impl ModelConfig {
    /// Validates `‖w₁‖ = 1`, positive bounds, and that `w₂` (d₂×d₁) has
    /// strictly positive singular values.
    pub fn new(w2: Matrix, w1: Vector, act: Activation, r: f64, r1: f64, r2: f64) -> Result<Self> {
        let (d2, d1) = w2.shape();
        if d1 == 0 || d2 == 0 {
            return Err(Error::config("w2", "must be non-empty"));
        }
        if w1.dim() != d2 {
            return Err(Error::dims("ModelConfig::new (w1)", d2, w1.dim()));
        }
        if !w2.is_finite() || !w1.is_finite() {
            return Err(Error::config("w2", "entries must be finite"));
        }
        if (w1.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::config("w1", format!("must have unit norm, got {}", w1.norm())));
        }
        for (field, v) in [("r", r), ("r1", r1), ("r2", r2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        let sv = w2.to_nalgebra().singular_values();
        let sigma_min = sv.min();
        let sigma_max = sv.max();
        if !(sigma_min > 1e-12) {
            return Err(Error::config(
                "w2",
                format!("smallest singular value must be positive, got {sigma_min:e}"),
            ));
        }
        Ok(ModelConfig {
            d1,
            d2,
            w2,
            w1,
            act,
            r,
            r1,
            r2,
            sigma_min,
            sigma_max,
            tail_mode: TailMode::Drop,
            step_rule: StepRule::TauGaps,
        })
    }

    /// Rectangular-identity embedding and a mean-pooling readout
    /// `w₁ = (1/√d₂, …, 1/√d₂)`.
    pub fn standard(d1: usize, d2: usize, act: Activation) -> Result<Self> {
        let w1 = Vector::from_vec(vec![1.0 / (d2 as f64).sqrt(); d2]);
        Self::new(Matrix::eye(d2, d1), w1, act, 10.0, 1.0, 10.0)
    }

    pub fn with_tail_mode(mut self, tail_mode: TailMode) -> Self {
        self.tail_mode = tail_mode;
        self
    }

    pub fn with_step_rule(mut self, step_rule: StepRule) -> Self {
        self.step_rule = step_rule;
        self
    }

    pub fn with_activation(mut self, act: Activation) -> Self {
        self.act = act;
        self
    }

    pub fn d1(&self) -> usize {
        self.d1
    }
    pub fn d2(&self) -> usize {
        self.d2
    }
    pub fn w1(&self) -> &Vector {
        &self.w1
    }
    pub fn w2(&self) -> &Matrix {
        &self.w2
    }
    pub fn activation(&self) -> Activation {
        self.act
    }
    /// Clamp radius of `Q_r`.
    pub fn r(&self) -> f64 {
        self.r
    }
    /// Input ball radius.
    pub fn r1(&self) -> f64 {
        self.r1
    }
    /// Target bound.
    pub fn r2(&self) -> f64 {
        self.r2
    }
    /// Extreme singular values of `w₂`.
    pub fn singular_value_bounds(&self) -> (f64, f64) {
        (self.sigma_min, self.sigma_max)
    }
    pub fn tail_mode(&self) -> TailMode {
        self.tail_mode
    }
    pub fn step_rule(&self) -> StepRule {
        self.step_rule
    }

    /// `X⁰ = w₂ x`.
    pub fn embed(&self, x: &Vector) -> Result<Vector> {
        if x.dim() != self.d1 {
            return Err(Error::dims("embed", self.d1, x.dim()));
        }
        matvec(&self.w2, x)
    }

    /// `⟨w₁, X⟩`.
    pub fn readout(&self, state: &Vector) -> f64 {
        self.w1.dot(state)
    }
}

/// One Euler step of the unrolled network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Layer {
    /// Position of the block in `τ`-sorted order.
    pub block: usize,
    pub step: f64,
    /// Sorted position whose `τ` enters the step with a `+` sign.
    pub upper: Option<usize>,
    /// Sorted position whose `τ` enters the step with a `−` sign.
    pub lower: Option<usize>,
}

/// Euler layers for a `τ`-sorted view of `e` (`order[k]` is the k-th particle).
pub fn layer_schedule(e: &Ensemble, order: &[usize], cfg: &ModelConfig) -> Vec<Layer> {
    let n = order.len();
    let mut layers = Vec::with_capacity(n + 1);
    match cfg.step_rule {
        StepRule::Uniform => {
            let step = 1.0 / n as f64;
            for k in 0..n {
                layers.push(Layer {
                    block: k,
                    step,
                    upper: None,
                    lower: None,
                });
            }
        }
        StepRule::TauGaps => {
            let mut prev = 0.0;
            for k in 0..n {
                let tau = e.particles()[order[k]].tau;
                layers.push(Layer {
                    block: k,
                    step: tau - prev,
                    upper: Some(k),
                    lower: k.checked_sub(1),
                });
                prev = tau;
            }
            if n > 0 && cfg.tail_mode == TailMode::ExtendLast {
                layers.push(Layer {
                    block: n - 1,
                    step: 1.0 - prev,
                    upper: None,
                    lower: Some(n - 1),
                });
            }
        }
    }
    layers
}

fn sorted_order(e: &Ensemble) -> Vec<usize> {
    if e.is_sorted() {
        (0..e.len()).collect()
    } else {
        e.sort_permutation()
    }
}

fn check_ensemble(e: &Ensemble, cfg: &ModelConfig) -> Result<()> {
    for p in e.particles() {
        if p.theta.shape() != (cfg.d2, cfg.d2) {
            return Err(Error::dims(
                "ensemble block",
                format!("{0}x{0}", cfg.d2),
                format!("{}x{}", p.theta.rows(), p.theta.cols()),
            ));
        }
    }
    Ok(())
}

/// Forward states of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    states: Vec<Vector>,
    layers: Vec<Layer>,
    order: Vec<usize>,
}

impl Trajectory {
    /// `X⁰ … X^L`, one more than the number of layers.
    pub fn states(&self) -> &[Vector] {
        &self.states
    }

    pub fn final_state(&self) -> &Vector {
        self.states.last().expect("trajectory always holds X0")
    }

    pub fn steps(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.step).collect()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Original particle index applied at each layer.
    pub fn block_order(&self) -> Vec<usize> {
        self.layers.iter().map(|l| self.order[l.block]).collect()
    }

    /// Sorted position `k` → original particle index.
    pub fn sort_order(&self) -> &[usize] {
        &self.order
    }
}

/// Costates `p⁰ … p^L` in forward index order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointTrajectory {
    pub costates: Vec<Vector>,
}

/// Averaged loss gradients, indexed like `Ensemble::particles()`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientRecord {
    pub dtheta: Vec<Matrix>,
    pub dtau: Vec<f64>,
    pub loss: f64,
}

fn run_forward(
    e: &Ensemble,
    order: Vec<usize>,
    x: &Vector,
    cfg: &ModelConfig,
) -> Result<Trajectory> {
    check_ensemble(e, cfg)?;
    let layers = layer_schedule(e, &order, cfg);
    let mut states = Vec::with_capacity(layers.len() + 1);
    let x0 = cfg.embed(x)?;
    if !x0.is_finite() {
        return Err(Error::NonFiniteState { layer: 0 });
    }
    states.push(x0);
    for (l, layer) in layers.iter().enumerate() {
        let theta = &e.particles()[order[layer.block]].theta;
        let cur = &states[l];
        let mut next = cur.clone();
        let z = matvec(theta, cur)?;
        for (n, zi) in next.as_mut_slice().iter_mut().zip(z.iter()) {
            *n += layer.step * cfg.act.value(*zi);
        }
        if !next.is_finite() {
            return Err(Error::NonFiniteState { layer: l });
        }
        states.push(next);
    }
    Ok(Trajectory {
        states,
        layers,
        order,
    })
}

/// Integrates one input through the ensemble (sorting it first if needed).
pub fn forward(e: &Ensemble, x: &Vector, cfg: &ModelConfig) -> Result<Trajectory> {
    run_forward(e, sorted_order(e), x, cfg)
}

/// Mean of `½(⟨w₁, X^L(x)⟩ − y)²` over the batch, summed in batch order.
pub fn loss(e: &Ensemble, batch: &[Sample], cfg: &ModelConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_ensemble(e, cfg)?;
    let order = sorted_order(e);
    let layers = layer_schedule(e, &order, cfg);
    let mut ws = Workspace::default();
    let mut acc = 0.0;
    for (x, y) in batch {
        ws.integrate(e, &order, &layers, x, cfg, false)?;
        let res = dot(cfg.w1.as_slice(), ws.last_state(cfg.d2)) - y;
        acc += 0.5 * res * res;
    }
    Ok(acc / batch.len() as f64)
}

/// Flat per-sample buffers reused across a batch.
#[derive(Default)]
struct Workspace {
    /// States `X^0 .. X^L`, each of length d₂.
    states: Vec<f64>,
    /// `σ(z)` and `σ'(z)` per layer when requested.
    values: Vec<f64>,
    slopes: Vec<f64>,
    z: Vec<f64>,
}

impl Workspace {
    /// Same arithmetic, in the same order, as [`run_forward`].
    fn integrate(
        &mut self,
        e: &Ensemble,
        order: &[usize],
        layers: &[Layer],
        x: &Vector,
        cfg: &ModelConfig,
        keep_activations: bool,
    ) -> Result<()> {
        let d = cfg.d2;
        let x0 = cfg.embed(x)?;
        if !x0.is_finite() {
            return Err(Error::NonFiniteState { layer: 0 });
        }
        self.states.clear();
        self.states.extend_from_slice(x0.as_slice());
        self.values.clear();
        self.slopes.clear();
        self.z.resize(d, 0.0);
        for (l, layer) in layers.iter().enumerate() {
            let theta = &e.particles()[order[layer.block]].theta;
            let cur = l * d;
            for i in 0..d {
                let mut acc = 0.0;
                for (a, b) in theta.row(i).iter().zip(&self.states[cur..cur + d]) {
                    acc += a * b;
                }
                self.z[i] = acc;
            }
            let mut finite = true;
            for i in 0..d {
                let (v, s) = if keep_activations {
                    cfg.act.value_and_derivative(self.z[i])
                } else {
                    (cfg.act.value(self.z[i]), 0.0)
                };
                let next = self.states[cur + i] + layer.step * v;
                finite &= next.is_finite();
                self.states.push(next);
                if keep_activations {
                    self.values.push(v);
                    self.slopes.push(s);
                }
            }
            if !finite {
                return Err(Error::NonFiniteState { layer: l });
            }
        }
        Ok(())
    }

    fn last_state(&self, d: usize) -> &[f64] {
        &self.states[self.states.len() - d..]
    }
}

/// Reverse pass of the Euler recursion:
/// `p^L = (⟨w₁,X^L⟩ − y) w₁`, `p^ℓ = p^{ℓ+1} + Δ^ℓ J_ℓᵀ p^{ℓ+1}`.
pub fn adjoint_backward(
    e: &Ensemble,
    traj: &Trajectory,
    y: f64,
    cfg: &ModelConfig,
) -> Result<AdjointTrajectory> {
    check_trajectory(e, traj, cfg)?;
    let n_layers = traj.layers.len();
    let mut costates = vec![Vector::default(); n_layers + 1];
    let mut p = terminal_costate(traj, y, cfg);
    costates[n_layers] = p.clone();
    for l in (0..n_layers).rev() {
        let layer = traj.layers[l];
        let theta = &e.particles()[traj.order[layer.block]].theta;
        let z = matvec(theta, &traj.states[l])?;
        let u = Vector::from_vec(
            z.iter()
                .zip(p.iter())
                .map(|(zi, pi)| cfg.act.derivative(*zi) * pi)
                .collect(),
        );
        p.axpy(layer.step, &theta.matvec_transpose(&u)?);
        costates[l] = p.clone();
    }
    Ok(AdjointTrajectory { costates })
}

fn terminal_costate(traj: &Trajectory, y: f64, cfg: &ModelConfig) -> Vector {
    let res = cfg.readout(traj.final_state()) - y;
    cfg.w1.scaled(res)
}

fn check_trajectory(e: &Ensemble, traj: &Trajectory, cfg: &ModelConfig) -> Result<()> {
    check_ensemble(e, cfg)?;
    if traj.order.len() != e.len() {
        return Err(Error::TrajectoryMismatch {
            expected: e.len(),
            found: traj.order.len(),
        });
    }
    let expected = layer_schedule(e, &traj.order, cfg).len();
    if traj.layers.len() != expected {
        return Err(Error::TrajectoryMismatch {
            expected,
            found: traj.layers.len(),
        });
    }
    Ok(())
}

/// Gradient accumulators in sorted position order.
struct Accum {
    dtheta: Vec<Matrix>,
    dtau: Vec<f64>,
    loss: f64,
}

impl Accum {
    fn new(n: usize, d: usize) -> Self {
        Accum {
            dtheta: vec![Matrix::zeros(d, d); n],
            dtau: vec![0.0; n],
            loss: 0.0,
        }
    }

    fn merge(&mut self, other: &Accum) {
        for (a, b) in self.dtheta.iter_mut().zip(&other.dtheta) {
            a.axpy(1.0, b);
        }
        for (a, b) in self.dtau.iter_mut().zip(&other.dtau) {
            *a += b;
        }
        self.loss += other.loss;
    }
}

#[allow(clippy::too_many_arguments)]
fn accumulate_sample(
    e: &Ensemble,
    order: &[usize],
    layers: &[Layer],
    x: &Vector,
    y: f64,
    cfg: &ModelConfig,
    ws: &mut Workspace,
    acc: &mut Accum,
) -> Result<()> {
    ws.integrate(e, order, layers, x, cfg, true)?;
    let d = cfg.d2;
    let res = dot(cfg.w1.as_slice(), ws.last_state(d)) - y;
    acc.loss += 0.5 * res * res;
    let mut p: Vec<f64> = cfg.w1.iter().map(|w| res * w).collect();
    let mut u = vec![0.0; d];
    let mut back = vec![0.0; d];
    for l in (0..layers.len()).rev() {
        let layer = layers[l];
        let theta = &e.particles()[order[layer.block]].theta;
        let state = &ws.states[l * d..(l + 1) * d];
        let values = &ws.values[l * d..(l + 1) * d];
        let slopes = &ws.slopes[l * d..(l + 1) * d];
        let mut pairing = 0.0;
        for i in 0..d {
            pairing += p[i] * values[i];
            u[i] = slopes[i] * p[i];
        }
        // ∂E/∂Δ^ℓ = ⟨p^{ℓ+1}, σ(θ^ℓ X^ℓ)⟩, spread onto the τ values forming Δ^ℓ.
        if let Some(k) = layer.upper {
            acc.dtau[k] += pairing;
        }
        if let Some(k) = layer.lower {
            acc.dtau[k] -= pairing;
        }
        acc.dtheta[layer.block].add_outer_slices(layer.step, &u, state);
        theta.matvec_transpose_into(&u, &mut back);
        for (pi, bi) in p.iter_mut().zip(&back) {
            *pi += layer.step * bi;
        }
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// How per-sample contributions are reduced over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// One pass in batch order. Bit-reproducible.
    #[default]
    Serial,
    /// Fixed-size chunks evaluated on the rayon pool and merged in chunk
    /// order. Deterministic for a given batch, but rounds differently from
    /// `Serial` in the last bits.
    Parallel,
}

const PARALLEL_CHUNK: usize = 16;

/// Batch-averaged gradients with respect to every `θ_i` and `τ_i`.
pub fn gradients(e: &Ensemble, batch: &[Sample], cfg: &ModelConfig) -> Result<GradientRecord> {
    gradients_with(e, batch, cfg, Reduction::Serial)
}

pub fn gradients_with(
    e: &Ensemble,
    batch: &[Sample],
    cfg: &ModelConfig,
    reduction: Reduction,
) -> Result<GradientRecord> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_ensemble(e, cfg)?;
    let order = sorted_order(e);
    let layers = layer_schedule(e, &order, cfg);
    let n = e.len();
    let d = cfg.d2;

    let acc = match reduction {
        Reduction::Serial => {
            let mut acc = Accum::new(n, d);
            let mut ws = Workspace::default();
            for (x, y) in batch {
                accumulate_sample(e, &order, &layers, x, *y, cfg, &mut ws, &mut acc)?;
            }
            acc
        }
        Reduction::Parallel => {
            let partials: Vec<Result<Accum>> = batch
                .par_chunks(PARALLEL_CHUNK)
                .map(|chunk| {
                    let mut acc = Accum::new(n, d);
                    let mut ws = Workspace::default();
                    for (x, y) in chunk {
                        accumulate_sample(e, &order, &layers, x, *y, cfg, &mut ws, &mut acc)?;
                    }
                    Ok(acc)
                })
                .collect();
            let mut acc = Accum::new(n, d);
            for part in partials {
                acc.merge(&part?);
            }
            acc
        }
    };

    let scale = 1.0 / batch.len() as f64;
    let mut dtheta = vec![Matrix::zeros(d, d); n];
    let mut dtau = vec![0.0; n];
    for (k, &orig) in order.iter().enumerate() {
        dtheta[orig] = acc.dtheta[k].scaled(scale);
        dtau[orig] = acc.dtau[k] * scale;
    }
    for (i, (m, t)) in dtheta.iter().zip(&dtau).enumerate() {
        if !m.is_finite() || !t.is_finite() {
            return Err(Error::NonFiniteGradient { particle: i });
        }
    }
    Ok(GradientRecord {
        dtheta,
        dtau,
        loss: acc.loss * scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::Particle;
    use crate::numerics::SeededRng;

    fn random_setup(seed: u64, d: usize, n: usize, act: Activation) -> (Ensemble, Vec<Sample>, ModelConfig) {
        let mut rng = SeededRng::new(seed);
        let cfg = ModelConfig::standard(d, d, act).unwrap();
        let e = Ensemble::new(
            (0..n)
                .map(|i| Particle::new(i as u64, rng.normal_matrix(d, d, 0.8), rng.uniform()))
                .collect(),
        );
        let batch = (0..16)
            .map(|_| (rng.normal_vector(d, 0.5), rng.normal()))
            .collect();
        (e, batch, cfg)
    }

    #[test]
    fn empty_ensemble_is_embedding() {
        let cfg = ModelConfig::standard(3, 3, Activation::Relu).unwrap();
        let x = Vector::from_vec(vec![0.1, 0.2, -0.3]);
        let t = forward(&Ensemble::default(), &x, &cfg).unwrap();
        assert_eq!(t.states().len(), 1);
        assert_eq!(t.final_state(), &x);
        assert!(t.steps().is_empty());
    }

    #[test]
    fn zero_block_is_identity_map() {
        let cfg = ModelConfig::standard(2, 2, Activation::Relu).unwrap();
        let e = Ensemble::new(vec![Particle::new(0, Matrix::zeros(2, 2), 0.5)]);
        let x = Vector::from_vec(vec![0.4, -0.1]);
        let t = forward(&e, &x, &cfg).unwrap();
        assert_eq!(t.states()[1], t.states()[0]);
    }

    #[test]
    fn equal_taus_give_zero_step() {
        let cfg = ModelConfig::standard(2, 2, Activation::Tanh).unwrap();
        let e = Ensemble::new(vec![
            Particle::new(0, Matrix::identity(2), 0.5),
            Particle::new(1, Matrix::identity(2).scaled(3.0), 0.5),
        ]);
        let t = forward(&e, &Vector::from_vec(vec![0.4, -0.1]), &cfg).unwrap();
        assert_eq!(t.steps(), vec![0.5, 0.0]);
        assert_eq!(t.states()[2], t.states()[1]);
    }

    #[test]
    fn forward_sorts_unsorted_input() {
        let cfg = ModelConfig::standard(2, 2, Activation::Tanh).unwrap();
        let e = Ensemble::new(vec![
            Particle::new(0, Matrix::identity(2), 0.9),
            Particle::new(1, Matrix::identity(2).scaled(-2.0), 0.3),
        ]);
        let t = forward(&e, &Vector::from_vec(vec![0.4, -0.1]), &cfg).unwrap();
        assert_eq!(t.block_order(), vec![1, 0]);
        let steps = t.steps();
        assert_eq!(steps[0], 0.3);
        assert!((steps[1] - 0.6).abs() < 1e-15);
        assert_eq!(forward(&e.sort_by_tau(), &Vector::from_vec(vec![0.4, -0.1]), &cfg)
            .unwrap()
            .final_state(), t.final_state());
    }

    #[test]
    fn forward_rejects_bad_dimensions() {
        let cfg = ModelConfig::standard(2, 2, Activation::Tanh).unwrap();
        let e = Ensemble::new(vec![Particle::new(0, Matrix::identity(3), 0.5)]);
        assert!(forward(&e, &Vector::zeros(2), &cfg).is_err());
        assert!(forward(&Ensemble::default(), &Vector::zeros(3), &cfg).is_err());
    }

    #[test]
    fn overflow_names_layer() {
        let cfg = ModelConfig::standard(1, 1, Activation::Relu).unwrap();
        let big = Matrix::from_vec(1, 1, vec![1e300]).unwrap();
        let e = Ensemble::new(vec![
            Particle::new(0, big.clone(), 0.5),
            Particle::new(1, big, 1.0),
        ]);
        let err = forward(&e, &Vector::from_vec(vec![1.0]), &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { layer: 1 }), "{err}");
    }

    #[test]
    fn model_config_validation() {
        let w1 = Vector::from_vec(vec![1.0, 0.0]);
        assert!(ModelConfig::new(Matrix::identity(2), w1.clone(), Activation::Tanh, 1.0, 1.0, 1.0).is_ok());
        assert!(ModelConfig::new(Matrix::identity(2), w1.scaled(2.0), Activation::Tanh, 1.0, 1.0, 1.0).is_err());
        let singular = Matrix::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(ModelConfig::new(singular, w1.clone(), Activation::Tanh, 1.0, 1.0, 1.0).is_err());
        assert!(ModelConfig::new(Matrix::identity(2), w1, Activation::Tanh, -1.0, 1.0, 1.0).is_err());
        let cfg = ModelConfig::new(
            Matrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 0.5]).unwrap(),
            Vector::from_vec(vec![0.6, 0.8]),
            Activation::Tanh,
            1.0,
            1.0,
            1.0,
        )
        .unwrap();
        let (lo, hi) = cfg.singular_value_bounds();
        assert!((lo - 0.5).abs() < 1e-12 && (hi - 3.0).abs() < 1e-12);
    }

    #[test]
    fn loss_perfect_fit_is_zero() {
        let cfg = ModelConfig::standard(3, 3, Activation::Relu).unwrap();
        let mut rng = SeededRng::new(1);
        let batch: Vec<Sample> = (0..5)
            .map(|_| {
                let x = rng.normal_vector(3, 0.3);
                let y = cfg.readout(&cfg.embed(&x).unwrap());
                (x, y)
            })
            .collect();
        assert_eq!(loss(&Ensemble::default(), &batch, &cfg).unwrap(), 0.0);
        let g = gradients(&Ensemble::new(vec![Particle::new(0, Matrix::zeros(3, 3), 0.5)]), &batch, &cfg).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.dtheta[0].as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(g.dtau, vec![0.0]);
    }

    #[test]
    fn loss_hand_computed() {
        // X0 = (1,-1); σ(I X0) = (1,0); X1 = (1.5,-1); <w1,X1> = 0.9-0.8 = 0.1; y = 1.
        let cfg = ModelConfig::new(
            Matrix::identity(2),
            Vector::from_vec(vec![0.6, 0.8]),
            Activation::Relu,
            10.0,
            2.0,
            2.0,
        )
        .unwrap();
        let e = Ensemble::new(vec![Particle::new(0, Matrix::identity(2), 0.5)]);
        let batch = vec![(Vector::from_vec(vec![1.0, -1.0]), 1.0)];
        let l = loss(&e, &batch, &cfg).unwrap();
        assert!((l - 0.405).abs() < 1e-12, "{l}");
    }

    #[test]
    fn loss_rejects_empty_batch() {
        let cfg = ModelConfig::standard(2, 2, Activation::Relu).unwrap();
        assert!(matches!(loss(&Ensemble::default(), &[], &cfg), Err(Error::EmptyBatch)));
        assert!(matches!(gradients(&Ensemble::default(), &[], &cfg), Err(Error::EmptyBatch)));
    }

    #[test]
    fn loss_batch_order_invariant() {
        let (e, batch, cfg) = random_setup(4, 3, 5, Activation::Tanh);
        let mut rev = batch.clone();
        rev.reverse();
        let a = loss(&e, &batch, &cfg).unwrap();
        let b = loss(&e, &rev, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn adjoint_trivial_cases() {
        let cfg = ModelConfig::standard(2, 2, Activation::Relu).unwrap();
        let x = Vector::from_vec(vec![0.3, 0.1]);
        let empty = Ensemble::default();
        let t = forward(&empty, &x, &cfg).unwrap();
        let adj = adjoint_backward(&empty, &t, 1.0, &cfg).unwrap();
        let expected = cfg.w1().scaled(cfg.readout(&x) - 1.0);
        assert_eq!(adj.costates, vec![expected.clone()]);

        let zeros = Ensemble::new(
            (0..4).map(|i| Particle::new(i, Matrix::zeros(2, 2), 0.25 * (i + 1) as f64)).collect(),
        );
        let t = forward(&zeros, &x, &cfg).unwrap();
        let adj = adjoint_backward(&zeros, &t, 1.0, &cfg).unwrap();
        assert_eq!(adj.costates.len(), 5);
        assert!(adj.costates.iter().all(|p| *p == expected));
    }

    #[test]
    fn adjoint_rejects_foreign_trajectory() {
        let (e, batch, cfg) = random_setup(2, 3, 4, Activation::Tanh);
        let t = forward(&e, &batch[0].0, &cfg).unwrap();
        let smaller = Ensemble::new(e.particles()[..3].to_vec());
        assert!(matches!(
            adjoint_backward(&smaller, &t, 0.0, &cfg),
            Err(Error::TrajectoryMismatch { .. })
        ));
    }

    #[test]
    fn initial_costate_matches_state_sensitivity() {
        // p⁰ = ∂E/∂X⁰: perturb X⁰ through a d1 = d2 identity embedding.
        let h = 1e-6;
        for seed in 0..10 {
            let (e, batch, cfg) = random_setup(seed, 4, 6, Activation::Tanh);
            let (x, y) = &batch[0];
            let t = forward(&e, x, &cfg).unwrap();
            let adj = adjoint_backward(&e, &t, *y, &cfg).unwrap();
            let sample_loss = |x: &Vector| loss(&e, &[(x.clone(), *y)], &cfg).unwrap();
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..4 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = (sample_loss(&xp) - sample_loss(&xm)) / (2.0 * h);
                num += (fd - adj.costates[0][j]).powi(2);
                den += adj.costates[0][j].powi(2);
            }
            assert!((num / den).sqrt() < 1e-6, "seed {seed}");
        }
    }

    /// Central differences of `loss` on every θ and τ coordinate.
    fn fd_gradients(e: &Ensemble, batch: &[Sample], cfg: &ModelConfig, h: f64) -> (Vec<Matrix>, Vec<f64>) {
        let mut dtheta = Vec::new();
        let mut dtau = Vec::new();
        for i in 0..e.len() {
            let (r, c) = e.particles()[i].theta.shape();
            let mut g = Matrix::zeros(r, c);
            for a in 0..r {
                for b in 0..c {
                    let mut ep = e.clone();
                    let mut em = e.clone();
                    ep.particles_mut()[i].theta[(a, b)] += h;
                    em.particles_mut()[i].theta[(a, b)] -= h;
                    g[(a, b)] = (loss(&ep, batch, cfg).unwrap() - loss(&em, batch, cfg).unwrap()) / (2.0 * h);
                }
            }
            dtheta.push(g);
            let mut ep = e.clone();
            let mut em = e.clone();
            ep.particles_mut()[i].tau += h;
            em.particles_mut()[i].tau -= h;
            dtau.push((loss(&ep, batch, cfg).unwrap() - loss(&em, batch, cfg).unwrap()) / (2.0 * h));
        }
        (dtheta, dtau)
    }

    fn max_rel(analytic: &GradientRecord, fd: &(Vec<Matrix>, Vec<f64>)) -> f64 {
        let mut worst: f64 = 0.0;
        let scale = analytic
            .dtheta
            .iter()
            .flat_map(|m| m.as_slice().iter())
            .chain(&analytic.dtau)
            .fold(0.0f64, |a, v| a.max(v.abs()));
        let mut check = |a: f64, b: f64| {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-3 * scale));
        };
        for (m, f) in analytic.dtheta.iter().zip(&fd.0) {
            for (a, b) in m.as_slice().iter().zip(f.as_slice()) {
                check(*a, *b);
            }
        }
        for (a, b) in analytic.dtau.iter().zip(&fd.1) {
            check(*a, *b);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let (e, batch, cfg) = random_setup(100 + seed, 4, 8, Activation::Tanh);
            let g = gradients(&e, &batch, &cfg).unwrap();
            let fd = fd_gradients(&e, &batch, &cfg, 1e-5);
            let err = max_rel(&g, &fd);
            assert!(err < 1e-5, "seed {seed}: {err:e}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_with_extended_tail() {
        for seed in 0..5 {
            let (e, batch, cfg) = random_setup(200 + seed, 3, 5, Activation::Sigmoid);
            let cfg = cfg.with_tail_mode(TailMode::ExtendLast);
            let g = gradients(&e, &batch, &cfg).unwrap();
            let fd = fd_gradients(&e, &batch, &cfg, 1e-5);
            assert!(max_rel(&g, &fd) < 1e-5, "seed {seed}");
        }
    }

    #[test]
    fn uniform_steps_have_no_tau_gradient() {
        let (e, batch, cfg) = random_setup(9, 3, 5, Activation::Tanh);
        let cfg = cfg.with_step_rule(StepRule::Uniform);
        let g = gradients(&e, &batch, &cfg).unwrap();
        assert!(g.dtau.iter().all(|&t| t == 0.0));
        let fd = fd_gradients(&e, &batch, &cfg, 1e-5);
        assert!(max_rel(&g, &fd) < 1e-5);
    }

    #[test]
    fn gradients_follow_original_particle_order() {
        let (e, batch, cfg) = random_setup(12, 3, 6, Activation::Tanh);
        let g = gradients(&e, &batch, &cfg).unwrap();
        let perm = [5, 2, 0, 4, 1, 3];
        let gp = gradients(&e.permuted(&perm), &batch, &cfg).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(gp.dtheta[k], g.dtheta[i]);
            assert_eq!(gp.dtau[k], g.dtau[i]);
        }
    }

    #[test]
    fn parallel_reduction_agrees_with_serial() {
        let (e, _, cfg) = random_setup(3, 4, 8, Activation::Tanh);
        let mut rng = SeededRng::new(99);
        let batch: Vec<Sample> = (0..100).map(|_| (rng.normal_vector(4, 0.5), rng.normal())).collect();
        let s = gradients_with(&e, &batch, &cfg, Reduction::Serial).unwrap();
        let p = gradients_with(&e, &batch, &cfg, Reduction::Parallel).unwrap();
        let p2 = gradients_with(&e, &batch, &cfg, Reduction::Parallel).unwrap();
        assert_eq!(p, p2);
        assert!((s.loss - p.loss).abs() < 1e-12);
        for (a, b) in s.dtheta.iter().zip(&p.dtheta) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn discrete_adjoint_converges_at_first_order() {
        // θ = a·I with ReLU on a positive state is the linear ODE Ẋ = aX,
        // whose continuous costate is p(0) = e^{a}·(⟨w₁, e^{a}X⁰⟩ − y)·w₁.
        let a: f64 = 0.8;
        let d = 2;
        let cfg = ModelConfig::standard(d, d, Activation::Relu).unwrap();
        let x = Vector::from_vec(vec![0.3, 0.5]);
        let y = 0.1;
        let exact = {
            let res = cfg.readout(&x) * a.exp() - y;
            cfg.w1().scaled(a.exp() * res)
        };
        let err_at = |n: usize| {
            let e = Ensemble::new(
                (0..n)
                    .map(|i| Particle::new(i as u64, Matrix::identity(d).scaled(a), (i + 1) as f64 / n as f64))
                    .collect(),
            );
            let t = forward(&e, &x, &cfg).unwrap();
            let adj = adjoint_backward(&e, &t, y, &cfg).unwrap();
            adj.costates[0].sub(&exact).norm()
        };
        for n in [16usize, 32, 64] {
            let slope = (err_at(2 * n) / err_at(n)).log2();
            assert!((slope + 1.0).abs() < 0.3, "n={n} slope={slope}");
        }
    }
}

//! Executable checks of the mean-field picture on concrete ensembles.
//!
//! - [`shallow_expand`] / [`depth_sweep`]: the deep composition against its
//!   truncated expansion around `X⁰` (a two-layer model plus corrections).
//! - [`stability_probe`]: output sensitivity relative to W₂ between ensembles.
//! - [`adjoint_bound_check`]: discrete Gronwall lower bound on costate norms.
//! - [`descent_probe`]: constructs a measure perturbation with negative first
//!   variation whenever the loss is positive.
//! - [`homogeneity_degree`]: fitted degree `p` in `f(λθ) = λᵖ f(θ)`.
//! - [`grad_check`]: adjoint gradients against central differences.

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    adjoint_backward, forward, gradients, layer_schedule, loss, AdjointTrajectory, ModelConfig,
    Sample, Trajectory,
};
use crate::ensemble::{w2_distance, Ensemble, Particle};
use crate::error::{Error, Result};
use crate::numerics::{apply_block, matvec, Activation, Matrix, SeededRng, Vector};

fn rms_error(approx: &[Vector], exact: &[Vector]) -> f64 {
    let sum: f64 = approx
        .iter()
        .zip(exact)
        .map(|(a, b)| a.sub(b).norm_squared())
        .sum();
    (sum / approx.len() as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Shallow expansion

/// Truncated expansion of `X^L` around `X⁰`, with Euler steps as layer weights:
///
/// ```text
/// order 0: X⁰
/// order 1: X⁰ + Σ_ℓ Δ^ℓ σ(θ^ℓ X⁰)
/// order 2: order 1 + Σ_{b>a} Δ^b Δ^a diag(σ'(θ^b X⁰)) θ^b σ(θ^a X⁰)
/// ```
pub fn shallow_expand(e: &Ensemble, x: &Vector, cfg: &ModelConfig, order: usize) -> Result<Vector> {
    if order > 2 {
        return Err(Error::config("order", format!("must be 0, 1 or 2, got {order}")));
    }
    if order == 2 && !cfg.activation().is_smooth() {
        return Err(Error::NonSmoothActivation {
            op: "second-order expansion",
            activation: cfg.activation().name(),
        });
    }
    let x0 = cfg.embed(x)?;
    let mut out = x0.clone();
    if order == 0 {
        return Ok(out);
    }
    let order_idx = e.sort_permutation();
    let layers = layer_schedule(e, &order_idx, cfg);
    let act = cfg.activation();
    let d = cfg.d2();
    // Running Σ_{a<b} Δ^a σ(θ^a X⁰) for the pairwise term.
    let mut earlier = Vector::zeros(d);
    for layer in &layers {
        let theta = &e.particles()[order_idx[layer.block]].theta;
        if theta.shape() != (d, d) {
            return Err(Error::dims("shallow_expand", d, theta.rows()));
        }
        let z = matvec(theta, &x0)?;
        if order == 2 {
            let coupled = matvec(theta, &earlier)?;
            for i in 0..d {
                out[i] += layer.step * act.derivative(z[i]) * coupled[i];
            }
        }
        for i in 0..d {
            let s = act.value(z[i]);
            out[i] += layer.step * s;
            earlier[i] += layer.step * s;
        }
    }
    Ok(out)
}

/// RMS-over-batch error of each truncation against the exact forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub depth: usize,
    pub order0_err: f64,
    pub order1_err: f64,
    pub order2_err: f64,
}

pub fn expansion_report(e: &Ensemble, xs: &[Vector], cfg: &ModelConfig) -> Result<ExpansionReport> {
    if xs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let exact: Vec<Vector> = xs
        .iter()
        .map(|x| forward(e, x, cfg).map(|t| t.final_state().clone()))
        .collect::<Result<_>>()?;
    let approx = |order| -> Result<Vec<Vector>> {
        xs.iter().map(|x| shallow_expand(e, x, cfg, order)).collect()
    };
    Ok(ExpansionReport {
        depth: e.len(),
        order0_err: rms_error(&approx(0)?, &exact),
        order1_err: rms_error(&approx(1)?, &exact),
        order2_err: rms_error(&approx(2)?, &exact),
    })
}

/// Settings for the expansion-error-versus-depth experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthSweepConfig {
    pub depths: Vec<usize>,
    pub seeds: u64,
    pub base_seed: u64,
    pub dim: usize,
    /// Entry std of the i.i.d. blocks is `theta_scale / √d`.
    pub theta_scale: f64,
    pub n_inputs: usize,
}

impl Default for DepthSweepConfig {
    fn default() -> Self {
        DepthSweepConfig {
            depths: vec![8, 16, 32, 64],
            seeds: 10,
            base_seed: 0,
            dim: 4,
            theta_scale: 2.0,
            n_inputs: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSweepReport {
    /// Seed-averaged errors per depth.
    pub reports: Vec<ExpansionReport>,
    /// Least-squares slope of log(order-1 error) against log(depth).
    pub order1_slope: f64,
    pub order2_below_order1: bool,
}

impl DepthSweepReport {
    /// Slope in `[−1.3, −0.7]` and the second-order truncation better at every depth.
    pub fn passes(&self) -> bool {
        (-1.3..=-0.7).contains(&self.order1_slope) && self.order2_below_order1
    }
}

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Expansion error against depth for i.i.d. zero-mean blocks on the uniform
/// grid `τ_i = (i+1)/L`, so total mass stays 1 while depth grows.
pub fn depth_sweep(sweep: &DepthSweepConfig, act: Activation) -> Result<DepthSweepReport> {
    if sweep.depths.len() < 2 || sweep.seeds == 0 || sweep.n_inputs == 0 {
        return Err(Error::config("depth_sweep", "needs >= 2 depths, >= 1 seed, >= 1 input"));
    }
    let cfg = ModelConfig::standard(sweep.dim, sweep.dim, act)?;
    let std = sweep.theta_scale / (sweep.dim as f64).sqrt();
    let mut reports = Vec::with_capacity(sweep.depths.len());
    for &depth in &sweep.depths {
        let mut acc = ExpansionReport {
            depth,
            order0_err: 0.0,
            order1_err: 0.0,
            order2_err: 0.0,
        };
        for s in 0..sweep.seeds {
            let mut rng = SeededRng::stream(sweep.base_seed + s, depth as u64);
            let e = Ensemble::new(
                (0..depth)
                    .map(|i| {
                        Particle::new(
                            i as u64,
                            rng.normal_matrix(sweep.dim, sweep.dim, std),
                            (i + 1) as f64 / depth as f64,
                        )
                    })
                    .collect(),
            );
            let xs: Vec<Vector> = (0..sweep.n_inputs)
                .map(|_| crate::data::sample_in_ball(&mut rng, sweep.dim, cfg.r1()))
                .collect();
            let r = expansion_report(&e, &xs, &cfg)?;
            acc.order0_err += r.order0_err;
            acc.order1_err += r.order1_err;
            acc.order2_err += r.order2_err;
        }
        let k = sweep.seeds as f64;
        acc.order0_err /= k;
        acc.order1_err /= k;
        acc.order2_err /= k;
        reports.push(acc);
    }
    let logs_l: Vec<f64> = reports.iter().map(|r| (r.depth as f64).ln()).collect();
    let logs_e: Vec<f64> = reports.iter().map(|r| r.order1_err.ln()).collect();
    Ok(DepthSweepReport {
        order1_slope: fit_slope(&logs_l, &logs_e),
        order2_below_order1: reports.iter().all(|r| r.order2_err < r.order1_err),
        reports,
    })
}

// ---------------------------------------------------------------------------
// Stability

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Scales that produced a non-degenerate perturbation.
    pub scales: Vec<f64>,
    /// `max_x ‖X_e(x,1) − X_e'(x,1)‖ / W₂(e, e')` per entry of `scales`.
    pub ratios: Vec<f64>,
    /// Scales dropped because the clamped perturbation had W₂ = 0.
    pub skipped: Vec<f64>,
    /// Supremum of `ratios`.
    pub estimated_constant: f64,
}

impl StabilityReport {
    /// Ratios at the two smallest scales agree within a factor 2 and no ratio
    /// exceeds ten times the ratio at the largest scale.
    pub fn bounded(&self) -> bool {
        let n = self.ratios.len();
        if n < 2 {
            return false;
        }
        let (a, b) = (self.ratios[n - 2], self.ratios[n - 1]);
        let close = a.max(b) <= 2.0 * a.min(b);
        let first = self.ratios[0];
        close && self.ratios.iter().all(|&r| r <= 10.0 * first)
    }
}

/// Random perturbation direction with unit RMS particle norm.
pub fn random_direction(e: &Ensemble, rng: &mut SeededRng) -> Vec<(Matrix, f64)> {
    let mut dir: Vec<(Matrix, f64)> = e
        .particles()
        .iter()
        .map(|p| (rng.normal_matrix(p.theta.rows(), p.theta.cols(), 1.0), rng.normal()))
        .collect();
    let sq: f64 = dir
        .iter()
        .map(|(m, t)| m.frobenius_norm().powi(2) + t * t)
        .sum::<f64>()
        / dir.len().max(1) as f64;
    let norm = sq.sqrt();
    if norm > 0.0 {
        for (m, t) in &mut dir {
            *m = m.scaled(1.0 / norm);
            *t /= norm;
        }
    }
    dir
}

/// Perturbs `e` along a random unit-RMS direction at each of `scales`
/// (decreasing, positive) and reports output change per unit of W₂.
pub fn stability_probe(
    e: &Ensemble,
    batch: &[Sample],
    cfg: &ModelConfig,
    scales: &[f64],
    rng: &mut SeededRng,
) -> Result<StabilityReport> {
    let dir = random_direction(e, rng);
    stability_probe_along(e, batch, cfg, scales, &dir)
}

pub fn stability_probe_along(
    e: &Ensemble,
    batch: &[Sample],
    cfg: &ModelConfig,
    scales: &[f64],
    direction: &[(Matrix, f64)],
) -> Result<StabilityReport> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if direction.len() != e.len() {
        return Err(Error::dims("stability direction", e.len(), direction.len()));
    }
    if scales.iter().any(|&s| !(s >= 0.0)) || scales.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::config("scales", "must be non-negative and decreasing"));
    }
    let base: Vec<Vector> = batch
        .iter()
        .map(|(x, _)| forward(e, x, cfg).map(|t| t.final_state().clone()))
        .collect::<Result<_>>()?;
    let mut report = StabilityReport {
        scales: Vec::new(),
        ratios: Vec::new(),
        skipped: Vec::new(),
        estimated_constant: 0.0,
    };
    for &s in scales {
        let perturbed = Ensemble::new(
            e.particles()
                .iter()
                .zip(direction)
                .map(|(p, (dm, dt))| {
                    let mut theta = p.theta.clone();
                    theta.axpy(s, dm);
                    Particle::new(p.id, theta, p.tau + s * dt)
                })
                .collect(),
        )
        .clamp_to_qr(cfg.r());
        let (w2, _) = w2_distance(e, &perturbed)?;
        if w2 == 0.0 {
            report.skipped.push(s);
            continue;
        }
        let mut worst: f64 = 0.0;
        for ((x, _), out) in batch.iter().zip(&base) {
            let moved = forward(&perturbed, x, cfg)?;
            worst = worst.max(moved.final_state().sub(out).norm());
        }
        let ratio = worst / w2;
        report.scales.push(s);
        report.ratios.push(ratio);
        report.estimated_constant = report.estimated_constant.max(ratio);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Adjoint lower bound

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjointBoundReport {
    /// `‖p^ℓ‖²_μ` for ℓ = 0..=L.
    pub layer_norms: Vec<f64>,
    pub loss: f64,
    /// `‖p^L‖²_μ`, equal to `2E`.
    pub terminal_norm: f64,
    /// `max_ℓ max_x ‖J_ℓ(x)‖_F`: Lipschitz surrogate of the velocity field.
    pub max_layer_lipschitz: f64,
    /// `Σ_ℓ −ln(1 − Δ^ℓ max_x ‖J_ℓ(x)‖_F)`, infinite if any factor reaches 1.
    pub gronwall_exponent: f64,
    /// `min_ℓ ‖p^ℓ‖²_μ ≥ e^{−2·gronwall_exponent} ‖p^L‖²_μ`
    pub verdict: bool,
}

fn per_sample_passes(
    e: &Ensemble,
    batch: &[Sample],
    cfg: &ModelConfig,
) -> Result<Vec<(Trajectory, AdjointTrajectory)>> {
    let sorted = e.sort_by_tau();
    batch
        .iter()
        .map(|(x, y)| {
            let t = forward(&sorted, x, cfg)?;
            let a = adjoint_backward(&sorted, &t, *y, cfg)?;
            Ok((t, a))
        })
        .collect()
}

/// Each layer maps `p^{ℓ+1} ↦ (I + Δ^ℓ J_ℓᵀ) p^{ℓ+1}`, which shrinks norms by
/// at most `1 − Δ^ℓ‖J_ℓ‖`. The product of those factors is the discrete
/// Gronwall bound checked here.
pub fn adjoint_bound_check(e: &Ensemble, batch: &[Sample], cfg: &ModelConfig) -> Result<AdjointBoundReport> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let sorted = e.sort_by_tau();
    let passes = per_sample_passes(&sorted, batch, cfg)?;
    let n_layers = passes[0].0.layers().len();
    let act = cfg.activation();

    let mut layer_norms = vec![0.0; n_layers + 1];
    let mut layer_lip = vec![0.0f64; n_layers];
    for (traj, adj) in &passes {
        for (acc, p) in layer_norms.iter_mut().zip(&adj.costates) {
            *acc += p.norm_squared();
        }
        for (l, layer) in traj.layers().iter().enumerate() {
            let theta = &sorted.particles()[layer.block].theta;
            let z = matvec(theta, &traj.states()[l])?;
            let mut fro = 0.0;
            for i in 0..theta.rows() {
                let s = act.derivative(z[i]);
                for v in theta.row(i) {
                    fro += (s * v).powi(2);
                }
            }
            layer_lip[l] = layer_lip[l].max(fro.sqrt());
        }
    }
    let b = batch.len() as f64;
    for v in &mut layer_norms {
        *v /= b;
    }
    let steps = passes[0].0.steps();
    let mut exponent = 0.0;
    for (lip, step) in layer_lip.iter().zip(&steps) {
        let a = step * lip;
        exponent += if a < 1.0 { -(1.0 - a).ln() } else { f64::INFINITY };
    }
    let terminal = layer_norms[n_layers];
    let min_norm = layer_norms.iter().copied().fold(f64::INFINITY, f64::min);
    // Relative slack absorbs rounding when the bound is tight (e.g. θ ≡ 0).
    let bound = (-2.0 * exponent).exp() * terminal * (1.0 - 1e-12);
    Ok(AdjointBoundReport {
        loss: terminal / 2.0,
        terminal_norm: terminal,
        max_layer_lipschitz: layer_lip.iter().copied().fold(0.0, f64::max),
        gronwall_exponent: exponent,
        verdict: min_norm >= bound,
        layer_norms,
    })
}

// ---------------------------------------------------------------------------
// Descent direction

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescentProbeConfig {
    pub n_candidates: usize,
    /// Half-width of the bump φ(t) around t*.
    pub half_width: f64,
    /// Entry std of candidate blocks is `candidate_scale / √d₂`.
    pub candidate_scale: f64,
    /// Relative fit residual above which a warning is attached.
    pub residual_warn: f64,
    pub max_iters: usize,
}

impl Default for DescentProbeConfig {
    fn default() -> Self {
        DescentProbeConfig {
            n_candidates: 256,
            half_width: 0.1,
            candidate_scale: 2.0,
            residual_warn: 0.5,
            max_iters: 5000,
        }
    }
}

/// Signed perturbation `ν − ρ = Σ_ℓ Φ_ℓ (Σ_j w_j δ_{θ̂_j} − δ_{θ_ref})` over layers.
#[derive(Clone, Debug, PartialEq)]
pub struct DescentDirection {
    pub t_star: f64,
    /// Layer whose time interval has the most mass.
    pub layer: usize,
    pub reference: Matrix,
    pub candidates: Vec<Matrix>,
    /// Simplex weights over `candidates`.
    pub weights: Vec<f64>,
    /// `Φ_ℓ = ∫_{layer ℓ} φ(t) dt`.
    pub layer_weights: Vec<f64>,
}

impl DescentDirection {
    /// The zero direction `ν = ρ`: all weight on the reference block itself.
    pub fn null(&self) -> DescentDirection {
        DescentDirection {
            candidates: vec![self.reference.clone()],
            weights: vec![1.0],
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescentReport {
    pub direction: DescentDirection,
    /// `⟨δE/δρ, ν − ρ⟩`; negative means descent.
    pub pairing: f64,
    pub loss: f64,
    /// `‖fit − g‖ / ‖g‖` over the batch at t*.
    pub fit_residual: f64,
    pub warning: Option<String>,
}

/// Cubic bump `b(u) = (1 − |u|)²(1 + 2|u|)` on `[−1, 1]`; it integrates to 1.
fn bump_cdf(u: f64) -> f64 {
    let a = u.abs().min(1.0);
    let g = a - a.powi(3) + 0.5 * a.powi(4);
    0.5 + u.signum() * g
}

/// First variation of the loss along `dir`, using the exact discrete adjoint.
pub fn descent_pairing(
    dir: &DescentDirection,
    e: &Ensemble,
    batch: &[Sample],
    cfg: &ModelConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let passes = per_sample_passes(e, batch, cfg)?;
    pairing_from_passes(dir, &passes, cfg)
}

fn pairing_from_passes(
    dir: &DescentDirection,
    passes: &[(Trajectory, AdjointTrajectory)],
    cfg: &ModelConfig,
) -> Result<f64> {
    let act = cfg.activation();
    let mut total = 0.0;
    for (l, &phi) in dir.layer_weights.iter().enumerate() {
        if phi == 0.0 {
            continue;
        }
        let mut layer_sum = 0.0;
        for (traj, adj) in passes {
            let state = &traj.states()[l];
            let p = &adj.costates[l + 1];
            let mut mix = Vector::zeros(state.dim());
            for (cand, &w) in dir.candidates.iter().zip(&dir.weights) {
                if w != 0.0 {
                    mix.axpy(w, &apply_block(cand, state, act)?);
                }
            }
            let diff = mix.sub(&apply_block(&dir.reference, state, act)?);
            layer_sum += p.dot(&diff);
        }
        total += phi * layer_sum / passes.len() as f64;
    }
    Ok(total)
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &mut [f64]) {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut shift = 0.0;
    for (k, &s) in sorted.iter().enumerate() {
        cum += s;
        let t = (cum - 1.0) / (k + 1) as f64;
        if s - t > 0.0 {
            shift = t;
        }
    }
    for x in v {
        *x = (*x - shift).max(0.0);
    }
}

/// `min_w ‖A w − t‖²` over the simplex via accelerated projected gradient.
/// `gram = AᵀA`, `rhs = Aᵀt`.
fn simplex_least_squares(gram: &[Vec<f64>], rhs: &[f64], start: usize, iters: usize) -> Vec<f64> {
    let k = rhs.len();
    let matvec_g = |w: &[f64]| -> Vec<f64> {
        gram.iter()
            .map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect()
    };
    // Largest eigenvalue of the Gram matrix by power iteration.
    let mut v = vec![1.0 / (k as f64).sqrt(); k];
    let mut lmax = 0.0;
    for _ in 0..100 {
        let gv = matvec_g(&v);
        let norm = gv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        lmax = norm;
        v = gv.iter().map(|x| x / norm).collect();
    }
    let step = if lmax > 0.0 { 1.0 / (1.01 * lmax) } else { 1.0 };

    let mut w = vec![0.0; k];
    w[start] = 1.0;
    let mut y = w.clone();
    let mut t = 1.0f64;
    for _ in 0..iters {
        let g = matvec_g(&y);
        let mut next: Vec<f64> = y
            .iter()
            .zip(g.iter().zip(rhs))
            .map(|(yi, (gi, bi))| yi - step * (gi - bi))
            .collect();
        project_simplex(&mut next);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        let delta: f64 = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).sum();
        y = next.iter().zip(&w).map(|(a, b)| a + beta * (a - b)).collect();
        w = next;
        t = t_next;
        if delta < 1e-15 {
            break;
        }
    }
    w
}

/// Builds the descent direction from sampled candidate blocks.
pub fn descent_probe(
    e: &Ensemble,
    batch: &[Sample],
    cfg: &ModelConfig,
    probe: &DescentProbeConfig,
    rng: &mut SeededRng,
) -> Result<DescentReport> {
    let d = cfg.d2();
    let std = probe.candidate_scale / (d as f64).sqrt();
    let candidates: Vec<Matrix> = (0..probe.n_candidates)
        .map(|_| {
            let m = rng.normal_matrix(d, d, std);
            let norm = m.frobenius_norm();
            if norm > cfg.r() {
                m.scaled(cfg.r() / norm)
            } else {
                m
            }
        })
        .collect();
    descent_probe_with_candidates(e, batch, cfg, probe, candidates)
}

/// Picks t* in the layer of largest step, fits simplex weights over
/// `candidates ∪ {θ_ref}` so that the mixture output approximates
/// `g = −p(·, t*) + σ(θ_ref ·)` on the batch states at t*, and spreads the
/// resulting perturbation over layers with a cubic bump around t*.
///
/// Because `θ_ref` is itself a feasible candidate, the constrained optimum
/// never pairs positively with the costate at t*.
pub fn descent_probe_with_candidates(
    e: &Ensemble,
    batch: &[Sample],
    cfg: &ModelConfig,
    probe: &DescentProbeConfig,
    candidates: Vec<Matrix>,
) -> Result<DescentReport> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if e.is_empty() {
        return Err(Error::config("ensemble", "descent probe needs at least one particle"));
    }
    if !(probe.half_width > 0.0) {
        return Err(Error::config("half_width", "must be positive"));
    }
    let sorted = e.sort_by_tau();
    let current_loss = loss(&sorted, batch, cfg)?;
    if current_loss < 1e-10 {
        return Err(Error::AlreadyAtGlobalMinimum { loss: current_loss });
    }
    let passes = per_sample_passes(&sorted, batch, cfg)?;
    let layers = passes[0].0.layers().to_vec();

    // Layer with the largest time mass; first one on ties.
    let mut star = 0;
    for (l, layer) in layers.iter().enumerate() {
        if layer.step > layers[star].step {
            star = l;
        }
    }
    let starts: Vec<f64> = layers
        .iter()
        .scan(0.0, |t, layer| {
            let s = *t;
            *t += layer.step;
            Some(s)
        })
        .collect();
    let t_star = starts[star] + 0.5 * layers[star].step;
    let h = probe.half_width.min(t_star).min(1.0 - t_star);
    let layer_weights: Vec<f64> = if h > 0.0 {
        layers
            .iter()
            .zip(&starts)
            .map(|(layer, &s)| bump_cdf((s + layer.step - t_star) / h) - bump_cdf((s - t_star) / h))
            .collect()
    } else {
        (0..layers.len()).map(|l| if l == star { 1.0 } else { 0.0 }).collect()
    };

    let reference = sorted.particles()[layers[star].block].theta.clone();
    let mut all = Vec::with_capacity(candidates.len() + 1);
    all.push(reference.clone());
    all.extend(candidates);

    // Columns of A: candidate outputs on the batch states at t*; target g.
    let act = cfg.activation();
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(batch.len() * cfg.d2()); all.len()];
    let mut target = Vec::with_capacity(batch.len() * cfg.d2());
    for (traj, adj) in &passes {
        let state = &traj.states()[star];
        for (col, cand) in columns.iter_mut().zip(&all) {
            col.extend_from_slice(apply_block(cand, state, act)?.as_slice());
        }
        let own = apply_block(&reference, state, act)?;
        let p = &adj.costates[star + 1];
        target.extend(own.iter().zip(p.iter()).map(|(o, pi)| o - pi));
    }
    let rows = target.len() as f64;
    let gram: Vec<Vec<f64>> = columns
        .iter()
        .map(|a| {
            columns
                .iter()
                .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / rows)
                .collect()
        })
        .collect();
    let rhs: Vec<f64> = columns
        .iter()
        .map(|a| a.iter().zip(&target).map(|(x, y)| x * y).sum::<f64>() / rows)
        .collect();
    let weights = simplex_least_squares(&gram, &rhs, 0, probe.max_iters);

    let mut fitted = vec![0.0; target.len()];
    for (col, &w) in columns.iter().zip(&weights) {
        for (f, c) in fitted.iter_mut().zip(col) {
            *f += w * c;
        }
    }
    let res: f64 = fitted.iter().zip(&target).map(|(f, t)| (f - t).powi(2)).sum::<f64>().sqrt();
    let tnorm: f64 = target.iter().map(|t| t * t).sum::<f64>().sqrt();
    let fit_residual = if tnorm > 0.0 { res / tnorm } else { 0.0 };

    let direction = DescentDirection {
        t_star,
        layer: star,
        reference,
        candidates: all,
        weights,
        layer_weights,
    };
    let pairing = pairing_from_passes(&direction, &passes, cfg)?;
    let warning = (fit_residual > probe.residual_warn).then(|| {
        format!(
            "relative fit residual {fit_residual:.3} exceeds {}; candidate set too small to represent the target",
            probe.residual_warn
        )
    });
    Ok(DescentReport {
        direction,
        pairing,
        loss: current_loss,
        fit_residual,
        warning,
    })
}

// ---------------------------------------------------------------------------
// Homogeneity

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomogeneityReport {
    pub lambdas: Vec<f64>,
    pub degree: f64,
    /// Largest residual of the log-log fit.
    pub max_deviation: f64,
    pub homogeneous: bool,
}

/// Residual tolerance for calling a block homogeneous.
pub const HOMOGENEITY_TOL: f64 = 1e-6;

/// Fits `log ‖σ((λθ) x)‖` against `log λ`.
pub fn homogeneity_degree(
    cfg: &ModelConfig,
    x: &Vector,
    theta: &Matrix,
    lambdas: &[f64],
) -> Result<HomogeneityReport> {
    let act = cfg.activation();
    let outputs = lambdas
        .iter()
        .map(|&l| apply_block(&theta.scaled(l), x, act))
        .collect::<Result<Vec<_>>>()?;
    homogeneity_degree_of(lambdas, |i| outputs[i].clone())
}

/// Same fit for any block, given its output at each `lambdas[i]`.
pub fn homogeneity_degree_of(
    lambdas: &[f64],
    mut output: impl FnMut(usize) -> Vector,
) -> Result<HomogeneityReport> {
    if lambdas.len() < 3 || lambdas.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::config("lambdas", "need at least 3 positive values"));
    }
    let mut logs_l = Vec::with_capacity(lambdas.len());
    let mut logs_f = Vec::with_capacity(lambdas.len());
    for (i, &l) in lambdas.iter().enumerate() {
        let norm = output(i).norm();
        if norm == 0.0 {
            return Err(Error::DegenerateHomogeneity);
        }
        logs_l.push(l.ln());
        logs_f.push(norm.ln());
    }
    let degree = fit_slope(&logs_l, &logs_f);
    let n = logs_l.len() as f64;
    let intercept = logs_f.iter().sum::<f64>() / n - degree * logs_l.iter().sum::<f64>() / n;
    let max_deviation = logs_l
        .iter()
        .zip(&logs_f)
        .map(|(x, y)| (y - intercept - degree * x).abs())
        .fold(0.0, f64::max);
    Ok(HomogeneityReport {
        lambdas: lambdas.to_vec(),
        degree,
        max_deviation,
        homogeneous: max_deviation < HOMOGENEITY_TOL,
    })
}

// ---------------------------------------------------------------------------
// Gradient check

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub n_coords: usize,
    /// Samples dropped because a pre-activation sat within the kink margin.
    pub n_excluded: usize,
}

/// Pre-activations closer than this to a ReLU kink exclude their sample.
pub const KINK_MARGIN: f64 = 1e-4;

/// Denominators of the relative error never drop below this fraction of the
/// largest gradient entry, so near-zero coordinates are judged on the scale
/// of the whole gradient rather than on cancellation noise.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Absolute lower bound on the relative-error denominator, for gradients that
/// vanish altogether.
pub const ABS_ERR_FLOOR: f64 = 1e-8;

fn near_kink(e: &Ensemble, x: &Vector, cfg: &ModelConfig) -> Result<bool> {
    let t = forward(e, x, cfg)?;
    let sorted = e.sort_by_tau();
    for (l, layer) in t.layers().iter().enumerate() {
        let z = matvec(&sorted.particles()[layer.block].theta, &t.states()[l])?;
        if z.iter().any(|v| v.abs() < KINK_MARGIN) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Central differences of [`loss`] on every coordinate of every `θ_i` and
/// `τ_i`, compared with [`gradients`].
pub fn grad_check(e: &Ensemble, batch: &[Sample], cfg: &ModelConfig, h: f64) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::config("h", format!("must lie in [1e-7, 1e-3], got {h}")));
    }
    let mut kept: Vec<Sample> = Vec::with_capacity(batch.len());
    if cfg.activation().is_smooth() {
        kept.extend_from_slice(batch);
    } else {
        for s in batch {
            if !near_kink(e, &s.0, cfg)? {
                kept.push(s.clone());
            }
        }
    }
    let n_excluded = batch.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let analytic = gradients(e, &kept, cfg)?;

    let mut numeric = Vec::new();
    let mut exact = Vec::new();
    let central = |probe: &mut Ensemble, set: &dyn Fn(&mut Particle, f64)| -> Result<f64> {
        set(&mut probe.particles_mut()[0], h);
        let up = loss(probe, &kept, cfg)?;
        set(&mut probe.particles_mut()[0], -2.0 * h);
        let down = loss(probe, &kept, cfg)?;
        set(&mut probe.particles_mut()[0], h);
        Ok((up - down) / (2.0 * h))
    };
    for i in 0..e.len() {
        // Move particle i to slot 0 of a scratch ensemble so the closure can
        // address it uniformly; sorting inside `loss` makes slots irrelevant.
        let mut order: Vec<usize> = (0..e.len()).collect();
        order.swap(0, i);
        let mut probe = e.permuted(&order);
        let (rows, cols) = e.particles()[i].theta.shape();
        for a in 0..rows {
            for b in 0..cols {
                let fd = central(&mut probe, &|p: &mut Particle, dv| p.theta[(a, b)] += dv)?;
                probe = e.permuted(&order);
                numeric.push(fd);
                exact.push(analytic.dtheta[i][(a, b)]);
            }
        }
        let fd = central(&mut probe, &|p: &mut Particle, dv| p.tau += dv)?;
        numeric.push(fd);
        exact.push(analytic.dtau[i]);
    }

    let scale = exact.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (REL_ERR_FLOOR * scale).max(ABS_ERR_FLOOR);
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (a, n) in exact.iter().zip(&numeric) {
        let diff = (a - n).abs();
        max_abs = max_abs.max(diff);
        let den = a.abs().max(n.abs()).max(floor);
        max_rel = max_rel.max(diff / den);
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        n_coords: exact.len(),
        n_excluded,
    })
}

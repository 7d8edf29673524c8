//! Particle representation of the parameter distribution.
//!
//! Each particle is one residual block `(θ, τ)`. An [`Ensemble`] of `n`
//! particles is the empirical measure over blocks; sorting by `τ` fixes the
//! order in which blocks are composed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// One residual block as a point mass.
#[derive(Clone, Debug, PartialEq)]
pub struct Particle {
    pub id: u64,
    pub theta: Matrix,
    pub tau: f64,
}

impl Particle {
    pub fn new(id: u64, theta: Matrix, tau: f64) -> Self {
        Particle { id, theta, tau }
    }
}

/// Ordered collection of particles.
///
/// `sorted` is set only by [`Ensemble::sort_by_tau`] and means the particles
/// are in nondecreasing `τ` order with ties broken by ascending id.
#[derive(Clone, Debug, Default)]
pub struct Ensemble {
    particles: Vec<Particle>,
    sorted: bool,
}

impl PartialEq for Ensemble {
    fn eq(&self, other: &Self) -> bool {
        self.particles == other.particles
    }
}

impl Ensemble {
    pub fn new(particles: Vec<Particle>) -> Self {
        Ensemble {
            particles,
            sorted: false,
        }
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    /// Mutable access clears the sorted flag.
    pub fn particles_mut(&mut self) -> &mut [Particle] {
        self.sorted = false;
        &mut self.particles
    }

    pub fn into_particles(self) -> Vec<Particle> {
        self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        self.sorted
    }

    /// Shape of the block matrices, if any particle exists.
    pub fn theta_shape(&self) -> Option<(usize, usize)> {
        self.particles.first().map(|p| p.theta.shape())
    }

    /// Indices into `particles()` listed in `(τ, id)` order.
    pub fn sort_permutation(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.particles.len()).collect();
        order.sort_by(|&a, &b| {
            let (pa, pb) = (&self.particles[a], &self.particles[b]);
            pa.tau.total_cmp(&pb.tau).then(pa.id.cmp(&pb.id))
        });
        order
    }

    /// Reorders particles so that position `k` holds `particles()[perm[k]]`.
    pub fn permuted(&self, perm: &[usize]) -> Ensemble {
        Ensemble {
            particles: perm.iter().map(|&i| self.particles[i].clone()).collect(),
            sorted: false,
        }
    }

    pub fn sort_by_tau(&self) -> Ensemble {
        let mut out = self.permuted(&self.sort_permutation());
        out.sorted = true;
        out
    }

    /// Projects every `θ` onto the Frobenius ball of radius `r` and every `τ`
    /// onto `[0, 1]`.
    pub fn clamp_to_qr(&self, r: f64) -> Ensemble {
        let mut out = self.clone();
        clamp_particles(&mut out.particles, r);
        // Clamping τ to [0,1] is monotone, so a sorted ensemble stays sorted.
        out
    }
}

/// Relative slack on the radius. A freshly rescaled block can land a few ulps
/// above `r`; without slack a second clamp would rescale it again.
pub const CLAMP_SLACK: f64 = 1e-12;

pub(crate) fn clamp_particles(particles: &mut [Particle], r: f64) {
    for p in particles {
        let norm = p.theta.frobenius_norm();
        if norm > r * (1.0 + CLAMP_SLACK) {
            p.theta = p.theta.scaled(r / norm);
        }
        p.tau = p.tau.clamp(0.0, 1.0);
    }
}

/// Ground metric on `(θ, τ)`: `d² = ‖Δθ‖²_F + (tau_scale·Δτ)²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductMetric {
    pub tau_scale: f64,
}

impl Default for ProductMetric {
    fn default() -> Self {
        ProductMetric { tau_scale: 1.0 }
    }
}

impl ProductMetric {
    pub fn squared(&self, a: &Particle, b: &Particle) -> f64 {
        let mut acc = 0.0;
        for (x, y) in a.theta.as_slice().iter().zip(b.theta.as_slice()) {
            let d = x - y;
            acc += d * d;
        }
        let dt = self.tau_scale * (a.tau - b.tau);
        acc + dt * dt
    }
}

/// Optimal pairing of two equal-size ensembles.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    /// `assignment[i]` is the particle of the second ensemble matched to particle `i`.
    pub assignment: Vec<usize>,
    /// Total squared ground cost of the matching (not divided by `n`).
    pub cost: f64,
}

/// Exact W₂ between equal-weight particle clouds under the default metric.
pub fn w2_distance(a: &Ensemble, b: &Ensemble) -> Result<(f64, TransportPlan)> {
    w2_distance_with(a, b, ProductMetric::default())
}

pub fn w2_distance_with(
    a: &Ensemble,
    b: &Ensemble,
    metric: ProductMetric,
) -> Result<(f64, TransportPlan)> {
    if a.len() != b.len() || a.is_empty() || a.theta_shape() != b.theta_shape() {
        return Err(Error::UnequalEnsembles {
            left: format!("{} particles, shape {:?}", a.len(), a.theta_shape()),
            right: format!("{} particles, shape {:?}", b.len(), b.theta_shape()),
        });
    }
    let n = a.len();
    let cost = cost_matrix(a, b, metric);
    let assignment = min_cost_assignment(&cost, n);
    let total = assignment_cost(&cost, n, &assignment);
    Ok((
        (total / n as f64).sqrt(),
        TransportPlan {
            assignment,
            cost: total,
        },
    ))
}

/// Row-major `n × n` matrix of squared ground distances.
pub fn cost_matrix(a: &Ensemble, b: &Ensemble, metric: ProductMetric) -> Vec<f64> {
    let mut cost = Vec::with_capacity(a.len() * b.len());
    for p in a.particles() {
        for q in b.particles() {
            cost.push(metric.squared(p, q));
        }
    }
    cost
}

/// Sum of `cost[i][assignment[i]]`, added in ascending order of the terms so
/// the result does not depend on which ensemble is listed first.
pub fn assignment_cost(cost: &[f64], n: usize, assignment: &[usize]) -> f64 {
    let mut terms: Vec<f64> = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .collect();
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Hungarian method with row/column potentials and shortest augmenting
/// paths, O(n³). Returns the column assigned to each row.
fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based internally; index 0 is the virtual source column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        row_of_col[0] = row;
        let mut col0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let i0 = row_of_col[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col0 = col1;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            row_of_col[col0] = row_of_col[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[row_of_col[j] - 1] = j - 1;
    }
    assignment
}

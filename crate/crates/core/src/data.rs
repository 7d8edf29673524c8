//! Synthetic teacher-student regression data and CSV ingestion.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{forward, ModelConfig, Sample};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Vector};
use crate::training::{sample_particles, TauInit};

/// Labelled samples together with the bounds they actually attain.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
    r1: f64,
    r2: f64,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        let r1 = samples.iter().map(|(x, _)| x.norm()).fold(0.0, f64::max);
        let r2 = samples.iter().map(|(_, y)| y.abs()).fold(0.0, f64::max);
        Dataset { samples, r1, r2 }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Largest `‖x‖` and `|y|` present.
    pub fn bounds(&self) -> (f64, f64) {
        (self.r1, self.r2)
    }

    /// Checks input dimension and the model's `R1`/`R2` assumptions.
    pub fn check_against(&self, model: &ModelConfig) -> Result<()> {
        let tol = 1e-12;
        for (i, (x, y)) in self.samples.iter().enumerate() {
            if x.dim() != model.d1() {
                return Err(Error::dims("dataset sample", model.d1(), x.dim()));
            }
            if x.norm() > model.r1() * (1.0 + tol) {
                return Err(Error::DataOutOfBounds {
                    index: i,
                    reason: format!("‖x‖ = {} exceeds R1 = {}", x.norm(), model.r1()),
                });
            }
            if y.abs() > model.r2() * (1.0 + tol) {
                return Err(Error::DataOutOfBounds {
                    index: i,
                    reason: format!("|y| = {} exceeds R2 = {}", y.abs(), model.r2()),
                });
            }
        }
        Ok(())
    }
}

/// Hidden model that labels the synthetic data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSpec {
    pub n_teacher: usize,
    pub seed: u64,
    /// Entry std of teacher blocks is `scale / √d₂`.
    pub scale: f64,
    /// Std of additive Gaussian label noise.
    pub noise: f64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        TeacherSpec {
            n_teacher: 16,
            seed: 1234,
            scale: 2.0,
            noise: 0.0,
        }
    }
}

/// Teacher blocks on the uniform `τ` grid, clamped to `Q_r`.
pub fn teacher_ensemble(spec: &TeacherSpec, model: &ModelConfig) -> Ensemble {
    let mut rng = SeededRng::new(spec.seed);
    sample_particles(
        spec.n_teacher,
        model.d2(),
        spec.scale,
        TauInit::UniformGrid,
        model.r(),
        &mut rng,
    )
}

/// Uniform sample from the ball of the given radius: a normalized Gaussian
/// direction scaled by `radius · U^{1/d}`.
pub fn sample_in_ball(rng: &mut SeededRng, dim: usize, radius: f64) -> Vector {
    loop {
        let g = rng.normal_vector(dim, 1.0);
        let norm = g.norm();
        if norm > 0.0 {
            let rad = radius * rng.uniform().powf(1.0 / dim as f64);
            return g.scaled(rad / norm);
        }
    }
}

/// Regression data labelled by a teacher of the same model class, so zero
/// loss is attainable when `noise == 0`.
pub fn gen_teacher_student(
    spec: &TeacherSpec,
    model: &ModelConfig,
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(Error::config("n_samples", "must be at least 1"));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::config("noise", "must be non-negative"));
    }
    let teacher = teacher_ensemble(spec, model).sort_by_tau();
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x = sample_in_ball(rng, model.d1(), model.r1());
        let traj = forward(&teacher, &x, model)?;
        let mut y = model.readout(traj.final_state());
        if spec.noise > 0.0 {
            y += spec.noise * rng.normal();
        }
        samples.push((x, y));
    }
    Ok(Dataset::new(samples))
}

/// Reads `x_1,…,x_{d1},y` rows. Lines starting with `#` are ignored.
pub fn load_csv(path: impl AsRef<Path>, d1: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let csv_err = |line: u64, reason: String| Error::Csv {
        path: path.to_owned(),
        line,
        reason,
    };

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != d1 + 1 {
            return Err(csv_err(
                line,
                format!("expected {} columns, found {}", d1 + 1, record.len()),
            ));
        }
        let mut values = Vec::with_capacity(d1 + 1);
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| csv_err(line, format!("not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(csv_err(line, format!("non-finite value {field:?}")));
            }
            values.push(v);
        }
        let y = values.pop().expect("d1 + 1 >= 1 values");
        samples.push((Vector::from_vec(values), y));
    }
    if samples.is_empty() {
        return Err(csv_err(0, "no data rows".into()));
    }
    Ok(Dataset::new(samples))
}

/// Writes the dataset with 17 significant digits, enough to round-trip f64.
pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| Error::Io {
        path: path.to_owned(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let d1 = dataset.samples.first().map_or(0, |(x, _)| x.dim());
    let header: Vec<String> = (1..=d1).map(|i| format!("x{i}")).chain(["y".into()]).collect();
    writeln!(out, "# {}", header.join(",")).map_err(io)?;
    for (x, y) in &dataset.samples {
        let mut row: Vec<String> = x.iter().map(|v| format!("{v:.16e}")).collect();
        row.push(format!("{y:.16e}"));
        writeln!(out, "{}", row.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}

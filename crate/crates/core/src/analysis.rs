//! Observables computed from samples or moments: total variance, dB
//! reduction, phase-space volume factor, record correlations, and the
//! read-out noise floor.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{ProbeParams, SpinMoments};

/// Δ²F̂ of a set of spin samples: trace of the unbiased sample covariance
/// plus the squared norm of the sample mean (distance to the origin target).
pub fn total_variance_samples(samples: &[Vector3<f64>]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let mean = samples.iter().sum::<Vector3<f64>>() / n as f64;
    let ss: f64 = samples.iter().map(|s| (s - mean).norm_squared()).sum();
    Ok(ss / (n - 1) as f64 + mean.norm_squared())
}

pub fn total_variance_moments(m: &SpinMoments) -> f64 {
    m.total_variance()
}

/// 10·log₁₀(before/after).
pub fn db_reduction(before: f64, after: f64) -> Result<f64> {
    check_positive("before", before)?;
    check_positive("after", after)?;
    Ok(10.0 * (before / after).log10())
}

/// Phase-space volume ratio (before/after)^{3/2}: the volume scales as the
/// product of three standard deviations.
pub fn volume_factor(before: f64, after: f64) -> Result<f64> {
    check_positive("before", before)?;
    check_positive("after", after)?;
    Ok((before / after).powf(1.5))
}

fn check_positive(what: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositive { what, value })
    }
}

/// Entrywise cov_ij / (σ_i σ_j) with an exact unit diagonal.
pub fn correlation_matrix(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sd: Vec<f64> = cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
    if let Some(index) = sd.iter().position(|&s| s == 0.0) {
        return Err(Error::ZeroVariance { index });
    }
    Ok(DMatrix::from_fn(cov.nrows(), cov.ncols(), |i, j| {
        if i == j {
            1.0
        } else {
            (cov[(i, j)] / (sd[i] * sd[j])).clamp(-1.0, 1.0)
        }
    }))
}

/// Apparent Δ²F̂ of pure probe shot noise over three components,
/// 3·Δ²S_y/(κ₁S_x)² (= 6/(κ₁²N_L) for Δ²S_y = N_L/2).
pub fn readout_floor(probe: &ProbeParams) -> f64 {
    let scale = probe.kappa1 * probe.sx();
    3.0 * probe.stokes_variance() / (scale * scale)
}

/// Sample mean and unbiased covariance of the rows of a data set, with
/// closed-form leave-one-out (jackknife) standard errors.
#[derive(Debug, Clone)]
pub struct SampleStats {
    pub n: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Rows centered on the full-sample mean.
    centered: DMatrix<f64>,
    /// Σ_k y_k y_kᵀ over centered rows.
    scatter: DMatrix<f64>,
}

impl SampleStats {
    /// `data` is n × d, one sample per row.
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        let n = data.nrows();
        if n < 2 {
            return Err(Error::InsufficientSamples { needed: 2, got: n });
        }
        let mean = data.row_mean().transpose();
        let mut centered = data;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let scatter = centered.transpose() * &centered;
        let cov = &scatter / (n - 1) as f64;
        Ok(Self {
            n,
            mean,
            cov,
            centered,
            scatter,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn jackknife_se(&self, mut loo: impl FnMut(usize) -> f64) -> Option<f64> {
        let n = self.n;
        if n < 3 {
            return None;
        }
        let values: Vec<f64> = (0..n).map(&mut loo).collect();
        let avg = values.iter().sum::<f64>() / n as f64;
        let ss: f64 = values.iter().map(|v| (v - avg).powi(2)).sum();
        Some(((n - 1) as f64 / n as f64 * ss).sqrt())
    }

    /// Leave-one-out covariance entry (i, j) without sample k.
    fn loo_cov(&self, k: usize, i: usize, j: usize) -> f64 {
        let n = self.n as f64;
        let y = &self.centered;
        (self.scatter[(i, j)] - n / (n - 1.0) * y[(k, i)] * y[(k, j)]) / (n - 2.0)
    }

    fn loo_mean(&self, k: usize, i: usize) -> f64 {
        self.mean[i] - self.centered[(k, i)] / (self.n as f64 - 1.0)
    }

    /// Jackknife standard errors of every covariance entry.
    pub fn cov_std_err(&self) -> Option<DMatrix<f64>> {
        if self.n < 3 {
            return None;
        }
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..=i {
                let se = self.jackknife_se(|k| self.loo_cov(k, i, j))?;
                out[(i, j)] = se;
                out[(j, i)] = se;
            }
        }
        Some(out)
    }

    /// Σ_{i∈idx} (Var_i + mean_i²) over a subset of coordinates.
    pub fn second_moment_sum(&self, idx: &[usize]) -> f64 {
        idx.iter().map(|&i| self.cov[(i, i)] + self.mean[i].powi(2)).sum()
    }

    pub fn second_moment_sum_std_err(&self, idx: &[usize]) -> Option<f64> {
        self.jackknife_se(|k| {
            idx.iter()
                .map(|&i| self.loo_cov(k, i, i) + self.loo_mean(k, i).powi(2))
                .sum()
        })
    }

    /// Standard errors of the means, σ/√n.
    pub fn mean_std_err(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| (v / self.n as f64).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Mc,
    Moments,
}

/// Aggregated observables of one schedule run.
///
/// Spin quantities refer to the readout point of the schedule (the start of
/// its trailing measurement phase). The `measured_*` quantities are built
/// from the read-out records themselves and therefore include shot noise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub engine: EngineKind,
    /// 0 for the moment engine.
    pub n_trials: usize,
    pub readout_step: usize,
    pub mean_spin: [f64; 3],
    pub component_variances: [f64; 3],
    pub total_variance: f64,
    pub total_variance_std_err: Option<f64>,
    pub input_total_variance: f64,
    pub input_total_variance_std_err: Option<f64>,
    pub db_reduction: Option<f64>,
    pub volume_factor: Option<f64>,
    pub measured_total_variance: Option<f64>,
    pub measured_total_variance_std_err: Option<f64>,
    pub floor_subtracted_variance: Option<f64>,
    pub readout_floor: f64,
    pub record_labels: Vec<String>,
    pub record_mean: Vec<f64>,
    pub record_cov: Vec<Vec<f64>>,
    pub record_cov_std_err: Option<Vec<Vec<f64>>>,
}

impl RunSummary {
    pub fn record_cov_matrix(&self) -> DMatrix<f64> {
        let d = self.record_cov.len();
        DMatrix::from_fn(d, d, |i, j| self.record_cov[i][j])
    }

    pub fn record_cov_std_err_matrix(&self) -> Option<DMatrix<f64>> {
        let se = self.record_cov_std_err.as_ref()?;
        let d = se.len();
        Some(DMatrix::from_fn(d, d, |i, j| se[i][j]))
    }

    pub(crate) fn fill_reductions(&mut self) {
        self.db_reduction = db_reduction(self.input_total_variance, self.total_variance).ok();
        self.volume_factor = volume_factor(self.input_total_variance, self.total_variance).ok();
    }
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Formats a value with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Covariance matrix as CSV: header row `label,z1,y1,...`, then one row per
/// record step, row-major, 17 significant digits.
pub fn covariance_csv(labels: &[String], cov: &DMatrix<f64>) -> String {
    let mut out = String::from("label");
    for l in labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (i, row) in cov.row_iter().enumerate() {
        out.push_str(labels.get(i).map_or("", String::as_str));
        for v in row.iter() {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

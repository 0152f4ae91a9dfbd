//! Hospital-specific weights from shared summary statistics.
//!
//! Clients share only the triple (|D_c|, E[X_c], E[T_c]) with the server —
//! this is the entire client-to-server payload besides model parameters.
//! The server fits a Gaussian to the treatment averages and a Gaussian
//! process regression of the treatment average on the covariate average,
//! then weights each hospital by the density ratio
//!   w_c = P(T' = E[T_c]) / P(T' = E[T_c] | X' = E[X_c]),
//! clamped to a configured band. A hospital whose treatment average is well
//! explained by its covariate average (an unusual case mix rather than an
//! unusual strategy) is down-weighted; one whose average deviates from what
//! its case mix predicts is up-weighted, which cancels the across-hospital
//! covariance between covariate and treatment averages.

use serde::{Deserialize, Serialize};

use crate::datagen::ClientDataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Below this spread the fits are treated as degenerate and the weights
/// fall back to 1, reducing weighted aggregation to plain FedAvg.
const DEGENERATE_STD: f64 = 1e-12;

/// Observation noise floor added to the GPR kernel diagonal.
const GPR_NOISE_VAR: f64 = 1e-4;

/// The per-client summary statistics shared with the server.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientStats {
    pub client_id: usize,
    pub n: usize,
    pub mean_x: Vec<f64>,
    pub mean_t: f64,
}

impl ClientStats {
    pub fn from_dataset(ds: &ClientDataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Config(format!("client {} has no records", ds.client_id)));
        }
        let n = ds.len();
        let mut mean_x = vec![0.0; ds.d_x()];
        for i in 0..n {
            for (m, &v) in mean_x.iter_mut().zip(ds.x.row(i)) {
                *m += v;
            }
        }
        mean_x.iter_mut().for_each(|m| *m /= n as f64);
        Ok(ClientStats {
            client_id: ds.client_id,
            n,
            mean_x,
            mean_t: ds.treatment_rate(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("client stats with n = 0".into()));
        }
        if !(0.0..=1.0).contains(&self.mean_t) {
            return Err(Error::Config(format!(
                "client {}: mean_t {} outside [0, 1]",
                self.client_id, self.mean_t
            )));
        }
        Ok(())
    }
}

/// Gaussian fitted to the treatment averages.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mu0: f64,
    pub sigma0: f64,
}

/// Size-weighted mean and variance of the client treatment averages:
/// mu0 = (1/|D|) sum |D_c| E[T_c], sigma0^2 = (1/|D|) sum |D_c| (E[T_c] - mu0)^2.
pub fn fit_t_prior(stats: &[ClientStats]) -> Result<GaussianFit> {
    if stats.is_empty() {
        return Err(Error::Config("fit_t_prior: no clients".into()));
    }
    for s in stats {
        s.validate()?;
    }
    let total: f64 = stats.iter().map(|s| s.n as f64).sum();
    let mu0 = stats.iter().map(|s| s.n as f64 * s.mean_t).sum::<f64>() / total;
    let var = stats
        .iter()
        .map(|s| s.n as f64 * (s.mean_t - mu0) * (s.mean_t - mu0))
        .sum::<f64>()
        / total;
    Ok(GaussianFit {
        mu0,
        sigma0: var.sqrt(),
    })
}

pub fn normal_density(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Density of the fitted treatment-average Gaussian at `t`. A zero-spread
/// fit is degenerate; the caller substitutes unit weights.
pub fn gaussian_pdf(fit: &GaussianFit, t: f64) -> Result<f64> {
    if fit.sigma0 <= DEGENERATE_STD {
        return Err(Error::Degenerate(format!(
            "treatment-average spread {:.3e} is zero",
            fit.sigma0
        )));
    }
    Ok(normal_density(t, fit.mu0, fit.sigma0))
}

/// GPR posterior machinery over (E[X_c] -> E[T_c]) pairs: RBF kernel with
/// median-heuristic lengthscale, signal variance set to the target variance,
/// targets centered on their mean.
#[derive(Debug, Clone)]
pub struct GprModel {
    train_inputs: Vec<Vec<f64>>,
    centered_targets: Vec<f64>,
    prior_mean: f64,
    lengthscale: f64,
    signal_var: f64,
    noise_var: f64,
    /// Cholesky factor of K + noise I.
    chol: Matrix,
    /// (K + noise I)^{-1} (y - mean).
    alpha: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rbf(a: &[f64], b: &[f64], lengthscale: f64, signal_var: f64) -> f64 {
    signal_var * (-0.5 * sq_dist(a, b) / (lengthscale * lengthscale)).exp()
}

/// Median of the pairwise input distances; 1 when all points coincide.
fn median_lengthscale(inputs: &[Vec<f64>]) -> f64 {
    let mut dists = Vec::new();
    for i in 0..inputs.len() {
        for j in (i + 1)..inputs.len() {
            dists.push(sq_dist(&inputs[i], &inputs[j]).sqrt());
        }
    }
    dists.retain(|d| *d > 0.0);
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    }
}

pub fn fit_gpr(stats: &[ClientStats]) -> Result<GprModel> {
    if stats.len() < 2 {
        return Err(Error::Degenerate(format!(
            "GPR needs at least 2 clients, got {}",
            stats.len()
        )));
    }
    let inputs: Vec<Vec<f64>> = stats.iter().map(|s| s.mean_x.clone()).collect();
    let targets: Vec<f64> = stats.iter().map(|s| s.mean_t).collect();
    let n = inputs.len();
    let prior_mean = targets.iter().sum::<f64>() / n as f64;
    let signal_var = targets
        .iter()
        .map(|t| (t - prior_mean) * (t - prior_mean))
        .sum::<f64>()
        / n as f64;
    if signal_var <= DEGENERATE_STD * DEGENERATE_STD {
        return Err(Error::Degenerate("GPR targets have zero variance".into()));
    }
    let lengthscale = median_lengthscale(&inputs);
    fit_gpr_with(inputs, targets, lengthscale, signal_var, GPR_NOISE_VAR)
}

/// GPR fit with explicit hyperparameters. Adds jitter to the diagonal if the
/// Gram matrix is numerically singular, and fails hard if that never helps.
pub fn fit_gpr_with(
    train_inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    lengthscale: f64,
    signal_var: f64,
    noise_var: f64,
) -> Result<GprModel> {
    let n = train_inputs.len();
    if targets.len() != n || n == 0 {
        return Err(Error::Shape("GPR inputs and targets must align".into()));
    }
    if !(lengthscale > 0.0 && signal_var > 0.0 && noise_var >= 0.0) {
        return Err(Error::Config("GPR hyperparameters must be positive".into()));
    }
    let prior_mean = targets.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = targets.iter().map(|t| t - prior_mean).collect();
    let mut gram = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            gram.set(i, j, rbf(&train_inputs[i], &train_inputs[j], lengthscale, signal_var));
        }
    }
    let mut chol = None;
    for jitter_scale in [0.0, 1e-10, 1e-8, 1e-6, 1e-4] {
        let mut k = gram.clone();
        let bump = noise_var + jitter_scale * signal_var;
        for i in 0..n {
            k.set(i, i, k.get(i, i) + bump);
        }
        if let Ok(l) = k.cholesky() {
            chol = Some(l);
            break;
        }
    }
    let chol = chol.ok_or_else(|| {
        Error::Linalg("GPR Gram matrix stayed singular through the jitter ladder".into())
    })?;
    let alpha = chol.cholesky_solve(&centered)?;
    Ok(GprModel {
        train_inputs,
        centered_targets: centered,
        prior_mean,
        lengthscale,
        signal_var,
        noise_var,
        chol,
        alpha,
    })
}

impl GprModel {
    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn signal_var(&self) -> f64 {
        self.signal_var
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn n_train(&self) -> usize {
        self.centered_targets.len()
    }
}

/// Standard GP predictive mean and std of the observation at `x`:
/// mu = m + k*^T (K + noise I)^{-1} (y - m),
/// sigma^2 = signal + noise - k*^T (K + noise I)^{-1} k*.
pub fn gpr_posterior(model: &GprModel, x: &[f64]) -> Result<(f64, f64)> {
    let k_star: Vec<f64> = model
        .train_inputs
        .iter()
        .map(|xi| rbf(xi, x, model.lengthscale, model.signal_var))
        .collect();
    let mu = model.prior_mean
        + k_star
            .iter()
            .zip(&model.alpha)
            .map(|(k, a)| k * a)
            .sum::<f64>();
    let v = model.chol.cholesky_solve(&k_star)?;
    let explained: f64 = k_star.iter().zip(&v).map(|(k, s)| k * s).sum();
    let var = (model.signal_var + model.noise_var - explained).max(0.0);
    Ok((mu, var.sqrt()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HospitalWeightConfig {
    pub clamp_min: f64,
    pub clamp_max: f64,
}

impl Default for HospitalWeightConfig {
    fn default() -> Self {
        HospitalWeightConfig {
            clamp_min: 0.1,
            clamp_max: 10.0,
        }
    }
}

/// One positive weight per client, aligned with the stats order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HospitalWeights {
    pub client_ids: Vec<usize>,
    pub w: Vec<f64>,
    /// True when the degenerate fallback produced unit weights.
    pub degenerate: bool,
}

impl HospitalWeights {
    pub fn unit(stats: &[ClientStats]) -> Self {
        HospitalWeights {
            client_ids: stats.iter().map(|s| s.client_id).collect(),
            w: vec![1.0; stats.len()],
            degenerate: false,
        }
    }
}

/// The density-ratio weights from fitted prior and GPR, clamped to the
/// configured band. Degenerate inputs (a single client, zero spread of the
/// treatment averages, collapsed posteriors) yield unit weights, reducing
/// weighted aggregation to plain FedAvg.
pub fn compute_hospital_weights(
    stats: &[ClientStats],
    cfg: &HospitalWeightConfig,
) -> Result<HospitalWeights> {
    if stats.is_empty() {
        return Err(Error::Config("compute_hospital_weights: no clients".into()));
    }
    if !(cfg.clamp_min > 0.0 && cfg.clamp_max >= cfg.clamp_min) {
        return Err(Error::Config("hospital weight clamp band is invalid".into()));
    }
    if stats.len() == 1 {
        return Ok(HospitalWeights {
            client_ids: vec![stats[0].client_id],
            w: vec![1.0],
            degenerate: true,
        });
    }
    let fit = fit_t_prior(stats)?;
    if fit.sigma0 <= DEGENERATE_STD {
        let mut out = HospitalWeights::unit(stats);
        out.degenerate = true;
        return Ok(out);
    }
    let gpr = match fit_gpr(stats) {
        Ok(g) => g,
        Err(Error::Degenerate(_)) => {
            let mut out = HospitalWeights::unit(stats);
            out.degenerate = true;
            return Ok(out);
        }
        Err(e) => return Err(e),
    };
    let mut w = Vec::with_capacity(stats.len());
    for s in stats {
        let numerator = gaussian_pdf(&fit, s.mean_t)?;
        let (mu_c, sigma_c) = gpr_posterior(&gpr, &s.mean_x)?;
        let wc = if sigma_c <= DEGENERATE_STD {
            1.0
        } else {
            let denominator = normal_density(s.mean_t, mu_c, sigma_c);
            if denominator > 0.0 && denominator.is_finite() {
                (numerator / denominator).clamp(cfg.clamp_min, cfg.clamp_max)
            } else {
                1.0
            }
        };
        w.push(wc);
    }
    Ok(HospitalWeights {
        client_ids: stats.iter().map(|s| s.client_id).collect(),
        w,
        degenerate: false,
    })
}

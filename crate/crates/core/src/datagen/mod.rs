//! Synthetic data generation, CSV ingestion, and fold splitting.
//!
//! The generator follows a latent-category design: each record draws a
//! category `z`, covariates are Bernoulli fields conditioned on `z`,
//! treatment assignment is Bernoulli with a per-client strategy shift added
//! to its logit, and the two potential outcomes are Gaussians around
//! softplus-linked means that also carry the per-client shift. Since the
//! category is the only driver of both treatment and outcome, the finite
//! `(z, t)` support can be enumerated exactly, which is what the
//! decorrelation oracles build on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softplus, Matrix, Rng};

mod csv;
mod folds;

pub use csv::{load_csv, write_csv};
pub use folds::{
    apply_rotation, rotation_indices, rotation_roles, split_folds, FoldAssignment, FoldSplit,
};

/// Stream tag for per-client generation streams.
pub const STREAM_DATAGEN: u64 = 0x11;
/// Stream tag for the coefficient draw.
pub const STREAM_DRAW: u64 = 0x12;

/// The category probabilities as printed in the reference design; they sum
/// to 1.08 and are L1-normalized before use.
pub const RHO_RAW: [f64; 5] = [0.11, 0.22, 0.35, 0.25, 0.15];

/// Distributional settings from which a concrete [`SyntheticConfig`] is
/// drawn. One draw per replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticOptions {
    pub n_clients: usize,
    pub n_per_client: usize,
    pub d_x: usize,
    pub n_categories: usize,
    /// Std of the per-client strategy shift applied to treatment and outcome
    /// logits (the `delta` draw).
    pub strategy_scale: f64,
    /// Coupling of the per-client category mix to the strategy shift: the
    /// category logits are tilted by `case_mix_scale * delta_c`, so clients
    /// that treat a category more also see it more often. Zero gives every
    /// client the same case mix; nonzero makes hospital covariate averages
    /// co-vary with treatment rates, which is what the hospital-level weight
    /// corrects for.
    pub case_mix_scale: f64,
    pub sigma0: f64,
    pub sigma1: f64,
    pub seed: u64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            n_clients: 8,
            n_per_client: 1000,
            d_x: 30,
            n_categories: 5,
            strategy_scale: 1.0,
            case_mix_scale: 0.5,
            sigma0: 1.0,
            sigma1: 1.0,
            seed: 0,
        }
    }
}

/// Concrete ground-truth coefficients of one synthetic replication. This is
/// exactly what the generator writes to the truth sidecar, so a replication
/// can be re-created or analytically interrogated later.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Pooled category probabilities, normalized to sum 1.
    pub rho: Vec<f64>,
    /// Per-client category probabilities (case mix), `n_clients x K`.
    pub rho_c: Vec<Vec<f64>>,
    /// Covariate intercepts, one per feature.
    pub a0: Vec<f64>,
    /// Covariate category coefficients, `d_x x K`.
    pub a1: Matrix,
    /// Treatment intercept.
    pub b0: f64,
    /// Treatment category coefficients.
    pub b1: Vec<f64>,
    /// Control-outcome intercept and category coefficients.
    pub c0: f64,
    pub c1: Vec<f64>,
    /// Treated-outcome intercept and category coefficients.
    pub d0: f64,
    pub d1: Vec<f64>,
    pub sigma0: f64,
    pub sigma1: f64,
    /// Per-client strategy shift, `n_clients x K`, added to the treatment
    /// and both outcome logits.
    pub delta: Vec<Vec<f64>>,
    pub d_x: usize,
    pub n_per_client: usize,
    pub n_clients: usize,
    pub seed: u64,
}

fn normalized_rho(k: usize) -> Vec<f64> {
    let raw: Vec<f64> = RHO_RAW.iter().copied().cycle().take(k).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|p| p / sum).collect()
}

impl SyntheticConfig {
    /// Draws all ground-truth coefficients. Intercept pairs (c0, d0) are the
    /// published constants (0.85, 5.2); category coefficients are i.i.d.
    /// N(0, 2); the strategy shift is N(0, strategy_scale^2) per client and
    /// category; the case mix perturbs category logits by
    /// N(0, case_mix_scale^2).
    pub fn draw(opts: &SyntheticOptions) -> Result<Self> {
        let k = opts.n_categories;
        if k == 0 || opts.d_x == 0 {
            return Err(Error::Config("d_x and n_categories must be >= 1".into()));
        }
        let mut rng = Rng::with_stream(opts.seed, &[STREAM_DRAW]);
        let sd = 2.0f64.sqrt();
        let rho = normalized_rho(k);
        let a0: Vec<f64> = (0..opts.d_x).map(|_| sd * rng.normal()).collect();
        let mut a1 = Matrix::zeros(opts.d_x, k);
        for v in a1.data_mut() {
            *v = sd * rng.normal();
        }
        let b0 = sd * rng.normal();
        let b1: Vec<f64> = (0..k).map(|_| sd * rng.normal()).collect();
        let c1: Vec<f64> = (0..k).map(|_| sd * rng.normal()).collect();
        let d1: Vec<f64> = (0..k).map(|_| sd * rng.normal()).collect();
        let delta: Vec<Vec<f64>> = (0..opts.n_clients)
            .map(|_| (0..k).map(|_| opts.strategy_scale * rng.normal()).collect())
            .collect();
        let rho_c: Vec<Vec<f64>> = delta
            .iter()
            .map(|dc| {
                if opts.case_mix_scale == 0.0 {
                    rho.clone()
                } else {
                    let logits: Vec<f64> = rho
                        .iter()
                        .zip(dc)
                        .map(|(p, d)| p.ln() + opts.case_mix_scale * d)
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let s: f64 = exps.iter().sum();
                    exps.iter().map(|e| e / s).collect()
                }
            })
            .collect();
        let cfg = SyntheticConfig {
            rho,
            rho_c,
            a0,
            a1,
            b0,
            b1,
            c0: 0.85,
            c1,
            d0: 5.2,
            d1,
            sigma0: opts.sigma0,
            sigma1: opts.sigma1,
            delta,
            d_x: opts.d_x,
            n_per_client: opts.n_per_client,
            n_clients: opts.n_clients,
            seed: opts.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_categories(&self) -> usize {
        self.rho.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.rho.len();
        if k == 0 || self.d_x == 0 {
            return Err(Error::Config("d_x and category count must be >= 1".into()));
        }
        let sum: f64 = self.rho.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.rho.iter().any(|p| *p < 0.0) {
            return Err(Error::Config(format!(
                "rho must be a normalized probability vector, sums to {sum}"
            )));
        }
        if self.rho_c.len() != self.n_clients || self.delta.len() != self.n_clients {
            return Err(Error::Config(
                "rho_c and delta must have one entry per client".into(),
            ));
        }
        for probs in &self.rho_c {
            let s: f64 = probs.iter().sum();
            if probs.len() != k || (s - 1.0).abs() > 1e-9 || probs.iter().any(|p| *p < 0.0) {
                return Err(Error::Config("rho_c entries must be normalized".into()));
            }
        }
        if self.a0.len() != self.d_x
            || self.a1.rows() != self.d_x
            || self.a1.cols() != k
            || self.b1.len() != k
            || self.c1.len() != k
            || self.d1.len() != k
            || self.delta.iter().any(|d| d.len() != k)
        {
            return Err(Error::Config("coefficient shapes are inconsistent".into()));
        }
        if !(self.sigma0 >= 0.0 && self.sigma1 >= 0.0)
            || !self.sigma0.is_finite()
            || !self.sigma1.is_finite()
        {
            return Err(Error::Config("sigma0 and sigma1 must be finite and >= 0".into()));
        }
        if self.n_clients == 0 || self.n_per_client == 0 {
            return Err(Error::Config("n_clients and n_per_client must be >= 1".into()));
        }
        Ok(())
    }

    /// P(x_j = 1 | z = k), the conditional covariate mean.
    pub fn covariate_mean(&self, feature: usize, category: usize) -> f64 {
        sigmoid(self.a0[feature] + self.a1.get(feature, category))
    }

    /// Oracle propensity P(T=1 | z = category) at a client.
    pub fn propensity_for_category(&self, client_id: usize, category: usize) -> f64 {
        sigmoid(self.b0 + self.b1[category] + self.delta[client_id][category])
    }

    /// Noise-free outcome means for a category at a client: (m0, m1).
    pub fn outcome_means(&self, client_id: usize, category: usize) -> (f64, f64) {
        let shift = self.delta[client_id][category];
        (
            softplus(self.c0 + self.c1[category] + shift),
            softplus(self.d0 + self.d1[category] + shift),
        )
    }
}

/// One hospital's records. `y0`/`y1` are the potential outcomes, retained
/// only for synthetic data where the ground truth is known.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: usize,
    pub x: Matrix,
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub y0: Option<Vec<f64>>,
    pub y1: Option<Vec<f64>>,
}

impl ClientDataset {
    pub fn new(
        client_id: usize,
        x: Matrix,
        t: Vec<f64>,
        y: Vec<f64>,
        y0: Option<Vec<f64>>,
        y1: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = x.rows();
        if t.len() != n || y.len() != n {
            return Err(Error::Shape(format!(
                "client {client_id}: x has {n} rows but t has {} and y has {}",
                t.len(),
                y.len()
            )));
        }
        if y0.is_some() != y1.is_some() {
            return Err(Error::Contract(format!(
                "client {client_id}: y0 and y1 must both be present or both absent"
            )));
        }
        if let (Some(y0), Some(y1)) = (&y0, &y1) {
            if y0.len() != n || y1.len() != n {
                return Err(Error::Shape(format!(
                    "client {client_id}: potential outcome length mismatch"
                )));
            }
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("client {client_id}: covariates")));
        }
        for (i, &v) in t.iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::Contract(format!(
                    "client {client_id}: t[{i}] = {v} is not binary"
                )));
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("client {client_id}: outcomes")));
        }
        // consistency: the observed outcome equals the potential outcome of
        // the received treatment
        if let (Some(y0), Some(y1)) = (&y0, &y1) {
            for i in 0..n {
                let sel = if t[i] == 1.0 { y1[i] } else { y0[i] };
                let tol = 1e-9 * y[i].abs().max(1.0);
                if (y[i] - sel).abs() > tol {
                    return Err(Error::Contract(format!(
                        "client {client_id}: record {i} violates consistency (y={} vs y({})={sel})",
                        y[i], t[i]
                    )));
                }
            }
        }
        Ok(ClientDataset {
            client_id,
            x,
            t,
            y,
            y0,
            y1,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn d_x(&self) -> usize {
        self.x.cols()
    }

    pub fn treatment_rate(&self) -> f64 {
        if self.t.is_empty() {
            0.0
        } else {
            self.t.iter().sum::<f64>() / self.t.len() as f64
        }
    }

    pub fn has_both_classes(&self) -> bool {
        let rate = self.treatment_rate();
        rate > 0.0 && rate < 1.0
    }

    /// True per-record ITE, available when potential outcomes are retained.
    pub fn true_ite(&self) -> Option<Vec<f64>> {
        match (&self.y0, &self.y1) {
            (Some(y0), Some(y1)) => Some(y0.iter().zip(y1).map(|(a, b)| b - a).collect()),
            _ => None,
        }
    }

    /// Row subset in the given index order.
    pub fn subset(&self, indices: &[usize]) -> ClientDataset {
        let mut x = Matrix::zeros(indices.len(), self.x.cols());
        for (r, &i) in indices.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.x.row(i));
        }
        ClientDataset {
            client_id: self.client_id,
            x,
            t: indices.iter().map(|&i| self.t[i]).collect(),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            y0: self
                .y0
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i]).collect()),
            y1: self
                .y1
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Generates all clients, also returning each record's latent category.
/// Per-client draws come from independent streams of (seed, client_id), so
/// generation order cannot change the data.
pub fn generate_with_latents(cfg: &SyntheticConfig) -> Result<Vec<(ClientDataset, Vec<usize>)>> {
    cfg.validate()?;
    (0..cfg.n_clients)
        .map(|c| {
            let mut rng = Rng::with_stream(cfg.seed, &[STREAM_DATAGEN, c as u64]);
            let n = cfg.n_per_client;
            let mut x = Matrix::zeros(n, cfg.d_x);
            let mut t = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            let mut y0 = Vec::with_capacity(n);
            let mut y1 = Vec::with_capacity(n);
            let mut zs = Vec::with_capacity(n);
            for i in 0..n {
                let z = rng.categorical(&cfg.rho_c[c]);
                zs.push(z);
                for j in 0..cfg.d_x {
                    let p = cfg.covariate_mean(j, z);
                    x.set(i, j, if rng.bernoulli(p) { 1.0 } else { 0.0 });
                }
                let ti = rng.bernoulli(cfg.propensity_for_category(c, z));
                let (m0, m1) = cfg.outcome_means(c, z);
                let v0 = m0 + cfg.sigma0 * rng.normal();
                let v1 = m1 + cfg.sigma1 * rng.normal();
                t.push(if ti { 1.0 } else { 0.0 });
                y.push(if ti { v1 } else { v0 });
                y0.push(v0);
                y1.push(v1);
            }
            let ds = ClientDataset::new(c, x, t, y, Some(y0), Some(y1))?;
            Ok((ds, zs))
        })
        .collect()
}

/// Generates all clients per the drawn configuration.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<ClientDataset>> {
    Ok(generate_with_latents(cfg)?
        .into_iter()
        .map(|(ds, _)| ds)
        .collect())
}

/// Oracle propensity for a one-hot encoded category at a client, used by
/// the decorrelation tests.
pub fn true_propensity(cfg: &SyntheticConfig, client_id: usize, z: &[f64]) -> Result<f64> {
    if client_id >= cfg.n_clients {
        return Err(Error::Config(format!("client {client_id} out of range")));
    }
    if z.len() != cfg.n_categories() {
        return Err(Error::Shape(format!(
            "one-hot category vector has {} entries, expected {}",
            z.len(),
            cfg.n_categories()
        )));
    }
    let mut logit = cfg.b0;
    for (k, &zk) in z.iter().enumerate() {
        logit += zk * (cfg.b1[k] + cfg.delta[client_id][k]);
    }
    Ok(sigmoid(logit))
}

/// Exact view of a client's `(z, t)` support: one cell per category and
/// treatment arm, with its probability mass, the conditional covariate mean
/// as the feature row, and the oracle propensity.
#[derive(Debug, Clone)]
pub struct EnumeratedClient {
    pub client_id: usize,
    /// `2K x d_x`; row per (category, arm) cell.
    pub features: Matrix,
    pub t: Vec<f64>,
    /// Cell masses, summing to 1.
    pub mass: Vec<f64>,
    /// Oracle propensity of the cell's category.
    pub propensity: Vec<f64>,
    /// Exact E[X_c].
    pub mean_x: Vec<f64>,
    /// Exact E[T_c].
    pub mean_t: f64,
}

pub fn enumerate_client(cfg: &SyntheticConfig, client_id: usize) -> Result<EnumeratedClient> {
    cfg.validate()?;
    if client_id >= cfg.n_clients {
        return Err(Error::Config(format!("client {client_id} out of range")));
    }
    let k = cfg.n_categories();
    let mut features = Matrix::zeros(2 * k, cfg.d_x);
    let mut t = Vec::with_capacity(2 * k);
    let mut mass = Vec::with_capacity(2 * k);
    let mut propensity = Vec::with_capacity(2 * k);
    let mut mean_x = vec![0.0; cfg.d_x];
    let mut mean_t = 0.0;
    for cat in 0..k {
        let pz = cfg.rho_c[client_id][cat];
        let p = cfg.propensity_for_category(client_id, cat);
        let ex: Vec<f64> = (0..cfg.d_x).map(|j| cfg.covariate_mean(j, cat)).collect();
        for (arm, arm_mass) in [(0.0, pz * (1.0 - p)), (1.0, pz * p)] {
            let row = t.len();
            features.row_mut(row).copy_from_slice(&ex);
            t.push(arm);
            mass.push(arm_mass);
            propensity.push(p);
        }
        for (m, e) in mean_x.iter_mut().zip(&ex) {
            *m += pz * e;
        }
        mean_t += pz * p;
    }
    Ok(EnumeratedClient {
        client_id,
        features,
        t,
        mass,
        propensity,
        mean_x,
        mean_t,
    })
}

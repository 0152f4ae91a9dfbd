//! Propensity model training and patient-specific weight computation.
//!
//! The treatment model is shared across clients while each client keeps a
//! private strategy scalar `h_c` added to the output-layer pre-activation.
//! Training alternates coordinate-descent style: each round the client first
//! refits `h_c` against the broadcast parameters, then trains the shared
//! parameters with `h_c` frozen. The server aggregates shared parameters by
//! data size; `h_c` never leaves the client.
//!
//! The resulting weights are stabilized inverse-probability weights,
//!   w_i = E[T_c] 1[t_i=1] / p_i + (1 - E[T_c]) 1[t_i=0] / (1 - p_i),
//! with the client's own treatment rate in the numerator and the clamped
//! model propensity in the denominator. Under the client's true propensity
//! these weights zero the within-client covariance between covariates and
//! treatment and sum to the client's record count.

use serde::{Deserialize, Serialize};

use crate::datagen::ClientDataset;
use crate::error::{Error, Result};
use crate::federation::{
    batch_order, run_rounds, BestRound, FederationConfig, FederationRun, LocalTrainer, RoundLog,
    WeightMode,
};
use crate::numerics::{
    bce_loss, mlp_backward_logit_into, mlp_forward, sgd_step, sigmoid, stream_seed, MlpParams,
    OutputKind, Rng,
};

/// Stream tags for propensity-stage randomness.
pub const STREAM_PROP_INIT: u64 = 0x31;
pub const STREAM_PROP_BATCH: u64 = 0x32;

/// Renormalization applied to estimated weights. Under the true propensity
/// every variant is a no-op (the identities below already hold); on
/// estimated propensities they bound the damage of a miscalibrated model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNormalization {
    /// Raw stabilized weights.
    None,
    /// Rescale each client's weights to sum to |D_c| (the weight-sum
    /// identity).
    ClientSum,
    /// Rescale each arm within a client so the treated/control masses equal
    /// |D_c| E[T_c] and |D_c| (1 - E[T_c]).
    ArmMasses,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PropensityConfig {
    pub hidden: usize,
    /// Whether the strategy scalar is learned; disabled for the ablations
    /// that drop the hospital variable.
    pub use_h: bool,
    /// Scalar-gradient epochs for the h_c refit each round.
    pub hc_epochs: usize,
    pub hc_lr: f64,
    /// |h_c| beyond this is clipped (divergence guard).
    pub hc_clip: f64,
    /// Propensities are clamped to [eps_clip, 1 - eps_clip] before weights.
    pub eps_clip: f64,
    pub normalization: WeightNormalization,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        PropensityConfig {
            hidden: 128,
            use_h: true,
            hc_epochs: 5,
            hc_lr: 0.1,
            hc_clip: 50.0,
            eps_clip: 0.01,
            normalization: WeightNormalization::ClientSum,
        }
    }
}

impl PropensityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden must be >= 1".into()));
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 0.5) {
            return Err(Error::Config("eps_clip must lie in (0, 0.5)".into()));
        }
        if !(self.hc_clip > 0.0) {
            return Err(Error::Config("hc_clip must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-client propensity state as persisted to the run directory. The
/// strategy scalar is client-private, so callers write one file per client.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityClientState {
    pub client_id: usize,
    pub h_c: f64,
    pub theta: MlpParams,
}

/// Patient-specific weights of one client, aligned with its record order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientWeights {
    pub client_id: usize,
    pub w: Vec<f64>,
    /// True when the unit-weight fallback was applied because the client has
    /// a single treatment class.
    pub unit_fallback: bool,
}

/// Model propensity for one record.
pub fn predict_propensity(theta: &MlpParams, h_c: f64, x: &[f64]) -> Result<f64> {
    Ok(mlp_forward(theta, x, h_c, OutputKind::Sigmoid)?.0)
}

/// The stabilized inverse-probability weight for one record, given the
/// marginal treatment rate and the (already clamped) propensity.
pub fn stabilized_weight(marginal: f64, treated: bool, propensity: f64) -> f64 {
    if treated {
        marginal / propensity
    } else {
        (1.0 - marginal) / (1.0 - propensity)
    }
}

/// Refits the strategy scalar against frozen shared parameters by gradient
/// descent on the mean BCE. The shared forward pass is hoisted out of the
/// loop: with theta frozen, only `sigmoid(base_i + h)` changes per step.
pub fn fit_hc(
    theta: &MlpParams,
    data: &ClientDataset,
    h_init: f64,
    epochs: usize,
    lr: f64,
    clip: f64,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(h_init);
    }
    let base: Vec<f64> = (0..data.len())
        .map(|i| {
            mlp_forward(theta, data.x.row(i), 0.0, OutputKind::Linear).map(|(logit, _)| logit)
        })
        .collect::<Result<_>>()?;
    let n = data.len() as f64;
    let mut h = h_init;
    for _ in 0..epochs {
        let grad: f64 = base
            .iter()
            .zip(&data.t)
            .map(|(&b, &t)| sigmoid(b + h) - t)
            .sum::<f64>()
            / n;
        h -= lr * grad;
        if h.abs() > clip {
            h = h.clamp(-clip, clip);
        }
    }
    Ok(h)
}

/// One mini-batch SGD epoch on the BCE of `sigmoid(f(x) + h)` against `t`,
/// updating `theta` in place. Returns the mean per-record loss seen during
/// the epoch.
fn sgd_epoch_bce(
    theta: &mut MlpParams,
    data: &ClientDataset,
    h: f64,
    batch_size: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let order = batch_order(data.len(), rng);
    let mut loss_sum = 0.0;
    for chunk in order.chunks(batch_size) {
        let mut grad = MlpParams::zeros(theta.in_dim(), theta.hidden_dim());
        let scale = 1.0 / chunk.len() as f64;
        for &i in chunk {
            let (p, cache) = mlp_forward(theta, data.x.row(i), h, OutputKind::Sigmoid)?;
            loss_sum += bce_loss(p, data.t[i]);
            mlp_backward_logit_into(theta, &cache, (p - data.t[i]) * scale, &mut grad)?;
        }
        sgd_step(theta, &grad, lr)?;
    }
    Ok(loss_sum / data.len() as f64)
}

fn mean_bce(theta: &MlpParams, data: &ClientDataset, h: f64) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for i in 0..data.len() {
        let p = predict_propensity(theta, h, data.x.row(i))?;
        sum += bce_loss(p, data.t[i]);
    }
    Ok(sum / data.len() as f64)
}

/// Client-side trainer for the propensity stage.
pub struct PropensityTrainer {
    client_id: usize,
    train: ClientDataset,
    val: Option<ClientDataset>,
    cfg: PropensityConfig,
    h: f64,
    rng: Rng,
    single_class: bool,
}

impl PropensityTrainer {
    pub fn new(
        train: ClientDataset,
        val: Option<ClientDataset>,
        cfg: PropensityConfig,
        stream: Rng,
    ) -> Self {
        let single_class = !train.has_both_classes();
        PropensityTrainer {
            client_id: train.client_id,
            single_class,
            train,
            val,
            cfg,
            h: 0.0,
            rng: stream,
        }
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn single_class(&self) -> bool {
        self.single_class
    }
}

impl LocalTrainer for PropensityTrainer {
    fn client_id(&self) -> usize {
        self.client_id
    }

    fn n_records(&self) -> usize {
        self.train.len()
    }

    fn train_round(&mut self, init: &MlpParams, cfg: &FederationConfig) -> Result<(MlpParams, f64)> {
        // coordinate descent: refit h against the broadcast parameters, then
        // train the shared parameters with h frozen
        if self.cfg.use_h && !self.single_class {
            self.h = fit_hc(
                init,
                &self.train,
                self.h,
                self.cfg.hc_epochs,
                self.cfg.hc_lr,
                self.cfg.hc_clip,
            )?;
        }
        let mut theta = init.clone();
        let mut loss = mean_bce(&theta, &self.train, self.h)?;
        for _ in 0..cfg.local_epochs {
            loss = sgd_epoch_bce(
                &mut theta,
                &self.train,
                self.h,
                cfg.batch_size,
                cfg.learning_rate,
                &mut self.rng,
            )?;
        }
        Ok((theta, loss))
    }

    fn validation_loss(&self, params: &MlpParams) -> Option<f64> {
        self.val
            .as_ref()
            .filter(|v| !v.is_empty())
            .and_then(|v| mean_bce(params, v, self.h).ok())
    }
}

/// Outcome of the federated propensity stage.
pub struct PropensityOutcome {
    /// Round-R aggregate.
    pub theta: MlpParams,
    /// Best aggregate by validation loss, when validation data exists.
    pub best: Option<BestRound>,
    /// Per-client strategy scalars, in client order.
    pub h: Vec<f64>,
    /// Clients with a single treatment class (h update skipped; weights will
    /// fall back to 1).
    pub single_class_clients: Vec<usize>,
    pub logs: Vec<RoundLog>,
}

impl PropensityOutcome {
    /// Parameters selected for downstream use: the best-validation round if
    /// tracked, the final round otherwise.
    pub fn selected_theta(&self) -> &MlpParams {
        self.best.as_ref().map_or(&self.theta, |b| &b.params)
    }

    pub fn selected_round(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.round)
    }
}

/// Personalized federated training of the propensity model: shared
/// parameters by FedAvg over data size, strategy scalars local.
pub fn train_propensity_federated(
    train: &[ClientDataset],
    val: Option<&[ClientDataset]>,
    fed: &FederationConfig,
    prop: &PropensityConfig,
    seed: u64,
    initial: &MlpParams,
) -> Result<PropensityOutcome> {
    prop.validate()?;
    if train.is_empty() {
        return Err(Error::Config("no clients".into()));
    }
    let fed = FederationConfig {
        weight_mode: WeightMode::BySize,
        ..fed.clone()
    };
    let mut trainers: Vec<PropensityTrainer> = train
        .iter()
        .enumerate()
        .map(|(idx, ds)| {
            let v = val.map(|vs| vs[idx].clone());
            PropensityTrainer::new(
                ds.clone(),
                v,
                prop.clone(),
                Rng::with_stream(seed, &[STREAM_PROP_BATCH, ds.client_id as u64]),
            )
        })
        .collect();
    let FederationRun {
        final_params,
        best,
        logs,
    } = run_rounds(initial, &mut trainers, &fed)?;
    Ok(PropensityOutcome {
        theta: final_params,
        best,
        h: trainers.iter().map(PropensityTrainer::h).collect(),
        single_class_clients: trainers
            .iter()
            .filter(|t| t.single_class())
            .map(|t| t.client_id())
            .collect(),
        logs,
    })
}

/// Solo (non-federated) propensity training per client, the local-only
/// ablation. Each client runs the same round budget on its own data.
pub fn train_propensity_local(
    train: &[ClientDataset],
    val: Option<&[ClientDataset]>,
    fed: &FederationConfig,
    prop: &PropensityConfig,
    seed: u64,
    initial: &MlpParams,
) -> Result<Vec<PropensityOutcome>> {
    train
        .iter()
        .enumerate()
        .map(|(idx, ds)| {
            let solo_train = std::slice::from_ref(ds);
            let solo_val: Option<Vec<ClientDataset>> = val.map(|vs| vec![vs[idx].clone()]);
            train_propensity_federated(solo_train, solo_val.as_deref(), fed, prop, seed, initial)
        })
        .collect()
}

/// Centralized pooled training with optional per-client strategy scalars,
/// used by the centralized baselines. One "epoch" mirrors one federated
/// round: refit each h_c with frozen parameters, then one SGD pass over the
/// pooled shuffled records.
pub fn train_propensity_pooled(
    train: &[ClientDataset],
    val: Option<&[ClientDataset]>,
    epochs: usize,
    fed: &FederationConfig,
    prop: &PropensityConfig,
    seed: u64,
    initial: &MlpParams,
) -> Result<PropensityOutcome> {
    prop.validate()?;
    let mut theta = initial.clone();
    let mut h = vec![0.0; train.len()];
    let mut rng = Rng::with_stream(seed, &[STREAM_PROP_BATCH, u64::MAX]);
    let mut pool: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(c, ds)| (0..ds.len()).map(move |i| (c, i)))
        .collect();
    let mut best: Option<BestRound> = None;
    let mut logs = Vec::with_capacity(epochs);
    for round in 1..=epochs {
        if prop.use_h {
            for (c, ds) in train.iter().enumerate() {
                if ds.has_both_classes() {
                    h[c] = fit_hc(&theta, ds, h[c], prop.hc_epochs, prop.hc_lr, prop.hc_clip)?;
                }
            }
        }
        rng.shuffle(&mut pool);
        let mut loss_sum = 0.0;
        for chunk in pool.chunks(fed.batch_size) {
            let mut grad = MlpParams::zeros(theta.in_dim(), theta.hidden_dim());
            let scale = 1.0 / chunk.len() as f64;
            for &(c, i) in chunk {
                let ds = &train[c];
                let (p, cache) = mlp_forward(&theta, ds.x.row(i), h[c], OutputKind::Sigmoid)?;
                loss_sum += bce_loss(p, ds.t[i]);
                mlp_backward_logit_into(&theta, &cache, (p - ds.t[i]) * scale, &mut grad)?;
            }
            sgd_step(&mut theta, &grad, fed.learning_rate)?;
        }
        let train_loss = loss_sum / pool.len() as f64;
        let val_loss = match val {
            Some(vs) => {
                let mut acc = 0.0;
                let mut n = 0usize;
                for (c, ds) in vs.iter().enumerate() {
                    acc += mean_bce(&theta, ds, h[c])? * ds.len() as f64;
                    n += ds.len();
                }
                (n > 0).then(|| acc / n as f64)
            }
            None => None,
        };
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|b| v < b.val_loss) {
                best = Some(BestRound {
                    round,
                    params: theta.clone(),
                    val_loss: v,
                });
            }
        }
        logs.push(RoundLog {
            round,
            client_losses: vec![train_loss],
            aggregated_loss: val_loss.unwrap_or(train_loss),
            wall_ms: 0.0,
        });
    }
    Ok(PropensityOutcome {
        theta,
        best,
        h,
        single_class_clients: train
            .iter()
            .filter(|ds| !ds.has_both_classes())
            .map(|ds| ds.client_id)
            .collect(),
        logs,
    })
}

/// Patient-specific weights from the trained model: the client's empirical
/// treatment rate over the clamped model propensity (Eq. form above), then
/// the configured renormalization. Single-class clients fall back to unit
/// weights.
pub fn compute_patient_weights(
    theta: &MlpParams,
    h_c: f64,
    data: &ClientDataset,
    eps_clip: f64,
    normalization: WeightNormalization,
) -> Result<PatientWeights> {
    if !(eps_clip > 0.0 && eps_clip < 0.5) {
        return Err(Error::Config("eps_clip must lie in (0, 0.5)".into()));
    }
    if !data.has_both_classes() {
        return Ok(PatientWeights {
            client_id: data.client_id,
            w: vec![1.0; data.len()],
            unit_fallback: true,
        });
    }
    let rate = data.treatment_rate();
    let mut w = (0..data.len())
        .map(|i| {
            let p = predict_propensity(theta, h_c, data.x.row(i))?
                .clamp(eps_clip, 1.0 - eps_clip);
            Ok(stabilized_weight(rate, data.t[i] == 1.0, p))
        })
        .collect::<Result<Vec<f64>>>()?;
    normalize(&mut w, &data.t, rate, normalization);
    Ok(PatientWeights {
        client_id: data.client_id,
        w,
        unit_fallback: false,
    })
}

fn scale_subset(w: &mut [f64], t: &[f64], arm: Option<f64>, target: f64) {
    let sum: f64 = w
        .iter()
        .zip(t)
        .filter(|(_, &ti)| arm.is_none_or(|a| ti == a))
        .map(|(wi, _)| *wi)
        .sum();
    if sum > 0.0 && sum.is_finite() && target > 0.0 {
        let scale = target / sum;
        for (wi, &ti) in w.iter_mut().zip(t) {
            if arm.is_none_or(|a| ti == a) {
                *wi *= scale;
            }
        }
    }
}

fn normalize(w: &mut [f64], t: &[f64], rate: f64, normalization: WeightNormalization) {
    let n = w.len() as f64;
    match normalization {
        WeightNormalization::None => {}
        WeightNormalization::ClientSum => scale_subset(w, t, None, n),
        WeightNormalization::ArmMasses => {
            scale_subset(w, t, Some(1.0), n * rate);
            scale_subset(w, t, Some(0.0), n * (1.0 - rate));
        }
    }
}

/// Pooled-marginal weights: the global treatment rate over the pooled model
/// propensity, the weight form of the global-decorrelation-only objective.
/// `h` supplies per-client offsets for the centralized variant that keeps
/// the hospital input; pass `None` to evaluate the model without it.
pub fn global_patient_weights(
    theta: &MlpParams,
    clients: &[ClientDataset],
    h: Option<&[f64]>,
    eps_clip: f64,
    normalization: WeightNormalization,
) -> Result<Vec<PatientWeights>> {
    if !(eps_clip > 0.0 && eps_clip < 0.5) {
        return Err(Error::Config("eps_clip must lie in (0, 0.5)".into()));
    }
    let total: usize = clients.iter().map(ClientDataset::len).sum();
    if total == 0 {
        return Err(Error::Config("no records".into()));
    }
    let marginal: f64 = clients.iter().map(|ds| ds.t.iter().sum::<f64>()).sum::<f64>() / total as f64;
    if marginal == 0.0 || marginal == 1.0 {
        // one treatment class globally: weights are undefined, fall back
        return Ok(clients
            .iter()
            .map(|ds| PatientWeights {
                client_id: ds.client_id,
                w: vec![1.0; ds.len()],
                unit_fallback: true,
            })
            .collect());
    }
    let mut out: Vec<PatientWeights> = clients
        .iter()
        .enumerate()
        .map(|(c, ds)| {
            let offset = h.map_or(0.0, |hs| hs[c]);
            let w = (0..ds.len())
                .map(|i| {
                    let p = predict_propensity(theta, offset, ds.x.row(i))?
                        .clamp(eps_clip, 1.0 - eps_clip);
                    Ok(stabilized_weight(marginal, ds.t[i] == 1.0, p))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(PatientWeights {
                client_id: ds.client_id,
                w,
                unit_fallback: false,
            })
        })
        .collect::<Result<_>>()?;
    // the identities for these weights hold over the pooled |D|, so the
    // renormalization is pooled too; per-client mass shifts are part of
    // their design
    let mut pooled_w: Vec<f64> = out.iter().flat_map(|pw| pw.w.iter().copied()).collect();
    let pooled_t: Vec<f64> = clients.iter().flat_map(|ds| ds.t.iter().copied()).collect();
    normalize(&mut pooled_w, &pooled_t, marginal, normalization);
    let mut cursor = 0;
    for pw in &mut out {
        let len = pw.w.len();
        pw.w.copy_from_slice(&pooled_w[cursor..cursor + len]);
        cursor += len;
    }
    Ok(out)
}

/// Unit patient weights (the unweighted baseline).
pub fn unit_patient_weights(clients: &[ClientDataset]) -> Vec<PatientWeights> {
    clients
        .iter()
        .map(|ds| PatientWeights {
            client_id: ds.client_id,
            w: vec![1.0; ds.len()],
            unit_fallback: false,
        })
        .collect()
}

/// Initial shared parameters for a propensity stage.
pub fn initial_theta(d_x: usize, prop: &PropensityConfig, seed: u64) -> MlpParams {
    let mut rng = Rng::new(stream_seed(seed, &[STREAM_PROP_INIT]));
    MlpParams::xavier(d_x, prop.hidden, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_synthetic, SyntheticConfig, SyntheticOptions};
    use crate::numerics::Matrix;

    fn dataset_with_rate(n: usize, n_treated: usize, d: usize) -> ClientDataset {
        let x = Matrix::zeros(n, d);
        let t: Vec<f64> = (0..n).map(|i| if i < n_treated { 1.0 } else { 0.0 }).collect();
        let y = vec![0.0; n];
        ClientDataset::new(0, x, t, y, None, None).unwrap()
    }

    #[test]
    fn fit_hc_all_treated_saturates() {
        let theta = MlpParams::zeros(3, 4);
        let data = dataset_with_rate(50, 50, 3);
        let h = fit_hc(&theta, &data, 0.0, 2000, 0.5, 50.0).unwrap();
        assert!(h > 5.0, "h = {h}");
        assert!(sigmoid(h) > 0.99);
        assert!(h <= 50.0);
    }

    #[test]
    fn fit_hc_matches_intercept_only_mle() {
        // closed-form MLE of an intercept-only logistic model at rate 0.25
        let theta = MlpParams::zeros(3, 4);
        let data = dataset_with_rate(100, 25, 3);
        let h = fit_hc(&theta, &data, 0.0, 5000, 0.5, 50.0).unwrap();
        let mle = (0.25f64 / 0.75).ln();
        assert!((h - mle).abs() < 1e-3, "h = {h}, mle = {mle}");
    }

    #[test]
    fn fit_hc_balanced_stays_zero() {
        let theta = MlpParams::zeros(3, 4);
        let data = dataset_with_rate(40, 20, 3);
        let h = fit_hc(&theta, &data, 0.0, 100, 0.5, 50.0).unwrap();
        assert!(h.abs() < 1e-12);
    }

    #[test]
    fn fit_hc_clips_divergence() {
        let theta = MlpParams::zeros(3, 4);
        let data = dataset_with_rate(10, 10, 3);
        let h = fit_hc(&theta, &data, 49.9, 100, 1e6, 50.0).unwrap();
        assert!(h.abs() <= 50.0);
    }

    #[test]
    fn stabilized_weight_direct_substitution() {
        assert!((stabilized_weight(0.2, true, 0.4) - 0.5).abs() < 1e-15);
        assert!((stabilized_weight(0.5, false, 0.5) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_case_gives_unit_weights() {
        // theta = 0, h = 0 -> p = 0.5 everywhere; with rate 0.5 every w = 1
        let theta = MlpParams::zeros(3, 4);
        let data = dataset_with_rate(20, 10, 3);
        let pw = compute_patient_weights(&theta, 0.0, &data, 0.01, WeightNormalization::ClientSum)
            .unwrap();
        assert!(!pw.unit_fallback);
        assert!(pw.w.iter().all(|&w| (w - 1.0).abs() < 1e-12));
    }

    #[test]
    fn single_class_falls_back_to_unit() {
        let theta = MlpParams::zeros(3, 4);
        let data = dataset_with_rate(20, 0, 3);
        let pw = compute_patient_weights(&theta, 0.0, &data, 0.01, WeightNormalization::ClientSum)
            .unwrap();
        assert!(pw.unit_fallback);
        assert!(pw.w.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn oracle_weight_sum_matches_population_size() {
        // Enumerated (z, t) support with true propensities: the mass-weighted
        // sum of patient weights is exactly 1 (i.e. |D_c| after scaling).
        let opts = SyntheticOptions {
            n_clients: 4,
            n_per_client: 10,
            d_x: 6,
            seed: 31,
            ..SyntheticOptions::default()
        };
        let cfg = SyntheticConfig::draw(&opts).unwrap();
        for c in 0..cfg.n_clients {
            let e = crate::datagen::enumerate_client(&cfg, c).unwrap();
            let sum: f64 = e
                .mass
                .iter()
                .zip(&e.t)
                .zip(&e.propensity)
                .map(|((&m, &t), &p)| m * stabilized_weight(e.mean_t, t == 1.0, p))
                .sum();
            assert!((sum - 1.0).abs() < 1e-12, "client {c}: weight sum {sum}");
        }
    }

    fn toy_clients(seed: u64, n_clients: usize, n: usize) -> Vec<ClientDataset> {
        let opts = SyntheticOptions {
            n_clients,
            n_per_client: n,
            d_x: 4,
            seed,
            ..SyntheticOptions::default()
        };
        generate_synthetic(&SyntheticConfig::draw(&opts).unwrap()).unwrap()
    }

    fn quick_fed() -> FederationConfig {
        FederationConfig {
            rounds: 4,
            local_epochs: 1,
            batch_size: 16,
            learning_rate: 0.05,
            weight_mode: WeightMode::BySize,
        }
    }

    fn quick_prop(hidden: usize) -> PropensityConfig {
        PropensityConfig {
            hidden,
            ..PropensityConfig::default()
        }
    }

    #[test]
    fn identical_clients_get_identical_h() {
        let base = toy_clients(77, 1, 120).pop().unwrap();
        let mut clients = Vec::new();
        for c in 0..3 {
            let mut ds = base.clone();
            ds.client_id = c;
            clients.push(ds);
        }
        let prop = quick_prop(8);
        let init = initial_theta(4, &prop, 5);
        let out =
            train_propensity_federated(&clients, None, &quick_fed(), &prop, 5, &init).unwrap();
        for pair in out.h.windows(2) {
            assert!(
                (pair[0] - pair[1]).abs() < 1e-2,
                "h values diverged: {:?}",
                out.h
            );
        }
    }

    #[test]
    fn h_disabled_keeps_h_zero() {
        let clients = toy_clients(78, 3, 80);
        let mut prop = quick_prop(8);
        prop.use_h = false;
        let init = initial_theta(4, &prop, 6);
        let out =
            train_propensity_federated(&clients, None, &quick_fed(), &prop, 6, &init).unwrap();
        assert!(out.h.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn identical_data_and_seeds_equal_solo_model() {
        let base = toy_clients(79, 1, 100).pop().unwrap();
        let prop = quick_prop(8);
        let fed = quick_fed();
        let init = initial_theta(4, &prop, 7);
        let stream = Rng::with_stream(7, &[STREAM_PROP_BATCH, 0]);

        let mut duo = vec![
            PropensityTrainer::new(base.clone(), None, prop.clone(), stream.clone()),
            PropensityTrainer::new(base.clone(), None, prop.clone(), stream.clone()),
        ];
        let duo_run = run_rounds(&init, &mut duo, &fed).unwrap();

        let mut solo = vec![PropensityTrainer::new(base, None, prop, stream)];
        let solo_run = run_rounds(&init, &mut solo, &fed).unwrap();

        for (a, b) in duo_run
            .final_params
            .flatten()
            .iter()
            .zip(solo_run.final_params.flatten())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn doubled_treatment_odds_shift_h_by_ln2() {
        // Two clients share covariate structure; client 1's treatment logit
        // carries a +ln 2 offset. The learned strategy scalars should differ
        // by about ln 2, matching a pooled logistic fit with client
        // intercepts.
        let n = 10_000;
        let d = 3;
        let mut rng = Rng::new(123);
        let beta = [0.8, -0.5, 0.3];
        let mut make_client = |cid: usize, offset: f64| {
            let mut rows = Vec::with_capacity(n);
            let mut t = Vec::with_capacity(n);
            for _ in 0..n {
                let x: Vec<f64> = (0..d).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
                let logit: f64 =
                    offset + x.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() - 0.4;
                t.push(if rng.bernoulli(sigmoid(logit)) { 1.0 } else { 0.0 });
                rows.push(x);
            }
            let y = vec![0.0; n];
            ClientDataset::new(cid, Matrix::from_rows(&rows).unwrap(), t, y, None, None).unwrap()
        };
        let ln2 = std::f64::consts::LN_2;
        let clients = vec![make_client(0, 0.0), make_client(1, ln2)];

        let prop = PropensityConfig {
            hidden: 16,
            hc_epochs: 20,
            ..PropensityConfig::default()
        };
        let fed = FederationConfig {
            rounds: 25,
            local_epochs: 1,
            batch_size: 32,
            learning_rate: 0.05,
            weight_mode: WeightMode::BySize,
        };
        let init = initial_theta(d, &prop, 11);
        let out = train_propensity_federated(&clients, None, &fed, &prop, 11, &init).unwrap();
        let diff = out.h[1] - out.h[0];

        // independent oracle: pooled logistic regression with per-client
        // intercepts, fit by full-batch gradient descent
        let mut w = vec![0.0; d];
        let mut b = [0.0f64; 2];
        for _ in 0..400 {
            let mut gw = vec![0.0; d];
            let mut gb = [0.0f64; 2];
            for (c, ds) in clients.iter().enumerate() {
                for i in 0..ds.len() {
                    let x = ds.x.row(i);
                    let z: f64 = b[c] + x.iter().zip(&w).map(|(a, v)| a * v).sum::<f64>();
                    let err = sigmoid(z) - ds.t[i];
                    for (g, &xv) in gw.iter_mut().zip(x) {
                        *g += err * xv;
                    }
                    gb[c] += err;
                }
            }
            let scale = 1.0 / (2 * n) as f64;
            for (wv, g) in w.iter_mut().zip(&gw) {
                *wv -= 2.0 * scale * g;
            }
            b[0] -= 2.0 * scale * gb[0];
            b[1] -= 2.0 * scale * gb[1];
        }
        let oracle_diff = b[1] - b[0];

        assert!(
            (diff - ln2).abs() < 0.1,
            "h difference {diff} vs ln2 {ln2} (oracle {oracle_diff})"
        );
        assert!((diff - oracle_diff).abs() < 0.1, "{diff} vs oracle {oracle_diff}");
    }
}

//! Weighted federated training of the factual outcome model and ITE
//! prediction.
//!
//! The factual model g(x, t) takes the treatment flag as one appended input
//! feature. Binary outcomes use a sigmoid head with BCE, continuous outcomes
//! a linear head with squared error; in both cases the per-record loss is
//! scaled by the patient-specific weight. Hospital-specific weights enter at
//! aggregation time only (per-client aggregation weight w_c |D_c|), never in
//! the local loss.

use serde::{Deserialize, Serialize};

use crate::datagen::ClientDataset;
use crate::error::{Error, Result};
use crate::federation::{
    batch_order, run_rounds, BestRound, FederationConfig, LocalTrainer, RoundLog, WeightMode,
};
use crate::numerics::{
    bce_loss, mlp_backward_logit_into, mlp_forward, mse_loss, sgd_step, stream_seed, MlpParams,
    OutputKind, Rng,
};
use crate::propensity::PatientWeights;

/// Stream tags for factual-stage randomness.
pub const STREAM_FACT_INIT: u64 = 0x41;
pub const STREAM_FACT_BATCH: u64 = 0x42;

/// Trained factual model over inputs `x (+) t` (dimension d_x + 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactualModel {
    pub phi: MlpParams,
    pub output: OutputKind,
}

impl FactualModel {
    pub fn d_x(&self) -> usize {
        self.phi.in_dim() - 1
    }

    /// Forward pass with the treatment flag forced to `t`.
    pub fn predict(&self, x: &[f64], t: f64) -> Result<f64> {
        let mut input = Vec::with_capacity(x.len() + 1);
        input.extend_from_slice(x);
        input.push(t);
        Ok(mlp_forward(&self.phi, &input, 0.0, self.output)?.0)
    }
}

/// Per-record ITE estimates plus their cohort mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItePrediction {
    pub e_hat: Vec<f64>,
    pub ate: f64,
}

/// The head/loss pairing implied by the observed outcomes: sigmoid + BCE
/// when every outcome is 0/1, linear + squared error otherwise.
pub fn infer_output_kind(clients: &[ClientDataset]) -> OutputKind {
    let binary = clients
        .iter()
        .all(|ds| ds.y.iter().all(|&y| y == 0.0 || y == 1.0));
    if binary {
        OutputKind::Sigmoid
    } else {
        OutputKind::Linear
    }
}

fn record_loss(pred: f64, y: f64, kind: OutputKind) -> f64 {
    match kind {
        OutputKind::Sigmoid => bce_loss(pred, y),
        OutputKind::Linear => mse_loss(pred, y),
    }
}

fn record_dlogit(pred: f64, y: f64, kind: OutputKind) -> f64 {
    match kind {
        OutputKind::Sigmoid => pred - y,
        OutputKind::Linear => 2.0 * (pred - y),
    }
}

/// One mini-batch SGD epoch on the weighted factual loss. Returns the mean
/// weighted per-record loss seen during the epoch.
fn sgd_epoch_weighted(
    phi: &mut MlpParams,
    data: &ClientDataset,
    weights: &[f64],
    kind: OutputKind,
    batch_size: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let order = batch_order(data.len(), rng);
    let d = data.d_x();
    let mut input = vec![0.0; d + 1];
    let mut loss_sum = 0.0;
    for chunk in order.chunks(batch_size) {
        let mut grad = MlpParams::zeros(phi.in_dim(), phi.hidden_dim());
        let scale = 1.0 / chunk.len() as f64;
        for &i in chunk {
            input[..d].copy_from_slice(data.x.row(i));
            input[d] = data.t[i];
            let (pred, cache) = mlp_forward(phi, &input, 0.0, kind)?;
            loss_sum += weights[i] * record_loss(pred, data.y[i], kind);
            let d_logit = weights[i] * record_dlogit(pred, data.y[i], kind) * scale;
            mlp_backward_logit_into(phi, &cache, d_logit, &mut grad)?;
        }
        sgd_step(phi, &grad, lr)?;
    }
    Ok(loss_sum / data.len() as f64)
}

fn mean_weighted_loss(
    phi: &MlpParams,
    data: &ClientDataset,
    weights: Option<&[f64]>,
    kind: OutputKind,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let d = data.d_x();
    let mut input = vec![0.0; d + 1];
    let mut sum = 0.0;
    for i in 0..data.len() {
        input[..d].copy_from_slice(data.x.row(i));
        input[d] = data.t[i];
        let (pred, _) = mlp_forward(phi, &input, 0.0, kind)?;
        let w = weights.map_or(1.0, |w| w[i]);
        sum += w * record_loss(pred, data.y[i], kind);
    }
    Ok(sum / data.len() as f64)
}

/// Local training on the patient-weighted loss from a given initialization;
/// one call covers `cfg.local_epochs` epochs.
pub fn local_weighted_train(
    phi_init: &MlpParams,
    data: &ClientDataset,
    weights: &PatientWeights,
    kind: OutputKind,
    cfg: &FederationConfig,
    rng: &mut Rng,
) -> Result<MlpParams> {
    if weights.w.len() != data.len() {
        return Err(Error::Contract(format!(
            "client {}: {} weights for {} records",
            data.client_id,
            weights.w.len(),
            data.len()
        )));
    }
    let mut phi = phi_init.clone();
    for _ in 0..cfg.local_epochs {
        sgd_epoch_weighted(
            &mut phi,
            data,
            &weights.w,
            kind,
            cfg.batch_size,
            cfg.learning_rate,
            rng,
        )?;
    }
    Ok(phi)
}

/// Client-side trainer for the factual stage. Carries the client's patient
/// weights in the loss and its hospital weight for aggregation.
pub struct FactualTrainer {
    client_id: usize,
    train: ClientDataset,
    val: Option<ClientDataset>,
    weights: Vec<f64>,
    hospital_weight: f64,
    kind: OutputKind,
    rng: Rng,
}

impl FactualTrainer {
    pub fn new(
        train: ClientDataset,
        val: Option<ClientDataset>,
        weights: &PatientWeights,
        hospital_weight: f64,
        kind: OutputKind,
        stream: Rng,
    ) -> Result<Self> {
        if weights.w.len() != train.len() {
            return Err(Error::Contract(format!(
                "client {}: {} weights for {} records",
                train.client_id,
                weights.w.len(),
                train.len()
            )));
        }
        Ok(FactualTrainer {
            client_id: train.client_id,
            train,
            val,
            weights: weights.w.clone(),
            hospital_weight,
            kind,
            rng: stream,
        })
    }
}

impl LocalTrainer for FactualTrainer {
    fn client_id(&self) -> usize {
        self.client_id
    }

    fn n_records(&self) -> usize {
        self.train.len()
    }

    fn hospital_weight(&self) -> f64 {
        self.hospital_weight
    }

    fn train_round(&mut self, init: &MlpParams, cfg: &FederationConfig) -> Result<(MlpParams, f64)> {
        let mut phi = init.clone();
        let mut loss = mean_weighted_loss(&phi, &self.train, Some(&self.weights), self.kind)?;
        for _ in 0..cfg.local_epochs {
            loss = sgd_epoch_weighted(
                &mut phi,
                &self.train,
                &self.weights,
                self.kind,
                cfg.batch_size,
                cfg.learning_rate,
                &mut self.rng,
            )?;
        }
        Ok((phi, loss))
    }

    fn validation_loss(&self, params: &MlpParams) -> Option<f64> {
        self.val
            .as_ref()
            .filter(|v| !v.is_empty())
            .and_then(|v| mean_weighted_loss(params, v, None, self.kind).ok())
    }
}

/// Outcome of the factual stage.
pub struct FactualOutcome {
    pub model: FactualModel,
    pub best: Option<BestRound>,
    pub logs: Vec<RoundLog>,
}

impl FactualOutcome {
    pub fn selected_model(&self) -> FactualModel {
        FactualModel {
            phi: self
                .best
                .as_ref()
                .map_or(self.model.phi.clone(), |b| b.params.clone()),
            output: self.model.output,
        }
    }

    pub fn selected_round(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.round)
    }
}

/// Federated factual training: patient weights in the local loss, hospital
/// weights (when given) scaling each client's aggregation share.
pub fn train_factual_federated(
    train: &[ClientDataset],
    val: Option<&[ClientDataset]>,
    patient_weights: &[PatientWeights],
    hospital_weights: Option<&[f64]>,
    fed: &FederationConfig,
    kind: OutputKind,
    seed: u64,
    initial: &MlpParams,
) -> Result<FactualOutcome> {
    if train.len() != patient_weights.len() {
        return Err(Error::Contract(
            "one PatientWeights entry per client required".into(),
        ));
    }
    if let Some(hw) = hospital_weights {
        if hw.len() != train.len() {
            return Err(Error::Contract("one hospital weight per client required".into()));
        }
    }
    let fed = FederationConfig {
        weight_mode: if hospital_weights.is_some() {
            WeightMode::BySizeTimesWc
        } else {
            WeightMode::BySize
        },
        ..fed.clone()
    };
    let mut trainers = train
        .iter()
        .enumerate()
        .map(|(idx, ds)| {
            FactualTrainer::new(
                ds.clone(),
                val.map(|vs| vs[idx].clone()),
                &patient_weights[idx],
                hospital_weights.map_or(1.0, |hw| hw[idx]),
                kind,
                Rng::with_stream(seed, &[STREAM_FACT_BATCH, ds.client_id as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let run = run_rounds(initial, &mut trainers, &fed)?;
    Ok(FactualOutcome {
        model: FactualModel {
            phi: run.final_params,
            output: kind,
        },
        best: run.best,
        logs: run.logs,
    })
}

/// Centralized pooled training for the baselines with access to all data.
/// One epoch mirrors one federated round; weights are the pooled-marginal
/// stabilized weights computed by the caller.
pub fn train_factual_pooled(
    train: &[ClientDataset],
    val: Option<&[ClientDataset]>,
    patient_weights: &[PatientWeights],
    epochs: usize,
    fed: &FederationConfig,
    kind: OutputKind,
    seed: u64,
    initial: &MlpParams,
) -> Result<FactualOutcome> {
    let mut phi = initial.clone();
    let mut rng = Rng::with_stream(seed, &[STREAM_FACT_BATCH, u64::MAX]);
    let mut pool: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(c, ds)| (0..ds.len()).map(move |i| (c, i)))
        .collect();
    if pool.is_empty() {
        return Err(Error::Config("no records".into()));
    }
    let d = train[0].d_x();
    let mut input = vec![0.0; d + 1];
    let mut best: Option<BestRound> = None;
    let mut logs = Vec::with_capacity(epochs);
    for round in 1..=epochs {
        rng.shuffle(&mut pool);
        let mut loss_sum = 0.0;
        for chunk in pool.chunks(fed.batch_size) {
            let mut grad = MlpParams::zeros(phi.in_dim(), phi.hidden_dim());
            let scale = 1.0 / chunk.len() as f64;
            for &(c, i) in chunk {
                let ds = &train[c];
                input[..d].copy_from_slice(ds.x.row(i));
                input[d] = ds.t[i];
                let w = patient_weights[c].w[i];
                let (pred, cache) = mlp_forward(&phi, &input, 0.0, kind)?;
                loss_sum += w * record_loss(pred, ds.y[i], kind);
                let d_logit = w * record_dlogit(pred, ds.y[i], kind) * scale;
                mlp_backward_logit_into(&phi, &cache, d_logit, &mut grad)?;
            }
            sgd_step(&mut phi, &grad, fed.learning_rate)?;
        }
        let train_loss = loss_sum / pool.len() as f64;
        let val_loss = match val {
            Some(vs) => {
                let mut acc = 0.0;
                let mut n = 0usize;
                for ds in vs {
                    acc += mean_weighted_loss(&phi, ds, None, kind)? * ds.len() as f64;
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
                    params: phi.clone(),
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
    Ok(FactualOutcome {
        model: FactualModel { phi, output: kind },
        best,
        logs,
    })
}

/// Per-record ITE as the difference of the two counterfactual forward
/// passes.
pub fn predict_ite(model: &FactualModel, x: &crate::numerics::Matrix) -> Result<ItePrediction> {
    if x.cols() != model.d_x() {
        return Err(Error::Shape(format!(
            "predict_ite: {} features, model expects {}",
            x.cols(),
            model.d_x()
        )));
    }
    let mut e_hat = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        e_hat.push(model.predict(row, 1.0)? - model.predict(row, 0.0)?);
    }
    let ate = if e_hat.is_empty() {
        0.0
    } else {
        e_hat.iter().sum::<f64>() / e_hat.len() as f64
    };
    Ok(ItePrediction { e_hat, ate })
}

/// Initial parameters for a factual stage.
pub fn initial_phi(d_x: usize, hidden: usize, seed: u64) -> MlpParams {
    let mut rng = Rng::new(stream_seed(seed, &[STREAM_FACT_INIT]));
    MlpParams::xavier(d_x + 1, hidden, &mut rng)
}

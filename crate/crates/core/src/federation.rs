//! FedAvg round engine: broadcast, parallel local training, weighted
//! aggregation.
//!
//! The engine is generic over the trainer, so the propensity and factual
//! stages share it. Within a round, local training tasks are independent and
//! run in parallel; aggregation is a barrier and consumes results in client
//! order, so the outcome is identical to sequential execution. Only
//! parameter vectors cross the client/server boundary: the aggregation input
//! type carries model parameters and nothing else (in particular, no
//! per-client strategy scalar).

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{MlpParams, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Aggregate by |D_c| / |D|.
    BySize,
    /// Aggregate by w_c |D_c| / sum(w_c |D_c|) with the trainer-held
    /// hospital weight w_c.
    BySizeTimesWc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_mode: WeightMode,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            rounds: 50,
            local_epochs: 1,
            batch_size: 8,
            learning_rate: 0.001,
            weight_mode: WeightMode::BySize,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// One communication round as logged to the run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    /// Mean local training loss per client, in client order.
    pub client_losses: Vec<f64>,
    /// Weighted validation loss of the aggregated model (training loss when
    /// no validation data exists).
    pub aggregated_loss: f64,
    pub wall_ms: f64,
}

/// A client-side training task. Implementations own their data and any
/// client-confined state (batch RNG, strategy scalar); only parameters are
/// exchanged with the engine.
pub trait LocalTrainer: Send {
    fn client_id(&self) -> usize;

    fn n_records(&self) -> usize;

    /// Hospital-specific aggregation weight; 1 unless the trainer carries
    /// one. Only consulted under [`WeightMode::BySizeTimesWc`].
    fn hospital_weight(&self) -> f64 {
        1.0
    }

    /// Runs the local epochs from the broadcast initialization and returns
    /// the updated parameters with the mean local training loss.
    fn train_round(&mut self, init: &MlpParams, cfg: &FederationConfig) -> Result<(MlpParams, f64)>;

    /// Loss of the given (aggregated) parameters on this client's validation
    /// split, when it has one.
    fn validation_loss(&self, params: &MlpParams) -> Option<f64>;
}

/// Element-wise convex combination of models: sum of (weight_c / sum) * model_c.
pub fn aggregate(models: &[MlpParams], weights: &[f64]) -> Result<MlpParams> {
    if models.is_empty() {
        return Err(Error::Config("aggregate: no models".into()));
    }
    if models.len() != weights.len() {
        return Err(Error::Shape(format!(
            "aggregate: {} models vs {} weights",
            models.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::Config("aggregate: weights must be finite and >= 0".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("aggregate: weight sum must be > 0".into()));
    }
    let mut out = MlpParams::zeros(models[0].in_dim(), models[0].hidden_dim());
    for (m, &w) in models.iter().zip(weights) {
        if !m.same_shape(&out) {
            return Err(Error::Shape("aggregate: model shapes differ".into()));
        }
        out.add_scaled(m, w / total)?;
    }
    Ok(out)
}

/// Best aggregated model seen so far, by validation loss.
#[derive(Debug, Clone)]
pub struct BestRound {
    pub round: usize,
    pub params: MlpParams,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct FederationRun {
    /// The round-R aggregate.
    pub final_params: MlpParams,
    /// Lowest-validation-loss aggregate, when validation data exists.
    pub best: Option<BestRound>,
    pub logs: Vec<RoundLog>,
}

/// Runs R rounds of broadcast, parallel local training and aggregation.
pub fn run_rounds<T: LocalTrainer>(
    initial: &MlpParams,
    trainers: &mut [T],
    cfg: &FederationConfig,
) -> Result<FederationRun> {
    cfg.validate()?;
    if trainers.is_empty() {
        return Err(Error::Config("run_rounds: no clients".into()));
    }
    let weights: Vec<f64> = trainers
        .iter()
        .map(|t| match cfg.weight_mode {
            WeightMode::BySize => t.n_records() as f64,
            WeightMode::BySizeTimesWc => t.hospital_weight() * t.n_records() as f64,
        })
        .collect();

    let mut current = initial.clone();
    let mut logs = Vec::with_capacity(cfg.rounds);
    let mut best: Option<BestRound> = None;

    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let results: Vec<(MlpParams, f64)> = trainers
            .par_iter_mut()
            .map(|t| {
                t.train_round(&current, cfg).map_err(|e| Error::ClientFailure {
                    client_id: t.client_id(),
                    round,
                    reason: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;

        let models: Vec<MlpParams> = results.iter().map(|(m, _)| m.clone()).collect();
        let client_losses: Vec<f64> = results.iter().map(|(_, l)| *l).collect();
        current = aggregate(&models, &weights)?;

        let aggregated_loss = weighted_eval(trainers, &weights, &current, &client_losses);
        if trainers.iter().any(|t| t.validation_loss(&current).is_some()) {
            let better = best.as_ref().is_none_or(|b| aggregated_loss < b.val_loss);
            if better {
                best = Some(BestRound {
                    round,
                    params: current.clone(),
                    val_loss: aggregated_loss,
                });
            }
        }
        logs.push(RoundLog {
            round,
            client_losses,
            aggregated_loss,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(FederationRun {
        final_params: current,
        best,
        logs,
    })
}

fn weighted_eval<T: LocalTrainer>(
    trainers: &[T],
    weights: &[f64],
    params: &MlpParams,
    fallback: &[f64],
) -> f64 {
    let total: f64 = weights.iter().sum();
    trainers
        .iter()
        .zip(weights)
        .zip(fallback)
        .map(|((t, &w), &fb)| (w / total) * t.validation_loss(params).unwrap_or(fb))
        .sum()
}

/// Shuffled mini-batch index order for one epoch.
pub fn batch_order(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn aggregate_weighted_mean() {
        let zero = MlpParams::zeros(2, 2);
        let mut four = MlpParams::zeros(2, 2);
        for v in four.w1.data_mut() {
            *v = 4.0;
        }
        four.b1.iter_mut().for_each(|v| *v = 4.0);
        four.w2.iter_mut().for_each(|v| *v = 4.0);
        four.b2 = 4.0;
        let avg = aggregate(&[zero, four], &[1.0, 3.0]).unwrap();
        assert!(avg.flatten().iter().all(|&v| (v - 3.0).abs() < 1e-15));
    }

    #[test]
    fn aggregate_single_model_identity() {
        let mut rng = Rng::new(3);
        let m = MlpParams::xavier(3, 4, &mut rng);
        let out = aggregate(std::slice::from_ref(&m), &[0.7]).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn aggregate_equal_weights_is_plain_mean() {
        let mut rng = Rng::new(4);
        let a = MlpParams::xavier(3, 4, &mut rng);
        let b = MlpParams::xavier(3, 4, &mut rng);
        let avg = aggregate(&[a.clone(), b.clone()], &[2.0, 2.0]).unwrap();
        for ((x, y), z) in a.flatten().iter().zip(b.flatten()).zip(avg.flatten()) {
            assert!(((x + y) / 2.0 - z).abs() < 1e-15);
        }
    }

    #[test]
    fn aggregate_permutation_invariant() {
        let mut rng = Rng::new(5);
        let models: Vec<MlpParams> = (0..4).map(|_| MlpParams::xavier(2, 3, &mut rng)).collect();
        let weights = [1.0, 2.0, 3.0, 4.0];
        let a = aggregate(&models, &weights).unwrap();
        let perm = [2usize, 0, 3, 1];
        let pm: Vec<MlpParams> = perm.iter().map(|&i| models[i].clone()).collect();
        let pw: Vec<f64> = perm.iter().map(|&i| weights[i]).collect();
        let b = aggregate(&pm, &pw).unwrap();
        for (x, y) in a.flatten().iter().zip(b.flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_rejects_bad_input() {
        let m = MlpParams::zeros(2, 2);
        assert!(aggregate(&[], &[]).is_err());
        assert!(aggregate(&[m.clone()], &[0.0]).is_err());
        assert!(aggregate(&[m.clone()], &[-1.0]).is_err());
        assert!(aggregate(&[m.clone(), MlpParams::zeros(3, 2)], &[1.0, 1.0]).is_err());
    }

    struct NoopTrainer {
        id: usize,
        n: usize,
    }

    impl LocalTrainer for NoopTrainer {
        fn client_id(&self) -> usize {
            self.id
        }
        fn n_records(&self) -> usize {
            self.n
        }
        fn train_round(&mut self, init: &MlpParams, _cfg: &FederationConfig) -> Result<(MlpParams, f64)> {
            Ok((init.clone(), 0.0))
        }
        fn validation_loss(&self, _params: &MlpParams) -> Option<f64> {
            None
        }
    }

    #[test]
    fn zero_epochs_returns_initial() {
        let mut rng = Rng::new(6);
        let init = MlpParams::xavier(3, 4, &mut rng);
        let mut trainers = vec![NoopTrainer { id: 0, n: 10 }];
        let cfg = FederationConfig {
            rounds: 1,
            local_epochs: 0,
            ..FederationConfig::default()
        };
        let run = run_rounds(&init, &mut trainers, &cfg).unwrap();
        assert_eq!(run.final_params, init);
        assert_eq!(run.logs.len(), 1);
        assert!(run.best.is_none());
    }

    struct FailingTrainer;

    impl LocalTrainer for FailingTrainer {
        fn client_id(&self) -> usize {
            7
        }
        fn n_records(&self) -> usize {
            1
        }
        fn train_round(&mut self, _init: &MlpParams, _cfg: &FederationConfig) -> Result<(MlpParams, f64)> {
            Err(Error::Config("boom".into()))
        }
        fn validation_loss(&self, _params: &MlpParams) -> Option<f64> {
            None
        }
    }

    #[test]
    fn trainer_failure_names_client() {
        let init = MlpParams::zeros(1, 1);
        let mut trainers = vec![FailingTrainer];
        let err = run_rounds(&init, &mut trainers, &FederationConfig::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("client 7") && msg.contains("round 1"), "{msg}");
    }
}

//! The run protocol: stage 1 (propensity), weight computation, stage 2
//! (factual), evaluation — over folds x repeats, in a worker pool.
//!
//! Every task derives its own RNG streams from (base seed, repeat,
//! rotation) and writes to a disjoint directory, so results are identical
//! across worker counts and across runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohortweights::{compute_hospital_weights, ClientStats, HospitalWeights};
use crate::datagen::{
    generate_synthetic, load_csv, rotation_indices, split_folds, write_csv, ClientDataset,
    SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    auroc_auprc, if_pehe, mae_ate, pehe, weighted_cov, CovLevel, MetricReport, PluginPredictions,
};
use crate::factual::{
    infer_output_kind, initial_phi, predict_ite, train_factual_federated, train_factual_pooled,
    FactualModel, FactualOutcome,
};
use crate::federation::RoundLog;
use crate::numerics::{stream_seed, MlpParams, OutputKind};
use crate::propensity::{
    compute_patient_weights, global_patient_weights, initial_theta, predict_propensity,
    train_propensity_federated, train_propensity_local, train_propensity_pooled, PatientWeights,
    PropensityOutcome,
};

use super::persist::{self, ExternalPlugin};
use super::{
    DatasetKind, ExperimentConfig, Method, STREAM_FOLD_SEED, STREAM_REPLICATION, STREAM_TASK,
};

pub(crate) const METRIC_NAMES: [&str; 9] = [
    "rpehe",
    "mae_ate",
    "if_pehe",
    "auroc",
    "auprc",
    "prop_auroc",
    "prop_auprc",
    "cov_local",
    "cov_global",
];

pub(crate) fn metric_get(m: &MetricReport, name: &str) -> Option<f64> {
    match name {
        "rpehe" => m.rpehe,
        "mae_ate" => m.mae_ate,
        "if_pehe" => m.if_pehe,
        "auroc" => m.auroc,
        "auprc" => m.auprc,
        "prop_auroc" => m.prop_auroc,
        "prop_auprc" => m.prop_auprc,
        "cov_local" => m.cov_local,
        "cov_global" => m.cov_global,
        _ => None,
    }
}

fn metric_set(m: &mut MetricReport, name: &str, v: Option<f64>) {
    match name {
        "rpehe" => m.rpehe = v,
        "mae_ate" => m.mae_ate = v,
        "if_pehe" => m.if_pehe = v,
        "auroc" => m.auroc = v,
        "auprc" => m.auprc = v,
        "prop_auroc" => m.prop_auroc = v,
        "prop_auprc" => m.prop_auprc = v,
        "cov_local" => m.cov_local = v,
        "cov_global" => m.cov_global = v,
        _ => {}
    }
}

/// One (repeat, rotation) evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskReport {
    pub repeat: usize,
    pub rotation: usize,
    pub seed: u64,
    pub metrics: MetricReport,
    pub selected_round_propensity: Option<usize>,
    pub selected_round_factual: Option<usize>,
    pub single_class_clients: Vec<usize>,
    pub hospital_weights_degenerate: bool,
    pub warnings: Vec<String>,
}

/// All rotations of one repeat plus their field-wise mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepeatReport {
    pub repeat: usize,
    pub tasks: Vec<TaskReport>,
    pub means: MetricReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    pub std: f64,
    /// Repeats contributing a value.
    pub n: usize,
}

/// Mean and standard deviation across repeats, per metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub method: String,
    pub n_repeats: usize,
    pub rotations: usize,
    pub stats: BTreeMap<String, MetricStat>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub aggregate: AggregateReport,
    pub repeats: Vec<RepeatReport>,
}

/// Writes the replication CSVs plus ground-truth sidecars for a synthetic
/// dataset configuration. Returns the CSV paths.
pub fn generate_datasets(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    if cfg.dataset.kind != DatasetKind::Synthetic {
        return Err(Error::Config("generate requires dataset.kind = \"synthetic\"".into()));
    }
    let dir = cfg.out_dir.join("data");
    fs::create_dir_all(&dir)?;
    let mut paths = Vec::new();
    for k in 0..cfg.dataset.n_replications {
        let mut opts = cfg.dataset.synthetic.clone();
        opts.seed = stream_seed(cfg.seed, &[STREAM_REPLICATION, k as u64]);
        let truth = SyntheticConfig::draw(&opts)?;
        let data = generate_synthetic(&truth)?;
        let csv_path = dir.join(format!("replication_{k:02}.csv"));
        write_csv(&csv_path, &data)?;
        let sidecar = dir.join(format!("replication_{k:02}.truth.json"));
        fs::write(&sidecar, serde_json::to_string_pretty(&truth)?)?;
        paths.push(csv_path);
    }
    Ok(paths)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Vec<ClientDataset>> {
    match cfg.dataset.kind {
        DatasetKind::Synthetic => {
            let truth = SyntheticConfig::draw(&cfg.dataset.synthetic)?;
            generate_synthetic(&truth)
        }
        DatasetKind::Csv => {
            let path = cfg
                .dataset
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("dataset.path missing".into()))?;
            load_csv(path)
        }
    }
}

/// Runs the configured experiment end to end and writes all artifacts to
/// the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    if data.is_empty() {
        return Err(Error::Config("dataset has no clients".into()));
    }
    let kind = infer_output_kind(&data);
    let external = match &cfg.if_pehe.plugin_csv {
        Some(p) => Some(persist::load_plugin_csv(p)?),
        None => None,
    };
    fs::create_dir_all(&cfg.out_dir)?;

    let rotations = cfg.protocol.rotations();
    let tasks: Vec<(usize, usize)> = (0..cfg.protocol.n_repeats)
        .flat_map(|r| (0..rotations).map(move |f| (r, f)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let reports: Vec<TaskReport> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(repeat, rotation)| run_task(cfg, &data, kind, external.as_ref(), repeat, rotation))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut repeats = Vec::with_capacity(cfg.protocol.n_repeats);
    for repeat in 0..cfg.protocol.n_repeats {
        let tasks: Vec<TaskReport> = reports
            .iter()
            .filter(|t| t.repeat == repeat)
            .cloned()
            .collect();
        let means = mean_metrics(tasks.iter().map(|t| &t.metrics));
        repeats.push(RepeatReport {
            repeat,
            tasks,
            means,
        });
    }
    let aggregate = aggregate_repeats(cfg.method.name(), &repeats, rotations);
    persist::write_run_outputs(cfg, &repeats, &aggregate, &reports)?;
    Ok(RunSummary {
        out_dir: cfg.out_dir.clone(),
        aggregate,
        repeats,
    })
}

/// Field-wise mean over the reports that carry each metric.
pub(crate) fn mean_metrics<'a>(reports: impl Iterator<Item = &'a MetricReport>) -> MetricReport {
    let reports: Vec<&MetricReport> = reports.collect();
    let mut out = MetricReport::default();
    for name in METRIC_NAMES {
        let values: Vec<f64> = reports.iter().filter_map(|m| metric_get(m, name)).collect();
        if !values.is_empty() {
            metric_set(
                &mut out,
                name,
                Some(values.iter().sum::<f64>() / values.len() as f64),
            );
        }
    }
    out
}

pub(crate) fn aggregate_repeats(
    method: &str,
    repeats: &[RepeatReport],
    rotations: usize,
) -> AggregateReport {
    let mut stats = BTreeMap::new();
    for name in METRIC_NAMES {
        let values: Vec<f64> = repeats
            .iter()
            .filter_map(|r| metric_get(&r.means, name))
            .collect();
        if values.is_empty() {
            continue;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
        };
        stats.insert(name.to_string(), MetricStat { mean, std, n });
    }
    AggregateReport {
        method: method.to_string(),
        n_repeats: repeats.len(),
        rotations,
        stats,
    }
}

/// Trained stage-1 state: the shared model (or the per-client models of the
/// local-only ablation) plus the strategy scalars.
pub(crate) struct Stage1 {
    fit: PropensityFit,
    pub h: Vec<f64>,
    pub selected_round: Option<usize>,
    pub single_class: Vec<usize>,
    pub logs: Vec<RoundLog>,
}

enum PropensityFit {
    Shared(MlpParams),
    PerClient(Vec<MlpParams>),
}

impl Stage1 {
    pub fn theta_for(&self, client_idx: usize) -> &MlpParams {
        match &self.fit {
            PropensityFit::Shared(t) => t,
            PropensityFit::PerClient(ts) => &ts[client_idx],
        }
    }

    pub fn shared_theta(&self) -> &MlpParams {
        match &self.fit {
            PropensityFit::Shared(t) => t,
            PropensityFit::PerClient(ts) => &ts[0],
        }
    }

    pub fn predict(&self, client_idx: usize, x: &[f64]) -> Result<f64> {
        predict_propensity(self.theta_for(client_idx), self.h[client_idx], x)
    }
}

// Weight computation runs off the round-R aggregate: the first-stage loop
// ends before any weight is computed, so no validation selection applies
// there (the best-validation round is still logged for diagnostics).
fn outcome_to_stage1(out: PropensityOutcome) -> Stage1 {
    let selected_round = out.selected_round();
    Stage1 {
        fit: PropensityFit::Shared(out.theta),
        h: out.h,
        selected_round,
        single_class: out.single_class_clients,
        logs: out.logs,
    }
}

fn run_stage1(
    method: Method,
    train: &[ClientDataset],
    val: &[ClientDataset],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Stage1> {
    let prop = cfg.propensity_for_method();
    let d_x = train[0].d_x();
    let init = initial_theta(d_x, &prop, seed);
    match method {
        Method::FedIptw | Method::FedIptwNoH | Method::IptwG | Method::FedavgPlain => {
            let out =
                train_propensity_federated(train, Some(val), &cfg.federation, &prop, seed, &init)?;
            Ok(outcome_to_stage1(out))
        }
        Method::Global | Method::GlobalNoH => {
            let epochs = cfg.federation.rounds * cfg.federation.local_epochs.max(1);
            let out = train_propensity_pooled(
                train,
                Some(val),
                epochs,
                &cfg.federation,
                &prop,
                seed,
                &init,
            )?;
            Ok(outcome_to_stage1(out))
        }
        Method::IptwL => {
            let outs = train_propensity_local(train, Some(val), &cfg.federation, &prop, seed, &init)?;
            let n_outs = outs.len();
            let mut thetas = Vec::with_capacity(n_outs);
            let mut single = Vec::new();
            let mut merged: Vec<RoundLog> = Vec::new();
            for out in outs {
                thetas.push(out.theta);
                single.extend(out.single_class_clients.iter().copied());
                for (i, log) in out.logs.iter().enumerate() {
                    if merged.len() <= i {
                        merged.push(RoundLog {
                            round: log.round,
                            client_losses: Vec::new(),
                            aggregated_loss: 0.0,
                            wall_ms: 0.0,
                        });
                    }
                    merged[i].client_losses.extend(log.client_losses.iter().copied());
                    merged[i].aggregated_loss += log.aggregated_loss / n_outs as f64;
                    merged[i].wall_ms += log.wall_ms;
                }
            }
            Ok(Stage1 {
                fit: PropensityFit::PerClient(thetas),
                h: vec![0.0; train.len()],
                selected_round: None,
                single_class: single,
                logs: merged,
            })
        }
    }
}

fn compute_weights(
    method: Method,
    stage1: &Stage1,
    train: &[ClientDataset],
    cfg: &ExperimentConfig,
) -> Result<(Vec<PatientWeights>, Option<HospitalWeights>)> {
    let eps = cfg.propensity.eps_clip;
    let norm = cfg.propensity.normalization;
    let patient: Vec<PatientWeights> = match method {
        Method::FedIptw | Method::FedIptwNoH | Method::IptwL => train
            .iter()
            .enumerate()
            .map(|(idx, ds)| {
                compute_patient_weights(
                    stage1.theta_for(idx),
                    stage1.h[idx],
                    ds,
                    eps,
                    norm,
                )
            })
            .collect::<Result<_>>()?,
        Method::IptwG => global_patient_weights(stage1.shared_theta(), train, None, eps, norm)?,
        Method::FedavgPlain => crate::propensity::unit_patient_weights(train),
        Method::Global => {
            global_patient_weights(stage1.shared_theta(), train, Some(&stage1.h), eps, norm)?
        }
        Method::GlobalNoH => global_patient_weights(stage1.shared_theta(), train, None, eps, norm)?,
    };
    let hospital = if method.uses_hospital_weights() {
        let stats: Vec<ClientStats> = train
            .iter()
            .map(ClientStats::from_dataset)
            .collect::<Result<_>>()?;
        Some(compute_hospital_weights(&stats, &cfg.hospital)?)
    } else {
        None
    };
    Ok((patient, hospital))
}

fn run_stage2(
    method: Method,
    kind: OutputKind,
    train: &[ClientDataset],
    val: &[ClientDataset],
    patient: &[PatientWeights],
    hospital: Option<&HospitalWeights>,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<FactualOutcome> {
    let d_x = train[0].d_x();
    let init = initial_phi(d_x, cfg.factual.hidden, seed);
    let fed = crate::federation::FederationConfig {
        learning_rate: cfg
            .factual
            .learning_rate
            .unwrap_or(cfg.federation.learning_rate),
        batch_size: cfg.factual.batch_size.unwrap_or(cfg.federation.batch_size),
        rounds: cfg.factual.rounds.unwrap_or(cfg.federation.rounds),
        ..cfg.federation.clone()
    };
    if method.is_centralized() {
        let epochs = fed.rounds * fed.local_epochs.max(1);
        train_factual_pooled(train, Some(val), patient, epochs, &fed, kind, seed, &init)
    } else {
        train_factual_federated(
            train,
            Some(val),
            patient,
            hospital.map(|h| h.w.as_slice()),
            &fed,
            kind,
            seed,
            &init,
        )
    }
}

struct Evaluation {
    metrics: MetricReport,
    /// Per client: (client_id, original test row ids, e_hat).
    ite_by_client: Vec<(usize, Vec<usize>, Vec<f64>)>,
    warnings: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    method: Method,
    kind: OutputKind,
    stage1: &Stage1,
    model: &FactualModel,
    train: &[ClientDataset],
    test: &[ClientDataset],
    test_indices: &[Vec<usize>],
    patient: &[PatientWeights],
    hospital: Option<&HospitalWeights>,
    cfg: &ExperimentConfig,
    external: Option<&ExternalPlugin>,
    seed: u64,
) -> Result<Evaluation> {
    let mut warnings = Vec::new();
    let mut metrics = MetricReport::default();

    // counterfactual predictions on the test rows
    let mut ite_by_client = Vec::with_capacity(test.len());
    let mut e_hat_pooled = Vec::new();
    let mut e_true_pooled = Some(Vec::new());
    let mut factual_scores = Vec::new();
    let mut outcome_labels = Vec::new();
    let mut prop_scores = Vec::new();
    let mut treatment_labels = Vec::new();
    for (idx, ds) in test.iter().enumerate() {
        let pred = predict_ite(model, &ds.x)?;
        e_hat_pooled.extend(pred.e_hat.iter().copied());
        ite_by_client.push((ds.client_id, test_indices[idx].clone(), pred.e_hat));
        match ds.true_ite() {
            Some(e) => {
                if let Some(pool) = e_true_pooled.as_mut() {
                    pool.extend(e);
                }
            }
            None => e_true_pooled = None,
        }
        for i in 0..ds.len() {
            factual_scores.push(model.predict(ds.x.row(i), ds.t[i])?);
            outcome_labels.push(ds.y[i] == 1.0);
            prop_scores.push(stage1.predict(idx, ds.x.row(i))?);
            treatment_labels.push(ds.t[i] == 1.0);
        }
    }

    if let Some(e_true) = &e_true_pooled {
        let (_, rpehe) = pehe(e_true, &e_hat_pooled)?;
        metrics.rpehe = Some(rpehe);
        metrics.mae_ate = Some(mae_ate(e_true, &e_hat_pooled)?);
    }

    if kind == OutputKind::Sigmoid {
        match auroc_auprc(&factual_scores, &outcome_labels) {
            Ok((a, p)) => {
                metrics.auroc = Some(a);
                metrics.auprc = Some(p);
            }
            Err(Error::Degenerate(msg)) => warnings.push(format!("factual auroc: {msg}")),
            Err(e) => return Err(e),
        }
    }
    match auroc_auprc(&prop_scores, &treatment_labels) {
        Ok((a, p)) => {
            metrics.prop_auroc = Some(a);
            metrics.prop_auprc = Some(p);
        }
        Err(Error::Degenerate(msg)) => warnings.push(format!("propensity auroc: {msg}")),
        Err(e) => return Err(e),
    }

    if kind == OutputKind::Sigmoid && cfg.if_pehe.enabled {
        let plugin = external.map(|map| build_plugin_predictions(map, test, test_indices)).transpose()?;
        match if_pehe(
            train,
            test,
            &e_hat_pooled,
            &cfg.if_pehe.learner,
            seed,
            plugin.as_ref(),
        ) {
            Ok(total) => metrics.if_pehe = Some(total / e_hat_pooled.len() as f64),
            Err(Error::Degenerate(msg)) => warnings.push(format!("if_pehe unavailable: {msg}")),
            Err(e) => return Err(e),
        }
    }

    let hospital_for_cov = if method.uses_hospital_weights() {
        hospital
    } else {
        None
    };
    match weighted_cov(train, patient, None, CovLevel::Local) {
        Ok(rep) => metrics.cov_local = Some(rep.summary),
        Err(Error::Degenerate(msg)) => warnings.push(format!("cov_local: {msg}")),
        Err(e) => return Err(e),
    }
    match weighted_cov(train, patient, hospital_for_cov, CovLevel::Global) {
        Ok(rep) => metrics.cov_global = Some(rep.summary),
        Err(Error::Degenerate(msg)) => warnings.push(format!("cov_global: {msg}")),
        Err(e) => return Err(e),
    }

    Ok(Evaluation {
        metrics,
        ite_by_client,
        warnings,
    })
}

fn build_plugin_predictions(
    map: &ExternalPlugin,
    test: &[ClientDataset],
    test_indices: &[Vec<usize>],
) -> Result<PluginPredictions> {
    let mut mu0 = Vec::new();
    let mut mu1 = Vec::new();
    let mut pi = Vec::new();
    for (ds, rows) in test.iter().zip(test_indices) {
        for &row in rows {
            let key = (ds.client_id, row);
            let (a, b, c) = map.get(&key).copied().ok_or_else(|| {
                Error::Config(format!(
                    "plugin csv misses predictions for client {} row {row}",
                    ds.client_id
                ))
            })?;
            mu0.push(a);
            mu1.push(b);
            pi.push(c);
        }
    }
    Ok(PluginPredictions { mu0, mu1, pi })
}

fn run_task(
    cfg: &ExperimentConfig,
    data: &[ClientDataset],
    kind: OutputKind,
    external: Option<&ExternalPlugin>,
    repeat: usize,
    rotation: usize,
) -> Result<TaskReport> {
    let fold_seed = stream_seed(cfg.seed, &[STREAM_FOLD_SEED, repeat as u64]);
    let assignment = split_folds(data, cfg.protocol.n_folds, fold_seed)?;
    let indices = rotation_indices(&assignment, rotation)?;
    let train: Vec<ClientDataset> = data
        .iter()
        .zip(&indices)
        .map(|(ds, (tr, _, _))| ds.subset(tr))
        .collect();
    let val: Vec<ClientDataset> = data
        .iter()
        .zip(&indices)
        .map(|(ds, (_, va, _))| ds.subset(va))
        .collect();
    let test: Vec<ClientDataset> = data
        .iter()
        .zip(&indices)
        .map(|(ds, (_, _, te))| ds.subset(te))
        .collect();
    let test_indices: Vec<Vec<usize>> = indices.iter().map(|(_, _, te)| te.clone()).collect();
    let seed = stream_seed(cfg.seed, &[STREAM_TASK, repeat as u64, rotation as u64]);

    let stage1 = run_stage1(cfg.method, &train, &val, cfg, seed)?;
    let (patient, hospital) = compute_weights(cfg.method, &stage1, &train, cfg)?;
    let stage2 = run_stage2(
        cfg.method,
        kind,
        &train,
        &val,
        &patient,
        hospital.as_ref(),
        cfg,
        seed,
    )?;
    let model = stage2.selected_model();

    let eval = evaluate(
        cfg.method,
        kind,
        &stage1,
        &model,
        &train,
        &test,
        &test_indices,
        &patient,
        hospital.as_ref(),
        cfg,
        external,
        seed,
    )?;

    let mut warnings = eval.warnings;
    if !stage1.single_class.is_empty() {
        warnings.push(format!(
            "single-class clients (h update skipped, unit weights): {:?}",
            stage1.single_class
        ));
    }
    for pw in &patient {
        if pw.unit_fallback {
            warnings.push(format!("client {}: unit-weight fallback", pw.client_id));
        }
    }

    let report = TaskReport {
        repeat,
        rotation,
        seed,
        metrics: eval.metrics,
        selected_round_propensity: stage1.selected_round,
        selected_round_factual: stage2.selected_round(),
        single_class_clients: stage1.single_class.clone(),
        hospital_weights_degenerate: hospital.as_ref().is_some_and(|h| h.degenerate),
        warnings,
    };

    let theta_files: Vec<(String, &MlpParams)> = match &stage1.fit {
        PropensityFit::Shared(t) => vec![("theta".to_string(), t)],
        PropensityFit::PerClient(ts) => ts
            .iter()
            .enumerate()
            .map(|(idx, t)| (format!("theta_client_{:02}", train[idx].client_id), t))
            .collect(),
    };
    persist::write_task_artifacts(
        cfg,
        repeat,
        rotation,
        &report,
        &theta_files,
        &stage1.h,
        &model,
        &patient,
        hospital.as_ref(),
        &eval.ite_by_client,
        &stage1.logs,
        &stage2.logs,
    )?;

    Ok(report)
}

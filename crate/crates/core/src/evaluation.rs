//! Metrics and the weighted covariance diagnostics.
//!
//! Covariance conventions: the local diagnostic is the patient-weighted
//! covariance between covariates and treatment within one client; the global
//! diagnostic pools every record with the combined weight
//! `w_c * w_{c,i}`. Both normalize by the weight sum, so unit weights recover
//! the classical (biased) covariance. The scalar summary divides each
//! feature's covariance magnitude by that feature's pooled unweighted
//! standard deviation and averages over features.

use serde::{Deserialize, Serialize};

use crate::cohortweights::HospitalWeights;
use crate::datagen::ClientDataset;
use crate::error::{Error, Result};
use crate::numerics::{
    mlp_backward_logit_into, mlp_forward, sgd_step, Matrix, MlpParams, OutputKind, Rng,
};
use crate::propensity::PatientWeights;

/// Mean squared difference of treatment effects and its root.
pub fn pehe(e_true: &[f64], e_hat: &[f64]) -> Result<(f64, f64)> {
    if e_true.len() != e_hat.len() {
        return Err(Error::Shape(format!(
            "pehe: {} true vs {} estimated effects",
            e_true.len(),
            e_hat.len()
        )));
    }
    if e_true.is_empty() {
        return Err(Error::Config("pehe: empty input".into()));
    }
    let mse = e_true
        .iter()
        .zip(e_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / e_true.len() as f64;
    Ok((mse, mse.sqrt()))
}

/// Absolute difference of the mean effects.
pub fn mae_ate(e_true: &[f64], e_hat: &[f64]) -> Result<f64> {
    if e_true.is_empty() || e_hat.is_empty() {
        return Err(Error::Config("mae_ate: empty input".into()));
    }
    let a = e_true.iter().sum::<f64>() / e_true.len() as f64;
    let b = e_hat.iter().sum::<f64>() / e_hat.len() as f64;
    Ok((a - b).abs())
}

/// Tie-aware rank AUROC and step-integrated AUPRC.
pub fn auroc_auprc(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Shape("auroc: scores and labels must align".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("auroc: scores".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("auroc: both classes required".into()));
    }

    // AUROC via the rank-sum form, average ranks over score ties.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 1) as f64 / 2.0; // 1-based average of ranks i+1..j
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let auroc =
        (rank_sum_pos - pos as f64 * (pos as f64 + 1.0) / 2.0) / (pos as f64 * neg as f64);

    // AUPRC: descending thresholds at distinct scores, precision stepped
    // against recall increments.
    let mut desc = order;
    desc.reverse();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut last_recall = 0.0;
    let mut auprc = 0.0;
    let mut i = 0;
    while i < desc.len() {
        let mut j = i;
        while j < desc.len() && scores[desc[j]] == scores[desc[i]] {
            if labels[desc[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        auprc += (recall - last_recall) * precision;
        last_recall = recall;
        i = j;
    }
    Ok((auroc, auprc))
}

/// Influence-function PEHE from precomputed components, transcribing the
/// printed estimator: sum over records of (e_hat - e)^2 + l_hat with
///   l_hat = (1 - B) e_hat^2 + B y (e - e_hat) - W (e - e_hat)^2 + e_hat^2,
///   W = t - pi, B = 2 t (t - pi) / Z, Z = pi (1 - pi),
/// where `e` is the plug-in effect mu1 - mu0 and pi is clamped to
/// [pi_clip, 1 - pi_clip].
pub fn if_pehe_from_components(
    e_hat: &[f64],
    e_plug: &[f64],
    pi: &[f64],
    t: &[f64],
    y: &[f64],
    pi_clip: f64,
) -> Result<f64> {
    let n = e_hat.len();
    if [e_plug.len(), pi.len(), t.len(), y.len()].iter().any(|&l| l != n) {
        return Err(Error::Shape("if_pehe: component lengths differ".into()));
    }
    if !(pi_clip > 0.0 && pi_clip < 0.5) {
        return Err(Error::Config("pi_clip must lie in (0, 0.5)".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let p = pi[i].clamp(pi_clip, 1.0 - pi_clip);
        let z = p * (1.0 - p);
        let w = t[i] - p;
        let b = 2.0 * t[i] * (t[i] - p) / z;
        let diff = e_plug[i] - e_hat[i];
        let l_hat = (1.0 - b) * e_hat[i] * e_hat[i] + b * y[i] * diff - w * diff * diff
            + e_hat[i] * e_hat[i];
        total += (e_hat[i] - e_plug[i]) * (e_hat[i] - e_plug[i]) + l_hat;
    }
    Ok(total)
}

/// Plug-in learner settings for the influence-function metric. The learners
/// are the engine's own two-layer MLPs; externally computed plug-in
/// predictions can be substituted through the experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PluginLearnerConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub pi_clip: f64,
}

impl Default for PluginLearnerConfig {
    fn default() -> Self {
        PluginLearnerConfig {
            hidden: 32,
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.05,
            pi_clip: 0.01,
        }
    }
}

/// Externally supplied plug-in predictions for the test rows, aligned with
/// the pooled test record order.
#[derive(Debug, Clone)]
pub struct PluginPredictions {
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub pi: Vec<f64>,
}

fn train_binary_mlp(
    x: &Matrix,
    targets: &[f64],
    cfg: &PluginLearnerConfig,
    rng: &mut Rng,
) -> Result<MlpParams> {
    let mut params = MlpParams::xavier(x.cols(), cfg.hidden, rng);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad = MlpParams::zeros(x.cols(), cfg.hidden);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let (p, cache) = mlp_forward(&params, x.row(i), 0.0, OutputKind::Sigmoid)?;
                mlp_backward_logit_into(&params, &cache, (p - targets[i]) * scale, &mut grad)?;
            }
            sgd_step(&mut params, &grad, cfg.learning_rate)?;
        }
    }
    Ok(params)
}

fn pool_rows(clients: &[ClientDataset]) -> (Matrix, Vec<f64>, Vec<f64>) {
    let total: usize = clients.iter().map(ClientDataset::len).sum();
    let d = clients.first().map_or(0, ClientDataset::d_x);
    let mut x = Matrix::zeros(total, d);
    let mut t = Vec::with_capacity(total);
    let mut y = Vec::with_capacity(total);
    let mut row = 0;
    for ds in clients {
        for i in 0..ds.len() {
            x.row_mut(row).copy_from_slice(ds.x.row(i));
            t.push(ds.t[i]);
            y.push(ds.y[i]);
            row += 1;
        }
    }
    (x, t, y)
}

/// Influence-function PEHE for binary outcomes: fits plug-in outcome models
/// and a propensity on the training fold, then evaluates the printed
/// estimator on the test fold against the model's `e_hat`. Returns a
/// degenerate error when a plug-in training fold has a single class.
pub fn if_pehe(
    train: &[ClientDataset],
    test: &[ClientDataset],
    e_hat_test: &[f64],
    cfg: &PluginLearnerConfig,
    seed: u64,
    external: Option<&PluginPredictions>,
) -> Result<f64> {
    let (test_x, test_t, test_y) = pool_rows(test);
    if e_hat_test.len() != test_x.rows() {
        return Err(Error::Shape(format!(
            "if_pehe: {} estimates for {} test records",
            e_hat_test.len(),
            test_x.rows()
        )));
    }
    let binary = test_y.iter().all(|&v| v == 0.0 || v == 1.0)
        && train
            .iter()
            .all(|ds| ds.y.iter().all(|&v| v == 0.0 || v == 1.0));
    if !binary {
        return Err(Error::Degenerate(
            "if_pehe requires binary outcomes".into(),
        ));
    }

    let (mu0, mu1, pi): (Vec<f64>, Vec<f64>, Vec<f64>) = match external {
        Some(p) => {
            if p.mu0.len() != test_x.rows() || p.mu1.len() != test_x.rows() || p.pi.len() != test_x.rows() {
                return Err(Error::Shape("external plug-in predictions misaligned".into()));
            }
            (p.mu0.clone(), p.mu1.clone(), p.pi.clone())
        }
        None => {
            let (train_x, train_t, train_y) = pool_rows(train);
            let control: Vec<usize> = (0..train_x.rows()).filter(|&i| train_t[i] == 0.0).collect();
            let treated: Vec<usize> = (0..train_x.rows()).filter(|&i| train_t[i] == 1.0).collect();
            if control.is_empty() || treated.is_empty() {
                return Err(Error::Degenerate(
                    "if_pehe: training fold has a single treatment class".into(),
                ));
            }
            let take = |idx: &[usize]| {
                let mut m = Matrix::zeros(idx.len(), train_x.cols());
                let mut ys = Vec::with_capacity(idx.len());
                for (r, &i) in idx.iter().enumerate() {
                    m.row_mut(r).copy_from_slice(train_x.row(i));
                    ys.push(train_y[i]);
                }
                (m, ys)
            };
            let (x0, y0) = take(&control);
            let (x1, y1) = take(&treated);
            let mut rng = Rng::with_stream(seed, &[0x51]);
            let m0 = train_binary_mlp(&x0, &y0, cfg, &mut rng)?;
            let m1 = train_binary_mlp(&x1, &y1, cfg, &mut rng)?;
            let mp = train_binary_mlp(&train_x, &train_t, cfg, &mut rng)?;
            let predict = |m: &MlpParams| -> Result<Vec<f64>> {
                (0..test_x.rows())
                    .map(|i| Ok(mlp_forward(m, test_x.row(i), 0.0, OutputKind::Sigmoid)?.0))
                    .collect()
            };
            (predict(&m0)?, predict(&m1)?, predict(&mp)?)
        }
    };
    let e_plug: Vec<f64> = mu1.iter().zip(&mu0).map(|(a, b)| a - b).collect();
    if_pehe_from_components(e_hat_test, &e_plug, &pi, &test_t, &test_y, cfg.pi_clip)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovLevel {
    Local,
    Global,
}

/// Per-feature covariance diagnostic plus its standardized scalar summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovReport {
    /// Local level: size-weighted mean of |COV_c| per feature across
    /// clients. Global level: the signed pooled covariance per feature.
    pub per_feature: Vec<f64>,
    /// Mean over features of |cov| / pooled_std, skipping constant features.
    pub summary: f64,
}

fn client_weighted_cov(ds: &ClientDataset, w: &[f64]) -> Result<Vec<f64>> {
    let ws: f64 = w.iter().sum();
    if ws <= 0.0 {
        return Err(Error::Degenerate(format!(
            "client {}: zero weight sum",
            ds.client_id
        )));
    }
    let d = ds.d_x();
    let mut mean_x = vec![0.0; d];
    let mut mean_t = 0.0;
    for i in 0..ds.len() {
        for (m, &v) in mean_x.iter_mut().zip(ds.x.row(i)) {
            *m += w[i] * v;
        }
        mean_t += w[i] * ds.t[i];
    }
    mean_x.iter_mut().for_each(|m| *m /= ws);
    mean_t /= ws;
    let mut cov = vec![0.0; d];
    for i in 0..ds.len() {
        let dt = ds.t[i] - mean_t;
        for (c, (&v, m)) in cov.iter_mut().zip(ds.x.row(i).iter().zip(&mean_x)) {
            *c += w[i] * (v - m) * dt;
        }
    }
    cov.iter_mut().for_each(|c| *c /= ws);
    Ok(cov)
}

/// Pooled unweighted per-feature standard deviation.
fn pooled_std(clients: &[ClientDataset]) -> Vec<f64> {
    let d = clients.first().map_or(0, ClientDataset::d_x);
    let n: usize = clients.iter().map(ClientDataset::len).sum();
    let mut mean = vec![0.0; d];
    for ds in clients {
        for i in 0..ds.len() {
            for (m, &v) in mean.iter_mut().zip(ds.x.row(i)) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for ds in clients {
        for i in 0..ds.len() {
            for (s, (&v, m)) in var.iter_mut().zip(ds.x.row(i).iter().zip(&mean)) {
                *s += (v - m) * (v - m);
            }
        }
    }
    var.iter().map(|v| (v / n as f64).sqrt()).collect()
}

fn summarize(per_feature: &[f64], std: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (c, s) in per_feature.iter().zip(std) {
        if *s > 1e-12 {
            sum += c.abs() / s;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Weighted covariance diagnostic. The hospital weights are consulted only
/// at the global level; `None` means unit hospital weights.
pub fn weighted_cov(
    clients: &[ClientDataset],
    patient_weights: &[PatientWeights],
    hospital_weights: Option<&HospitalWeights>,
    level: CovLevel,
) -> Result<CovReport> {
    if clients.is_empty() || clients.len() != patient_weights.len() {
        return Err(Error::Contract(
            "weighted_cov: one PatientWeights entry per client required".into(),
        ));
    }
    for (ds, pw) in clients.iter().zip(patient_weights) {
        if pw.w.len() != ds.len() {
            return Err(Error::Contract(format!(
                "weighted_cov: client {} weights misaligned",
                ds.client_id
            )));
        }
    }
    let d = clients[0].d_x();
    let std = pooled_std(clients);
    match level {
        CovLevel::Local => {
            let n_total: usize = clients.iter().map(ClientDataset::len).sum();
            let mut per_feature = vec![0.0; d];
            for (ds, pw) in clients.iter().zip(patient_weights) {
                let cov = client_weighted_cov(ds, &pw.w)?;
                let share = ds.len() as f64 / n_total as f64;
                for (acc, c) in per_feature.iter_mut().zip(&cov) {
                    *acc += share * c.abs();
                }
            }
            let summary = summarize(&per_feature, &std);
            Ok(CovReport {
                per_feature,
                summary,
            })
        }
        CovLevel::Global => {
            let hw = |idx: usize| -> f64 {
                hospital_weights.map_or(1.0, |h| h.w[idx])
            };
            let mut ws = 0.0;
            let mut mean_x = vec![0.0; d];
            let mut mean_t = 0.0;
            for (idx, (ds, pw)) in clients.iter().zip(patient_weights).enumerate() {
                let wc = hw(idx);
                for i in 0..ds.len() {
                    let u = wc * pw.w[i];
                    ws += u;
                    for (m, &v) in mean_x.iter_mut().zip(ds.x.row(i)) {
                        *m += u * v;
                    }
                    mean_t += u * ds.t[i];
                }
            }
            if ws <= 0.0 {
                return Err(Error::Degenerate("weighted_cov: zero weight sum".into()));
            }
            mean_x.iter_mut().for_each(|m| *m /= ws);
            mean_t /= ws;
            let mut per_feature = vec![0.0; d];
            for (idx, (ds, pw)) in clients.iter().zip(patient_weights).enumerate() {
                let wc = hw(idx);
                for i in 0..ds.len() {
                    let u = wc * pw.w[i];
                    let dt = ds.t[i] - mean_t;
                    for (c, (&v, m)) in per_feature.iter_mut().zip(ds.x.row(i).iter().zip(&mean_x)) {
                        *c += u * (v - m) * dt;
                    }
                }
            }
            per_feature.iter_mut().for_each(|c| *c /= ws);
            let summary = summarize(&per_feature, &std);
            Ok(CovReport {
                per_feature,
                summary,
            })
        }
    }
}

/// Metrics of one evaluated fold. Fields are optional because they depend on
/// what the dataset provides (ground-truth effects, binary outcomes, both
/// treatment classes).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub rpehe: Option<f64>,
    pub mae_ate: Option<f64>,
    /// Printed-formula sum normalized by the test record count.
    pub if_pehe: Option<f64>,
    /// Factual outcome prediction, binary outcomes only.
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    /// Treatment (propensity) prediction.
    pub prop_auroc: Option<f64>,
    pub prop_auprc: Option<f64>,
    pub cov_local: Option<f64>,
    pub cov_global: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{enumerate_client, SyntheticConfig, SyntheticOptions};
    use crate::propensity::stabilized_weight;

    #[test]
    fn pehe_trivial_points() {
        let (p, r) = pehe(&[1.0, 1.0], &[0.0, 2.0]).unwrap();
        assert_eq!(p, 1.0);
        assert_eq!(r, 1.0);
        let (p, _) = pehe(&[0.3, -0.5], &[0.3, -0.5]).unwrap();
        assert_eq!(p, 0.0);
        assert!(pehe(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn pehe_matches_loop_oracle() {
        let mut rng = Rng::new(3);
        let a: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
        let (p, _) = pehe(&a, &b).unwrap();
        let mut acc = 0.0;
        for i in 0..10 {
            acc += (a[i] - b[i]) * (a[i] - b[i]);
        }
        assert!((p - acc / 10.0).abs() < 1e-15);
    }

    #[test]
    fn mae_ate_depends_on_means_only() {
        assert_eq!(mae_ate(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 0.0);
        assert!((mae_ate(&[1.0, 1.0], &[0.6, 0.6]).unwrap() - 0.4).abs() < 1e-15);
        let base = mae_ate(&[1.0, 2.0, 3.0], &[0.5, 1.5, 2.5]).unwrap();
        let perm = mae_ate(&[1.0, 2.0, 3.0], &[2.5, 0.5, 1.5]).unwrap();
        assert!((base - perm).abs() < 1e-15);
    }

    #[test]
    fn auroc_perfect_and_random() {
        let scores = [0.9, 0.8, 0.3, 0.1];
        let labels = [true, true, false, false];
        let (auroc, auprc) = auroc_auprc(&scores, &labels).unwrap();
        assert_eq!(auroc, 1.0);
        assert_eq!(auprc, 1.0);
        // label-independent scores at large n drift to 1/2
        let mut rng = Rng::new(9);
        let n = 20_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.3)).collect();
        let (auroc, _) = auroc_auprc(&scores, &labels).unwrap();
        assert!((auroc - 0.5).abs() < 0.02, "auroc {auroc}");
    }

    /// O(n^2) pair-enumeration oracle with half credit for score ties.
    fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    /// Brute-force AP: precision at every distinct threshold, stepped by
    /// recall increments.
    fn auprc_bruteforce(scores: &[f64], labels: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let pos = labels.iter().filter(|&&l| l).count() as f64;
        let mut ap = 0.0;
        let mut last_recall = 0.0;
        for &th in &thresholds {
            let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= th).collect();
            let tp = selected.iter().filter(|&&i| labels[i]).count() as f64;
            let recall = tp / pos;
            let precision = tp / selected.len() as f64;
            ap += (recall - last_recall) * precision;
            last_recall = recall;
        }
        ap
    }

    #[test]
    fn auroc_auprc_match_enumeration_oracles() {
        // six-point instance with a tie
        let scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.7];
        let labels = [false, false, true, true, true, false];
        let (auroc, auprc) = auroc_auprc(&scores, &labels).unwrap();
        assert!((auroc - auroc_pairs(&scores, &labels)).abs() < 1e-12);
        assert!((auprc - auprc_bruteforce(&scores, &labels)).abs() < 1e-12);
        // and over a few random draws
        let mut rng = Rng::new(12);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..9).map(|_| (rng.next_f64() * 4.0).round() / 4.0).collect();
            let labels: Vec<bool> = (0..9).map(|_| rng.bernoulli(0.5)).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            let (auroc, auprc) = auroc_auprc(&scores, &labels).unwrap();
            assert!((auroc - auroc_pairs(&scores, &labels)).abs() < 1e-12);
            assert!((auprc - auprc_bruteforce(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        let scores = [0.2, 0.5, 0.1, 0.9, 0.45, 0.3];
        let labels = [false, true, false, true, true, false];
        let (a1, p1) = auroc_auprc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (4.0 * s).exp() - 3.0).collect();
        let (a2, p2) = auroc_auprc(&mapped, &labels).unwrap();
        assert!((a1 - a2).abs() < 1e-12);
        assert!((p1 - p2).abs() < 1e-12);
    }

    #[test]
    fn auroc_rejects_single_class() {
        assert!(auroc_auprc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn if_pehe_intermediates_as_printed() {
        // pi = 0.5, t = 1: Z = 0.25, W = 0.5, B = 2*1*0.5/0.25 = 4
        let p: f64 = 0.5;
        let t = 1.0;
        let z = p * (1.0 - p);
        let w = t - p;
        let b = 2.0 * t * (t - p) / z;
        assert_eq!(z, 0.25);
        assert_eq!(w, 0.5);
        assert_eq!(b, 4.0);
    }

    #[test]
    fn if_pehe_plug_in_substitution_leaves_l_hat() {
        // e_hat == e_plug: the squared terms vanish and the total is the sum
        // of (2 - B) e_hat^2
        let e = [0.2, -0.4, 0.7];
        let pi = [0.3, 0.5, 0.6];
        let t = [1.0, 0.0, 1.0];
        let y = [1.0, 0.0, 0.0];
        let total = if_pehe_from_components(&e, &e, &pi, &t, &y, 0.01).unwrap();
        let mut expect = 0.0;
        for i in 0..3 {
            let z = pi[i] * (1.0 - pi[i]);
            let b = 2.0 * t[i] * (t[i] - pi[i]) / z;
            expect += (2.0 - b) * e[i] * e[i];
        }
        assert!((total - expect).abs() < 1e-12);
    }

    #[test]
    fn if_pehe_five_record_transcription() {
        // fixed five-record instance evaluated against an independent
        // spreadsheet-style transcription of the printed formula
        let e_hat = [0.3, -0.2, 0.5, 0.0, 0.1];
        let mu0 = [0.2, 0.6, 0.1, 0.5, 0.3];
        let mu1 = [0.7, 0.5, 0.4, 0.9, 0.2];
        let pi = [0.4, 0.3, 0.6, 0.5, 0.7];
        let t = [1.0, 0.0, 1.0, 0.0, 1.0];
        let y = [1.0, 0.0, 0.0, 1.0, 1.0];
        let e_plug: Vec<f64> = mu1.iter().zip(&mu0).map(|(a, b)| a - b).collect();
        let got = if_pehe_from_components(&e_hat, &e_plug, &pi, &t, &y, 0.01).unwrap();
        let mut expect = 0.0;
        for i in 0..5 {
            let e = mu1[i] - mu0[i];
            let z: f64 = pi[i] * (1.0 - pi[i]);
            let w: f64 = t[i] - pi[i];
            let b: f64 = 2.0 * t[i] * (t[i] - pi[i]) / z;
            let l = (1.0 - b) * e_hat[i] * e_hat[i] + b * y[i] * (e - e_hat[i])
                - w * (e - e_hat[i]) * (e - e_hat[i])
                + e_hat[i] * e_hat[i];
            expect += (e_hat[i] - e) * (e_hat[i] - e) + l;
        }
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    fn unit_weights_for(clients: &[ClientDataset]) -> Vec<PatientWeights> {
        crate::propensity::unit_patient_weights(clients)
    }

    #[test]
    fn unit_weights_recover_classical_covariance() {
        let opts = SyntheticOptions {
            n_clients: 1,
            n_per_client: 60,
            d_x: 4,
            seed: 44,
            ..SyntheticOptions::default()
        };
        let cfg = SyntheticConfig::draw(&opts).unwrap();
        let clients = crate::datagen::generate_synthetic(&cfg).unwrap();
        let pw = unit_weights_for(&clients);
        let rep = weighted_cov(&clients, &pw, None, CovLevel::Global).unwrap();
        // classical biased covariance by independent loop
        let ds = &clients[0];
        let n = ds.len() as f64;
        for j in 0..ds.d_x() {
            let mx = (0..ds.len()).map(|i| ds.x.get(i, j)).sum::<f64>() / n;
            let mt = ds.t.iter().sum::<f64>() / n;
            let cov = (0..ds.len())
                .map(|i| (ds.x.get(i, j) - mx) * (ds.t[i] - mt))
                .sum::<f64>()
                / n;
            assert!((rep.per_feature[j] - cov).abs() < 1e-12);
        }
    }

    #[test]
    fn product_population_has_zero_covariance() {
        // x in {0,1}^2 crossed with t in {0,1}: independence by construction
        let mut rows = Vec::new();
        let mut t = Vec::new();
        for a in [0.0, 1.0] {
            for b in [0.0, 1.0] {
                for arm in [0.0, 1.0] {
                    rows.push(vec![a, b]);
                    t.push(arm);
                }
            }
        }
        let n = t.len();
        let ds = ClientDataset::new(
            0,
            Matrix::from_rows(&rows).unwrap(),
            t,
            vec![0.0; n],
            None,
            None,
        )
        .unwrap();
        let clients = vec![ds];
        let pw = unit_weights_for(&clients);
        for level in [CovLevel::Local, CovLevel::Global] {
            let rep = weighted_cov(&clients, &pw, None, level).unwrap();
            for &c in &rep.per_feature {
                assert!(c.abs() < 1e-10, "cov {c}");
            }
        }
    }

    #[test]
    fn oracle_weights_flatten_confounded_enumeration() {
        // the generator's finite (z, t) support with true-propensity weights:
        // raw covariance is material, weighted covariance collapses
        let opts = SyntheticOptions {
            n_clients: 1,
            n_per_client: 10,
            d_x: 8,
            seed: 45,
            strategy_scale: 1.5,
            ..SyntheticOptions::default()
        };
        let cfg = SyntheticConfig::draw(&opts).unwrap();
        let e = enumerate_client(&cfg, 0).unwrap();
        let n = e.t.len();
        let ds = ClientDataset::new(
            0,
            e.features.clone(),
            e.t.clone(),
            vec![0.0; n],
            None,
            None,
        )
        .unwrap();
        let clients = vec![ds];
        // raw: mass only
        let raw = vec![PatientWeights {
            client_id: 0,
            w: e.mass.clone(),
            unit_fallback: false,
        }];
        let raw_rep = weighted_cov(&clients, &raw, None, CovLevel::Local).unwrap();
        // weighted: mass times the oracle stabilized weight
        let weighted = vec![PatientWeights {
            client_id: 0,
            w: e
                .mass
                .iter()
                .zip(&e.t)
                .zip(&e.propensity)
                .map(|((&m, &t), &p)| m * stabilized_weight(e.mean_t, t == 1.0, p))
                .collect(),
            unit_fallback: false,
        }];
        let w_rep = weighted_cov(&clients, &weighted, None, CovLevel::Local).unwrap();
        assert!(
            raw_rep.summary > 1e-3,
            "confounding too weak to test: {}",
            raw_rep.summary
        );
        for &c in &w_rep.per_feature {
            assert!(c.abs() < 1e-10, "weighted cov {c}");
        }
        assert!(w_rep.summary < raw_rep.summary * 1e-6);
    }

    #[test]
    fn covariance_invariant_to_relabeling_and_permutation() {
        let opts = SyntheticOptions {
            n_clients: 3,
            n_per_client: 40,
            d_x: 3,
            seed: 46,
            ..SyntheticOptions::default()
        };
        let cfg = SyntheticConfig::draw(&opts).unwrap();
        let clients = crate::datagen::generate_synthetic(&cfg).unwrap();
        let pw = unit_weights_for(&clients);
        let a = weighted_cov(&clients, &pw, None, CovLevel::Global).unwrap();
        // relabel clients (reverse order)
        let rev: Vec<ClientDataset> = clients.iter().rev().cloned().collect();
        let pw_rev = unit_weights_for(&rev);
        let b = weighted_cov(&rev, &pw_rev, None, CovLevel::Global).unwrap();
        for (x, y) in a.per_feature.iter().zip(&b.per_feature) {
            assert!((x - y).abs() < 1e-12);
        }
        // permute records within a client
        let mut permuted = clients.clone();
        let idx: Vec<usize> = (0..permuted[0].len()).rev().collect();
        permuted[0] = permuted[0].subset(&idx);
        let c = weighted_cov(&permuted, &pw, None, CovLevel::Global).unwrap();
        for (x, y) in a.per_feature.iter().zip(&c.per_feature) {
            assert!((x - y).abs() < 1e-12);
        }
        let al = weighted_cov(&clients, &pw, None, CovLevel::Local).unwrap();
        let cl = weighted_cov(&permuted, &pw, None, CovLevel::Local).unwrap();
        assert!((al.summary - cl.summary).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_sum_is_an_error() {
        let opts = SyntheticOptions {
            n_clients: 1,
            n_per_client: 10,
            d_x: 2,
            seed: 47,
            ..SyntheticOptions::default()
        };
        let cfg = SyntheticConfig::draw(&opts).unwrap();
        let clients = crate::datagen::generate_synthetic(&cfg).unwrap();
        let zero = vec![PatientWeights {
            client_id: 0,
            w: vec![0.0; clients[0].len()],
            unit_fallback: false,
        }];
        assert!(weighted_cov(&clients, &zero, None, CovLevel::Local).is_err());
        assert!(weighted_cov(&clients, &zero, None, CovLevel::Global).is_err());
    }
}

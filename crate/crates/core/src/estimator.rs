//! Unsupervised training of the coarse-stage estimator.
//!
//! Pseudo-targets come from scoring the corpus once with the initial
//! weights, min-max normalizing the scores and cutting them at the 1/3 and
//! 2/3 ranks. The estimator regresses its (equally normalized) score onto
//! the frozen targets, and a hinge routing term pulls the thresholds so that
//! each entry lands in its pseudo-label's interval.
//!
//! The routing term is a reconstruction: regression alone never produces a
//! gradient on the threshold variables `(a, b)`.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::complexity::{
    assign_granularity, fuse_score, sigmoid, softmax3, ComplexityFeatures, EstimatorParams, Granularity,
};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("corpus has {0} entries, at least 3 are required")]
    CorpusTooSmall(usize),
    #[error("all corpus scores are identical; quantiles are degenerate")]
    DegenerateQuantiles { fallback: Box<PseudoTargets> },
    #[error("duplicate corpus id {0:?}")]
    DuplicateId(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss at entry {id:?}")]
    NonFiniteLoss { id: String },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize, trace: Vec<TraceRow> },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

/// Feature vectors of the training images, computed once.
#[derive(Debug, Clone, Default)]
pub struct ComplexityCorpus {
    ids: Vec<String>,
    features: Vec<ComplexityFeatures>,
}

impl ComplexityCorpus {
    pub fn new(entries: Vec<(String, ComplexityFeatures)>) -> Result<Self, EstimatorError> {
        let mut seen = std::collections::HashSet::new();
        let mut corpus = Self::default();
        for (id, f) in entries {
            if !seen.insert(id.clone()) {
                return Err(EstimatorError::DuplicateId(id));
            }
            corpus.ids.push(id);
            corpus.features.push(f);
        }
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn features(&self) -> &[ComplexityFeatures] {
        &self.features
    }
}

/// Frozen regression targets and pseudo granularity labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoTargets {
    /// Normalized initial scores in `[0, 1]`.
    pub targets: Vec<f64>,
    pub labels: Vec<Granularity>,
    pub q1: f64,
    pub q2: f64,
    /// Min and max of the raw initial scores; the same affine map is applied
    /// to predictions before regression.
    pub score_min: f64,
    pub score_max: f64,
}

impl PseudoTargets {
    pub fn normalize(&self, score: f64) -> f64 {
        let span = self.score_max - self.score_min;
        if span > 0.0 {
            (score - self.score_min) / span
        } else {
            0.5
        }
    }

    fn norm_slope(&self) -> f64 {
        let span = self.score_max - self.score_min;
        if span > 0.0 {
            1.0 / span
        } else {
            0.0
        }
    }

    pub fn bucket_sizes(&self) -> [usize; 3] {
        let mut sizes = [0; 3];
        for l in &self.labels {
            sizes[l.index()] += 1;
        }
        sizes
    }
}

/// Quantile cut of normalized scores: ranks `N/3` and `2N/3` of the sorted
/// values become `q1` and `q2`.
pub fn quantile_labels(normalized: &[f64]) -> (f64, f64, Vec<Granularity>) {
    let mut sorted = normalized.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let (q1, q2) = (sorted[n / 3], sorted[2 * n / 3]);
    let labels = normalized
        .iter()
        .map(|&s| {
            if s < q1 {
                Granularity::Coarse
            } else if s < q2 {
                Granularity::Medium
            } else {
                Granularity::Fine
            }
        })
        .collect();
    (q1, q2, labels)
}

pub fn compute_quantile_targets(
    corpus: &ComplexityCorpus,
    init: &EstimatorParams,
) -> Result<PseudoTargets, EstimatorError> {
    if corpus.len() < 3 {
        return Err(EstimatorError::CorpusTooSmall(corpus.len()));
    }
    let raw: Vec<f64> = corpus.features.iter().map(|f| fuse_score(f, init)).collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        let fallback = PseudoTargets {
            targets: vec![0.5; raw.len()],
            labels: vec![Granularity::Medium; raw.len()],
            q1: 0.5,
            q2: 0.5,
            score_min: lo,
            score_max: hi,
        };
        return Err(EstimatorError::DegenerateQuantiles { fallback: Box::new(fallback) });
    }
    let targets: Vec<f64> = raw.iter().map(|s| (s - lo) / (hi - lo)).collect();
    let (q1, q2, labels) = quantile_labels(&targets);
    Ok(PseudoTargets {
        targets,
        labels,
        q1,
        q2,
        score_min: lo,
        score_max: hi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub margin: f64,
    pub routing_weight: f64,
    pub seed: u64,
}

impl CoarseTrainConfig {
    /// Large-corpus recipe: lr 1e-3, batch 64, 15 epochs.
    pub fn large_corpus() -> Self {
        Self {
            lr: 1e-3,
            batch: 64,
            epochs: 15,
            margin: 0.05,
            routing_weight: 0.1,
            seed: 0,
        }
    }

    /// A few hundred images give only ~5 steps per epoch, so the step size is
    /// raised to let the thresholds travel within 15 epochs.
    pub fn desk() -> Self {
        Self { lr: 0.05, ..Self::large_corpus() }
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(EstimatorError::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(EstimatorError::InvalidConfig("batch must be >= 1".into()));
        }
        if !(self.margin >= 0.0 && self.routing_weight >= 0.0) {
            return Err(EstimatorError::InvalidConfig("margin and routing weight must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for CoarseTrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Hinge penalty for one score against the interval of its label, plus its
/// partial derivatives with respect to `(score, alpha, beta)`.
pub fn routing_hinge(score: f64, label: Granularity, alpha: f64, beta: f64, margin: f64) -> (f64, [f64; 3]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 3];
    let upper = |loss: &mut f64, grad: &mut [f64; 3], bound: f64, which: usize| {
        // penalize score above `bound - margin`
        let v = score - (bound - margin);
        if v > 0.0 {
            *loss += v;
            grad[0] += 1.0;
            grad[which] -= 1.0;
        }
    };
    let lower = |loss: &mut f64, grad: &mut [f64; 3], bound: f64, which: usize| {
        let v = (bound + margin) - score;
        if v > 0.0 {
            *loss += v;
            grad[0] -= 1.0;
            grad[which] += 1.0;
        }
    };
    match label {
        Granularity::Coarse => upper(&mut loss, &mut grad, alpha, 1),
        Granularity::Medium => {
            lower(&mut loss, &mut grad, alpha, 1);
            upper(&mut loss, &mut grad, beta, 2);
        }
        Granularity::Fine => lower(&mut loss, &mut grad, beta, 2),
    }
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub routing: f64,
    pub grad: [f64; 5],
}

/// Combined loss over `batch` (corpus indices) and its exact gradient on
/// `[w0, w1, w2, a, b]`.
pub fn coarse_loss(
    params: &EstimatorParams,
    corpus: &ComplexityCorpus,
    batch: &[usize],
    targets: &PseudoTargets,
    cfg: &CoarseTrainConfig,
) -> Result<LossBreakdown, EstimatorError> {
    if batch.is_empty() {
        return Err(EstimatorError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let soft = softmax3(&params.w);
    let sa = sigmoid(params.a);
    let sb = sigmoid(params.b);
    let alpha = sa;
    let beta = sa + (1.0 - sa) * sb;
    let dalpha_da = sa * (1.0 - sa);
    let dbeta_da = (1.0 - sb) * dalpha_da;
    let dbeta_db = (1.0 - sa) * sb * (1.0 - sb);
    let slope = targets.norm_slope();

    let (mut mse, mut routing) = (0.0, 0.0);
    let mut grad = [0.0; 5];
    for &i in batch {
        let v = corpus.features[i].as_array();
        let z: f64 = (0..3).map(|k| soft[k] * v[k]).sum();
        let phi = sigmoid(z);
        let err = targets.normalize(phi) - targets.targets[i];
        let (hinge, hg) = routing_hinge(phi, targets.labels[i], alpha, beta, cfg.margin);
        let sample = err * err + cfg.routing_weight * hinge;
        if !sample.is_finite() {
            return Err(EstimatorError::NonFiniteLoss { id: corpus.ids[i].clone() });
        }
        mse += err * err;
        routing += hinge;

        let dl_dphi = 2.0 * err * slope + cfg.routing_weight * hg[0];
        let dl_dz = dl_dphi * phi * (1.0 - phi);
        for j in 0..3 {
            // d softmax_k / d w_j = s_k (delta_kj - s_j)  =>  dz/dw_j = s_j (v_j - z)
            grad[j] += dl_dz * soft[j] * (v[j] - z);
        }
        let dl_dalpha = cfg.routing_weight * hg[1];
        let dl_dbeta = cfg.routing_weight * hg[2];
        grad[3] += dl_dalpha * dalpha_da + dl_dbeta * dbeta_da;
        grad[4] += dl_dbeta * dbeta_db;
    }
    grad.iter_mut().for_each(|g| *g /= n);
    mse /= n;
    routing /= n;
    Ok(LossBreakdown {
        total: mse + cfg.routing_weight * routing,
        mse,
        routing,
        grad,
    })
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "adam: parameter count mismatch");
        assert_eq!(grads.len(), self.m.len(), "adam: gradient count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Per-epoch record. Row 0 is the state before any update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub loss: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Trace as CSV: `epoch,loss,alpha,beta`.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("epoch,loss,alpha,beta\n");
    for r in trace {
        writeln!(out, "{},{},{},{}", r.epoch, r.loss, r.alpha, r.beta).unwrap();
    }
    out
}

/// Fraction of corpus entries whose assigned granularity matches the
/// pseudo-label.
pub fn routing_agreement(params: &EstimatorParams, corpus: &ComplexityCorpus, targets: &PseudoTargets) -> f64 {
    let th = params.thresholds();
    let hits = corpus
        .features
        .iter()
        .zip(&targets.labels)
        .filter(|(f, &l)| assign_granularity(fuse_score(f, params), &th) == l)
        .count();
    hits as f64 / corpus.len().max(1) as f64
}

pub fn train_estimator(
    corpus: &ComplexityCorpus,
    targets: &PseudoTargets,
    init: EstimatorParams,
    cfg: &CoarseTrainConfig,
) -> Result<(EstimatorParams, Vec<TraceRow>), EstimatorError> {
    cfg.validate()?;
    let all: Vec<usize> = (0..corpus.len()).collect();
    let mut params = init;
    let snapshot = |p: &EstimatorParams, epoch: usize| -> Result<TraceRow, EstimatorError> {
        let loss = coarse_loss(p, corpus, &all, targets, cfg)?.total;
        let th = p.thresholds();
        Ok(TraceRow { epoch, loss, alpha: th.alpha, beta: th.beta })
    };
    let mut trace = vec![snapshot(&params, 0)?];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(5, cfg.lr);
    let mut order = all.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch) {
            let out = match coarse_loss(&params, corpus, batch, targets, cfg) {
                Ok(out) => out,
                Err(EstimatorError::NonFiniteLoss { .. }) => return Err(EstimatorError::Diverged { epoch, trace }),
                Err(e) => return Err(e),
            };
            let mut flat = params.to_vec();
            adam.step(&mut flat, &out.grad);
            params = EstimatorParams::from_slice(&flat);
        }
        let row = snapshot(&params, epoch)?;
        if !row.loss.is_finite() || !params.is_finite() {
            return Err(EstimatorError::Diverged { epoch, trace });
        }
        trace.push(row);
    }
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus_of(features: &[[f64; 3]]) -> ComplexityCorpus {
        ComplexityCorpus::new(
            features
                .iter()
                .enumerate()
                .map(|(i, f)| (format!("img{i}"), ComplexityFeatures::new(f[0], f[1], f[2])))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn ten_distinct_scores_split_three_three_four() {
        let scores: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let (_, _, labels) = quantile_labels(&scores);
        let mut sizes = [0; 3];
        labels.iter().for_each(|l| sizes[l.index()] += 1);
        assert_eq!(sizes, [3, 3, 4]);
    }

    #[test]
    fn three_entries_one_per_bucket() {
        let c = corpus_of(&[[0.1, 0.1, 0.1], [0.5, 0.5, 0.5], [0.9, 0.9, 0.9]]);
        let t = compute_quantile_targets(&c, &EstimatorParams::default()).unwrap();
        assert_eq!(t.bucket_sizes(), [1, 1, 1]);
        assert_eq!(t.targets[0], 0.0);
        assert_eq!(t.targets[2], 1.0);
    }

    #[test]
    fn identical_scores_are_degenerate() {
        let c = corpus_of(&[[0.2, 0.2, 0.2]; 5]);
        match compute_quantile_targets(&c, &EstimatorParams::default()) {
            Err(EstimatorError::DegenerateQuantiles { fallback }) => {
                assert!(fallback.labels.iter().all(|&l| l == Granularity::Medium))
            }
            other => panic!("expected degenerate quantiles, got {other:?}"),
        }
        assert!(matches!(
            compute_quantile_targets(&corpus_of(&[[0.0; 3]; 2]), &EstimatorParams::default()),
            Err(EstimatorError::CorpusTooSmall(2))
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = ComplexityFeatures::new(0.0, 0.0, 0.0);
        assert!(ComplexityCorpus::new(vec![("a".into(), f), ("a".into(), f)]).is_err());
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_gradient() {
        let c = corpus_of(&[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9]]);
        let p = EstimatorParams::default();
        let mut t = compute_quantile_targets(&c, &p).unwrap();
        // thresholds far enough from every score that margins hold
        let scores: Vec<f64> = c.features().iter().map(|f| fuse_score(f, &p)).collect();
        let alpha = (scores[0] + scores[1]) / 2.0;
        let beta = (scores[1] + scores[2]) / 2.0;
        let p = p.with_thresholds(alpha, beta);
        t.labels = vec![Granularity::Coarse, Granularity::Medium, Granularity::Fine];
        let cfg = CoarseTrainConfig { margin: 0.001, ..CoarseTrainConfig::desk() };
        let out = coarse_loss(&p, &c, &[0, 1, 2], &t, &cfg).unwrap();
        assert_eq!(out.total, 0.0);
        assert!(out.grad.iter().all(|&g| g.abs() < 1e-15), "{:?}", out.grad);
    }

    #[test]
    fn pure_mse_matches_hand_computation() {
        let c = corpus_of(&[[0.0, 0.0, 0.0], [0.3, 0.6, 0.9]]);
        let t = PseudoTargets {
            targets: vec![0.25, 0.75],
            labels: vec![Granularity::Coarse, Granularity::Fine],
            q1: 0.5,
            q2: 0.5,
            score_min: 0.0,
            score_max: 1.0,
        };
        let cfg = CoarseTrainConfig { routing_weight: 0.0, ..CoarseTrainConfig::desk() };
        let out = coarse_loss(&EstimatorParams::default(), &c, &[0, 1], &t, &cfg).unwrap();
        // predictions sigma(0) = 0.5 and sigma(0.6)
        let p1 = 1.0 / (1.0 + (-0.6f64).exp());
        let expect = ((0.5 - 0.25f64).powi(2) + (p1 - 0.75).powi(2)) / 2.0;
        assert!((out.total - expect).abs() < 1e-15);
        assert_eq!(out.grad[3], 0.0);
        assert_eq!(out.grad[4], 0.0);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let c = corpus_of(&[[0.1; 3], [0.2; 3], [0.3; 3]]);
        let t = compute_quantile_targets(&c, &EstimatorParams::default()).unwrap();
        assert!(matches!(
            coarse_loss(&EstimatorParams::default(), &c, &[], &t, &CoarseTrainConfig::desk()),
            Err(EstimatorError::EmptyBatch)
        ));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut st = AdamState::new(2, 0.1);
        let mut p = [1.0, -2.0];
        st.step(&mut p, &[0.0, 0.0]);
        assert_eq!(p, [1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut st = AdamState::new(1, 1e-3);
        let mut p = [0.5];
        let g = 0.2;
        st.step(&mut p, &[g]);
        // m_hat = g, v_hat = g^2  =>  delta = -lr * g / (|g| + eps)
        let expect = 0.5 - 1e-3 * g / (g.abs() + 1e-8);
        assert!((p[0] - expect).abs() < 1e-16);
    }

    #[test]
    fn adam_is_stateful() {
        let mut a = AdamState::new(1, 0.01);
        let mut pa = [0.0];
        a.step(&mut pa, &[1.0]);
        a.step(&mut pa, &[1.0]);
        let mut b = AdamState::new(1, 0.02);
        let mut pb = [0.0];
        b.step(&mut pb, &[1.0]);
        assert_ne!(pa[0], pb[0]);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let c = corpus_of(&[[0.1; 3], [0.5; 3], [0.9; 3]]);
        let t = compute_quantile_targets(&c, &EstimatorParams::default()).unwrap();
        let init = EstimatorParams { w: [0.3, -0.1, 0.2], a: 0.1, b: -0.4 };
        let cfg = CoarseTrainConfig { epochs: 0, ..CoarseTrainConfig::desk() };
        let (p, trace) = train_estimator(&c, &t, init, &cfg).unwrap();
        assert_eq!(p, init);
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn trace_csv_layout() {
        let csv = trace_csv(&[TraceRow { epoch: 0, loss: 0.5, alpha: 0.5, beta: 0.75 }]);
        assert_eq!(csv, "epoch,loss,alpha,beta\n0,0.5,0.5,0.75\n");
    }
}

//! Training objectives: the prototype alignment (variation) loss, the
//! prototype separation loss, the hard-negative variant of the alignment
//! denominator, the cross-entropy baseline, and analytic gradients for all of
//! them.
//!
//! Every log-sum-exp here subtracts the max before exponentiating; at
//! tau = 0.1 the raw exponents reach magnitude 20 and would otherwise lose
//! precision.

use ndarray::Array1;

use crate::error::{HypoError, Result};
use crate::geometry::UnitVector;
use crate::model::{
    normalize_backward, EncoderGrads, ForwardTrace, MlpEncoder, PrototypeBank, PrototypeMode,
};

/// Weights and toggles of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Temperature tau (inverse vMF concentration).
    pub tau: f64,
    /// Weight on the variation term; the separation term has weight 1.
    pub lambda: f64,
    /// Add same-environment different-class embedding terms to the
    /// variation denominator.
    pub hard_negatives: bool,
    /// Include the separation term in the total.
    pub separation_enabled: bool,
}

impl LossConfig {
    pub fn new(tau: f64, lambda: f64, hard_negatives: bool, separation_enabled: bool) -> Result<Self> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(HypoError::InvalidConfig(format!("tau must be > 0, got {tau}")));
        }
        if lambda <= 0.0 || !lambda.is_finite() {
            return Err(HypoError::InvalidConfig(format!(
                "lambda must be > 0, got {lambda}"
            )));
        }
        Ok(LossConfig {
            tau,
            lambda,
            hard_negatives,
            separation_enabled,
        })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            lambda: 1.0,
            hard_negatives: false,
            separation_enabled: true,
        }
    }
}

/// A batch of embedded samples: parallel arrays of embeddings, class labels,
/// and environment ids.
#[derive(Debug, Clone)]
pub struct Batch {
    pub embeddings: Vec<UnitVector>,
    pub labels: Vec<usize>,
    pub env_ids: Vec<usize>,
}

impl Batch {
    pub fn new(embeddings: Vec<UnitVector>, labels: Vec<usize>, env_ids: Vec<usize>) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(HypoError::InvalidConfig("empty batch".into()));
        }
        if embeddings.len() != labels.len() || labels.len() != env_ids.len() {
            return Err(HypoError::DimensionMismatch(format!(
                "batch arrays disagree: {} embeddings, {} labels, {} env ids",
                embeddings.len(),
                labels.len(),
                env_ids.len()
            )));
        }
        Ok(Batch {
            embeddings,
            labels,
            env_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Raw-coordinate variation loss used by both the public API and the
/// finite-difference harness (which must evaluate at slightly off-sphere
/// prototypes).
pub(crate) fn variation_loss_raw(
    embeddings: &[Array1<f64>],
    labels: &[usize],
    env_ids: &[usize],
    prototypes: &[Array1<f64>],
    tau: f64,
    hard_negatives: bool,
) -> f64 {
    let n = embeddings.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut scores: Vec<f64> = prototypes.iter().map(|mu| embeddings[i].dot(mu) / tau).collect();
        let aligned = scores[labels[i]];
        if hard_negatives {
            for k in 0..n {
                if labels[k] != labels[i] && env_ids[k] == env_ids[i] {
                    scores.push(embeddings[i].dot(&embeddings[k]) / tau);
                }
            }
        }
        total += logsumexp(&scores) - aligned;
    }
    total / n as f64
}

/// Mean negative log posterior of the true class: the alignment term of the
/// objective. Always >= 0.
pub fn variation_loss(batch: &Batch, bank: &PrototypeBank, cfg: &LossConfig) -> f64 {
    let coords: Vec<Array1<f64>> = batch.embeddings.iter().map(|z| z.coords().clone()).collect();
    let protos: Vec<Array1<f64>> = bank.rows().iter().map(|m| m.coords().clone()).collect();
    variation_loss_raw(&coords, &batch.labels, &batch.env_ids, &protos, cfg.tau, false)
}

/// Variation loss whose denominator also carries same-environment,
/// different-class sample pairs. Always >= the plain variation loss: the
/// denominator only grows.
pub fn hard_negative_variation_loss(batch: &Batch, bank: &PrototypeBank, cfg: &LossConfig) -> f64 {
    let coords: Vec<Array1<f64>> = batch.embeddings.iter().map(|z| z.coords().clone()).collect();
    let protos: Vec<Array1<f64>> = bank.rows().iter().map(|m| m.coords().clone()).collect();
    variation_loss_raw(&coords, &batch.labels, &batch.env_ids, &protos, cfg.tau, true)
}

pub(crate) fn separation_loss_raw(prototypes: &[Array1<f64>], tau: f64) -> f64 {
    let c = prototypes.len();
    let mut total = 0.0;
    for i in 0..c {
        let scores: Vec<f64> = (0..c)
            .filter(|&j| j != i)
            .map(|j| prototypes[i].dot(&prototypes[j]) / tau)
            .collect();
        // log of the mean over the C-1 rivals.
        total += logsumexp(&scores) - ((c - 1) as f64).ln();
    }
    total / c as f64
}

/// Average log-mean-exp of pairwise prototype similarities; minimizing it
/// spreads the prototypes apart. Bounded by [-1/tau, 1/tau].
pub fn separation_loss(bank: &PrototypeBank, cfg: &LossConfig) -> f64 {
    let protos: Vec<Array1<f64>> = bank.rows().iter().map(|m| m.coords().clone()).collect();
    separation_loss_raw(&protos, cfg.tau)
}

/// lambda * variation (hard-negative variant when configured) plus the
/// separation term when enabled.
pub fn total_loss(batch: &Batch, bank: &PrototypeBank, cfg: &LossConfig) -> f64 {
    let var = if cfg.hard_negatives {
        hard_negative_variation_loss(batch, bank, cfg)
    } else {
        variation_loss(batch, bank, cfg)
    };
    let sep = if cfg.separation_enabled {
        separation_loss(bank, cfg)
    } else {
        0.0
    };
    cfg.lambda * var + sep
}

/// Mean negative log-softmax at the true label, over per-sample logit rows.
pub fn cross_entropy_baseline(logits: &[Array1<f64>], labels: &[usize]) -> f64 {
    assert_eq!(logits.len(), labels.len());
    assert!(!logits.is_empty());
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let scores: Vec<f64> = row.to_vec();
        total += logsumexp(&scores) - row[y];
    }
    total / logits.len() as f64
}

/// Cross-entropy value together with dL/dlogits (softmax minus one-hot,
/// averaged over the batch).
pub fn cross_entropy_with_grads(
    logits: &[Array1<f64>],
    labels: &[usize],
) -> (f64, Vec<Array1<f64>>) {
    let n = logits.len() as f64;
    let mut grads = Vec::with_capacity(logits.len());
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let scores: Vec<f64> = row.to_vec();
        let lse = logsumexp(&scores);
        total += lse - row[y];
        let mut g = row.mapv(|v| ((v - lse).exp()) / n);
        g[y] -= 1.0 / n;
        grads.push(g);
    }
    (total / n, grads)
}

/// Gradients of the total objective.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub encoder: EncoderGrads,
    /// Ambient-space prototype gradients; present only in learnable mode.
    /// In EMA mode prototypes are stop-gradient constants.
    pub prototypes: Option<Vec<Array1<f64>>>,
}

/// Gradients for the linear classification head of the baseline.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub weights: ndarray::Array2<f64>,
    pub biases: Array1<f64>,
}

/// Cross-entropy loss and gradients for the baseline: a linear head on the
/// raw (unnormalized) encoder output. Returns (loss, encoder grads, head grads).
pub fn cross_entropy_backward(
    encoder: &MlpEncoder,
    head: &crate::model::LinearHead,
    traces: &[ForwardTrace],
    labels: &[usize],
) -> (f64, EncoderGrads, HeadGrads) {
    assert_eq!(traces.len(), labels.len());
    let hs: Vec<Array1<f64>> = traces.iter().map(|t| t.raw_output().coords).collect();
    let logits: Vec<Array1<f64>> = hs.iter().map(|h| head.logits(h)).collect();
    let (loss, dlogits) = cross_entropy_with_grads(&logits, labels);
    let mut enc_grads = EncoderGrads::zeros_like(encoder);
    let mut head_grads = HeadGrads {
        weights: ndarray::Array2::zeros(head.weights.raw_dim()),
        biases: Array1::zeros(head.biases.raw_dim()),
    };
    for i in 0..traces.len() {
        for (c, dc) in dlogits[i].iter().enumerate() {
            head_grads.biases[c] += dc;
            for (j, hj) in hs[i].iter().enumerate() {
                head_grads.weights[(c, j)] += dc * hj;
            }
        }
        let dh = head.weights.t().dot(&dlogits[i]);
        encoder.backprop(&traces[i], &dh, &mut enc_grads);
    }
    (loss, enc_grads, head_grads)
}

/// dL_var/dz per sample and dL_var/dmu per prototype, unscaled by lambda.
/// Includes the cross terms that hard negatives introduce between samples.
fn variation_embedding_grads(
    batch: &Batch,
    bank: &PrototypeBank,
    tau: f64,
    hard_negatives: bool,
) -> (Vec<Array1<f64>>, Vec<Array1<f64>>) {
    let n = batch.len();
    let c = bank.num_classes();
    let d = bank.dim();
    let inv_n = 1.0 / n as f64;
    let mut dz: Vec<Array1<f64>> = vec![Array1::zeros(d); n];
    let mut dmu: Vec<Array1<f64>> = vec![Array1::zeros(d); c];

    for i in 0..n {
        let zi = &batch.embeddings[i];
        let yi = batch.labels[i];
        let mut scores: Vec<f64> = bank.rows().iter().map(|mu| zi.dot(mu) / tau).collect();
        let mut hard_idx: Vec<usize> = Vec::new();
        if hard_negatives {
            for k in 0..n {
                if batch.labels[k] != yi && batch.env_ids[k] == batch.env_ids[i] {
                    scores.push(zi.dot(&batch.embeddings[k]) / tau);
                    hard_idx.push(k);
                }
            }
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let denom: f64 = exps.iter().sum();

        // d l_i / d z_i = (-mu_{y_i} + sum_j w_ij mu_j + sum_k v_ik z_k) / tau
        let mut gz = -bank.row(yi).coords().clone();
        for (j, w) in exps.iter().take(c).enumerate() {
            let wj = w / denom;
            gz = gz + bank.row(j).coords() * wj;
            // d l_i / d mu_j = (w_ij - 1[j = y_i]) z_i / tau
            let coef = (wj - if j == yi { 1.0 } else { 0.0 }) / tau * inv_n;
            dmu[j] = &dmu[j] + &(zi.coords() * coef);
        }
        for (slot, &k) in hard_idx.iter().enumerate() {
            let v = exps[c + slot] / denom;
            gz = gz + batch.embeddings[k].coords() * v;
            // Cross term: z_i appears in l_i's denominator paired with z_k.
            dz[k] = &dz[k] + &(zi.coords() * (v / tau * inv_n));
        }
        dz[i] = &dz[i] + &(gz / tau * inv_n);
    }
    (dz, dmu)
}

/// dL_sep/dmu per prototype, on raw coordinate rows.
pub(crate) fn separation_prototype_grads_raw(
    protos: &[Array1<f64>],
    tau: f64,
) -> Vec<Array1<f64>> {
    let c = protos.len();
    let d = protos[0].len();
    let inv_c = 1.0 / c as f64;
    // Row-stochastic weights q[i][j] = softmax_j(mu_i . mu_j / tau), j != i.
    let mut q = vec![vec![0.0; c]; c];
    for i in 0..c {
        let scores: Vec<f64> = (0..c)
            .map(|j| {
                if j == i {
                    f64::NEG_INFINITY
                } else {
                    protos[i].dot(&protos[j]) / tau
                }
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for j in 0..c {
            q[i][j] = exps[j] / denom;
        }
    }
    let mut dmu: Vec<Array1<f64>> = vec![Array1::zeros(d); c];
    for k in 0..c {
        let mut g = Array1::zeros(d);
        for j in 0..c {
            if j != k {
                g = g + &protos[j] * q[k][j];
            }
        }
        for i in 0..c {
            if i != k {
                g = g + &protos[i] * q[i][k];
            }
        }
        dmu[k] = g * (inv_c / tau);
    }
    dmu
}

/// dL_sep/dmu per prototype.
fn separation_prototype_grads(bank: &PrototypeBank, tau: f64) -> Vec<Array1<f64>> {
    let protos: Vec<Array1<f64>> = bank.rows().iter().map(|m| m.coords().clone()).collect();
    separation_prototype_grads_raw(&protos, tau)
}

/// Analytic gradient of [`total_loss`] for all encoder parameters, and for
/// the prototypes in learnable mode.
///
/// `traces` must be the forward traces that produced `batch.embeddings`, in
/// the same order. The normalization layer contributes the Jacobian
/// (I - z z^T)/||h|| between the embedding-space gradients and the encoder.
/// Per-sample contributions are reduced in index order so results are
/// bit-stable.
pub fn backward(
    batch: &Batch,
    bank: &PrototypeBank,
    cfg: &LossConfig,
    traces: &[ForwardTrace],
    encoder: &MlpEncoder,
) -> LossGrads {
    assert_eq!(
        traces.len(),
        batch.len(),
        "traces must correspond to batch embeddings"
    );
    let (dz, dmu_var) = variation_embedding_grads(batch, bank, cfg.tau, cfg.hard_negatives);
    let mut grads = EncoderGrads::zeros_like(encoder);
    for i in 0..batch.len() {
        let raw = traces[i].raw_output();
        let g_h = normalize_backward(raw.norm(), &batch.embeddings[i], &(&dz[i] * cfg.lambda));
        encoder.backprop(&traces[i], &g_h, &mut grads);
    }
    let prototypes = match bank.mode() {
        PrototypeMode::Ema => None,
        PrototypeMode::Learnable => {
            let mut dmu: Vec<Array1<f64>> =
                dmu_var.into_iter().map(|g| g * cfg.lambda).collect();
            if cfg.separation_enabled {
                for (acc, g) in dmu.iter_mut().zip(separation_prototype_grads(bank, cfg.tau)) {
                    *acc = &*acc + &g;
                }
            }
            Some(dmu)
        }
    };
    LossGrads {
        encoder: grads,
        prototypes,
    }
}

//! Central finite-difference verification of every analytic gradient in the
//! crate, on self-contained randomized instances.
//!
//! The finite-difference side re-evaluates the loss end to end through the
//! forward path only; it shares no code with `loss::backward`, so agreement
//! between the two is evidence that the hand-derived gradients are right.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::loss::{
    self, cross_entropy_backward, cross_entropy_with_grads, separation_loss_raw,
    variation_loss_raw, Batch, LossConfig,
};
use crate::model::{LinearHead, MlpEncoder, PrototypeBank, PrototypeMode};

/// Central-difference step. 1e-6 balances truncation against cancellation in
/// double precision for losses of magnitude O(10).
pub const FD_STEP: f64 = 1e-6;

/// Threshold on the relative error, with denominator max(1, |g|).
pub const REL_TOL: f64 = 1e-5;

/// Which objective an instance differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckTarget {
    /// lambda * variation (+ optional hard negatives) + optional separation.
    Hypo,
    /// Cross-entropy through the linear head on raw encoder outputs.
    CrossEntropy,
}

/// One randomized gradient-check instance.
#[derive(Debug, Clone)]
pub struct CheckSpec {
    pub target: CheckTarget,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub tau: f64,
    pub lambda: f64,
    pub hard_negatives: bool,
    pub separation_enabled: bool,
    pub prototype_mode: PrototypeMode,
    pub seed: u64,
}

impl CheckSpec {
    pub fn hypo(num_classes: usize, embed_dim: usize, tau: f64, seed: u64) -> Self {
        CheckSpec {
            target: CheckTarget::Hypo,
            num_classes,
            embed_dim,
            tau,
            lambda: 1.0,
            hard_negatives: false,
            separation_enabled: true,
            prototype_mode: PrototypeMode::Learnable,
            seed,
        }
    }

    pub fn cross_entropy(num_classes: usize, embed_dim: usize, seed: u64) -> Self {
        CheckSpec {
            target: CheckTarget::CrossEntropy,
            num_classes,
            embed_dim,
            tau: 1.0,
            lambda: 1.0,
            hard_negatives: false,
            separation_enabled: false,
            prototype_mode: PrototypeMode::Ema,
            seed,
        }
    }
}

/// Outcome of one instance: the worst relative error over every parameter.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub params_checked: usize,
    pub worst_param: String,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }

    fn absorb(&mut self, rel: f64, label: impl FnOnce() -> String) {
        self.params_checked += 1;
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst_param = label();
        }
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs().max(numeric.abs()))
}

const INPUT_DIM: usize = 5;
const HIDDEN_DIM: usize = 7;
const BATCH: usize = 8;
const NUM_ENVS: usize = 2;

/// Margin keeping rectifier pre-activations away from their kink, where the
/// loss is not differentiable and finite differences are meaningless.
const KINK_MARGIN: f64 = 1e-3;

struct Instance {
    encoder: MlpEncoder,
    bank: PrototypeBank,
    head: LinearHead,
    xs: Vec<Array1<f64>>,
    labels: Vec<usize>,
    env_ids: Vec<usize>,
}

fn build_instance(spec: &CheckSpec) -> Instance {
    // Resample until no hidden unit sits near its rectifier kink for any
    // batch input; bounded retries keep determinism per seed.
    for attempt in 0..64u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1000).wrapping_add(attempt));
        let encoder =
            MlpEncoder::new(&[INPUT_DIM, HIDDEN_DIM, spec.embed_dim], &mut rng).unwrap();
        let bank = PrototypeBank::init(
            spec.num_classes,
            spec.embed_dim,
            spec.prototype_mode,
            0.95,
            &mut rng,
        )
        .unwrap();
        let head = LinearHead::new(spec.num_classes, spec.embed_dim, &mut rng);
        let xs: Vec<Array1<f64>> = (0..BATCH)
            .map(|_| Array1::from_iter((0..INPUT_DIM).map(|_| rng.sample::<f64, _>(StandardNormal))))
            .collect();
        let mut labels: Vec<usize> = (0..BATCH)
            .map(|_| rng.random_range(0..spec.num_classes))
            .collect();
        let mut env_ids: Vec<usize> = (0..BATCH).map(|_| rng.random_range(0..NUM_ENVS)).collect();
        // Guarantee at least one same-environment, different-class pair so
        // the hard-negative path is actually exercised.
        labels[0] = 0;
        labels[1] = 1 % spec.num_classes.max(2);
        env_ids[0] = 0;
        env_ids[1] = 0;

        let clear_of_kinks = xs.iter().all(|x| {
            let trace = encoder.forward(x).unwrap();
            trace.pre_activations[0].iter().all(|p| p.abs() > KINK_MARGIN)
                && trace.raw_output().norm() > 1e-3
        });
        if clear_of_kinks {
            return Instance {
                encoder,
                bank,
                head,
                xs,
                labels,
                env_ids,
            };
        }
    }
    panic!("could not build a kink-free instance for seed {}", spec.seed);
}

fn eval_hypo_loss(
    encoder: &MlpEncoder,
    protos: &[Array1<f64>],
    inst: &Instance,
    cfg: &LossConfig,
) -> f64 {
    let coords: Vec<Array1<f64>> = inst
        .xs
        .iter()
        .map(|x| encoder.embed(x).unwrap().0.coords().clone())
        .collect();
    let var = variation_loss_raw(
        &coords,
        &inst.labels,
        &inst.env_ids,
        protos,
        cfg.tau,
        cfg.hard_negatives,
    );
    let sep = if cfg.separation_enabled {
        separation_loss_raw(protos, cfg.tau)
    } else {
        0.0
    };
    cfg.lambda * var + sep
}

fn eval_ce_loss(encoder: &MlpEncoder, head: &LinearHead, inst: &Instance) -> f64 {
    let logits: Vec<Array1<f64>> = inst
        .xs
        .iter()
        .map(|x| head.logits(&encoder.forward(x).unwrap().raw_output().coords))
        .collect();
    let (loss, _) = cross_entropy_with_grads(&logits, &inst.labels);
    loss
}

/// Runs one instance: analytic gradients against central differences over
/// every encoder parameter, plus prototypes (learnable mode) or head
/// parameters (cross-entropy target).
pub fn run_check(spec: &CheckSpec) -> CheckReport {
    let inst = build_instance(spec);
    let mut report = CheckReport {
        max_rel_err: 0.0,
        params_checked: 0,
        worst_param: String::new(),
    };

    match spec.target {
        CheckTarget::Hypo => {
            let cfg = LossConfig::new(
                spec.tau,
                spec.lambda,
                spec.hard_negatives,
                spec.separation_enabled,
            )
            .unwrap();
            let mut zs = Vec::new();
            let mut traces = Vec::new();
            for x in &inst.xs {
                let (z, t) = inst.encoder.embed(x).unwrap();
                zs.push(z);
                traces.push(t);
            }
            let batch = Batch::new(zs, inst.labels.clone(), inst.env_ids.clone()).unwrap();
            let analytic = loss::backward(&batch, &inst.bank, &cfg, &traces, &inst.encoder);
            let protos: Vec<Array1<f64>> =
                inst.bank.rows().iter().map(|m| m.coords().clone()).collect();

            for l in 0..inst.encoder.num_layers() {
                let (rows, cols) = {
                    let s = inst.encoder.weights[l].shape();
                    (s[0], s[1])
                };
                for i in 0..rows {
                    for j in 0..cols {
                        let mut plus = inst.encoder.clone();
                        plus.weights[l][(i, j)] += FD_STEP;
                        let mut minus = inst.encoder.clone();
                        minus.weights[l][(i, j)] -= FD_STEP;
                        let fd = (eval_hypo_loss(&plus, &protos, &inst, &cfg)
                            - eval_hypo_loss(&minus, &protos, &inst, &cfg))
                            / (2.0 * FD_STEP);
                        let rel = rel_err(analytic.encoder.weights[l][(i, j)], fd);
                        report.absorb(rel, || format!("layer {l} weight ({i},{j})"));
                    }
                }
                for i in 0..rows {
                    let mut plus = inst.encoder.clone();
                    plus.biases[l][i] += FD_STEP;
                    let mut minus = inst.encoder.clone();
                    minus.biases[l][i] -= FD_STEP;
                    let fd = (eval_hypo_loss(&plus, &protos, &inst, &cfg)
                        - eval_hypo_loss(&minus, &protos, &inst, &cfg))
                        / (2.0 * FD_STEP);
                    let rel = rel_err(analytic.encoder.biases[l][i], fd);
                    report.absorb(rel, || format!("layer {l} bias ({i})"));
                }
            }

            if let Some(proto_grads) = &analytic.prototypes {
                for (c, g) in proto_grads.iter().enumerate() {
                    for k in 0..g.len() {
                        let mut plus = protos.clone();
                        plus[c][k] += FD_STEP;
                        let mut minus = protos.clone();
                        minus[c][k] -= FD_STEP;
                        let fd = (eval_hypo_loss(&inst.encoder, &plus, &inst, &cfg)
                            - eval_hypo_loss(&inst.encoder, &minus, &inst, &cfg))
                            / (2.0 * FD_STEP);
                        let rel = rel_err(g[k], fd);
                        report.absorb(rel, || format!("prototype {c} coord {k}"));
                    }
                }
            }
        }
        CheckTarget::CrossEntropy => {
            let traces: Vec<_> = inst
                .xs
                .iter()
                .map(|x| inst.encoder.forward(x).unwrap())
                .collect();
            let (_, enc_grads, head_grads) =
                cross_entropy_backward(&inst.encoder, &inst.head, &traces, &inst.labels);

            for l in 0..inst.encoder.num_layers() {
                let (rows, cols) = {
                    let s = inst.encoder.weights[l].shape();
                    (s[0], s[1])
                };
                for i in 0..rows {
                    for j in 0..cols {
                        let mut plus = inst.encoder.clone();
                        plus.weights[l][(i, j)] += FD_STEP;
                        let mut minus = inst.encoder.clone();
                        minus.weights[l][(i, j)] -= FD_STEP;
                        let fd = (eval_ce_loss(&plus, &inst.head, &inst)
                            - eval_ce_loss(&minus, &inst.head, &inst))
                            / (2.0 * FD_STEP);
                        let rel = rel_err(enc_grads.weights[l][(i, j)], fd);
                        report.absorb(rel, || format!("layer {l} weight ({i},{j})"));
                    }
                }
                for i in 0..rows {
                    let mut plus = inst.encoder.clone();
                    plus.biases[l][i] += FD_STEP;
                    let mut minus = inst.encoder.clone();
                    minus.biases[l][i] -= FD_STEP;
                    let fd = (eval_ce_loss(&plus, &inst.head, &inst)
                        - eval_ce_loss(&minus, &inst.head, &inst))
                        / (2.0 * FD_STEP);
                    let rel = rel_err(enc_grads.biases[l][i], fd);
                    report.absorb(rel, || format!("layer {l} bias ({i})"));
                }
            }
            for i in 0..inst.head.weights.nrows() {
                for j in 0..inst.head.weights.ncols() {
                    let mut plus = inst.head.clone();
                    plus.weights[(i, j)] += FD_STEP;
                    let mut minus = inst.head.clone();
                    minus.weights[(i, j)] -= FD_STEP;
                    let fd = (eval_ce_loss(&inst.encoder, &plus, &inst)
                        - eval_ce_loss(&inst.encoder, &minus, &inst))
                        / (2.0 * FD_STEP);
                    let rel = rel_err(head_grads.weights[(i, j)], fd);
                    report.absorb(rel, || format!("head weight ({i},{j})"));
                }
                let mut plus = inst.head.clone();
                plus.biases[i] += FD_STEP;
                let mut minus = inst.head.clone();
                minus.biases[i] -= FD_STEP;
                let fd = (eval_ce_loss(&inst.encoder, &plus, &inst)
                    - eval_ce_loss(&inst.encoder, &minus, &inst))
                    / (2.0 * FD_STEP);
                let rel = rel_err(head_grads.biases[i], fd);
                report.absorb(rel, || format!("head bias ({i})"));
            }
        }
    }
    report
}

/// The instance grid used by the acceptance suite and the CLI: every loss
/// variant across class counts {2,3,5}, embedding dims {3,8}, and
/// temperatures {0.1, 1}.
pub fn acceptance_grid(seeds: u64) -> Vec<CheckSpec> {
    let mut specs = Vec::new();
    let mut seed = 0u64;
    for s in 0..seeds {
        for &(c, d) in &[(2usize, 3usize), (3, 8), (5, 3), (3, 3), (5, 8)] {
            for &tau in &[0.1, 1.0] {
                let base = s.wrapping_mul(10_000).wrapping_add(seed);
                seed += 1;
                let mut plain = CheckSpec::hypo(c, d, tau, base);
                plain.lambda = if s % 2 == 0 { 1.0 } else { 2.0 };
                specs.push(plain.clone());
                let mut hard = plain.clone();
                hard.hard_negatives = true;
                hard.seed = base.wrapping_add(1);
                specs.push(hard);
                let mut ema = plain.clone();
                ema.prototype_mode = PrototypeMode::Ema;
                ema.seed = base.wrapping_add(2);
                specs.push(ema);
                specs.push(CheckSpec::cross_entropy(c, d, base.wrapping_add(3)));
            }
        }
    }
    specs
}

//! Executable verification of the provable structure behind the objective:
//! three inequalities that empirical embedding dumps must satisfy whenever
//! their premises hold, and the simplex-ETF optimality of the separation
//! loss.
//!
//! The verifiers instantiate each inequality's premise *from the dump itself*
//! (the alignment slack gamma is measured, never assumed), so a failure is an
//! implementation bug, not a property of the data. The proofs assume uniform
//! class/environment mass, so non-uniform cell sizes are rejected rather than
//! reweighted.

use std::collections::BTreeMap;

use ndarray::Array1;
use rand::Rng;
use serde::Serialize;

use crate::error::{HypoError, Result};
use crate::geometry::{self, RawVector, UnitVector};
use crate::loss;
use crate::metrics::{w1_1d, EmbeddingDump};
use crate::model::PrototypeBank;

/// Slack added to every inequality to absorb floating-point roundoff.
pub const PASS_TOL: f64 = 1e-12;

/// One checked inequality instance; the check is lhs <= rhs + PASS_TOL.
#[derive(Debug, Clone, Serialize)]
pub struct CellCheck {
    pub label: usize,
    pub env: usize,
    /// Second environment for pairwise checks; absent for per-cell checks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env_b: Option<usize>,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
}

/// Result of running one verifier over a dump.
#[derive(Debug, Clone, Serialize)]
pub struct LemmaReport {
    /// Measured alignment slack: 1 - mean true-class prototype similarity.
    pub gamma: f64,
    pub cells: Vec<CellCheck>,
    pub pass: bool,
}

impl LemmaReport {
    fn from_cells(gamma: f64, cells: Vec<CellCheck>) -> Self {
        let pass = cells.iter().all(|c| c.lhs <= c.rhs + PASS_TOL);
        LemmaReport { gamma, cells, pass }
    }
}

/// Groups sample indices by (environment, class), requiring equal cell sizes.
fn uniform_cells(dump: &EmbeddingDump) -> Result<BTreeMap<(usize, usize), Vec<usize>>> {
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, row) in dump.rows.iter().enumerate() {
        cells.entry((row.env, row.label)).or_default().push(i);
    }
    let min = cells.values().map(|v| v.len()).min().unwrap_or(0);
    let max = cells.values().map(|v| v.len()).max().unwrap_or(0);
    if min != max || min == 0 {
        return Err(HypoError::NonUniformCells { min, max });
    }
    Ok(cells)
}

/// gamma = 1 - (1/N) sum_j mu_{c(j)}^T z_j over the whole dump: the same
/// alignment slack the metrics module reports.
pub fn alignment_slack(dump: &EmbeddingDump, bank: &PrototypeBank) -> f64 {
    crate::metrics::epsilon_hat(dump, bank)
}

/// Per-cell alignment lower bound: if the global mean alignment is 1 - gamma
/// and cells carry uniform mass, every (environment, class) cell mean is at
/// least 1 - C*E*gamma.
pub fn verify_lemma_subclasses(dump: &EmbeddingDump, bank: &PrototypeBank) -> Result<LemmaReport> {
    let cells = uniform_cells(dump)?;
    let gamma = alignment_slack(dump, bank);
    let (c, e) = dump.class_env_counts();
    let bound = 1.0 - (c * e) as f64 * gamma;
    let mut checks = Vec::new();
    for ((env, label), idxs) in &cells {
        let mean: f64 = idxs
            .iter()
            .map(|&i| bank.row(*label).dot(&dump.rows[i].z))
            .sum::<f64>()
            / idxs.len() as f64;
        checks.push(CellCheck {
            label: *label,
            env: *env,
            env_b: None,
            lhs: bound,
            rhs: mean,
            margin: mean - bound,
        });
    }
    Ok(LemmaReport::from_cells(gamma, checks))
}

/// Tail bound on chord distance from a sample to its prototype: the fraction
/// of a cell with ||z - mu_y|| >= eta is at most 2*C*E*gamma / eta^2.
pub fn verify_lemma_markov(
    dump: &EmbeddingDump,
    bank: &PrototypeBank,
    eta: f64,
) -> Result<LemmaReport> {
    assert!(eta > 0.0, "eta must be positive");
    let cells = uniform_cells(dump)?;
    let gamma = alignment_slack(dump, bank);
    let (c, e) = dump.class_env_counts();
    let bound = 2.0 * (c * e) as f64 * gamma / (eta * eta);
    let mut checks = Vec::new();
    for ((env, label), idxs) in &cells {
        let exceed = idxs
            .iter()
            .filter(|&&i| {
                let diff = dump.rows[i].z.coords() - bank.row(*label).coords();
                diff.dot(&diff).sqrt() >= eta
            })
            .count();
        let frac = exceed as f64 / idxs.len() as f64;
        checks.push(CellCheck {
            label: *label,
            env: *env,
            env_b: None,
            lhs: frac,
            rhs: bound,
            margin: bound - frac,
        });
    }
    Ok(LemmaReport::from_cells(gamma, checks))
}

/// Projected Wasserstein bound: along any unit direction, the W1 distance
/// between two environments' class-conditional projections is at most
/// 10 * (C*E*gamma)^{1/3}. Checked over `directions` sampled unit vectors;
/// the reported lhs per (class, env pair) is the worst direction.
pub fn verify_lemma_wasserstein<R: Rng + ?Sized>(
    dump: &EmbeddingDump,
    bank: &PrototypeBank,
    directions: usize,
    rng: &mut R,
) -> Result<LemmaReport> {
    let cells = uniform_cells(dump)?;
    let gamma = alignment_slack(dump, bank);
    let (c, e) = dump.class_env_counts();
    let bound = 10.0 * ((c * e) as f64 * gamma).cbrt();
    let dim = dump.rows[0].z.dim();
    let betas: Vec<UnitVector> = (0..directions)
        .map(|_| geometry::random_unit_direction(dim, rng))
        .collect();

    let envs = dump.envs();
    let labels = dump.labels();
    let mut checks = Vec::new();
    for &y in &labels {
        for (ai, &ea) in envs.iter().enumerate() {
            for &eb in envs.iter().skip(ai + 1) {
                let idx_a = &cells[&(ea, y)];
                let idx_b = &cells[&(eb, y)];
                let mut worst = 0.0f64;
                for beta in &betas {
                    let proj_a: Vec<f64> = idx_a
                        .iter()
                        .map(|&i| dump.rows[i].z.dot_raw(beta.coords()))
                        .collect();
                    let proj_b: Vec<f64> = idx_b
                        .iter()
                        .map(|&i| dump.rows[i].z.dot_raw(beta.coords()))
                        .collect();
                    worst = worst.max(w1_1d(&proj_a, &proj_b));
                }
                checks.push(CellCheck {
                    label: y,
                    env: ea,
                    env_b: Some(eb),
                    lhs: worst,
                    rhs: bound,
                    margin: bound - worst,
                });
            }
        }
    }
    Ok(LemmaReport::from_cells(gamma, checks))
}

/// Projected gradient descent on the separation loss over unit vectors alone:
/// each step takes the ambient gradient and re-normalizes every row.
pub fn optimize_spread_directions<R: Rng + ?Sized>(
    num_classes: usize,
    dim: usize,
    tau: f64,
    steps: usize,
    lr: f64,
    rng: &mut R,
) -> Vec<UnitVector> {
    assert!(num_classes >= 2 && dim >= 2);
    let mut rows: Vec<Array1<f64>> = (0..num_classes)
        .map(|_| geometry::random_unit_direction(dim, rng).coords().clone())
        .collect();
    for _ in 0..steps {
        let grads = loss::separation_prototype_grads_raw(&rows, tau);
        for (row, g) in rows.iter_mut().zip(grads) {
            let stepped = &*row - &(g * lr);
            let renorm = geometry::normalize(&RawVector::new(stepped))
                .expect("separation descent step collapsed a prototype");
            *row = renorm.coords().clone();
        }
    }
    rows.into_iter()
        .map(|r| UnitVector::new(r).expect("rows stay unit norm"))
        .collect()
}

/// Outcome of minimizing the separation loss over free prototypes.
#[derive(Debug, Clone)]
pub struct EtfOutcome {
    pub prototypes: Vec<UnitVector>,
    /// max_{i != j} | mu_i^T mu_j + 1/(C-1) |.
    pub max_deviation: f64,
}

/// Minimizes the separation loss over C free unit prototypes and reports how
/// far the result is from the simplex equiangular tight frame, whose pairwise
/// inner products are all -1/(C-1). Requires C <= d + 1 for the frame to
/// exist. Non-convergence shows up as a large deviation, not an error.
pub fn etf_optimize<R: Rng + ?Sized>(
    num_classes: usize,
    dim: usize,
    tau: f64,
    steps: usize,
    lr: f64,
    rng: &mut R,
) -> EtfOutcome {
    assert!(
        num_classes >= 2 && num_classes <= dim + 1,
        "simplex frame requires 2 <= C <= d + 1"
    );
    let prototypes = optimize_spread_directions(num_classes, dim, tau, steps, lr, rng);
    let target = -1.0 / (num_classes as f64 - 1.0);
    let mut max_deviation = 0.0f64;
    for i in 0..num_classes {
        for j in 0..i {
            let dot = prototypes[i].dot(&prototypes[j]);
            max_deviation = max_deviation.max((dot - target).abs());
        }
    }
    EtfOutcome {
        prototypes,
        max_deviation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::DumpRow;
    use crate::model::PrototypeMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(coords: &[f64]) -> UnitVector {
        UnitVector::from_slice(coords).unwrap()
    }

    fn perfect_dump(bank: &PrototypeBank, envs: usize, per_cell: usize) -> EmbeddingDump {
        let mut rows = Vec::new();
        for e in 0..envs {
            for (c, mu) in bank.rows().iter().enumerate() {
                for _ in 0..per_cell {
                    rows.push(DumpRow {
                        z: mu.clone(),
                        label: c,
                        env: e,
                    });
                }
            }
        }
        EmbeddingDump { rows }
    }

    fn random_dump<R: Rng>(
        bank: &PrototypeBank,
        envs: usize,
        per_cell: usize,
        rng: &mut R,
    ) -> EmbeddingDump {
        let mut rows = Vec::new();
        for e in 0..envs {
            for c in 0..bank.num_classes() {
                for _ in 0..per_cell {
                    rows.push(DumpRow {
                        z: geometry::random_unit_direction(bank.dim(), rng),
                        label: c,
                        env: e,
                    });
                }
            }
        }
        EmbeddingDump { rows }
    }

    #[test]
    fn subclasses_perfect_alignment_has_zero_gamma() {
        let bank = PrototypeBank::from_rows(
            vec![unit(&[1.0, 0.0]), unit(&[-1.0, 0.0])],
            PrototypeMode::Ema,
            0.95,
        )
        .unwrap();
        let dump = perfect_dump(&bank, 2, 5);
        let report = verify_lemma_subclasses(&dump, &bank).unwrap();
        assert!(report.gamma.abs() < 1e-15);
        assert!(report.pass);
        for cell in &report.cells {
            assert!(cell.margin.abs() < 1e-12);
        }
    }

    #[test]
    fn subclasses_hand_constructed_bound() {
        // C = 2, E = 2, one misaligned cell. Global mean alignment 0.9 gives
        // gamma = 0.1 and a per-cell bound of 1 - 4 * 0.1 = 0.6.
        let bank = PrototypeBank::from_rows(
            vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])],
            PrototypeMode::Ema,
            0.95,
        )
        .unwrap();
        // Cell (env 1, class 1) holds a vector at alignment 0.6; all other
        // cells are perfectly aligned, giving global mean 0.9.
        let off = 0.6f64;
        let misaligned = unit(&[(1.0 - off * off).sqrt(), off]);
        let rows = vec![
            DumpRow { z: unit(&[1.0, 0.0]), label: 0, env: 0 },
            DumpRow { z: unit(&[0.0, 1.0]), label: 1, env: 0 },
            DumpRow { z: unit(&[1.0, 0.0]), label: 0, env: 1 },
            DumpRow { z: misaligned, label: 1, env: 1 },
        ];
        let dump = EmbeddingDump { rows };
        let report = verify_lemma_subclasses(&dump, &bank).unwrap();
        assert!((report.gamma - 0.1).abs() < 1e-12);
        assert!(report.pass);
        let worst = report
            .cells
            .iter()
            .find(|c| c.env == 1 && c.label == 1)
            .unwrap();
        assert!((worst.lhs - 0.6).abs() < 1e-12);
        assert!((worst.rhs - 0.6).abs() < 1e-12);
    }

    #[test]
    fn markov_eta_two_is_vacuous() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = PrototypeBank::init(3, 4, PrototypeMode::Ema, 0.95, &mut rng).unwrap();
        let dump = random_dump(&bank, 2, 10, &mut rng);
        let report = verify_lemma_markov(&dump, &bank, 2.0).unwrap();
        assert!(report.pass);
        // Chord distance on the sphere never reaches 2 except at exact
        // antipodes, so the exceedance fraction is 0.
        assert!(report.cells.iter().all(|c| c.lhs == 0.0));
    }

    #[test]
    fn markov_perfect_alignment_holds_with_equality() {
        let bank = PrototypeBank::from_rows(
            vec![unit(&[1.0, 0.0]), unit(&[-1.0, 0.0])],
            PrototypeMode::Ema,
            0.95,
        )
        .unwrap();
        let dump = perfect_dump(&bank, 2, 4);
        let report = verify_lemma_markov(&dump, &bank, 0.5).unwrap();
        assert!(report.pass);
        for cell in &report.cells {
            assert!(cell.lhs == 0.0);
            assert!(cell.rhs.abs() < 1e-12);
        }
    }

    #[test]
    fn wasserstein_perfect_alignment_is_tight_at_zero() {
        let bank = PrototypeBank::from_rows(
            vec![unit(&[1.0, 0.0]), unit(&[-1.0, 0.0])],
            PrototypeMode::Ema,
            0.95,
        )
        .unwrap();
        let dump = perfect_dump(&bank, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let report = verify_lemma_wasserstein(&dump, &bank, 16, &mut rng).unwrap();
        assert!(report.pass);
        for cell in &report.cells {
            assert!(cell.lhs.abs() < 1e-12);
        }
    }

    #[test]
    fn wasserstein_single_flipped_sample() {
        // One sample flipped to the antipode of its prototype in one cell of
        // a C=2, E=2, n=50 dump; both sides computed, inequality holds.
        let bank = PrototypeBank::from_rows(
            vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])],
            PrototypeMode::Ema,
            0.95,
        )
        .unwrap();
        let mut dump = perfect_dump(&bank, 2, 50);
        let idx = dump
            .rows
            .iter()
            .position(|r| r.env == 1 && r.label == 0)
            .unwrap();
        dump.rows[idx].z = unit(&[-1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let report = verify_lemma_wasserstein(&dump, &bank, 32, &mut rng).unwrap();
        assert!(report.gamma > 0.0);
        assert!(report.pass);
        // The perturbed pair actually produces a nonzero projected distance.
        assert!(report
            .cells
            .iter()
            .any(|c| c.label == 0 && c.lhs > 0.0));
    }

    #[test]
    fn all_lemmas_pass_on_randomized_dumps() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = 2 + (seed % 3) as usize;
            let e = 2 + (seed % 2) as usize;
            let bank = PrototypeBank::init(c, 4, PrototypeMode::Ema, 0.95, &mut rng).unwrap();
            let dump = random_dump(&bank, e, 8, &mut rng);
            assert!(
                verify_lemma_subclasses(&dump, &bank).unwrap().pass,
                "subclass bound failed at seed {seed}"
            );
            for eta in [0.1, 0.5, 1.0] {
                assert!(
                    verify_lemma_markov(&dump, &bank, eta).unwrap().pass,
                    "tail bound failed at seed {seed}, eta {eta}"
                );
            }
            assert!(
                verify_lemma_wasserstein(&dump, &bank, 16, &mut rng).unwrap().pass,
                "projection bound failed at seed {seed}"
            );
        }
    }

    #[test]
    fn non_uniform_cells_are_rejected() {
        let bank = PrototypeBank::from_rows(
            vec![unit(&[1.0, 0.0]), unit(&[-1.0, 0.0])],
            PrototypeMode::Ema,
            0.95,
        )
        .unwrap();
        let mut dump = perfect_dump(&bank, 2, 3);
        dump.rows.push(DumpRow {
            z: unit(&[1.0, 0.0]),
            label: 0,
            env: 0,
        });
        let err = verify_lemma_subclasses(&dump, &bank).unwrap_err();
        assert!(matches!(err, HypoError::NonUniformCells { min: 3, max: 4 }));
    }

    #[test]
    fn etf_pair_reaches_antipodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = etf_optimize(2, 2, 1.0, 5000, 0.5, &mut rng);
        assert!(out.max_deviation < 1e-3, "deviation {}", out.max_deviation);
    }

    #[test]
    fn etf_three_classes_in_three_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = etf_optimize(3, 3, 1.0, 5000, 0.5, &mut rng);
        // Target pairwise inner product is -1/2.
        assert!(out.max_deviation < 1e-3, "deviation {}", out.max_deviation);
        for i in 0..3 {
            for j in 0..i {
                let dot = out.prototypes[i].dot(&out.prototypes[j]);
                assert!((dot + 0.5).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn etf_four_classes_in_three_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = etf_optimize(4, 3, 1.0, 5000, 0.5, &mut rng);
        // Target pairwise inner product is -1/3.
        assert!(out.max_deviation < 1e-3, "deviation {}", out.max_deviation);
        for i in 0..4 {
            for j in 0..i {
                let dot = out.prototypes[i].dot(&out.prototypes[j]);
                assert!((dot + 1.0 / 3.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn etf_deviation_stable_across_seeds() {
        let mut deviations = Vec::new();
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            deviations.push(etf_optimize(3, 8, 1.0, 5000, 0.5, &mut rng).max_deviation);
        }
        let min = deviations.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = deviations.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(max - min < 1e-3, "deviations {deviations:?}");
    }

    #[test]
    fn etf_configuration_beats_random_configurations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = etf_optimize(3, 4, 1.0, 5000, 0.5, &mut rng);
        let protos: Vec<Array1<f64>> =
            out.prototypes.iter().map(|u| u.coords().clone()).collect();
        let etf_loss = loss::separation_loss_raw(&protos, 1.0);
        for _ in 0..100 {
            let random: Vec<Array1<f64>> = (0..3)
                .map(|_| geometry::random_unit_direction(4, &mut rng).coords().clone())
                .collect();
            assert!(etf_loss <= loss::separation_loss_raw(&random, 1.0) + 1e-9);
        }
    }
}

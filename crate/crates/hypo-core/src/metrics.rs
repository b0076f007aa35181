//! Empirical estimators for the measured quantities: exact 1-D Wasserstein-1,
//! debiased entropic optimal transport (Sinkhorn divergence), intra-class
//! variation, the directional sup-variation lower bound, inter-class
//! separation, the alignment slack of trained embeddings, and per-environment
//! accuracy with worst-environment risk.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataSplit, EnvDataset};
use crate::error::{HypoError, Result};
use crate::geometry::{self, UnitVector};
use crate::model::{LinearHead, MlpEncoder, PrototypeBank};

/// One embedded sample with its class and environment.
#[derive(Debug, Clone)]
pub struct DumpRow {
    pub z: UnitVector,
    pub label: usize,
    pub env: usize,
}

/// Rows of (embedding, class, environment) from one checkpoint.
#[derive(Debug, Clone)]
pub struct EmbeddingDump {
    pub rows: Vec<DumpRow>,
}

impl EmbeddingDump {
    pub fn envs(&self) -> Vec<usize> {
        let mut envs: Vec<usize> = self.rows.iter().map(|r| r.env).collect();
        envs.sort_unstable();
        envs.dedup();
        envs
    }

    pub fn labels(&self) -> Vec<usize> {
        let mut labels: Vec<usize> = self.rows.iter().map(|r| r.label).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    /// (number of distinct classes, number of distinct environments).
    pub fn class_env_counts(&self) -> (usize, usize) {
        (self.labels().len(), self.envs().len())
    }

    pub fn dim(&self) -> usize {
        self.rows[0].z.dim()
    }

    pub(crate) fn cells(&self) -> BTreeMap<(usize, usize), Vec<usize>> {
        let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, row) in self.rows.iter().enumerate() {
            cells.entry((row.env, row.label)).or_default().push(i);
        }
        cells
    }

    fn cell_points(&self, idxs: &[usize]) -> Vec<Array1<f64>> {
        idxs.iter().map(|&i| self.rows[i].z.coords().clone()).collect()
    }
}

/// Exact empirical Wasserstein-1 between two 1-D sample sets, via quantile
/// function integration. Equal sizes reduce to the mean absolute difference
/// of sorted samples; unequal sizes integrate |F_a^{-1} - F_b^{-1}| over the
/// merged quantile grid with exact integer breakpoints.
pub fn w1_1d(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "w1_1d needs nonempty samples");
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    let (n, m) = (a.len() as u64, b.len() as u64);
    // Quantile breakpoints of the two empirical CDFs live on the common grid
    // of 1/(n*m); walking it in integer units avoids float comparisons.
    let mut i = 0u64;
    let mut j = 0u64;
    let mut pos = 0u64;
    let mut acc = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) * m;
        let next_b = (j + 1) * n;
        let next = next_a.min(next_b);
        acc += (next - pos) as f64 * (a[i as usize] - b[j as usize]).abs();
        pos = next;
        if next == next_a {
            i += 1;
        }
        if next == next_b {
            j += 1;
        }
    }
    acc / (n * m) as f64
}

/// Entropic regularization settings for optimal transport.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Entropic regularization strength.
    pub reg: f64,
    /// Iteration cap at the target regularization.
    pub max_iters: usize,
    /// L1 marginal violation below which the iteration stops.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            reg: 0.05,
            max_iters: 2000,
            tol: 1e-6,
        }
    }
}

fn euclidean_cost(a: &[Array1<f64>], b: &[Array1<f64>]) -> Array2<f64> {
    let mut cost = Array2::zeros((a.len(), b.len()));
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            let diff = p - q;
            cost[(i, j)] = diff.dot(&diff).sqrt();
        }
    }
    cost
}

fn logsumexp_iter(it: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = it.collect();
    crate::loss::logsumexp(&xs)
}

/// Sharp entropic OT cost <P, C> between uniform point clouds, by log-domain
/// Sinkhorn-Knopp. Warm-starts through a halving epsilon schedule down to the
/// target regularization, then iterates until the L1 marginal violation drops
/// below tol (checked periodically) or `max_iters` target-level iterations.
pub(crate) fn entropic_ot_cost(
    a_pts: &[Array1<f64>],
    b_pts: &[Array1<f64>],
    cfg: &SinkhornConfig,
) -> Result<f64> {
    assert!(!a_pts.is_empty() && !b_pts.is_empty());
    if cfg.reg <= 0.0 {
        return Err(HypoError::InvalidConfig(format!(
            "sinkhorn reg must be > 0, got {}",
            cfg.reg
        )));
    }
    let m = a_pts.len();
    let n = b_pts.len();
    let cost = euclidean_cost(a_pts, b_pts);
    let log_a = -(m as f64).ln();
    let log_b = -(n as f64).ln();
    let a_mass = 1.0 / m as f64;
    let b_mass = 1.0 / n as f64;

    let mut f = vec![0.0f64; m];
    let mut g = vec![0.0f64; n];

    let update = |f: &mut Vec<f64>, g: &mut Vec<f64>, eps: f64, cost: &Array2<f64>| {
        for i in 0..m {
            let lse = logsumexp_iter((0..n).map(|j| log_b + (g[j] - cost[(i, j)]) / eps));
            f[i] = -eps * lse;
        }
        for j in 0..n {
            let lse = logsumexp_iter((0..m).map(|i| log_a + (f[i] - cost[(i, j)]) / eps));
            g[j] = -eps * lse;
        }
    };

    let violation = |f: &Vec<f64>, g: &Vec<f64>, eps: f64| -> f64 {
        let mut err = 0.0;
        for i in 0..m {
            let row: f64 = (0..n)
                .map(|j| ((f[i] + g[j] - cost[(i, j)]) / eps + log_a + log_b).exp())
                .sum();
            err += (row - a_mass).abs();
        }
        for j in 0..n {
            let col: f64 = (0..m)
                .map(|i| ((f[i] + g[j] - cost[(i, j)]) / eps + log_a + log_b).exp())
                .sum();
            err += (col - b_mass).abs();
        }
        err
    };

    // Epsilon scaling: start coarse, halve down to the target, warm-starting
    // the potentials at each level. Small target regs converge orders of
    // magnitude faster this way.
    let max_cost = cost.iter().cloned().fold(0.0f64, f64::max);
    let mut eps = (max_cost / 2.0).max(cfg.reg);
    while eps > cfg.reg {
        for _ in 0..30 {
            update(&mut f, &mut g, eps, &cost);
        }
        eps = (eps / 2.0).max(cfg.reg);
    }

    let eps = cfg.reg;
    let mut last_violation = f64::INFINITY;
    let mut converged = false;
    let mut iters_done = 0usize;
    while iters_done < cfg.max_iters {
        update(&mut f, &mut g, eps, &cost);
        iters_done += 1;
        if iters_done.is_multiple_of(5) || iters_done == cfg.max_iters {
            last_violation = violation(&f, &g, eps);
            if last_violation < cfg.tol {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        last_violation = violation(&f, &g, eps);
        if last_violation >= cfg.tol {
            return Err(HypoError::NoConvergence {
                violation: last_violation,
                tol: cfg.tol,
                iters: iters_done,
            });
        }
    }
    let _ = last_violation;

    let mut value = 0.0;
    for i in 0..m {
        for j in 0..n {
            let p = ((f[i] + g[j] - cost[(i, j)]) / eps + log_a + log_b).exp();
            value += p * cost[(i, j)];
        }
    }
    Ok(value)
}

/// Debiased entropic OT: OT_eps(A,B) - (OT_eps(A,A) + OT_eps(B,B)) / 2,
/// clamped at zero from below. Zero on identical sets by construction.
///
/// The cross term is computed with the two sets in a canonical order, so
/// swapping the arguments returns the identical value bit for bit (the
/// iteration path would otherwise differ within the convergence tolerance).
pub fn sinkhorn_divergence(
    a_pts: &[Array1<f64>],
    b_pts: &[Array1<f64>],
    cfg: &SinkhornConfig,
) -> Result<f64> {
    let swap = point_set_order(b_pts, a_pts) == std::cmp::Ordering::Less;
    let (first, second) = if swap { (b_pts, a_pts) } else { (a_pts, b_pts) };
    let ab = entropic_ot_cost(first, second, cfg)?;
    let aa = entropic_ot_cost(a_pts, a_pts, cfg)?;
    let bb = entropic_ot_cost(b_pts, b_pts, cfg)?;
    Ok((ab - 0.5 * aa - 0.5 * bb).max(0.0))
}

fn point_set_order(a: &[Array1<f64>], b: &[Array1<f64>]) -> std::cmp::Ordering {
    a.len().cmp(&b.len()).then_with(|| {
        for (p, q) in a.iter().zip(b) {
            for (x, y) in p.iter().zip(q.iter()) {
                let ord = x.total_cmp(y);
                if ord != std::cmp::Ordering::Equal {
                    return ord;
                }
            }
        }
        std::cmp::Ordering::Equal
    })
}

/// Distributional distance used by the variation/separation estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RhoMetric {
    /// Debiased entropic OT on the embeddings directly.
    Sinkhorn,
    /// Worst 1-D Wasserstein over a set of projection directions.
    W1Proj,
}

impl std::str::FromStr for RhoMetric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sinkhorn" => Ok(RhoMetric::Sinkhorn),
            "w1proj" | "w1_proj" => Ok(RhoMetric::W1Proj),
            other => Err(format!("unknown rho metric '{other}'")),
        }
    }
}

/// One (class, environment pair) variation entry.
#[derive(Debug, Clone, Serialize)]
pub struct VariationCell {
    pub label: usize,
    pub env_a: usize,
    pub env_b: usize,
    pub value: f64,
}

/// Per-cell distances plus their max, the variation aggregate.
#[derive(Debug, Clone, Serialize)]
pub struct VariationReport {
    pub cells: Vec<VariationCell>,
    pub aggregate: f64,
}

fn rho_distance(
    a: &[Array1<f64>],
    b: &[Array1<f64>],
    rho: RhoMetric,
    scfg: &SinkhornConfig,
    directions: &[UnitVector],
) -> Result<f64> {
    match rho {
        RhoMetric::Sinkhorn => sinkhorn_divergence(a, b, scfg),
        RhoMetric::W1Proj => {
            assert!(
                !directions.is_empty(),
                "w1proj needs at least one projection direction"
            );
            let mut worst = 0.0f64;
            for beta in directions {
                let pa: Vec<f64> = a.iter().map(|p| p.dot(beta.coords())).collect();
                let pb: Vec<f64> = b.iter().map(|p| p.dot(beta.coords())).collect();
                worst = worst.max(w1_1d(&pa, &pb));
            }
            Ok(worst)
        }
    }
}

fn require_cell(
    cells: &BTreeMap<(usize, usize), Vec<usize>>,
    env: usize,
    label: usize,
) -> Result<&Vec<usize>> {
    cells
        .get(&(env, label))
        .filter(|v| !v.is_empty())
        .ok_or(HypoError::EmptyCell { env, class: label })
}

/// Intra-class variation: rho between the two environments' class-conditional
/// embedding sets, for every class and unordered environment pair; the
/// aggregate is the max over cells.
pub fn variation_estimate(
    dump: &EmbeddingDump,
    rho: RhoMetric,
    scfg: &SinkhornConfig,
    directions: &[UnitVector],
) -> Result<VariationReport> {
    let envs = dump.envs();
    if envs.len() < 2 {
        return Err(HypoError::InvalidConfig(
            "variation needs at least 2 environments".into(),
        ));
    }
    let labels = dump.labels();
    let cells = dump.cells();
    let mut out = Vec::new();
    let mut aggregate = 0.0f64;
    for &y in &labels {
        for (ai, &ea) in envs.iter().enumerate() {
            for &eb in envs.iter().skip(ai + 1) {
                let pa = dump.cell_points(require_cell(&cells, ea, y)?);
                let pb = dump.cell_points(require_cell(&cells, eb, y)?);
                let value = rho_distance(&pa, &pb, rho, scfg, directions)?;
                aggregate = aggregate.max(value);
                out.push(VariationCell {
                    label: y,
                    env_a: ea,
                    env_b: eb,
                    value,
                });
            }
        }
    }
    Ok(VariationReport {
        cells: out,
        aggregate,
    })
}

/// Monte-Carlo lower bound on the directional sup-variation: the max over
/// `num_directions` random unit directions (plus the prototype directions,
/// when a bank is supplied) of the projected per-class W1 across environment
/// pairs. A lower bound of the true sup by construction.
pub fn vsup_estimate<R: Rng + ?Sized>(
    dump: &EmbeddingDump,
    num_directions: usize,
    rng: &mut R,
    bank: Option<&PrototypeBank>,
) -> Result<f64> {
    let dim = dump.dim();
    let mut directions: Vec<UnitVector> = (0..num_directions)
        .map(|_| geometry::random_unit_direction(dim, rng))
        .collect();
    if let Some(bank) = bank {
        directions.extend(bank.rows().iter().cloned());
    }
    if directions.is_empty() {
        return Err(HypoError::InvalidConfig(
            "sup estimate needs random directions or a prototype bank".into(),
        ));
    }
    let report = variation_estimate(dump, RhoMetric::W1Proj, &SinkhornConfig::default(), &directions)?;
    Ok(report.aggregate)
}

/// Inter-class separation: mean over ordered class pairs of the
/// minimum-over-environments rho between the two classes in one environment.
pub fn separation_estimate(
    dump: &EmbeddingDump,
    rho: RhoMetric,
    scfg: &SinkhornConfig,
    directions: &[UnitVector],
) -> Result<f64> {
    let labels = dump.labels();
    if labels.len() < 2 {
        return Err(HypoError::InvalidConfig(
            "separation needs at least 2 classes".into(),
        ));
    }
    let envs = dump.envs();
    let cells = dump.cells();
    let c = labels.len();
    let mut total = 0.0;
    for &y in &labels {
        for &y2 in &labels {
            if y == y2 {
                continue;
            }
            let mut best = f64::INFINITY;
            for &e in &envs {
                let pa = dump.cell_points(require_cell(&cells, e, y)?);
                let pb = dump.cell_points(require_cell(&cells, e, y2)?);
                best = best.min(rho_distance(&pa, &pb, rho, scfg, directions)?);
            }
            total += best;
        }
    }
    Ok(total / (c * (c - 1)) as f64)
}

/// Alignment slack: 1 minus the mean true-class prototype similarity.
/// 0 when every embedding sits exactly on its prototype, up to 2 at the
/// antipodes.
pub fn epsilon_hat(dump: &EmbeddingDump, bank: &PrototypeBank) -> f64 {
    assert!(!dump.rows.is_empty());
    let mean: f64 = dump
        .rows
        .iter()
        .map(|r| bank.row(r.label).dot(&r.z))
        .sum::<f64>()
        / dump.rows.len() as f64;
    1.0 - mean
}

/// How a checkpointed model classifies inputs.
pub enum Classifier<'a> {
    /// Nearest prototype on the normalized embedding.
    Prototype {
        encoder: &'a MlpEncoder,
        bank: &'a PrototypeBank,
    },
    /// Argmax of the linear head on the raw encoder output.
    Head {
        encoder: &'a MlpEncoder,
        head: &'a LinearHead,
    },
}

impl Classifier<'_> {
    pub fn predict(&self, x: &Array1<f64>) -> Result<usize> {
        match self {
            Classifier::Prototype { encoder, bank } => {
                let (z, _) = encoder.embed(x)?;
                Ok(bank.predict(&z))
            }
            Classifier::Head { encoder, head } => {
                let trace = encoder.forward(x)?;
                Ok(head.predict(&trace.raw_output().coords))
            }
        }
    }

    pub fn encoder(&self) -> &MlpEncoder {
        match self {
            Classifier::Prototype { encoder, .. } => encoder,
            Classifier::Head { encoder, .. } => encoder,
        }
    }
}

/// Accuracy over a set of sample indices.
fn accuracy(clf: &Classifier, ds: &EnvDataset, idxs: &[usize]) -> Result<f64> {
    if idxs.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    for &i in idxs {
        let s = &ds.samples[i];
        if clf.predict(&s.x)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / idxs.len() as f64)
}

/// Per-environment accuracy and worst-environment error.
#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    /// Pooled accuracy over the training portion of TRAIN environments.
    pub train_accuracy: f64,
    /// Held-out validation accuracy per TRAIN environment.
    pub validation_accuracy: BTreeMap<usize, f64>,
    /// Accuracy per OOD environment; empty when the dataset has none.
    pub ood_accuracy: BTreeMap<usize, f64>,
    /// max(1 - accuracy) over every evaluated environment set.
    pub worst_env_error: f64,
    /// max(1 - accuracy) over OOD environments only, when any exist.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst_ood_error: Option<f64>,
}

impl EvalOutcome {
    pub fn mean_ood_accuracy(&self) -> Option<f64> {
        if self.ood_accuracy.is_empty() {
            None
        } else {
            Some(self.ood_accuracy.values().sum::<f64>() / self.ood_accuracy.len() as f64)
        }
    }
}

/// Evaluates a classifier over a dataset split: per-environment accuracies on
/// the held-out validation sets and the OOD environments, plus pooled train
/// accuracy and the worst-environment error.
pub fn evaluate(clf: &Classifier, ds: &EnvDataset, split: &DataSplit) -> Result<EvalOutcome> {
    let train_accuracy = accuracy(clf, ds, &split.train_idx)?;
    let mut validation_accuracy = BTreeMap::new();
    for (&env, idxs) in &split.heldout_by_env {
        validation_accuracy.insert(env, accuracy(clf, ds, idxs)?);
    }
    let mut ood_accuracy = BTreeMap::new();
    for (&env, idxs) in &split.ood_by_env {
        ood_accuracy.insert(env, accuracy(clf, ds, idxs)?);
    }
    let worst_env_error = validation_accuracy
        .values()
        .chain(ood_accuracy.values())
        .map(|acc| 1.0 - acc)
        .fold(0.0f64, f64::max);
    let worst_ood_error = if ood_accuracy.is_empty() {
        None
    } else {
        Some(
            ood_accuracy
                .values()
                .map(|acc| 1.0 - acc)
                .fold(0.0f64, f64::max),
        )
    };
    Ok(EvalOutcome {
        train_accuracy,
        validation_accuracy,
        ood_accuracy,
        worst_env_error,
        worst_ood_error,
    })
}

/// Embeds the selected samples, keeping their class and environment tags.
pub fn dump_embeddings(
    encoder: &MlpEncoder,
    ds: &EnvDataset,
    idxs: &[usize],
) -> Result<EmbeddingDump> {
    let mut rows = Vec::with_capacity(idxs.len());
    for &i in idxs {
        let s = &ds.samples[i];
        let (z, _) = encoder.embed(&s.x)?;
        rows.push(DumpRow {
            z,
            label: s.label,
            env: s.env,
        });
    }
    Ok(EmbeddingDump { rows })
}

/// Writes `env,label,z1,...,zd` with shortest-round-trip floats.
pub fn save_dump(dump: &EmbeddingDump, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let d = dump.dim();
    let mut header = vec!["env".to_string(), "label".to_string()];
    header.extend((1..=d).map(|i| format!("z{i}")));
    writer.write_record(&header)?;
    for row in &dump.rows {
        let mut record = vec![row.env.to_string(), row.label.to_string()];
        record.extend(row.z.coords().iter().map(|v| format!("{v}")));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_dump(path: &Path) -> Result<EmbeddingDump> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let width = reader.headers()?.len();
    if width < 4 {
        return Err(HypoError::SchemaError(
            "embedding dump needs env,label and at least 2 coordinates".into(),
        ));
    }
    let d = width - 2;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let env: usize = record[0].parse().map_err(|e| HypoError::ParseError {
            line,
            message: format!("env: {e}"),
        })?;
        let label: usize = record[1].parse().map_err(|e| HypoError::ParseError {
            line,
            message: format!("label: {e}"),
        })?;
        let mut coords = Array1::zeros(d);
        for i in 0..d {
            coords[i] = record[2 + i].parse().map_err(|e| HypoError::ParseError {
                line,
                message: format!("z{}: {e}", i + 1),
            })?;
        }
        rows.push(DumpRow {
            z: UnitVector::new(coords)?,
            label,
            env,
        });
    }
    if rows.is_empty() {
        return Err(HypoError::SchemaError("embedding dump has no rows".into()));
    }
    Ok(EmbeddingDump { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PrototypeMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pts(vals: &[&[f64]]) -> Vec<Array1<f64>> {
        vals.iter().map(|v| Array1::from(v.to_vec())).collect()
    }

    #[test]
    fn w1_point_mass_translation() {
        assert!((w1_1d(&[0.0, 0.0], &[1.0, 1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn w1_identity() {
        assert_eq!(w1_1d(&[0.3, -1.2, 0.5], &[0.5, 0.3, -1.2]), 0.0);
    }

    #[test]
    fn w1_sorted_matching() {
        // Sorted matching (0 -> 0, 1 -> 3) / 2 = 1.
        assert!((w1_1d(&[0.0, 1.0], &[0.0, 3.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn w1_unequal_sizes_against_expansion() {
        // {0, 1} (mass 1/2 each) vs {0, 1, 2} (mass 1/3 each): expanding to
        // the common denominator 6 gives sorted lists
        // [0,0,0,1,1,1] and [0,0,1,1,2,2], mean |diff| = 3/6.
        let w = w1_1d(&[0.0, 1.0], &[0.0, 1.0, 2.0]);
        assert!((w - 0.5).abs() < 1e-15, "got {w}");
    }

    #[test]
    fn w1_metric_properties_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let len = |rng: &mut ChaCha8Rng| 1 + (rng.random::<f64>() * 6.0) as usize;
            let draw = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
                (0..n).map(|_| (rng.random::<f64>() * 8.0).round() / 2.0).collect()
            };
            let (na, nb, nc) = (len(&mut rng), len(&mut rng), len(&mut rng));
            let a = draw(&mut rng, na);
            let b = draw(&mut rng, nb);
            let c = draw(&mut rng, nc);
            let dab = w1_1d(&a, &b);
            let dba = w1_1d(&b, &a);
            assert_eq!(dab, dba);
            assert!(dab >= 0.0);
            let dac = w1_1d(&a, &c);
            let dcb = w1_1d(&c, &b);
            assert!(dab <= dac + dcb + 1e-9);
            // Identity of indiscernibles on equal multisets.
            let mut a_sorted = a.clone();
            a_sorted.sort_by(f64::total_cmp);
            assert_eq!(w1_1d(&a, &a_sorted), 0.0);
        }
    }

    #[test]
    fn sinkhorn_zero_on_identical_sets() {
        let a = pts(&[&[0.0, 0.0], &[1.0, 0.5], &[-0.5, 2.0]]);
        let cfg = SinkhornConfig::default();
        let d = sinkhorn_divergence(&a, &a, &cfg).unwrap();
        assert!(d.abs() <= 1e-9, "got {d}");
    }

    #[test]
    fn sinkhorn_singletons_at_unit_distance() {
        let a = pts(&[&[0.0, 0.0]]);
        let b = pts(&[&[1.0, 0.0]]);
        let cfg = SinkhornConfig {
            reg: 0.01,
            ..Default::default()
        };
        let d = sinkhorn_divergence(&a, &b, &cfg).unwrap();
        assert!((d - 1.0).abs() < 1e-3, "got {d}");
    }

    #[test]
    fn sinkhorn_matches_exact_w1_in_one_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let n = 5 + (trial % 3);
            let m = 4 + (trial % 4);
            let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let ys: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let a: Vec<Array1<f64>> = xs.iter().map(|&v| Array1::from(vec![v, 0.0])).collect();
            let b: Vec<Array1<f64>> = ys.iter().map(|&v| Array1::from(vec![v, 0.0])).collect();
            let cfg = SinkhornConfig {
                reg: 0.001,
                max_iters: 20_000,
                tol: 1e-6,
            };
            let sd = sinkhorn_divergence(&a, &b, &cfg).unwrap();
            let exact = w1_1d(&xs, &ys);
            assert!((sd - exact).abs() < 2e-2, "sd {sd} vs exact {exact}");
        }
    }

    #[test]
    fn sinkhorn_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a: Vec<Array1<f64>> = (0..6)
            .map(|_| Array1::from_iter((0..3).map(|_| rng.random::<f64>() * 0.3)))
            .collect();
        let b: Vec<Array1<f64>> = (0..4)
            .map(|_| Array1::from_iter((0..3).map(|_| rng.random::<f64>() * 0.3 + 0.2)))
            .collect();
        let cfg = SinkhornConfig {
            max_iters: 20_000,
            ..Default::default()
        };
        let dab = sinkhorn_divergence(&a, &b, &cfg).unwrap();
        let dba = sinkhorn_divergence(&b, &a, &cfg).unwrap();
        assert!((dab - dba).abs() < 1e-9);
        assert!(dab >= 0.0);
    }

    #[test]
    fn sinkhorn_reports_non_convergence() {
        let a = pts(&[&[0.0, 0.0], &[5.0, 1.0], &[2.0, -3.0], &[-4.0, 2.0]]);
        let b = pts(&[&[9.0, 9.0], &[-7.0, 3.0], &[1.0, 8.0], &[3.0, 3.0]]);
        // An unreachable tolerance forces the reported-failure path.
        let cfg = SinkhornConfig {
            reg: 0.001,
            max_iters: 2,
            tol: 0.0,
        };
        let err = sinkhorn_divergence(&a, &b, &cfg).unwrap_err();
        assert!(matches!(err, HypoError::NoConvergence { .. }));
    }

    fn two_env_dump(rows: Vec<(UnitVector, usize, usize)>) -> EmbeddingDump {
        EmbeddingDump {
            rows: rows
                .into_iter()
                .map(|(z, label, env)| DumpRow { z, label, env })
                .collect(),
        }
    }

    fn unit(coords: &[f64]) -> UnitVector {
        UnitVector::from_slice(coords).unwrap()
    }

    #[test]
    fn variation_zero_when_environments_match() {
        let dump = two_env_dump(vec![
            (unit(&[1.0, 0.0]), 0, 0),
            (unit(&[0.0, 1.0]), 0, 0),
            (unit(&[1.0, 0.0]), 0, 1),
            (unit(&[0.0, 1.0]), 0, 1),
        ]);
        let report = variation_estimate(
            &dump,
            RhoMetric::Sinkhorn,
            &SinkhornConfig::default(),
            &[],
        )
        .unwrap();
        assert!(report.aggregate.abs() < 1e-9);
    }

    #[test]
    fn variation_singletons_quarter_turn() {
        // Two singleton embeddings at 90 degrees: chord length sqrt(2).
        let dump = two_env_dump(vec![
            (unit(&[1.0, 0.0]), 0, 0),
            (unit(&[0.0, 1.0]), 0, 1),
        ]);
        let report = variation_estimate(
            &dump,
            RhoMetric::Sinkhorn,
            &SinkhornConfig {
                reg: 0.01,
                ..Default::default()
            },
            &[],
        )
        .unwrap();
        assert!((report.aggregate - 2f64.sqrt()).abs() < 1e-2);
    }

    #[test]
    fn variation_missing_cell_is_reported() {
        let dump = two_env_dump(vec![
            (unit(&[1.0, 0.0]), 0, 0),
            (unit(&[0.0, 1.0]), 1, 0),
            (unit(&[1.0, 0.0]), 0, 1),
        ]);
        let err = variation_estimate(
            &dump,
            RhoMetric::Sinkhorn,
            &SinkhornConfig::default(),
            &[],
        )
        .unwrap_err();
        assert!(matches!(err, HypoError::EmptyCell { env: 1, class: 1 }));
    }

    #[test]
    fn vsup_zero_on_identical_environments() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let zs: Vec<UnitVector> = (0..10)
            .map(|_| geometry::random_unit_direction(3, &mut rng))
            .collect();
        let mut rows = Vec::new();
        for env in 0..2 {
            for z in &zs {
                rows.push((z.clone(), 0, env));
            }
        }
        let dump = two_env_dump(rows);
        let v = vsup_estimate(&dump, 64, &mut rng, None).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn vsup_prototype_directions_only_is_deterministic() {
        let bank = PrototypeBank::from_rows(
            vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])],
            PrototypeMode::Ema,
            0.95,
        )
        .unwrap();
        let dump = two_env_dump(vec![
            (unit(&[1.0, 0.0]), 0, 0),
            (unit(&[0.0, 1.0]), 0, 1),
            (unit(&[1.0, 0.0]), 1, 0),
            (unit(&[1.0, 0.0]), 1, 1),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = vsup_estimate(&dump, 0, &mut rng, Some(&bank)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let b = vsup_estimate(&dump, 0, &mut rng, Some(&bank)).unwrap();
        assert_eq!(a, b);
        // Projecting the class-0 singletons onto either axis moves mass
        // distance 1 along one of the prototype directions.
        assert!((a - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vsup_monotone_in_direction_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut rows = Vec::new();
        for env in 0..2 {
            for _ in 0..8 {
                rows.push((geometry::random_unit_direction(4, &mut rng), 0, env));
            }
        }
        let dump = two_env_dump(rows);
        // Same seed: the first M directions are a prefix of the first M' > M.
        let mut prev = 0.0;
        for m in [1usize, 4, 16, 64] {
            let mut dir_rng = ChaCha8Rng::seed_from_u64(7);
            let v = vsup_estimate(&dump, m, &mut dir_rng, None).unwrap();
            assert!(v >= prev - 1e-15, "vsup fell from {prev} to {v} at M={m}");
            prev = v;
        }
    }

    #[test]
    fn vsup_planted_direction_recovered() {
        // One class, two environments whose projections along a planted
        // direction differ by 0.5; 500 random directions get within 10% of
        // the directly computed W1 along the planted axis.
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut rows = Vec::new();
        let n = 40;
        for i in 0..n {
            let t = (i as f64 / n as f64 - 0.5) * 0.2;
            // Environment 0 near angle 0, environment 1 rotated by 0.5 rad
            // around the (0,1) plane: projections onto the planted axis
            // (1,0,...) differ.
            let z0 = unit(&[t.cos(), t.sin(), 0.0]);
            let phi = t + 0.5;
            let z1 = unit(&[phi.cos(), phi.sin(), 0.0]);
            rows.push((z0, 0, 0));
            rows.push((z1, 0, 1));
        }
        let dump = two_env_dump(rows);
        // The planted direction: W1 of projections onto it.
        let beta = unit(&[1.0, 0.0, 0.0]);
        let pa: Vec<f64> = dump
            .rows
            .iter()
            .filter(|r| r.env == 0)
            .map(|r| r.z.dot(&beta))
            .collect();
        let pb: Vec<f64> = dump
            .rows
            .iter()
            .filter(|r| r.env == 1)
            .map(|r| r.z.dot(&beta))
            .collect();
        let planted = w1_1d(&pa, &pb);
        let est = vsup_estimate(&dump, 500, &mut rng, None).unwrap();
        assert!(
            est >= planted * 0.9,
            "estimate {est} vs planted-direction W1 {planted}"
        );
    }

    #[test]
    fn separation_zero_when_classes_coincide() {
        let dump = two_env_dump(vec![
            (unit(&[1.0, 0.0]), 0, 0),
            (unit(&[1.0, 0.0]), 1, 0),
            (unit(&[1.0, 0.0]), 0, 1),
            (unit(&[1.0, 0.0]), 1, 1),
        ]);
        let s = separation_estimate(
            &dump,
            RhoMetric::Sinkhorn,
            &SinkhornConfig::default(),
            &[],
        )
        .unwrap();
        assert!(s.abs() < 1e-9);
    }

    #[test]
    fn separation_singletons_at_unit_chord() {
        // Class means one unit apart in both environments; the ordered-pair
        // sum has 2 entries and the normalizer is 2.
        let a = unit(&[1.0, 0.0]);
        let b = unit(&[0.5, 3f64.sqrt() / 2.0]);
        let dump = two_env_dump(vec![
            (a.clone(), 0, 0),
            (b.clone(), 1, 0),
            (a, 0, 1),
            (b, 1, 1),
        ]);
        let s = separation_estimate(
            &dump,
            RhoMetric::Sinkhorn,
            &SinkhornConfig {
                reg: 0.01,
                ..Default::default()
            },
            &[],
        )
        .unwrap();
        assert!((s - 1.0).abs() < 1e-2, "got {s}");
    }

    #[test]
    fn separation_extra_environment_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mk = |rng: &mut ChaCha8Rng, env: usize, spread: f64| -> Vec<(UnitVector, usize, usize)> {
            let mut rows = Vec::new();
            for label in 0..2usize {
                for _ in 0..5 {
                    let base = if label == 0 { 0.0 } else { spread };
                    let t = base + rng.random::<f64>() * 0.1;
                    rows.push((unit(&[t.cos(), t.sin()]), label, env));
                }
            }
            rows
        };
        // Environment 2 pushes the classes farther apart than 0 and 1 do.
        let mut rows = mk(&mut rng, 0, 1.0);
        rows.extend(mk(&mut rng, 1, 1.2));
        let two_envs = two_env_dump(rows.clone());
        rows.extend(mk(&mut rng, 2, 2.5));
        let three_envs = two_env_dump(rows);
        let cfg = SinkhornConfig::default();
        let s2 = separation_estimate(&two_envs, RhoMetric::Sinkhorn, &cfg, &[]).unwrap();
        let s3 = separation_estimate(&three_envs, RhoMetric::Sinkhorn, &cfg, &[]).unwrap();
        assert!(s3 <= s2 + 1e-9, "min over envs must not grow: {s2} -> {s3}");
    }

    #[test]
    fn epsilon_hat_extremes() {
        let bank = PrototypeBank::from_rows(
            vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])],
            PrototypeMode::Ema,
            0.95,
        )
        .unwrap();
        let aligned = two_env_dump(vec![
            (unit(&[1.0, 0.0]), 0, 0),
            (unit(&[0.0, 1.0]), 1, 0),
        ]);
        assert!(epsilon_hat(&aligned, &bank).abs() < 1e-15);
        let orthogonal = two_env_dump(vec![
            (unit(&[0.0, 1.0]), 0, 0),
            (unit(&[1.0, 0.0]), 1, 0),
        ]);
        assert!((epsilon_hat(&orthogonal, &bank) - 1.0).abs() < 1e-15);
        let mixed = two_env_dump(vec![
            (unit(&[1.0, 0.0]), 0, 0),
            (unit(&[-1.0, 0.0]), 0, 0),
        ]);
        assert!((epsilon_hat(&mixed, &bank) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn worst_env_error_from_accuracies() {
        // Assembled via the same fold the evaluator uses.
        let accs = [0.9f64, 0.7];
        let worst = accs.iter().map(|a| 1.0 - a).fold(0.0f64, f64::max);
        assert!((worst - 0.3).abs() < 1e-15);
    }

    #[test]
    fn dump_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let rows: Vec<DumpRow> = (0..10)
            .map(|i| DumpRow {
                z: geometry::random_unit_direction(4, &mut rng),
                label: i % 3,
                env: i % 2,
            })
            .collect();
        let dump = EmbeddingDump { rows };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.csv");
        save_dump(&dump, &path).unwrap();
        let loaded = load_dump(&path).unwrap();
        assert_eq!(loaded.rows.len(), dump.rows.len());
        for (a, b) in dump.rows.iter().zip(&loaded.rows) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.env, b.env);
            for (u, v) in a.z.coords().iter().zip(b.z.coords().iter()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }
}

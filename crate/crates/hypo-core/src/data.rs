//! Synthetic multi-environment classification data with held-out
//! out-of-distribution environments, plus CSV ingestion.
//!
//! Class-conditional base distributions are isotropic Gaussians around
//! maximally spread unit mean directions. Every environment sees the *same*
//! base draws and applies its own transform (rotation, mean shift, or noise
//! rescale), mirroring corruption-severity benchmarks where one underlying
//! image appears at several severities. Out-of-distribution environments must
//! sit strictly outside the span of training magnitudes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{HypoError, Result};
use crate::theory;

/// Whether an environment is available for training or held out as OOD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EnvRole {
    Train,
    Ood,
}

/// Family of environment transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ShiftKind {
    /// Planar rotation (degrees) mixing the first and last coordinates.
    Rotation,
    /// Translation along the last coordinate axis.
    MeanShift,
    /// Noise standard deviation scaled by (1 + magnitude).
    NoiseScale,
}

/// One environment: a transform kind, its magnitude, and its role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
    pub role: EnvRole,
}

/// One labeled sample attached to an environment.
#[derive(Debug, Clone)]
pub struct Sample {
    pub x: Array1<f64>,
    pub label: usize,
    pub env: usize,
}

/// Labeled samples partitioned by environment, with role metadata.
#[derive(Debug, Clone)]
pub struct EnvDataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub input_dim: usize,
    pub specs: Vec<ShiftSpec>,
    pub seed: u64,
}

impl EnvDataset {
    pub fn num_envs(&self) -> usize {
        self.specs.len()
    }

    pub fn role(&self, env: usize) -> EnvRole {
        self.specs[env].role
    }

    pub fn env_roles(&self) -> Vec<EnvRole> {
        self.specs.iter().map(|s| s.role).collect()
    }

    pub fn train_envs(&self) -> Vec<usize> {
        (0..self.num_envs())
            .filter(|&e| self.role(e) == EnvRole::Train)
            .collect()
    }

    pub fn ood_envs(&self) -> Vec<usize> {
        (0..self.num_envs())
            .filter(|&e| self.role(e) == EnvRole::Ood)
            .collect()
    }
}

/// Generator parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub n_per_class_per_env: usize,
    pub envs: Vec<ShiftSpec>,
    /// Probability of replacing a label with a uniformly random other class.
    pub label_noise: f64,
    /// Isotropic noise scale around each class mean direction.
    pub noise_sigma: f64,
    pub seed: u64,
}

/// The default synthetic task: three classes in six dimensions, training
/// rotations of 0/15/30 degrees and a held-out 60-degree environment.
pub fn default_preset(seed: u64) -> GenerateConfig {
    let rot = |magnitude: f64, role: EnvRole| ShiftSpec {
        kind: ShiftKind::Rotation,
        magnitude,
        role,
    };
    GenerateConfig {
        num_classes: 3,
        input_dim: 6,
        n_per_class_per_env: 200,
        envs: vec![
            rot(0.0, EnvRole::Train),
            rot(15.0, EnvRole::Train),
            rot(30.0, EnvRole::Train),
            rot(60.0, EnvRole::Ood),
        ],
        label_noise: 0.0,
        noise_sigma: 0.3,
        seed,
    }
}

/// Unit-norm class mean directions, maximally spread: the exact simplex
/// arrangement when C <= d + 1, a repulsion-optimized arrangement otherwise.
pub fn class_mean_directions(num_classes: usize, dim: usize, seed: u64) -> Vec<Array1<f64>> {
    if num_classes <= dim + 1 {
        // Helmert coordinates of the centered standard basis give C unit
        // vectors in R^{C-1} with pairwise inner product -1/(C-1).
        let c = num_classes;
        let scale = 1.0 / (1.0 - 1.0 / c as f64).sqrt();
        (0..c)
            .map(|i| {
                let mut v = Array1::zeros(dim);
                for k in 1..c {
                    let denom = (k as f64 * (k + 1) as f64).sqrt();
                    let coord = if i < k {
                        1.0 / denom
                    } else if i == k {
                        -(k as f64) / denom
                    } else {
                        0.0
                    };
                    v[k - 1] = coord * scale;
                }
                v
            })
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_D1CE);
        theory::optimize_spread_directions(num_classes, dim, 0.2, 3000, 0.5, &mut rng)
            .into_iter()
            .map(|u| u.coords().clone())
            .collect()
    }
}

fn validate_spec(cfg: &GenerateConfig) -> Result<()> {
    if cfg.num_classes < 2 {
        return Err(HypoError::InvalidSpec("need at least 2 classes".into()));
    }
    if cfg.input_dim < 2 {
        return Err(HypoError::InvalidSpec("need input dim >= 2".into()));
    }
    if cfg.n_per_class_per_env < 1 {
        return Err(HypoError::InvalidSpec("need n >= 1 per class per env".into()));
    }
    if !(0.0..1.0).contains(&cfg.label_noise) {
        return Err(HypoError::InvalidSpec(format!(
            "label_noise {} outside [0, 1)",
            cfg.label_noise
        )));
    }
    if cfg.noise_sigma < 0.0 {
        return Err(HypoError::InvalidSpec("noise_sigma must be >= 0".into()));
    }
    if cfg.envs.is_empty() {
        return Err(HypoError::InvalidSpec("need at least one environment".into()));
    }
    let kind = cfg.envs[0].kind;
    if cfg.envs.iter().any(|s| s.kind != kind) {
        return Err(HypoError::InvalidSpec(
            "all environments must share one shift kind".into(),
        ));
    }
    let train_mags: Vec<f64> = cfg
        .envs
        .iter()
        .filter(|s| s.role == EnvRole::Train)
        .map(|s| s.magnitude)
        .collect();
    if train_mags.is_empty() {
        return Err(HypoError::InvalidSpec(
            "need at least one training environment".into(),
        ));
    }
    let lo = train_mags.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = train_mags.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for spec in cfg.envs.iter().filter(|s| s.role == EnvRole::Ood) {
        // An OOD magnitude inside the training interval would test
        // interpolation, not extrapolation.
        if spec.magnitude >= lo && spec.magnitude <= hi {
            return Err(HypoError::InvalidSpec(format!(
                "OOD magnitude {} lies inside the training hull [{lo}, {hi}]",
                spec.magnitude
            )));
        }
    }
    Ok(())
}

fn apply_shift(
    spec: &ShiftSpec,
    mean: &Array1<f64>,
    eps: &Array1<f64>,
    sigma: f64,
    dim: usize,
) -> Array1<f64> {
    match spec.kind {
        ShiftKind::Rotation => {
            let mut x = mean + &(eps * sigma);
            let theta = spec.magnitude.to_radians();
            let (s, c) = theta.sin_cos();
            let (a, b) = (x[0], x[dim - 1]);
            x[0] = c * a - s * b;
            x[dim - 1] = s * a + c * b;
            x
        }
        ShiftKind::MeanShift => {
            let mut x = mean + &(eps * sigma);
            x[dim - 1] += spec.magnitude;
            x
        }
        ShiftKind::NoiseScale => mean + &(eps * (sigma * (1.0 + spec.magnitude))),
    }
}

/// Generates the dataset: shared base draws per (class, index), one transform
/// per environment, optional uniform label flips. Deterministic under seed.
pub fn generate(cfg: &GenerateConfig) -> Result<EnvDataset> {
    validate_spec(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let means = class_mean_directions(cfg.num_classes, cfg.input_dim, cfg.seed);

    // Base noise is drawn once per (class, index) and reused by every
    // environment, so rotations act as exact isometries between environments.
    let mut base: Vec<Vec<Array1<f64>>> = Vec::with_capacity(cfg.num_classes);
    for _ in 0..cfg.num_classes {
        let class_draws = (0..cfg.n_per_class_per_env)
            .map(|_| {
                Array1::from_iter((0..cfg.input_dim).map(|_| rng.sample::<f64, _>(StandardNormal)))
            })
            .collect();
        base.push(class_draws);
    }

    let mut samples = Vec::with_capacity(cfg.envs.len() * cfg.num_classes * cfg.n_per_class_per_env);
    for (env, spec) in cfg.envs.iter().enumerate() {
        for class in 0..cfg.num_classes {
            for eps in &base[class] {
                let x = apply_shift(spec, &means[class], eps, cfg.noise_sigma, cfg.input_dim);
                let mut label = class;
                if cfg.label_noise > 0.0 && rng.random::<f64>() < cfg.label_noise {
                    let offset = rng.random_range(1..cfg.num_classes);
                    label = (class + offset) % cfg.num_classes;
                }
                samples.push(Sample { x, label, env });
            }
        }
    }
    Ok(EnvDataset {
        samples,
        num_classes: cfg.num_classes,
        input_dim: cfg.input_dim,
        specs: cfg.envs.clone(),
        seed: cfg.seed,
    })
}

/// Sidecar metadata written next to each dataset CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub input_dim: usize,
    pub env_roles: Vec<EnvRole>,
    pub shift_specs: Vec<ShiftSpec>,
    pub seed: u64,
}

/// `data.csv` is accompanied by `data.manifest.json`.
pub fn manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("manifest.json")
}

/// Writes `env,label,x1,...,xd` rows plus the manifest. Floats use
/// shortest-round-trip decimal form, so reading them back is exact.
pub fn save_csv(ds: &EnvDataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["env".to_string(), "label".to_string()];
    header.extend((1..=ds.input_dim).map(|i| format!("x{i}")));
    writer.write_record(&header)?;
    for s in &ds.samples {
        let mut record = vec![s.env.to_string(), s.label.to_string()];
        record.extend(s.x.iter().map(|v| format!("{v}")));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    let manifest = DatasetManifest {
        num_classes: ds.num_classes,
        input_dim: ds.input_dim,
        env_roles: ds.env_roles(),
        shift_specs: ds.specs.clone(),
        seed: ds.seed,
    };
    std::fs::write(
        manifest_path(path),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<EnvDataset> {
    let manifest_text = std::fs::read_to_string(manifest_path(path)).map_err(|e| {
        HypoError::SchemaError(format!(
            "missing manifest {}: {e}",
            manifest_path(path).display()
        ))
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_text)?;
    if manifest.env_roles.len() != manifest.shift_specs.len() {
        return Err(HypoError::SchemaError(
            "manifest env_roles and shift_specs lengths disagree".into(),
        ));
    }

    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    {
        let header = reader.headers()?;
        let mut expected = vec!["env".to_string(), "label".to_string()];
        expected.extend((1..=manifest.input_dim).map(|i| format!("x{i}")));
        if header.len() != expected.len()
            || header.iter().zip(expected.iter()).any(|(a, b)| a != b)
        {
            return Err(HypoError::SchemaError(format!(
                "header {:?} does not match expected {:?}",
                header, expected
            )));
        }
    }

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(samples.len() + 2);
        let parse_field = |idx: usize| -> Result<f64> {
            record[idx].parse::<f64>().map_err(|e| HypoError::ParseError {
                line,
                message: format!("column {}: {e}", idx + 1),
            })
        };
        let env: usize = record[0].parse().map_err(|e| HypoError::ParseError {
            line,
            message: format!("env: {e}"),
        })?;
        if env >= manifest.env_roles.len() {
            return Err(HypoError::SchemaError(format!(
                "line {line}: env {env} not declared in manifest"
            )));
        }
        let label: usize = record[1].parse().map_err(|e| HypoError::ParseError {
            line,
            message: format!("label: {e}"),
        })?;
        if label >= manifest.num_classes {
            return Err(HypoError::SchemaError(format!(
                "line {line}: label {label} out of range for {} classes",
                manifest.num_classes
            )));
        }
        let mut x = Array1::zeros(manifest.input_dim);
        for i in 0..manifest.input_dim {
            x[i] = parse_field(2 + i)?;
        }
        samples.push(Sample { x, label, env });
    }
    if samples.is_empty() {
        return Err(HypoError::SchemaError("dataset has a header but no rows".into()));
    }
    Ok(EnvDataset {
        samples,
        num_classes: manifest.num_classes,
        input_dim: manifest.input_dim,
        specs: manifest.shift_specs,
        seed: manifest.seed,
    })
}

/// Index partition: training portion of TRAIN environments, their held-out
/// validation remainder, and the full OOD environments.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train_idx: Vec<usize>,
    pub heldout_by_env: BTreeMap<usize, Vec<usize>>,
    pub ood_by_env: BTreeMap<usize, Vec<usize>>,
}

impl DataSplit {
    pub fn total_len(&self) -> usize {
        self.train_idx.len()
            + self.heldout_by_env.values().map(|v| v.len()).sum::<usize>()
            + self.ood_by_env.values().map(|v| v.len()).sum::<usize>()
    }
}

/// Splits by role, holding out `eval_fraction` of every (TRAIN env, class)
/// cell for validation. Stratifying per cell keeps cell sizes uniform, which
/// the inequality verifiers require. Deterministic under `seed`.
pub fn split_id_ood(ds: &EnvDataset, eval_fraction: f64, seed: u64) -> DataSplit {
    assert!((0.0..1.0).contains(&eval_fraction));
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    let mut ood_by_env: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, s) in ds.samples.iter().enumerate() {
        match ds.role(s.env) {
            EnvRole::Train => cells.entry((s.env, s.label)).or_default().push(idx),
            EnvRole::Ood => ood_by_env.entry(s.env).or_default().push(idx),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5714_0F00);
    let mut train_idx = Vec::new();
    let mut heldout_by_env: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for ((env, _label), mut idxs) in cells {
        use rand::seq::SliceRandom;
        idxs.shuffle(&mut rng);
        let held = (idxs.len() as f64 * eval_fraction).floor() as usize;
        heldout_by_env
            .entry(env)
            .or_default()
            .extend_from_slice(&idxs[..held]);
        train_idx.extend_from_slice(&idxs[held..]);
    }
    train_idx.sort_unstable();
    for v in heldout_by_env.values_mut() {
        v.sort_unstable();
    }
    DataSplit {
        train_idx,
        heldout_by_env,
        ood_by_env,
    }
}

/// The canonical 80/20 split keyed to the dataset's own seed, so every
/// command reconstructs the identical partition.
pub fn standard_split(ds: &EnvDataset) -> DataSplit {
    split_id_ood(ds, 0.2, ds.seed)
}

//! MLP encoder with hyperspherical projection, class prototype bank with EMA
//! and learnable update modes, and nearest-prototype classification.
//!
//! The encoder is rectifier-activated on hidden layers and linear on the
//! output layer; embeddings are the L2-normalized outputs. Backpropagation is
//! hand-rolled against [`ForwardTrace`] so gradients can be verified against
//! finite differences without an autodiff dependency.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HypoError, Result};
use crate::geometry::{self, RawVector, UnitVector};

/// Fully connected encoder h: R^{d_in} -> R^d.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    layer_dims: Vec<usize>,
    /// weights[l] has shape (layer_dims[l+1], layer_dims[l]).
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpEncoder {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mat = Array2::from_shape_fn((fan_out, fan_in), |_| {
                rng.random::<f64>() * 2.0 * bound - bound
            });
            weights.push(mat);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(MlpEncoder {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    /// Builds an encoder from explicit parameters (checkpoint restore, tests).
    pub fn from_parts(
        layer_dims: Vec<usize>,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        validate_dims(&layer_dims)?;
        if weights.len() != layer_dims.len() - 1 || biases.len() != weights.len() {
            return Err(HypoError::DimensionMismatch(
                "parameter count does not match layer_dims".into(),
            ));
        }
        for (l, (w, b)) in weights.iter().zip(biases.iter()).enumerate() {
            if w.shape() != [layer_dims[l + 1], layer_dims[l]] || b.len() != layer_dims[l + 1] {
                return Err(HypoError::DimensionMismatch(format!(
                    "layer {l}: weight shape {:?} or bias len {} inconsistent with dims",
                    w.shape(),
                    b.len()
                )));
            }
        }
        Ok(MlpEncoder {
            layer_dims,
            weights,
            biases,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Forward pass retaining everything backprop needs.
    pub fn forward(&self, x: &Array1<f64>) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(HypoError::DimensionMismatch(format!(
                "input dim {} != encoder d_in {}",
                x.len(),
                self.input_dim()
            )));
        }
        let num_layers = self.num_layers();
        let mut pre_activations = Vec::with_capacity(num_layers);
        let mut activations = Vec::with_capacity(num_layers);
        let mut a = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            let pre = w.dot(&a) + b;
            a = if l + 1 < num_layers {
                pre.mapv(|v| v.max(0.0))
            } else {
                pre.clone()
            };
            pre_activations.push(pre);
            activations.push(a.clone());
        }
        Ok(ForwardTrace {
            input: x.clone(),
            pre_activations,
            activations,
        })
    }

    /// Embeds an input onto the sphere: z = h(x) / ||h(x)||_2.
    pub fn embed(&self, x: &Array1<f64>) -> Result<(UnitVector, ForwardTrace)> {
        let trace = self.forward(x)?;
        let z = geometry::normalize(&trace.raw_output())?;
        Ok((z, trace))
    }

    /// Backpropagates dL/dh (gradient at the raw output) through the layers,
    /// accumulating parameter gradients into `grads`. Callers that differentiate
    /// through the normalized embedding apply [`normalize_backward`] first.
    pub fn backprop(&self, trace: &ForwardTrace, grad_raw: &Array1<f64>, grads: &mut EncoderGrads) {
        let num_layers = self.num_layers();
        let mut g = grad_raw.clone();
        for l in (0..num_layers).rev() {
            // Hidden layers are rectified; the output layer is linear.
            let dpre = if l + 1 < num_layers {
                let pre = &trace.pre_activations[l];
                Array1::from_iter(
                    g.iter()
                        .zip(pre.iter())
                        .map(|(gi, pi)| if *pi > 0.0 { *gi } else { 0.0 }),
                )
            } else {
                g.clone()
            };
            let below = if l == 0 {
                &trace.input
            } else {
                &trace.activations[l - 1]
            };
            for (i, di) in dpre.iter().enumerate() {
                grads.biases[l][i] += di;
                for (j, aj) in below.iter().enumerate() {
                    grads.weights[l][(i, j)] += di * aj;
                }
            }
            if l > 0 {
                g = self.weights[l].t().dot(&dpre);
            }
        }
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(HypoError::InvalidConfig(
            "encoder needs at least input and output dims".into(),
        ));
    }
    if layer_dims.contains(&0) {
        return Err(HypoError::InvalidConfig("zero-width layer".into()));
    }
    if *layer_dims.last().unwrap() < 2 {
        return Err(HypoError::InvalidConfig(
            "embedding dimension must be >= 2".into(),
        ));
    }
    Ok(())
}

/// Per-layer intermediates from one forward pass; the backpropagation
/// workspace. Replaying the stored input reproduces the same outputs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Array1<f64>,
    pub pre_activations: Vec<Array1<f64>>,
    pub activations: Vec<Array1<f64>>,
}

impl ForwardTrace {
    /// Raw (pre-normalization) encoder output h(x).
    pub fn raw_output(&self) -> RawVector {
        RawVector::new(self.activations.last().unwrap().clone())
    }
}

/// Gradient of the normalization z = h/||h|| applied to an upstream gradient:
/// dL/dh = (I - z z^T) g / ||h||.
pub fn normalize_backward(raw_norm: f64, z: &UnitVector, upstream: &Array1<f64>) -> Array1<f64> {
    let zg = z.coords().dot(upstream);
    (upstream - &(z.coords() * zg)) / raw_norm
}

/// Parameter gradients mirroring an encoder's shapes.
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl EncoderGrads {
    pub fn zeros_like(enc: &MlpEncoder) -> Self {
        EncoderGrads {
            weights: enc.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: enc.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            *w *= s;
        }
        for b in &mut self.biases {
            *b *= s;
        }
    }
}

/// How prototypes are maintained during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PrototypeMode {
    /// Exponential moving average of class embeddings; constant w.r.t. loss
    /// gradients (stop-gradient).
    Ema,
    /// Prototypes are parameters: they receive loss gradients and are
    /// re-normalized to unit norm after every optimizer step.
    Learnable,
}

impl std::str::FromStr for PrototypeMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ema" => Ok(PrototypeMode::Ema),
            "learnable" | "lp" => Ok(PrototypeMode::Learnable),
            other => Err(format!("unknown prototype mode '{other}'")),
        }
    }
}

/// C unit-norm class prototypes with an update mode.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    mu: Vec<UnitVector>,
    mode: PrototypeMode,
    alpha: f64,
}

impl PrototypeBank {
    /// Prototypes drawn uniformly on S^{d-1}.
    pub fn init<R: Rng + ?Sized>(
        num_classes: usize,
        dim: usize,
        mode: PrototypeMode,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(HypoError::InvalidConfig("need at least 2 classes".into()));
        }
        if dim < 2 {
            return Err(HypoError::InvalidConfig("need embedding dim >= 2".into()));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(HypoError::InvalidConfig(format!(
                "alpha {alpha} outside [0, 1]"
            )));
        }
        let mu = (0..num_classes)
            .map(|_| geometry::random_unit_direction(dim, rng))
            .collect();
        Ok(PrototypeBank { mu, mode, alpha })
    }

    pub fn from_rows(rows: Vec<UnitVector>, mode: PrototypeMode, alpha: f64) -> Result<Self> {
        if rows.len() < 2 {
            return Err(HypoError::InvalidConfig("need at least 2 classes".into()));
        }
        let dim = rows[0].dim();
        if rows.iter().any(|r| r.dim() != dim) {
            return Err(HypoError::DimensionMismatch(
                "prototype rows have mixed dimensions".into(),
            ));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(HypoError::InvalidConfig(format!(
                "alpha {alpha} outside [0, 1]"
            )));
        }
        Ok(PrototypeBank { mu: rows, mode, alpha })
    }

    pub fn num_classes(&self) -> usize {
        self.mu.len()
    }

    pub fn dim(&self) -> usize {
        self.mu[0].dim()
    }

    pub fn mode(&self) -> PrototypeMode {
        self.mode
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rows(&self) -> &[UnitVector] {
        &self.mu
    }

    pub fn row(&self, class: usize) -> &UnitVector {
        &self.mu[class]
    }

    /// Replaces one row; used by the learnable-prototype optimizer step.
    pub fn set_row(&mut self, class: usize, row: UnitVector) {
        assert_eq!(row.dim(), self.dim());
        self.mu[class] = row;
    }

    /// Nearest-prototype class: argmax_c z^T mu_c, ties to the lowest index.
    pub fn predict(&self, z: &UnitVector) -> usize {
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (c, mu) in self.mu.iter().enumerate() {
            let sim = z.dot(mu);
            if sim > best_sim {
                best_sim = sim;
                best = c;
            }
        }
        best
    }

    /// Streams one embedding of class `class` into its prototype:
    /// mu_c <- Normalize(alpha * mu_c + (1 - alpha) * z).
    pub fn ema_update(&mut self, z: &UnitVector, class: usize) -> Result<()> {
        assert_eq!(self.mode, PrototypeMode::Ema, "ema_update requires EMA mode");
        assert!(class < self.mu.len(), "class index out of range");
        // The endpoints are exact identities; taking them literally keeps
        // alpha = 1 runs byte-stable instead of renormalizing in place.
        if self.alpha == 1.0 {
            return Ok(());
        }
        if self.alpha == 0.0 {
            self.mu[class] = z.clone();
            return Ok(());
        }
        let blended = self.mu[class].coords() * self.alpha + z.coords() * (1.0 - self.alpha);
        let updated = geometry::normalize(&RawVector::new(blended)).map_err(|e| match e {
            HypoError::DegenerateNorm { norm, threshold, .. } => {
                HypoError::degenerate_ctx(norm, threshold, format!("ema update of class {class}"))
            }
            other => other,
        })?;
        self.mu[class] = updated;
        Ok(())
    }

    pub fn posterior(&self, z: &UnitVector, tau: f64) -> Vec<f64> {
        geometry::vmf_posterior(z, &self.mu, tau)
    }
}

/// Linear classification head for the cross-entropy baseline; operates on the
/// raw (unnormalized) encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl LinearHead {
    pub fn new<R: Rng + ?Sized>(num_classes: usize, dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (dim + num_classes) as f64).sqrt();
        LinearHead {
            weights: Array2::from_shape_fn((num_classes, dim), |_| {
                rng.random::<f64>() * 2.0 * bound - bound
            }),
            biases: Array1::zeros(num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn logits(&self, h: &Array1<f64>) -> Array1<f64> {
        self.weights.dot(h) + &self.biases
    }

    pub fn predict(&self, h: &Array1<f64>) -> usize {
        let logits = self.logits(h);
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (c, v) in logits.iter().enumerate() {
            if *v > best_v {
                best_v = *v;
                best = c;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(coords: &[f64]) -> UnitVector {
        UnitVector::from_slice(coords).unwrap()
    }

    fn identity_encoder(d: usize) -> MlpEncoder {
        MlpEncoder::from_parts(
            vec![d, d],
            vec![Array2::eye(d)],
            vec![Array1::zeros(d)],
        )
        .unwrap()
    }

    #[test]
    fn embed_identity_layer_reduces_to_normalize() {
        let enc = identity_encoder(2);
        let (z, _) = enc.embed(&array![3.0, 4.0]).unwrap();
        assert!((z.coords()[0] - 0.6).abs() < 1e-15);
        assert!((z.coords()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn embed_zero_encoder_is_degenerate() {
        let enc = MlpEncoder::from_parts(
            vec![2, 2],
            vec![Array2::zeros((2, 2))],
            vec![Array1::zeros(2)],
        )
        .unwrap();
        let err = enc.embed(&array![1.0, -2.0]).unwrap_err();
        assert!(matches!(err, HypoError::DegenerateNorm { .. }));
    }

    #[test]
    fn embed_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = MlpEncoder::new(&[3, 8, 4], &mut rng).unwrap();
        let x = array![0.3, -1.2, 0.9];
        let (z1, _) = enc.embed(&x).unwrap();
        let (z2, _) = enc.embed(&x).unwrap();
        assert_eq!(z1.coords(), z2.coords());
    }

    #[test]
    fn trace_replay_reproduces_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let enc = MlpEncoder::new(&[4, 6, 3], &mut rng).unwrap();
        let x = array![0.1, 0.4, -0.7, 2.0];
        let (z, trace) = enc.embed(&x).unwrap();
        let replayed = enc.forward(&trace.input).unwrap();
        assert_eq!(
            replayed.activations.last().unwrap(),
            trace.activations.last().unwrap()
        );
        let z2 = geometry::normalize(&replayed.raw_output()).unwrap();
        assert_eq!(z.coords(), z2.coords());
    }

    #[test]
    fn predict_self_similarity() {
        let bank = PrototypeBank::from_rows(
            vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[-1.0, 0.0])],
            PrototypeMode::Ema,
            0.95,
        )
        .unwrap();
        assert_eq!(bank.predict(&unit(&[0.0, 1.0])), 1);
    }

    #[test]
    fn predict_near_boundary() {
        // Antipodal prototypes; z at +89 degrees from the first still lands
        // on the first (cos 89 > cos 91).
        let bank = PrototypeBank::from_rows(
            vec![unit(&[1.0, 0.0]), unit(&[-1.0, 0.0])],
            PrototypeMode::Ema,
            0.95,
        )
        .unwrap();
        let theta = 89f64.to_radians();
        let z = unit(&[theta.cos(), theta.sin()]);
        assert_eq!(bank.predict(&z), 0);
    }

    #[test]
    fn predict_tie_breaks_low() {
        let bank = PrototypeBank::from_rows(
            vec![unit(&[1.0, 0.0]), unit(&[-1.0, 0.0])],
            PrototypeMode::Ema,
            0.95,
        )
        .unwrap();
        // Orthogonal to both: similarity 0 vs 0.
        assert_eq!(bank.predict(&unit(&[0.0, 1.0])), 0);
    }

    #[test]
    fn predict_invariant_to_raw_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let bank = PrototypeBank::init(4, 3, PrototypeMode::Ema, 0.9, &mut rng).unwrap();
        for _ in 0..50 {
            let h = Array1::from_iter((0..3).map(|_| rng.random::<f64>() * 2.0 - 1.0));
            if geometry::normalize(&RawVector::new(h.clone())).is_err() {
                continue;
            }
            let base = bank.predict(&geometry::normalize(&RawVector::new(h.clone())).unwrap());
            for s in [1e-3, 0.5, 7.0, 1e6] {
                let scaled = geometry::normalize(&RawVector::new(&h * s)).unwrap();
                assert_eq!(bank.predict(&scaled), base);
            }
        }
    }

    #[test]
    fn ema_update_matches_direct_formula() {
        let mut bank = PrototypeBank::from_rows(
            vec![unit(&[1.0, 0.0]), unit(&[-1.0, 0.0])],
            PrototypeMode::Ema,
            0.95,
        )
        .unwrap();
        bank.ema_update(&unit(&[0.0, 1.0]), 0).unwrap();
        // Normalize(0.95 * (1,0) + 0.05 * (0,1)) computed directly.
        let norm = (0.95f64 * 0.95 + 0.05 * 0.05).sqrt();
        assert!((bank.row(0).coords()[0] - 0.95 / norm).abs() < 1e-15);
        assert!((bank.row(0).coords()[1] - 0.05 / norm).abs() < 1e-15);
        assert!((bank.row(0).coords()[0] - 0.9986178293325098).abs() < 1e-12);
        assert!((bank.row(0).coords()[1] - 0.052558833122763673).abs() < 1e-12);
        // The other row is untouched.
        assert_eq!(bank.row(1).coords(), unit(&[-1.0, 0.0]).coords());
    }

    #[test]
    fn ema_alpha_one_keeps_prototype() {
        let mut bank = PrototypeBank::from_rows(
            vec![unit(&[1.0, 0.0]), unit(&[-1.0, 0.0])],
            PrototypeMode::Ema,
            1.0,
        )
        .unwrap();
        bank.ema_update(&unit(&[0.0, 1.0]), 0).unwrap();
        assert_eq!(bank.row(0).coords(), unit(&[1.0, 0.0]).coords());
    }

    #[test]
    fn ema_alpha_zero_replaces_prototype() {
        let mut bank = PrototypeBank::from_rows(
            vec![unit(&[1.0, 0.0]), unit(&[-1.0, 0.0])],
            PrototypeMode::Ema,
            0.0,
        )
        .unwrap();
        bank.ema_update(&unit(&[0.0, 1.0]), 0).unwrap();
        assert_eq!(bank.row(0).coords(), unit(&[0.0, 1.0]).coords());
    }

    #[test]
    fn ema_antipodal_half_blend_is_degenerate() {
        let mut bank = PrototypeBank::from_rows(
            vec![unit(&[1.0, 0.0]), unit(&[-1.0, 0.0])],
            PrototypeMode::Ema,
            0.5,
        )
        .unwrap();
        let err = bank.ema_update(&unit(&[-1.0, 0.0]), 0).unwrap_err();
        assert!(matches!(err, HypoError::DegenerateNorm { .. }));
    }

    #[test]
    fn init_prototypes_unit_and_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(99);
        let mut b = ChaCha8Rng::seed_from_u64(99);
        let bank1 = PrototypeBank::init(7, 512, PrototypeMode::Ema, 0.95, &mut a).unwrap();
        let bank2 = PrototypeBank::init(7, 512, PrototypeMode::Ema, 0.95, &mut b).unwrap();
        for (r1, r2) in bank1.rows().iter().zip(bank2.rows()) {
            assert_eq!(r1.coords(), r2.coords());
            let norm = r1.coords().dot(r1.coords()).sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn init_prototypes_mean_pairwise_dot_near_zero() {
        // Monte-Carlo: mean inner product of two independent uniform
        // directions on S^1 is 0.
        let mut sum = 0.0;
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank = PrototypeBank::init(2, 2, PrototypeMode::Ema, 0.95, &mut rng).unwrap();
            sum += bank.row(0).dot(bank.row(1));
        }
        assert!((sum / 1000.0).abs() < 0.1);
    }

    #[test]
    fn normalize_backward_projects_out_radial_component() {
        // h = (1, 0), upstream (a, b): the radial part a is removed.
        let z = unit(&[1.0, 0.0]);
        let g = array![3.7, -2.5];
        let back = normalize_backward(1.0, &z, &g);
        assert!((back[0] - 0.0).abs() < 1e-15);
        assert!((back[1] + 2.5).abs() < 1e-15);
    }
}

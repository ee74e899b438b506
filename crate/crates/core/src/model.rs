//! Encoder → embedder → classifier network.
//!
//! The encoder is a stack of dense layers with ReLU. The embedder is one
//! linear layer (no activation) followed by batch standardization with a
//! learned per-feature scale and shift. The classifier is a single linear
//! layer applied to the raw (un-normalized) embedding.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NormMode, ParamId, SeedStream, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub encoder_out_dim: usize,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub batchnorm_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16 * 16 * 3,
            encoder_hidden: vec![128],
            encoder_out_dim: 128,
            embedding_dim: 32,
            num_classes: 9,
            batchnorm_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [self.input_dim, self.encoder_out_dim, self.embedding_dim];
        if widths.iter().chain(&self.encoder_hidden).any(|&w| w == 0) {
            return Err(Error::Config("all layer widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.embedding_dim > self.encoder_out_dim {
            return Err(Error::Config(format!(
                "embedding_dim {} exceeds encoder_out_dim {}",
                self.embedding_dim, self.encoder_out_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.batchnorm_momentum) {
            return Err(Error::Config(
                "batchnorm_momentum must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every encoder layer, in order.
    fn encoder_layers(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.encoder_hidden);
        widths.push(self.encoder_out_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor with a stable name.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// Parameter handles bound onto one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct S5CLModel {
    config: ModelConfig,
    params: Vec<NamedTensor>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    mode: Mode,
}

/// Symmetric uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut SeedStream) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.uniform(-bound, bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

impl S5CLModel {
    /// Glorot-uniform weights, zero biases, unit BN scale, running stats (0, 1).
    pub fn init_parameters(config: &ModelConfig, rng: &mut SeedStream) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        for (i, (fan_in, fan_out)) in config.encoder_layers().into_iter().enumerate() {
            params.push(NamedTensor {
                name: format!("encoder.{i}.weight"),
                value: uniform_matrix(fan_in, fan_out, glorot_bound(fan_in, fan_out), rng),
            });
            params.push(NamedTensor {
                name: format!("encoder.{i}.bias"),
                value: Tensor::zeros(&[fan_out]),
            });
        }
        let (e_in, e_out) = (config.encoder_out_dim, config.embedding_dim);
        params.push(NamedTensor {
            name: "embedder.weight".into(),
            value: uniform_matrix(e_in, e_out, glorot_bound(e_in, e_out), rng),
        });
        params.push(NamedTensor {
            name: "embedder.bias".into(),
            value: Tensor::zeros(&[e_out]),
        });
        params.push(NamedTensor {
            name: "embedder.norm.scale".into(),
            value: Tensor::full(&[e_out], 1.0),
        });
        params.push(NamedTensor {
            name: "embedder.norm.shift".into(),
            value: Tensor::zeros(&[e_out]),
        });
        let c = config.num_classes;
        params.push(NamedTensor {
            name: "classifier.weight".into(),
            value: uniform_matrix(e_out, c, glorot_bound(e_out, c), rng),
        });
        params.push(NamedTensor {
            name: "classifier.bias".into(),
            value: Tensor::zeros(&[c]),
        });
        Ok(Self {
            config: config.clone(),
            params,
            running_mean: vec![0.0; e_out],
            running_var: vec![1.0; e_out],
            mode: Mode::Train,
        })
    }

    /// Rebuilds a model from named tensors, as read from a checkpoint.
    pub fn from_named(config: &ModelConfig, tensors: Vec<NamedTensor>) -> Result<Self> {
        let mut rng = SeedStream::new(0);
        let mut model = Self::init_parameters(config, &mut rng)?;
        let mut by_name: std::collections::HashMap<String, Tensor> =
            tensors.into_iter().map(|t| (t.name, t.value)).collect();
        for p in &mut model.params {
            let t = by_name
                .remove(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_checkpoint",
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.value = t;
        }
        for (name, slot) in [
            ("embedder.norm.running_mean", &mut model.running_mean),
            ("embedder.norm.running_var", &mut model.running_var),
        ] {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
            if t.numel() != slot.len() {
                return Err(Error::ShapeMismatch {
                    op: "load_checkpoint",
                    lhs: vec![slot.len()],
                    rhs: t.shape().to_vec(),
                });
            }
            *slot = t.into_data();
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!(
                "unexpected checkpoint tensor `{extra}`"
            )));
        }
        Ok(model)
    }

    /// Parameters plus running statistics, in a fixed order.
    pub fn to_named(&self) -> Vec<NamedTensor> {
        let mut out = self.params.clone();
        let d = self.running_mean.len();
        out.push(NamedTensor {
            name: "embedder.norm.running_mean".into(),
            value: Tensor::new(vec![d], self.running_mean.clone()).expect("positive"),
        });
        out.push(NamedTensor {
            name: "embedder.norm.running_var".into(),
            value: Tensor::new(vec![d], self.running_var.clone()).expect("positive"),
        });
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn param_tensors_mut(&mut self) -> impl Iterator<Item = (ParamId, &str, &mut Tensor)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p.name.as_str(), &mut p.value))
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn running_stats(&self) -> (&[f64], &[f64]) {
        (&self.running_mean, &self.running_var)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(ParamId(i), p.value.clone()))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    /// Records every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    fn n_encoder(&self) -> usize {
        self.config.encoder_hidden.len() + 1
    }

    fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = tape.matmul(x, w)?;
        tape.add(h, b)
    }

    /// Raw embeddings for a `B×input_dim` batch.
    ///
    /// In train mode the normalizer uses batch statistics and updates the
    /// running estimates; in eval mode it uses the running estimates only.
    pub fn embed(&mut self, tape: &mut Tape, bound: &Bound, images: Var) -> Result<Var> {
        let width = tape.value(images).cols();
        if width != self.config.input_dim || !tape.value(images).is_matrix() {
            return Err(Error::ShapeMismatch {
                op: "embed",
                lhs: tape.value(images).shape().to_vec(),
                rhs: vec![self.config.input_dim],
            });
        }
        let mut h = images;
        for layer in 0..self.n_encoder() {
            let z = Self::linear(tape, h, bound.vars[2 * layer], bound.vars[2 * layer + 1])?;
            h = tape.relu(z)?;
        }
        let base = 2 * self.n_encoder();
        let e = Self::linear(tape, h, bound.vars[base], bound.vars[base + 1])?;
        let mode = match self.mode {
            Mode::Train => NormMode::Batch,
            Mode::Eval => NormMode::Running {
                mean: self.running_mean.clone(),
                var: self.running_var.clone(),
            },
        };
        let (normed, stats) = tape.batch_stats_normalize(e, &mode)?;
        if let Some(stats) = stats {
            let m = self.config.batchnorm_momentum;
            let n = stats.count as f64;
            for j in 0..self.running_mean.len() {
                self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * stats.mean[j];
                let unbiased = stats.var[j] * n / (n - 1.0);
                self.running_var[j] = (1.0 - m) * self.running_var[j] + m * unbiased;
            }
        }
        let scaled = tape.mul(normed, bound.vars[base + 2])?;
        tape.add(scaled, bound.vars[base + 3])
    }

    /// Class logits for `B×embedding_dim` embeddings.
    pub fn classify(&self, tape: &mut Tape, bound: &Bound, embeddings: Var) -> Result<Var> {
        let width = tape.value(embeddings).cols();
        if width != self.config.embedding_dim {
            return Err(Error::ShapeMismatch {
                op: "classify",
                lhs: tape.value(embeddings).shape().to_vec(),
                rhs: vec![self.config.embedding_dim],
            });
        }
        let base = 2 * self.n_encoder() + 4;
        Self::linear(tape, embeddings, bound.vars[base], bound.vars[base + 1])
    }

    /// Classifier applied to plain values, without any tape.
    pub fn classify_values(&self, embeddings: &Tensor) -> Result<Tensor> {
        if embeddings.cols() != self.config.embedding_dim {
            return Err(Error::ShapeMismatch {
                op: "classify",
                lhs: embeddings.shape().to_vec(),
                rhs: vec![self.config.embedding_dim],
            });
        }
        let base = 2 * self.n_encoder() + 4;
        let mut logits = embeddings.matmul(&self.params[base].value)?;
        let bias = self.params[base + 1].value.data();
        let c = bias.len();
        for (i, v) in logits.data_mut().iter_mut().enumerate() {
            *v += bias[i % c];
        }
        Ok(logits)
    }

    /// Eval-mode embeddings and logits for plain input values.
    ///
    /// Temporarily switches to eval mode so the running statistics are
    /// neither used for normalization in batch mode nor updated.
    pub fn infer(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut snapshot = self.clone();
        snapshot.mode = Mode::Eval;
        let mut tape = Tape::new();
        let bound = snapshot.bind_frozen(&mut tape)?;
        let x = tape.constant(images.clone())?;
        let z = snapshot.embed(&mut tape, &bound, x)?;
        let logits = snapshot.classify(&mut tape, &bound, z)?;
        Ok((tape.value(z).clone(), tape.value(logits).clone()))
    }
}

/// Softmax of each row.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::seeded_rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            encoder_hidden: vec![5],
            encoder_out_dim: 4,
            embedding_dim: 3,
            num_classes: 3,
            batchnorm_momentum: 0.1,
        }
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.unit()).collect()).unwrap()
    }

    #[test]
    fn rejects_invalid_config() {
        let mut c = small_config();
        c.embedding_dim = 10;
        assert!(c.validate().is_err());
        c = small_config();
        c.encoder_hidden = vec![0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let c = small_config();
        let a = S5CLModel::init_parameters(&c, &mut seeded_rng(3)).unwrap();
        let b = S5CLModel::init_parameters(&c, &mut seeded_rng(3)).unwrap();
        assert_eq!(a, b);
        for p in a.params() {
            if p.name.ends_with("weight") {
                let (fi, fo) = (p.value.rows(), p.value.cols());
                let bound = glorot_bound(fi, fo);
                assert!(bound > 0.0);
                assert!(p.value.data().iter().all(|v| v.abs() <= bound));
            } else if p.name.ends_with("bias") || p.name.ends_with("shift") {
                assert!(p.value.data().iter().all(|&v| v == 0.0));
            }
        }
        assert_eq!(a.running_stats().0, &[0.0; 3]);
        assert_eq!(a.running_stats().1, &[1.0; 3]);
    }

    #[test]
    fn weight_variance_matches_uniform_moment() {
        let c = ModelConfig {
            input_dim: 100,
            encoder_hidden: vec![],
            encoder_out_dim: 100,
            embedding_dim: 10,
            num_classes: 2,
            batchnorm_momentum: 0.1,
        };
        let m = S5CLModel::init_parameters(&c, &mut seeded_rng(11)).unwrap();
        let w = &m.params()[0].value;
        assert_eq!(w.numel(), 10_000);
        let a = glorot_bound(100, 100);
        let mean = w.data().iter().sum::<f64>() / w.numel() as f64;
        let var = w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.numel() as f64;
        let expected = a * a / 3.0;
        assert!(
            (var - expected).abs() / expected < 0.1,
            "{var} vs {expected}"
        );
    }

    fn zero_weights(model: &mut S5CLModel) {
        for (_, name, t) in model.param_tensors_mut() {
            if name.ends_with("weight") {
                *t = Tensor::zeros(t.shape());
            }
        }
    }

    #[test]
    fn zero_weight_model_embeds_to_bias() {
        let mut model = S5CLModel::init_parameters(&small_config(), &mut seeded_rng(1)).unwrap();
        zero_weights(&mut model);
        let bias = vec![0.5, -1.0, 2.0];
        let id = model.param_id("embedder.bias").unwrap();
        for (pid, _, t) in model.param_tensors_mut() {
            if pid == id {
                *t = Tensor::new(vec![3], bias.clone()).unwrap();
            }
        }
        let (z, _) = model.infer(&random_input(4, 6, 2)).unwrap();
        for i in 0..4 {
            for (a, b) in z.row(i).iter().zip(&bias) {
                // running stats are (0, 1), so only the variance offset remains
                assert!((a - b / (1.0 + crate::autodiff::NORM_EPS).sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weight_classifier_is_uniform() {
        let mut model = S5CLModel::init_parameters(&small_config(), &mut seeded_rng(1)).unwrap();
        zero_weights(&mut model);
        let (_, logits) = model.infer(&random_input(3, 6, 5)).unwrap();
        for row in softmax_rows(&logits) {
            assert!(row.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn saturated_logit_wins() {
        let logits = Tensor::from_rows(&[vec![1000.0, 0.0, 0.0]]).unwrap();
        let p = softmax_rows(&logits);
        assert!(p[0][0] > 1.0 - 1e-12);
    }

    #[test]
    fn duplicated_rows_embed_identically() {
        let model = S5CLModel::init_parameters(&small_config(), &mut seeded_rng(9)).unwrap();
        let x = random_input(1, 6, 4);
        let dup = Tensor::matrix(2, 6, [x.data(), x.data()].concat()).unwrap();
        let (z, _) = model.infer(&dup).unwrap();
        assert_eq!(z.row(0), z.row(1));
    }

    #[test]
    fn width_mismatch_errors() {
        let mut model = S5CLModel::init_parameters(&small_config(), &mut seeded_rng(9)).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let x = tape.constant(random_input(2, 5, 1)).unwrap();
        assert!(matches!(
            model.embed(&mut tape, &bound, x),
            Err(Error::ShapeMismatch { op: "embed", .. })
        ));
        let z = tape.constant(random_input(2, 4, 1)).unwrap();
        assert!(model.classify(&mut tape, &bound, z).is_err());
    }

    #[test]
    fn classify_matches_manual_linear_map() {
        let model = S5CLModel::init_parameters(&small_config(), &mut seeded_rng(21)).unwrap();
        let z = random_input(4, 3, 8);
        let w = &model.params()[model.param_id("classifier.weight").unwrap().0].value;
        let logits = model.classify_values(&z).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let manual: f64 = (0..3).map(|k| z.at(i, k) * w.at(k, j)).sum();
                assert!((logits.at(i, j) - manual).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn train_mode_normalizer_standardizes_batch() {
        let mut model = S5CLModel::init_parameters(&small_config(), &mut seeded_rng(2)).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind_frozen(&mut tape).unwrap();
        let x = tape.constant(random_input(16, 6, 3)).unwrap();
        let z = model.embed(&mut tape, &bound, x).unwrap();
        // scale 1 and shift 0 at init, so the output is the standardized batch
        let out = tape.value(z);
        for j in 0..3 {
            let col: Vec<f64> = (0..16).map(|i| out.at(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 16.0;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
        assert_ne!(model.running_stats().0, &[0.0; 3]);
    }

    #[test]
    fn checkpoint_tensors_round_trip() {
        let mut model = S5CLModel::init_parameters(&small_config(), &mut seeded_rng(2)).unwrap();
        model.running_mean = vec![0.1, 0.2, 0.3];
        let rebuilt = S5CLModel::from_named(&small_config(), model.to_named()).unwrap();
        assert_eq!(rebuilt.params(), model.params());
        assert_eq!(rebuilt.running_stats(), model.running_stats());
    }
}

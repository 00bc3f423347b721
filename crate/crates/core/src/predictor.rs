//! Learned return predictor: a shared trunk feeding one Gaussian head per
//! reward component, trained on normalized decomposed returns.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{layers_to_records, records_to_net, LayerRecord};
use crate::env::{ActionSpace, ComponentSet};
use crate::error::{Error, Result};
use crate::nn::{gaussian_nll, gaussian_nll_grad, Activation, Adagrad, DenseNet, Gradients, Tape, LOG_STD_MAX, LOG_STD_MIN};
use crate::rollout::{substream, Dataset, NormalizationSpec, RolloutSample};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &str = "cbx1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub trunk_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub stage1_lr: f64,
    pub stage1_epochs: usize,
    pub stage2_lr: f64,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    /// Per-component weights of the summed NLL; empty means all ones.
    pub loss_weights: Vec<f64>,
    pub decay: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            trunk_widths: vec![128, 128],
            head_widths: vec![64],
            stage1_lr: 1e-2,
            stage1_epochs: 30,
            stage2_lr: 1e-3,
            stage2_epochs: 10,
            batch_size: 64,
            loss_weights: Vec::new(),
            decay: 1e-9,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, components: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.trunk_widths.is_empty() {
            return Err(Error::InvalidConfig("trunk needs at least one layer".into()));
        }
        if self.trunk_widths.contains(&0) || self.head_widths.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if !self.loss_weights.is_empty() && self.loss_weights.len() != components {
            return Err(Error::InvalidConfig(format!(
                "{} loss weights for {components} components",
                self.loss_weights.len()
            )));
        }
        for (name, v) in [("stage1_lr", self.stage1_lr), ("stage2_lr", self.stage2_lr), ("decay", self.decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(&json))
    }

    fn loss_weight(&self, c: usize) -> f64 {
        self.loss_weights.get(c).copied().unwrap_or(1.0)
    }
}

/// Mean and standard deviation of one component's predicted return.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub components: ComponentSet,
    pub action: Vec<f64>,
    pub normalized: Vec<Gaussian>,
    pub denormalized: Vec<Gaussian>,
    /// Weighted sum of the denormalized means.
    pub total: f64,
    /// Components the training data never varied; their value is the constant seen.
    pub degenerate: Vec<bool>,
}

impl Explanation {
    pub fn means(&self) -> Vec<f64> {
        self.denormalized.iter().map(|g| g.mean).collect()
    }

    pub fn normalized_means(&self) -> Vec<f64> {
        self.normalized.iter().map(|g| g.mean).collect()
    }
}

/// Losses reported by [`train`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage1: Vec<f64>,
    pub stage2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorModel<T> {
    pub trunk: DenseNet<T>,
    pub heads: Vec<DenseNet<T>>,
    pub components: ComponentSet,
    pub normalization: NormalizationSpec<f64>,
    pub action_space: ActionSpace,
    pub feature_len: usize,
    pub config: TrainConfig,
}

/// Samples per unit of parallel gradient work.
const GRAD_CHUNK: usize = 16;

struct BatchGrads<T> {
    trunk: Option<Gradients<T>>,
    heads: Vec<Gradients<T>>,
}

impl<T: Scalar> BatchGrads<T> {
    fn add(&mut self, other: &Self) {
        if let (Some(a), Some(b)) = (self.trunk.as_mut(), other.trunk.as_ref()) {
            a.add(b);
        }
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            a.add(b);
        }
    }
}

struct Pass<T> {
    trunk: Tape<T>,
    heads: Vec<Tape<T>>,
}

impl<T: Scalar> PredictorModel<T> {
    pub fn new(
        feature_len: usize,
        action_space: ActionSpace,
        components: ComponentSet,
        normalization: NormalizationSpec<f64>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate(components.len())?;
        if normalization.len() != components.len() {
            return Err(Error::ComponentMismatch(format!(
                "normalization covers {} components, expected {}",
                normalization.len(),
                components.len()
            )));
        }
        let mut rng = substream(config.seed, 0);
        let input = feature_len + action_space.encoding_len();
        let (&trunk_out, trunk_hidden) = config.trunk_widths.split_last().expect("validated");
        let trunk = DenseNet::new(input, trunk_hidden, trunk_out, Activation::Relu, &mut rng);
        let heads = (0..components.len())
            .map(|_| DenseNet::new(trunk_out, &config.head_widths, 2, Activation::Identity, &mut rng))
            .collect();
        Ok(Self {
            trunk,
            heads,
            components,
            normalization,
            action_space,
            feature_len,
            config,
        })
    }

    pub fn input_len(&self) -> usize {
        self.feature_len + self.action_space.encoding_len()
    }

    fn input(&self, features: &[f64], action: &[f64]) -> Result<Vec<T>> {
        if features.len() != self.feature_len {
            return Err(Error::DimensionMismatch {
                expected: self.feature_len,
                got: features.len(),
            });
        }
        if action.len() != self.action_space.encoding_len() {
            return Err(Error::DimensionMismatch {
                expected: self.action_space.encoding_len(),
                got: action.len(),
            });
        }
        Ok(features.iter().chain(action).map(|&v| T::of(v)).collect())
    }

    /// Raw (mean, log_std) pairs in normalized space.
    pub fn forward(&self, features: &[f64], action: &[f64]) -> Result<Vec<(T, T)>> {
        let hidden = self.trunk.forward(&self.input(features, action)?)?;
        self.heads
            .iter()
            .map(|h| h.forward(&hidden).map(|o| (o[0], o[1])))
            .collect()
    }

    fn forward_recorded(&self, input: &[T]) -> Result<Pass<T>> {
        let trunk = self.trunk.forward_recorded(input)?;
        let heads = self
            .heads
            .iter()
            .map(|h| h.forward_recorded(trunk.output()))
            .collect::<Result<_>>()?;
        Ok(Pass { trunk, heads })
    }

    /// One forward pass through trunk and heads for the encoded `action`.
    pub fn predict(&self, features: &[f64], action: &[f64]) -> Result<Explanation> {
        let raw = self.forward(features, action)?;
        let mut normalized = Vec::with_capacity(raw.len());
        let mut denormalized = Vec::with_capacity(raw.len());
        for (c, &(mean, log_std)) in raw.iter().enumerate() {
            let mean = mean.as_f64();
            let std = log_std.as_f64().clamp(LOG_STD_MIN, LOG_STD_MAX).exp();
            normalized.push(Gaussian { mean, std });
            denormalized.push(Gaussian {
                mean: self.normalization.denormalize_component(c, mean),
                std: std * self.normalization.range(c),
            });
        }
        let total = self
            .components
            .weighted_sum(&denormalized.iter().map(|g| g.mean).collect::<Vec<_>>());
        Ok(Explanation {
            components: self.components.clone(),
            action: action.to_vec(),
            normalized,
            denormalized,
            total,
            degenerate: self.normalization.degenerate.clone(),
        })
    }

    fn zero_grads(&self, with_trunk: bool) -> BatchGrads<T> {
        BatchGrads {
            trunk: with_trunk.then(|| Gradients::zeros_like(&self.trunk)),
            heads: self.heads.iter().map(Gradients::zeros_like).collect(),
        }
    }

    /// Adds the gradients of one sample's weighted NLL to `grads` and returns
    /// the loss. Trunk gradients are skipped when `grads.trunk` is `None`.
    fn accumulate(&self, sample: &RolloutSample, grads: &mut BatchGrads<T>) -> Result<f64> {
        let input = self.input(&sample.features, &sample.action)?;
        let pass = self.forward_recorded(&input)?;
        let mut loss = 0.0;
        let mut d_hidden = vec![T::zero(); self.trunk.output_len()];
        for (c, ((head, tape), hg)) in self.heads.iter().zip(&pass.heads).zip(&mut grads.heads).enumerate() {
            let out = tape.output();
            let g = gaussian_nll_grad(out[0], out[1], T::of(sample.target[c]))?;
            let w = T::of(self.config.loss_weight(c));
            loss += (w * g.loss).as_f64();
            let d_in = head.backward(tape, &[w * g.d_mean, w * g.d_log_std], hg);
            d_hidden.iter_mut().zip(&d_in).for_each(|(a, &b)| *a += b);
        }
        if let Some(tg) = grads.trunk.as_mut() {
            self.trunk.backward(&pass.trunk, &d_hidden, tg);
        }
        Ok(loss)
    }

    /// Weighted NLL of one sample with its trunk and per-head gradients.
    pub fn sample_gradients(&self, sample: &RolloutSample) -> Result<(f64, Gradients<T>, Vec<Gradients<T>>)> {
        let mut grads = self.zero_grads(true);
        let loss = self.accumulate(sample, &mut grads)?;
        Ok((loss, grads.trunk.expect("trunk gradients requested"), grads.heads))
    }

    /// Weighted NLL of one sample.
    pub fn sample_loss(&self, sample: &RolloutSample) -> Result<f64> {
        let raw = self.forward(&sample.features, &sample.action)?;
        let mut loss = 0.0;
        for (c, &(mean, log_std)) in raw.iter().enumerate() {
            let nll = gaussian_nll(mean, log_std, T::of(sample.target[c]))?;
            loss += self.config.loss_weight(c) * nll.as_f64();
        }
        Ok(loss)
    }

    /// Mean weighted NLL over `samples`.
    pub fn loss(&self, samples: &[RolloutSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Empty("samples"));
        }
        let losses = samples.par_iter().map(|s| self.sample_loss(s)).collect::<Result<Vec<_>>>()?;
        Ok(losses.iter().sum::<f64>() / samples.len() as f64)
    }

    fn run_epoch(
        &mut self,
        samples: &[RolloutSample],
        order: &[usize],
        mut trunk_opt: Option<&mut Adagrad<T>>,
        head_opts: &mut [Adagrad<T>],
    ) -> Result<f64> {
        let with_trunk = trunk_opt.is_some();
        let mut epoch_loss = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            // Fixed-size chunks summed in order keep results independent of
            // the thread count.
            let partials = batch
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    let mut grads = self.zero_grads(with_trunk);
                    let mut loss = 0.0;
                    for &i in chunk {
                        loss += self.accumulate(&samples[i], &mut grads)?;
                    }
                    Ok((loss, grads))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut parts = partials.into_iter();
            let (mut batch_loss, mut grads) = parts.next().expect("non-empty batch");
            for (loss, g) in parts {
                batch_loss += loss;
                grads.add(&g);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss {batch_loss}")));
            }
            epoch_loss += batch_loss;
            let scale = T::of(1.0 / batch.len() as f64);
            if let (Some(opt), Some(g)) = (trunk_opt.as_deref_mut(), grads.trunk.as_mut()) {
                g.scale(scale);
                opt.step(&mut self.trunk, g)?;
            }
            for ((head, opt), g) in self.heads.iter_mut().zip(head_opts.iter_mut()).zip(grads.heads.iter_mut()) {
                g.scale(scale);
                opt.step(head, g)?;
            }
        }
        if let Some(opt) = trunk_opt {
            opt.end_epoch();
        }
        head_opts.iter_mut().for_each(Adagrad::end_epoch);
        Ok(epoch_loss / order.len() as f64)
    }

    fn check_samples(&self, samples: &[RolloutSample]) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::Empty("training samples"));
        }
        for s in samples {
            if s.target.len() != self.components.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.components.len(),
                    got: s.target.len(),
                });
            }
            self.input(&s.features, &s.action)?;
        }
        Ok(())
    }

    /// Stage 1 trains trunk and heads; stage 2 fine-tunes only the heads.
    pub fn fit(&mut self, samples: &[RolloutSample]) -> Result<TrainReport> {
        self.check_samples(samples)?;
        let cfg = self.config.clone();
        let (decay, eps) = (T::of(cfg.decay), T::of(cfg.epsilon));
        let mut rng = substream(cfg.seed, 1);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut report = TrainReport::default();

        let mut trunk_opt = Adagrad::new(&self.trunk, T::of(cfg.stage1_lr), decay, eps);
        let mut head_opts: Vec<_> = self.heads.iter().map(|h| Adagrad::new(h, T::of(cfg.stage1_lr), decay, eps)).collect();
        for _ in 0..cfg.stage1_epochs {
            order.shuffle(&mut rng);
            report.stage1.push(self.run_epoch(samples, &order, Some(&mut trunk_opt), &mut head_opts)?);
        }

        let mut head_opts: Vec<_> = self.heads.iter().map(|h| Adagrad::new(h, T::of(cfg.stage2_lr), decay, eps)).collect();
        for _ in 0..cfg.stage2_epochs {
            order.shuffle(&mut rng);
            report.stage2.push(self.run_epoch(samples, &order, None, &mut head_opts)?);
        }
        Ok(report)
    }
}

/// Builds a model for `dataset` and trains it.
pub fn train<T: Scalar>(dataset: &Dataset, config: TrainConfig) -> Result<(PredictorModel<T>, TrainReport)> {
    let h = &dataset.header;
    let mut model = PredictorModel::new(h.feature_len, h.action_space, h.components.clone(), h.normalization.clone(), config)?;
    let report = model.fit(&dataset.samples)?;
    Ok((model, report))
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct Checkpoint<T> {
    magic: String,
    config_hash: String,
    config: TrainConfig,
    component_set: ComponentSet,
    normalization: NormalizationSpec<f64>,
    action_space: ActionSpace,
    feature_len: usize,
    trunk: Vec<LayerRecord<T>>,
    heads: BTreeMap<String, Vec<LayerRecord<T>>>,
}

impl<T: Scalar> PredictorModel<T> {
    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            magic: CHECKPOINT_MAGIC.into(),
            config_hash: self.config.hash(),
            config: self.config.clone(),
            component_set: self.components.clone(),
            normalization: self.normalization.clone(),
            action_space: self.action_space,
            feature_len: self.feature_len,
            trunk: layers_to_records(&self.trunk),
            heads: self
                .components
                .names
                .iter()
                .zip(&self.heads)
                .map(|(n, h)| (n.clone(), layers_to_records(h)))
                .collect(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Magic {
            magic: String,
        }
        let magic: Magic = serde_json::from_str(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if magic.magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {:?}", magic.magic)));
        }
        let mut ckpt: Checkpoint<T> = serde_json::from_str(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.config.hash() != ckpt.config_hash {
            return Err(Error::Checkpoint("config hash does not match recorded config".into()));
        }
        let trunk = records_to_net(&ckpt.trunk)?;
        let mut heads = Vec::with_capacity(ckpt.component_set.len());
        for name in &ckpt.component_set.names {
            let records = ckpt
                .heads
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing head for component {name}")))?;
            let head = records_to_net(&records)?;
            if head.input_len() != trunk.output_len() || head.output_len() != 2 {
                return Err(Error::Checkpoint(format!("head {name} does not fit the trunk")));
            }
            heads.push(head);
        }
        if !ckpt.heads.is_empty() {
            return Err(Error::Checkpoint("heads for unknown components".into()));
        }
        if trunk.input_len() != ckpt.feature_len + ckpt.action_space.encoding_len() {
            return Err(Error::Checkpoint("trunk input does not match feature and action sizes".into()));
        }
        if ckpt.normalization.len() != ckpt.component_set.len() {
            return Err(Error::Checkpoint("normalization does not match components".into()));
        }
        Ok(Self {
            trunk,
            heads,
            components: ckpt.component_set,
            normalization: ckpt.normalization,
            action_space: ckpt.action_space,
            feature_len: ckpt.feature_len,
            config: ckpt.config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::FeatureMode;
    use crate::rollout::{Flavor, RolloutConfig};
    use rand::Rng;

    /// 32 samples: 8 random states x 4 one-hot actions, targets depend on both.
    fn toy_dataset() -> Dataset {
        let mut rng = substream(7, 0);
        let mut raw = Vec::new();
        for s in 0..8 {
            let features: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            for a in 0..4 {
                let mut action = vec![0.0; 4];
                action[a] = 1.0;
                let target = vec![
                    features[0] + a as f64,
                    -features[1] * a as f64,
                    (features[2] - features[3]) * 2.0 + 0.1 * a as f64,
                ];
                raw.push(RolloutSample {
                    features: features.clone(),
                    action,
                    target,
                    flavor: Flavor::OnPolicy,
                    trace: format!("t{s}"),
                    anchor: 0,
                });
            }
        }
        Dataset::build(
            &raw,
            RolloutConfig::default(),
            ComponentSet::abr([1.0, 1.0, 1.0]),
            ActionSpace::Discrete { n: 4 },
            FeatureMode::Raw,
            "toy",
        )
        .unwrap()
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            stage1_lr: 1e-2,
            stage1_epochs: 200,
            stage2_epochs: 5,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn mse(model: &PredictorModel<f64>, ds: &Dataset) -> f64 {
        let mut sum = 0.0;
        let mut n = 0.0;
        for s in &ds.samples {
            let e = model.predict(&s.features, &s.action).unwrap();
            for (p, t) in e.normalized_means().iter().zip(&s.target) {
                sum += (p - t).powi(2);
                n += 1.0;
            }
        }
        sum / n
    }

    #[test]
    fn overfits_toy_dataset() {
        let ds = toy_dataset();
        let (model, report) = train::<f64>(&ds, toy_config()).unwrap();
        let err = mse(&model, &ds);
        assert!(err < 0.01, "mse {err}");
        assert!(report.stage1[9] < report.stage1[0]);
        // means differ across actions for one state
        let s = &ds.samples[0];
        let means: Vec<f64> = (0..4)
            .map(|a| {
                let mut act = vec![0.0; 4];
                act[a] = 1.0;
                model.predict(&s.features, &act).unwrap().means()[0]
            })
            .collect();
        for w in means.windows(2) {
            assert!((w[0] - w[1]).abs() > 1e-3, "{means:?}");
        }
    }

    #[test]
    fn stage_two_freezes_trunk_and_is_deterministic() {
        let ds = toy_dataset();
        let cfg = TrainConfig {
            stage1_epochs: 5,
            stage2_epochs: 0,
            ..toy_config()
        };
        let (stage1_only, _) = train::<f64>(&ds, cfg.clone()).unwrap();
        let cfg2 = TrainConfig { stage2_epochs: 5, ..cfg };
        let (mut a, _) = train::<f64>(&ds, cfg2.clone()).unwrap();
        let (b, _) = train::<f64>(&ds, cfg2).unwrap();
        let bits = |n: &DenseNet<f64>| n.parameters().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&stage1_only.trunk), bits(&a.trunk));
        assert_ne!(stage1_only.heads, a.heads);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        a.config.seed = 99;
        assert_ne!(a.config.hash(), b.config.hash());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let ds = toy_dataset();
        let (model, _) = train::<f64>(&ds, TrainConfig { stage1_epochs: 3, ..toy_config() }).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        model.save(f.path()).unwrap();
        let loaded = PredictorModel::<f64>::load(f.path()).unwrap();
        let mut rng = substream(1, 1);
        for _ in 0..100 {
            let features: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..2.0)).collect();
            let action: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            assert_eq!(model.predict(&features, &action).unwrap(), loaded.predict(&features, &action).unwrap());
        }
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert!(text.starts_with("{\"magic\":\"cbx1\""));
        assert!(PredictorModel::<f64>::from_json(&text.replacen("cbx1", "cbx0", 1)).is_err());
        let tampered = text.replacen("\"seed\":3", "\"seed\":4", 1);
        assert!(matches!(PredictorModel::<f64>::from_json(&tampered), Err(Error::Checkpoint(_))));
        assert!(PredictorModel::<f64>::from_json(&text[..text.len() / 2]).is_err());
    }

    #[test]
    fn single_precision_model_trains() {
        let ds = toy_dataset();
        let (model, report) = train::<f32>(&ds, TrainConfig { stage1_epochs: 20, ..toy_config() }).unwrap();
        assert!(report.stage1.last().unwrap() < &report.stage1[0]);
        let e = model.predict(&ds.samples[0].features, &ds.samples[0].action).unwrap();
        assert!(e.normalized.iter().all(|g| g.std > 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let ds = toy_dataset();
        let (model, _) = train::<f64>(&ds, TrainConfig { stage1_epochs: 1, stage2_epochs: 0, ..toy_config() }).unwrap();
        assert!(matches!(model.predict(&[0.0; 3], &[1.0, 0.0, 0.0, 0.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(model.predict(&[0.0; 4], &[1.0]), Err(Error::DimensionMismatch { .. })));
        let empty = Dataset { samples: vec![], ..ds };
        assert!(train::<f64>(&empty, toy_config()).is_err());
    }

    /// Analytic gradients of the full predictor loss against central differences.
    #[test]
    fn predictor_gradients_match_finite_differences() {
        let ds = toy_dataset();
        let cfg = TrainConfig {
            trunk_widths: vec![6, 5],
            head_widths: vec![4],
            ..toy_config()
        };
        let model = PredictorModel::<f64>::new(4, ActionSpace::Discrete { n: 4 }, ds.header.components.clone(), ds.header.normalization.clone(), cfg).unwrap();
        let sample = &ds.samples[5];
        let mut grads = model.zero_grads(true);
        let loss = model.accumulate(sample, &mut grads).unwrap();
        assert!((loss - model.sample_loss(sample).unwrap()).abs() < 1e-12);
        let (tg, hg) = (grads.trunk, grads.heads);
        let loss_of = |m: &PredictorModel<f64>| m.sample_loss(sample).unwrap();
        let h = 1e-5;
        let check = |analytic: Vec<f64>, perturb: &dyn Fn(&mut PredictorModel<f64>, usize, f64)| {
            for (i, a) in analytic.iter().enumerate() {
                let mut plus = model.clone();
                perturb(&mut plus, i, h);
                let mut minus = model.clone();
                perturb(&mut minus, i, -h);
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                assert!((a - fd).abs() / a.abs().max(1.0) < 1e-4, "param {i}: {a} vs {fd}");
            }
        };
        check(tg.unwrap().flat(), &|m, i, d| *m.trunk.parameters_mut().nth(i).unwrap() += d);
        for (c, g) in hg.into_iter().enumerate() {
            check(g.flat(), &|m, i, d| *m.heads[c].parameters_mut().nth(i).unwrap() += d);
        }
    }
}

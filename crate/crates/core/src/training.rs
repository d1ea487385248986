//! Adam, the training loop, evaluation and the four-variant ablation.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::Variant;
use crate::autodiff::Tape;
use crate::config;
use crate::dataset::{Sample, stack_images, stack_masks};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, SegmentationMask, threshold_logits};
use crate::network::{Network, NetworkConfig};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Foreground threshold on the sigmoid output.
pub const THRESHOLD: f64 = 0.5;
/// Cases per forward pass during evaluation; fixed so every caller
/// sees identical arithmetic.
pub const EVAL_BATCH: usize = 4;
/// Fraction of cases the ablation holds out, taken from the end.
pub const ABLATION_VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Weight of the soft Dice term; BCE gets `1 - loss_mix`.
    pub loss_mix: f64,
    /// Validation every this many steps, and always after the last one.
    /// 0 evaluates only after the last step.
    pub eval_every: usize,
    /// Share of cases held out for validation, from the end of the list.
    /// 0 validates on the training cases.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            max_steps: 300,
            seed: 0,
            loss_mix: 0.5,
            eval_every: 50,
            val_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 10] = [
        "learning_rate",
        "beta1",
        "beta2",
        "epsilon",
        "batch_size",
        "max_steps",
        "seed",
        "loss_mix",
        "eval_every",
        "val_fraction",
    ];

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", "must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.loss_mix) {
            return Err(Error::config("loss_mix", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("learning_rate".into(), self.learning_rate.to_string()),
            ("beta1".into(), self.beta1.to_string()),
            ("beta2".into(), self.beta2.to_string()),
            ("epsilon".into(), self.epsilon.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("max_steps".into(), self.max_steps.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("loss_mix".into(), self.loss_mix.to_string()),
            ("eval_every".into(), self.eval_every.to_string()),
            ("val_fraction".into(), self.val_fraction.to_string()),
        ]
    }

    pub fn apply_pairs(&mut self, pairs: &mut BTreeMap<String, String>) -> Result<()> {
        config::take_parsed(pairs, "learning_rate", &mut self.learning_rate)?;
        config::take_parsed(pairs, "beta1", &mut self.beta1)?;
        config::take_parsed(pairs, "beta2", &mut self.beta2)?;
        config::take_parsed(pairs, "epsilon", &mut self.epsilon)?;
        config::take_parsed(pairs, "batch_size", &mut self.batch_size)?;
        config::take_parsed(pairs, "max_steps", &mut self.max_steps)?;
        config::take_parsed(pairs, "seed", &mut self.seed)?;
        config::take_parsed(pairs, "loss_mix", &mut self.loss_mix)?;
        config::take_parsed(pairs, "eval_every", &mut self.eval_every)?;
        config::take_parsed(pairs, "val_fraction", &mut self.val_fraction)?;
        Ok(())
    }

    /// Splits `n` cases into `(train, val)` index ranges.
    pub fn split(&self, n: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        split_by_index(n, self.val_fraction)
    }
}

/// First `n - round(n * val_fraction)` cases train, the rest validate.
/// With no held-out cases the training cases double as validation.
pub fn split_by_index(n: usize, val_fraction: f64) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let val = ((n as f64) * val_fraction).round() as usize;
    let train = n - val.min(n);
    if train == n {
        (0..n, 0..n)
    } else {
        (0..train, train..n)
    }
}

/// First and second Adam moments, in parameter-store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    names: Vec<String>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let (names, shapes): (Vec<String>, Vec<_>) = params
            .iter()
            .map(|(n, e)| (n.to_string(), e.value.shape()))
            .unzip();
        Self {
            names,
            m: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update from the accumulated gradients, which
/// are zeroed afterwards.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut OptimizerState<T>, cfg: &TrainConfig) -> Result<()> {
    if params.len() != state.names.len() {
        return Err(Error::Invalid(format!(
            "optimizer tracks {} parameters, store has {}",
            state.names.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::lit(1.0 - cfg.beta1.powi(t));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (lr, eps) = (T::lit(cfg.learning_rate), T::lit(cfg.epsilon));
    let one = T::one();
    for (i, (name, entry)) in params.iter_mut().enumerate() {
        if state.names[i] != name || state.m[i].shape() != entry.value.shape() {
            return Err(Error::Invalid(format!("optimizer state does not match parameter `{name}`")));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = entry.grad.data();
        let theta = entry.value.data_mut();
        for j in 0..theta.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            theta[j] = theta[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    params.zero_grads();
    Ok(())
}

/// Loss of `net` on one batch, with gradients accumulated into its store.
pub fn loss_and_backward<T: Scalar>(net: &mut Network<T>, images: Tensor<T>, masks: &Tensor<T>, mix: f64) -> Result<T> {
    let mut tape = Tape::new();
    let x = tape.input(images);
    let logits = net.forward(&mut tape, x)?;
    let loss = tape.seg_loss(logits, masks, T::lit(mix))?;
    let value = tape.value(loss).data()[0];
    if value.is_finite() {
        tape.backward(loss, &mut net.params)?;
    }
    Ok(value)
}

/// Cycles through a seeded shuffle of `0..n`, reshuffling each pass.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    /// Loss of the batch before this step's update.
    pub loss: f64,
    /// Validation Dice after this step's update, when evaluated.
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,val_dice\n");
        for r in &self.records {
            out.push_str(&format!("{},{},", r.step, r.loss));
            if let Some(d) = r.val_dice {
                out.push_str(&d.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn final_val_dice(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_dice)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// Mean loss over 1-based steps `from..=to` that were run.
    pub fn mean_loss(&self, from: usize, to: usize) -> Option<f64> {
        let losses: Vec<f64> = self
            .records
            .iter()
            .filter(|r| (from..=to).contains(&r.step))
            .map(|r| r.loss)
            .collect();
        if losses.is_empty() {
            None
        } else {
            Some(losses.iter().sum::<f64>() / losses.len() as f64)
        }
    }
}

fn check_geometry<T: Scalar>(net: &Network<T>, samples: &[Sample]) -> Result<()> {
    let size = net.config.input_size;
    for s in samples {
        if s.image.width() != size || s.image.height() != size {
            return Err(Error::Invalid(format!(
                "case {} is {}x{}, the network expects {size}x{size}",
                s.id,
                s.image.width(),
                s.image.height()
            )));
        }
        if !s.image.is_normalized() {
            return Err(Error::Invalid(format!("case {} is not normalised to [0, 1]", s.id)));
        }
    }
    Ok(())
}

/// Trains `net` in place on normalised cases. Fails with the step index
/// as soon as a loss is not finite.
pub fn train<T: Scalar>(net: &mut Network<T>, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("no training cases".into()));
    }
    check_geometry(net, train)?;
    check_geometry(net, val)?;
    let mut state = OptimizerState::new(&net.params);
    let mut sampler = BatchSampler::new(train.len(), cfg.seed);
    let mut log = TrainLog::default();
    net.params.zero_grads();
    for step in 1..=cfg.max_steps {
        let idx = sampler.next(cfg.batch_size);
        let images = stack_images(&idx.iter().map(|&i| &train[i].image).collect::<Vec<_>>())?;
        let masks = stack_masks(&idx.iter().map(|&i| &train[i].mask).collect::<Vec<_>>())?;
        let loss = loss_and_backward(net, images, &masks, cfg.loss_mix)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        adam_step(&mut net.params, &mut state, cfg)?;
        let due = step == cfg.max_steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        let val_dice = if due && !val.is_empty() {
            Some(evaluate(net, val)?.mean.dice)
        } else {
            None
        };
        log.records.push(StepRecord {
            step,
            loss: loss.to_f64().unwrap_or(f64::NAN),
            val_dice,
        });
    }
    Ok(log)
}

/// Per-case metrics of thresholded predictions.
/// Thresholded predictions, one mask per sample, in sample order.
pub fn predict_masks<T: Scalar>(net: &Network<T>, samples: &[Sample]) -> Result<Vec<SegmentationMask>> {
    check_geometry(net, samples)?;
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images = stack_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        preds.extend(threshold_logits(&net.predict(&images)?, THRESHOLD)?);
    }
    Ok(preds)
}

pub fn evaluate<T: Scalar>(net: &Network<T>, samples: &[Sample]) -> Result<MetricsReport> {
    let preds = predict_masks(net, samples)?;
    MetricsReport::evaluate(
        samples
            .iter()
            .zip(&preds)
            .map(|(s, p)| (s.id.clone(), p, &s.mask)),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceScores {
    pub dataset: &'static str,
    pub dice: f64,
    pub jaccard: f64,
    pub pixel_accuracy: f64,
}

/// Published full-scale results on clinical CT, in percent. Reported
/// beside the ablation for orientation only; phantom runs are not
/// expected to match them.
pub const REFERENCE_SCORES: [ReferenceScores; 2] = [
    ReferenceScores {
        dataset: "3D-IRCADb-01",
        dice: 77.1,
        jaccard: 90.1,
        pixel_accuracy: 86.7,
    },
    ReferenceScores {
        dataset: "LiTS",
        dice: 67.1,
        jaccard: 71.9,
        pixel_accuracy: 69.1,
    },
];

/// Dice ordering of the published ablation, best first.
pub const REFERENCE_ORDER: [Variant; 4] = [Variant::Scse, Variant::Csse, Variant::Ssce, Variant::Baseline];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub dice: f64,
    pub jaccard: f64,
    pub pixel_accuracy: f64,
    pub final_loss: f64,
    pub num_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub reference: Vec<ReferenceScores>,
    pub seed: u64,
    pub steps: usize,
    pub train_cases: usize,
    pub val_cases: usize,
    pub rows: Vec<AblationRow>,
    /// Variants by validation Dice, best first.
    pub observed_order: Vec<String>,
    pub reference_order: Vec<String>,
    pub order_matches_reference: bool,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Trains every variant from the same seed on the first 80% of the cases
/// and scores it on the rest.
pub fn run_ablation(samples: &[Sample], net_cfg: &NetworkConfig, cfg: &TrainConfig) -> Result<AblationReport> {
    let (train_idx, val_idx) = split_by_index(samples.len(), ABLATION_VAL_FRACTION);
    let (train_set, val_set) = (&samples[train_idx], &samples[val_idx]);
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let config = NetworkConfig {
            variant,
            ..net_cfg.clone()
        };
        let mut net = Network::<f32>::build(config, cfg.seed)?;
        let log = train(&mut net, train_set, &[], cfg)?;
        let scores = evaluate(&net, val_set)?.mean;
        rows.push(AblationRow {
            variant: variant.to_string(),
            dice: scores.dice,
            jaccard: scores.jaccard,
            pixel_accuracy: scores.pixel_accuracy,
            final_loss: log.final_loss().unwrap_or(f64::NAN),
            num_params: net.num_params(),
        });
    }
    let mut order: Vec<&AblationRow> = rows.iter().collect();
    order.sort_by(|a, b| b.dice.total_cmp(&a.dice));
    let observed_order: Vec<String> = order.iter().map(|r| r.variant.clone()).collect();
    let reference_order: Vec<String> = REFERENCE_ORDER.iter().map(|v| v.to_string()).collect();
    Ok(AblationReport {
        reference: REFERENCE_SCORES.to_vec(),
        seed: cfg.seed,
        steps: cfg.max_steps,
        train_cases: train_set.len(),
        val_cases: val_set.len(),
        order_matches_reference: observed_order == reference_order,
        observed_order,
        reference_order,
        rows,
    })
}

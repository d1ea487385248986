//! Four-stage U-Net with an attention block after every encoder
//! double convolution.
//!
//! ```text
//! encoder s=1..4 : conv3x3-relu, conv3x3-relu, attention, [skip], maxpool
//! bottleneck     : conv3x3-relu, conv3x3-relu          (width base * 16)
//! decoder s=4..1 : upsample, conv3x3-relu (halve), concat skip,
//!                  conv3x3-relu, conv3x3-relu
//! head           : conv1x1 -> logits
//! ```
//!
//! The skip connection carries the recalibrated (post-attention) map.

use std::collections::BTreeMap;
use std::path::Path;

use crate::attention::Variant;
use crate::autodiff::{Tape, Var};
use crate::config;
use crate::error::{Error, Result};
use crate::formats;
use crate::init;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub base_channels: usize,
    pub stages: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Scse,
            base_channels: 16,
            stages: STAGES,
            in_channels: 1,
            out_channels: 1,
            input_size: 64,
        }
    }
}

impl NetworkConfig {
    pub const KEYS: [&'static str; 6] = [
        "variant",
        "base_channels",
        "stages",
        "in_channels",
        "out_channels",
        "input_size",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.stages != STAGES {
            return Err(Error::config("stages", format!("must be {STAGES}")));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::config(
                "base_channels",
                "must be even and at least 2 (attention halves the channel count)",
            ));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be at least 1"));
        }
        if self.out_channels == 0 {
            return Err(Error::config("out_channels", "must be at least 1"));
        }
        let factor = 1 << self.stages;
        if self.input_size == 0 || self.input_size % factor != 0 {
            return Err(Error::config(
                "input_size",
                format!("must be a positive multiple of {factor}"),
            ));
        }
        Ok(())
    }

    /// Encoder width at zero-based stage `i`; `i == stages` is the
    /// bottleneck.
    pub fn width(&self, i: usize) -> usize {
        self.base_channels << i
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("variant".into(), self.variant.to_string()),
            ("base_channels".into(), self.base_channels.to_string()),
            ("stages".into(), self.stages.to_string()),
            ("in_channels".into(), self.in_channels.to_string()),
            ("out_channels".into(), self.out_channels.to_string()),
            ("input_size".into(), self.input_size.to_string()),
        ]
    }

    /// Overrides fields from `pairs`, consuming the keys it owns.
    pub fn apply_pairs(&mut self, pairs: &mut BTreeMap<String, String>) -> Result<()> {
        if let Some(v) = pairs.remove("variant") {
            self.variant = v.parse()?;
        }
        config::take_parsed(pairs, "base_channels", &mut self.base_channels)?;
        config::take_parsed(pairs, "stages", &mut self.stages)?;
        config::take_parsed(pairs, "in_channels", &mut self.in_channels)?;
        config::take_parsed(pairs, "out_channels", &mut self.out_channels)?;
        config::take_parsed(pairs, "input_size", &mut self.input_size)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    /// Convolution, optionally followed by ReLU.
    Conv { padding: usize, relu: bool },
    Attention(Variant),
    SaveSkip,
    MaxPool,
    Upsample,
    ConcatSkip,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    /// 1..=4 for encoder/decoder stages, 5 for the bottleneck, 0 for the head.
    pub stage: usize,
    pub kind: LayerKind,
    /// Parameter name prefix, empty for parameter-free layers.
    pub name: String,
}

#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
    pub plan: Vec<Layer>,
}

struct Builder<'a, T: Scalar> {
    seed: u64,
    params: &'a mut ParamStore<T>,
    plan: Vec<Layer>,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, stage: usize, name: &str, c_in: usize, c_out: usize, k: usize, relu: bool) -> Result<()> {
        let fan_in = c_in * k * k;
        let bound = if relu {
            init::he_bound(fan_in)
        } else {
            init::fan_in_bound(fan_in)
        };
        let w_name = format!("{name}.w");
        let weight = init::uniform([c_out, c_in, k, k], bound, &mut init::param_rng(self.seed, &w_name));
        self.params.insert(w_name, weight)?;
        self.params.insert(format!("{name}.b"), Tensor::zeros([1, c_out, 1, 1]))?;
        self.plan.push(Layer {
            stage,
            kind: LayerKind::Conv {
                padding: k / 2,
                relu,
            },
            name: name.to_string(),
        });
        Ok(())
    }

    fn marker(&mut self, stage: usize, kind: LayerKind) {
        self.plan.push(Layer {
            stage,
            kind,
            name: String::new(),
        });
    }
}

impl<T: Scalar> Network<T> {
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            seed,
            params: &mut params,
            plan: Vec::new(),
        };
        let mut c_prev = config.in_channels;
        for s in 1..=config.stages {
            let c = config.width(s - 1);
            b.conv(s, &format!("enc{s}.conv1"), c_prev, c, 3, true)?;
            b.conv(s, &format!("enc{s}.conv2"), c, c, 3, true)?;
            if config.variant != Variant::Baseline {
                let prefix = format!("scse{s}");
                let mut rng = init::param_rng(seed, &prefix);
                config.variant.register(b.params, &prefix, c, &mut rng)?;
                b.plan.push(Layer {
                    stage: s,
                    kind: LayerKind::Attention(config.variant),
                    name: prefix,
                });
            }
            b.marker(s, LayerKind::SaveSkip);
            b.marker(s, LayerKind::MaxPool);
            c_prev = c;
        }
        let mid = config.stages + 1;
        let c_mid = config.width(config.stages);
        b.conv(mid, "mid.conv1", c_prev, c_mid, 3, true)?;
        b.conv(mid, "mid.conv2", c_mid, c_mid, 3, true)?;
        c_prev = c_mid;
        for s in (1..=config.stages).rev() {
            let c = config.width(s - 1);
            b.marker(s, LayerKind::Upsample);
            b.conv(s, &format!("dec{s}.up"), c_prev, c, 3, true)?;
            b.marker(s, LayerKind::ConcatSkip);
            b.conv(s, &format!("dec{s}.conv1"), 2 * c, c, 3, true)?;
            b.conv(s, &format!("dec{s}.conv2"), c, c, 3, true)?;
            c_prev = c;
        }
        b.conv(0, "head", c_prev, config.out_channels, 1, false)?;
        let plan = b.plan;
        Ok(Self {
            config,
            params,
            plan,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Names of all attention-block parameters.
    pub fn attention_param_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| n.starts_with("scse"))
            .map(str::to_string)
            .collect()
    }

    /// Records the forward pass on `tape` and returns the logits node.
    pub fn forward(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        self.forward_with(tape, &self.params, input)
    }

    /// Forward pass reading parameters from `params` instead of
    /// `self.params`; used for finite-difference checks.
    pub fn forward_with(&self, tape: &mut Tape<T>, params: &ParamStore<T>, input: Var) -> Result<Var> {
        let shape = tape.value(input).shape();
        let size = self.config.input_size;
        if shape[1] != self.config.in_channels || shape[2] != size || shape[3] != size {
            return Err(Error::InvalidShape {
                op: "network forward",
                reason: format!(
                    "expected [N, {}, {size}, {size}], got {shape:?}",
                    self.config.in_channels
                ),
            });
        }
        let mut x = input;
        let mut skips = Vec::with_capacity(self.config.stages);
        for layer in &self.plan {
            x = match &layer.kind {
                LayerKind::Conv { padding, relu } => {
                    let w = tape.param(params, &format!("{}.w", layer.name))?;
                    let b = tape.param(params, &format!("{}.b", layer.name))?;
                    let y = tape.conv2d(x, w, b, 1, *padding)?;
                    if *relu {
                        tape.relu(y)
                    } else {
                        y
                    }
                }
                LayerKind::Attention(variant) => variant.apply(tape, params, &layer.name, x)?,
                LayerKind::SaveSkip => {
                    skips.push(x);
                    x
                }
                LayerKind::MaxPool => tape.max_pool_2x2(x)?,
                LayerKind::Upsample => tape.upsample_nearest_2x(x),
                LayerKind::ConcatSkip => {
                    let skip = skips
                        .pop()
                        .ok_or_else(|| Error::Invalid("layer plan: unmatched skip".into()))?;
                    tape.concat_channels(skip, x)?
                }
            };
        }
        Ok(x)
    }

    /// Inference without keeping the tape.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.input(batch.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// A fresh network of this config with parameters taken by name from
    /// `params`; every expected name must be present with the right shape.
    pub fn with_params(config: NetworkConfig, params: &ParamStore<T>) -> Result<Self> {
        let mut net = Self::build(config, 0)?;
        let names: Vec<String> = net.params.names().map(str::to_string).collect();
        for name in &names {
            let value = params.get(name)?;
            net.params.set(name, value.clone())?;
        }
        let extra: Vec<&str> = params.names().filter(|n| !net.params.contains(n)).collect();
        if !extra.is_empty() {
            return Err(Error::Invalid(format!(
                "parameters not used by a {} network: {}",
                net.config.variant,
                extra.join(", ")
            )));
        }
        Ok(net)
    }
}

impl NetworkConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = config::parse_pairs(text)?;
        let mut cfg = Self::default();
        cfg.apply_pairs(&mut pairs)?;
        config::reject_unknown(&pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        config::format_pairs(&self.to_pairs())
    }
}

impl<T: Scalar> Network<T> {
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        formats::encode_checkpoint(
            &self.config.to_text(),
            self.params.iter().map(|(name, e)| (name, &e.value)),
        )
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = formats::decode_checkpoint(bytes)?;
        let config = NetworkConfig::from_text(&ck.config)
            .map_err(|e| Error::format(formats::CONFIG_RECORD, e.to_string()))?;
        Self::from_records(config, ck.tensors)
    }

    /// Loads parameters into a network of `config`, ignoring the config
    /// stored in the file. Missing or surplus names are rejected.
    pub fn from_checkpoint_bytes_as(bytes: &[u8], config: NetworkConfig) -> Result<Self> {
        let ck = formats::decode_checkpoint(bytes)?;
        Self::from_records(config, ck.tensors)
    }

    fn from_records(config: NetworkConfig, records: Vec<(String, formats::AnyTensor)>) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, tensor) in records {
            store.insert(name, tensor.into_tensor())?;
        }
        Self::with_params(config, &store)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        formats::write_atomic(path, &self.checkpoint_bytes())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&formats::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(variant: Variant, base: usize, size: usize) -> NetworkConfig {
        NetworkConfig {
            variant,
            base_channels: base,
            input_size: size,
            ..NetworkConfig::default()
        }
    }

    fn random_batch(shape: [usize; 4], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn forward_preserves_resolution() {
        let net = Network::<f32>::build(config(Variant::Scse, 16, 64), 1).unwrap();
        let y = net.predict(&random_batch([2, 1, 64, 64], 2)).unwrap();
        assert_eq!(y.shape(), [2, 1, 64, 64]);
        assert!(y.all_finite());
        for v in Variant::ALL {
            let net = Network::<f32>::build(config(v, 2, 32), 1).unwrap();
            assert_eq!(net.predict(&random_batch([1, 1, 32, 32], 3)).unwrap().shape(), [1, 1, 32, 32]);
        }
    }

    #[test]
    fn forward_rejects_wrong_geometry() {
        let net = Network::<f32>::build(config(Variant::Baseline, 2, 32), 1).unwrap();
        assert!(net.predict(&random_batch([1, 1, 16, 16], 3)).is_err());
        assert!(net.predict(&random_batch([1, 2, 32, 32], 3)).is_err());
    }

    #[test]
    fn invalid_configs_name_the_key() {
        let bad = [
            (NetworkConfig { input_size: 40, ..NetworkConfig::default() }, "input_size"),
            (NetworkConfig { base_channels: 5, ..NetworkConfig::default() }, "base_channels"),
            (NetworkConfig { stages: 3, ..NetworkConfig::default() }, "stages"),
            (NetworkConfig { in_channels: 0, ..NetworkConfig::default() }, "in_channels"),
        ];
        for (cfg, key) in bad {
            let err = Network::<f32>::build(cfg, 0).unwrap_err().to_string();
            assert!(err.contains(key), "{err}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Network::<f32>::build(config(Variant::Scse, 4, 32), 9).unwrap();
        let x = random_batch([2, 1, 32, 32], 4);
        let a = net.predict(&x).unwrap();
        let b = net.predict(&x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zeroed_scse_matches_baseline_bitwise() {
        let baseline = Network::<f32>::build(config(Variant::Baseline, 4, 32), 5).unwrap();
        let mut scse = Network::<f32>::build(config(Variant::Scse, 4, 32), 5).unwrap();
        for name in scse.attention_param_names() {
            scse.params.get_mut(&name).unwrap().fill(0.0);
        }
        let x = random_batch([2, 1, 32, 32], 6);
        let yb = baseline.predict(&x).unwrap();
        let ys = scse.predict(&x).unwrap();
        assert!(yb.data().iter().zip(ys.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let mut ssce = Network::<f32>::build(config(Variant::Ssce, 4, 32), 5).unwrap();
        for name in ssce.attention_param_names() {
            ssce.params.get_mut(&name).unwrap().fill(0.0);
        }
        assert_ne!(ssce.predict(&x).unwrap(), yb);
    }

    #[test]
    fn parameter_counts() {
        let count = |v| Network::<f32>::build(config(v, 16, 64), 0).unwrap().num_params();
        let (base, ssce, csse, scse) = (
            count(Variant::Baseline),
            count(Variant::Ssce),
            count(Variant::Csse),
            count(Variant::Scse),
        );
        // Independently counted layer by layer: sum of c_out*(c_in*k*k + 1).
        assert_eq!(base, 2_158_417);
        assert!(base < ssce && ssce < scse);
        assert_eq!(csse - base, (16 + 1) + (32 + 1) + (64 + 1) + (128 + 1));
        assert_eq!(scse - base, (ssce - base) + (csse - base));
        let other_seed = Network::<f32>::build(config(Variant::Scse, 16, 64), 99).unwrap();
        assert_eq!(other_seed.num_params(), scse);
    }

    #[test]
    fn non_attention_init_is_shared_across_variants() {
        let a = Network::<f32>::build(config(Variant::Baseline, 4, 32), 3).unwrap();
        let b = Network::<f32>::build(config(Variant::Scse, 4, 32), 3).unwrap();
        for (name, entry) in a.params.iter() {
            assert_eq!(&entry.value, b.params.get(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn attention_sits_after_encoder_double_conv_only() {
        let net = Network::<f32>::build(config(Variant::Scse, 2, 16), 0).unwrap();
        let attn: Vec<_> = net
            .plan
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Attention(_)))
            .collect();
        assert_eq!(attn.len(), 4);
        for (i, layer) in attn {
            assert!(matches!(net.plan[i - 1].kind, LayerKind::Conv { .. }));
            assert_eq!(net.plan[i - 1].name, format!("enc{}.conv2", layer.stage));
            assert_eq!(net.plan[i + 1].kind, LayerKind::SaveSkip);
            assert_eq!(net.plan[i + 2].kind, LayerKind::MaxPool);
        }
        assert!(net.params.contains("scse1.ssce.w1"));
        assert!(net.params.contains("scse4.csse.b_sq"));
    }
    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let net = Network::<f32>::build(config(Variant::Scse, 4, 32), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.mfac");
        net.save_checkpoint(&path).unwrap();
        let back = Network::<f32>::load_checkpoint(&path).unwrap();
        assert_eq!(back.config, net.config);
        assert_eq!(back.params, net.params);
        let x = random_batch([1, 1, 32, 32], 12);
        assert_eq!(back.predict(&x).unwrap(), net.predict(&x).unwrap());
    }

    #[test]
    fn checkpoint_load_rejects_truncation_and_wrong_variant() {
        let net = Network::<f32>::build(config(Variant::Baseline, 2, 16), 1).unwrap();
        let bytes = net.checkpoint_bytes();
        assert!(Network::<f32>::from_checkpoint_bytes(&bytes[..bytes.len() / 2]).is_err());
        let err = Network::<f32>::from_checkpoint_bytes_as(&bytes, config(Variant::Scse, 2, 16))
            .unwrap_err()
            .to_string();
        assert!(err.contains("scse1"), "{err}");
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = config(Variant::Csse, 8, 48);
        assert_eq!(NetworkConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(NetworkConfig::from_text("variant=scse\ncolour=blue\n").is_err());
    }
}

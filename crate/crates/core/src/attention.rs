//! Squeeze-and-excitation blocks.
//!
//! * SSCE squeezes space with a global average, runs the channel
//!   descriptor through a `c -> c/2 -> c` bottleneck and rescales each
//!   channel by a sigmoid gate.
//! * CSSE squeezes channels with a 1x1 convolution to one map and
//!   rescales each position by its sigmoid.
//! * SCSE runs both on the same input and adds the results.
//!
//! Parameters live in a [`ParamStore`] under `{prefix}.ssce.{w1,b1,w2,b2}`
//! and `{prefix}.csse.{w_sq,b_sq}`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

fn check_channels(block: &str, expected: usize, input: [usize; 4]) -> Result<()> {
    if input[1] != expected {
        return Err(Error::Invalid(format!(
            "{block}: block is configured for {expected} channels, input {input:?} has {}",
            input[1]
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsceParams<T> {
    /// `[1, 1, c, c/2]`
    pub w1: Tensor<T>,
    /// `[1, c/2, 1, 1]`
    pub b1: Tensor<T>,
    /// `[1, 1, c/2, c]`
    pub w2: Tensor<T>,
    /// `[1, c, 1, 1]`
    pub b2: Tensor<T>,
}

fn check_even(channels: usize) -> Result<()> {
    if channels < 2 || channels % 2 != 0 {
        return Err(Error::Invalid(format!(
            "ssce: channel count must be even and at least 2, got {channels}"
        )));
    }
    Ok(())
}

impl<T: Scalar> SsceParams<T> {
    pub fn zeros(channels: usize) -> Result<Self> {
        check_even(channels)?;
        let half = channels / 2;
        Ok(Self {
            w1: Tensor::zeros([1, 1, channels, half]),
            b1: Tensor::zeros([1, half, 1, 1]),
            w2: Tensor::zeros([1, 1, half, channels]),
            b2: Tensor::zeros([1, channels, 1, 1]),
        })
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        check_even(channels)?;
        let half = channels / 2;
        Ok(Self {
            w1: init::uniform([1, 1, channels, half], init::fan_in_bound(channels), rng),
            b1: Tensor::zeros([1, half, 1, 1]),
            w2: init::uniform([1, 1, half, channels], init::fan_in_bound(half), rng),
            b2: Tensor::zeros([1, channels, 1, 1]),
        })
    }

    pub fn from_parts(w1: Tensor<T>, b1: Tensor<T>, w2: Tensor<T>, b2: Tensor<T>) -> Result<Self> {
        let channels = w1.shape()[2];
        check_even(channels)?;
        let half = channels / 2;
        let expected = [
            ("w1", [1, 1, channels, half], w1.shape()),
            ("b1", [1, half, 1, 1], b1.shape()),
            ("w2", [1, 1, half, channels], w2.shape()),
            ("b2", [1, channels, 1, 1], b2.shape()),
        ];
        for (name, want, got) in expected {
            if want != got {
                return Err(Error::Invalid(format!(
                    "ssce: {name} should be {want:?} for {channels} channels, got {got:?}"
                )));
            }
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[2]
    }

    pub fn register(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}.w1"), self.w1.clone())?;
        store.insert(format!("{prefix}.b1"), self.b1.clone())?;
        store.insert(format!("{prefix}.w2"), self.w2.clone())?;
        store.insert(format!("{prefix}.b2"), self.b2.clone())
    }

    pub fn load(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Self::from_parts(
            store.get(&format!("{prefix}.w1"))?.clone(),
            store.get(&format!("{prefix}.b1"))?.clone(),
            store.get(&format!("{prefix}.w2"))?.clone(),
            store.get(&format!("{prefix}.b2"))?.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsseParams<T> {
    /// 1x1 convolution kernel `[1, c, 1, 1]`.
    pub w_sq: Tensor<T>,
    /// `[1, 1, 1, 1]`
    pub b_sq: Tensor<T>,
}

impl<T: Scalar> CsseParams<T> {
    pub fn zeros(channels: usize) -> Result<Self> {
        Self::from_parts(Tensor::zeros([1, channels, 1, 1]), Tensor::zeros([1, 1, 1, 1]))
    }

    pub fn init(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::from_parts(
            init::uniform([1, channels, 1, 1], init::fan_in_bound(channels.max(1)), rng),
            Tensor::zeros([1, 1, 1, 1]),
        )
    }

    pub fn from_parts(w_sq: Tensor<T>, b_sq: Tensor<T>) -> Result<Self> {
        let [out, channels, kh, kw] = w_sq.shape();
        if out != 1 || kh != 1 || kw != 1 || channels == 0 {
            return Err(Error::Invalid(format!(
                "csse: w_sq must be [1, c, 1, 1] with c >= 1, got {:?}",
                w_sq.shape()
            )));
        }
        if b_sq.shape() != [1, 1, 1, 1] {
            return Err(Error::Invalid(format!(
                "csse: b_sq must be a single scalar, got {:?}",
                b_sq.shape()
            )));
        }
        Ok(Self { w_sq, b_sq })
    }

    pub fn channels(&self) -> usize {
        self.w_sq.shape()[1]
    }

    pub fn register(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}.w_sq"), self.w_sq.clone())?;
        store.insert(format!("{prefix}.b_sq"), self.b_sq.clone())
    }

    pub fn load(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Self::from_parts(
            store.get(&format!("{prefix}.w_sq"))?.clone(),
            store.get(&format!("{prefix}.b_sq"))?.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScseParams<T> {
    pub ssce: SsceParams<T>,
    pub csse: CsseParams<T>,
}

impl<T: Scalar> ScseParams<T> {
    pub fn new(ssce: SsceParams<T>, csse: CsseParams<T>) -> Result<Self> {
        if ssce.channels() != csse.channels() {
            return Err(Error::Invalid(format!(
                "scse: ssce has {} channels but csse has {}",
                ssce.channels(),
                csse.channels()
            )));
        }
        Ok(Self { ssce, csse })
    }

    pub fn zeros(channels: usize) -> Result<Self> {
        Self::new(SsceParams::zeros(channels)?, CsseParams::zeros(channels)?)
    }

    pub fn init(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let ssce = SsceParams::init(channels, rng)?;
        let csse = CsseParams::init(channels, rng)?;
        Self::new(ssce, csse)
    }

    pub fn channels(&self) -> usize {
        self.ssce.channels()
    }

    pub fn register(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        self.ssce.register(store, &format!("{prefix}.ssce"))?;
        self.csse.register(store, &format!("{prefix}.csse"))
    }

    pub fn load(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Self::new(
            SsceParams::load(store, &format!("{prefix}.ssce"))?,
            CsseParams::load(store, &format!("{prefix}.csse"))?,
        )
    }
}

/// Channel excitation on the tape, reading `{prefix}.w1` etc. from `store`.
pub fn ssce<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    u: Var,
) -> Result<Var> {
    let w1 = tape.param(store, &format!("{prefix}.w1"))?;
    let b1 = tape.param(store, &format!("{prefix}.b1"))?;
    let w2 = tape.param(store, &format!("{prefix}.w2"))?;
    let b2 = tape.param(store, &format!("{prefix}.b2"))?;
    check_channels("ssce", tape.value(w1).shape()[2], tape.value(u).shape())?;
    let z = tape.global_avg_pool(u)?;
    let hidden = tape.linear(z, w1, b1)?;
    let hidden = tape.relu(hidden);
    let z_hat = tape.linear(hidden, w2, b2)?;
    let gate = tape.sigmoid(z_hat);
    tape.broadcast_mul(u, gate)
}

/// Spatial excitation on the tape, reading `{prefix}.w_sq` and
/// `{prefix}.b_sq`.
pub fn csse<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    u: Var,
) -> Result<Var> {
    let w_sq = tape.param(store, &format!("{prefix}.w_sq"))?;
    let b_sq = tape.param(store, &format!("{prefix}.b_sq"))?;
    check_channels("csse", tape.value(w_sq).shape()[1], tape.value(u).shape())?;
    let q = tape.conv2d(u, w_sq, b_sq, 1, 0)?;
    let gate = tape.sigmoid(q);
    tape.broadcast_mul(u, gate)
}

/// `ssce(u) + csse(u)`; both branches see the same `u`.
pub fn scse<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    u: Var,
) -> Result<Var> {
    let channel = ssce(tape, store, &format!("{prefix}.ssce"), u)?;
    let spatial = csse(tape, store, &format!("{prefix}.csse"), u)?;
    tape.add(channel, spatial)
}

fn eval_block<T: Scalar>(
    u: &Tensor<T>,
    register: impl FnOnce(&mut ParamStore<T>) -> Result<()>,
    block: impl FnOnce(&mut Tape<T>, &ParamStore<T>, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut store = ParamStore::new();
    register(&mut store)?;
    let mut tape = Tape::new();
    let x = tape.input(u.clone());
    let y = block(&mut tape, &store, x)?;
    Ok(tape.value(y).clone())
}

pub fn ssce_forward<T: Scalar>(u: &Tensor<T>, p: &SsceParams<T>) -> Result<Tensor<T>> {
    eval_block(u, |s| p.register(s, "b"), |t, s, x| ssce(t, s, "b", x))
}

pub fn csse_forward<T: Scalar>(u: &Tensor<T>, p: &CsseParams<T>) -> Result<Tensor<T>> {
    eval_block(u, |s| p.register(s, "b"), |t, s, x| csse(t, s, "b", x))
}

pub fn scse_forward<T: Scalar>(u: &Tensor<T>, p: &ScseParams<T>) -> Result<Tensor<T>> {
    eval_block(u, |s| p.register(s, "b"), |t, s, x| scse(t, s, "b", x))
}

/// Which attention block follows each encoder stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Ssce,
    Csse,
    Scse,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Ssce, Variant::Csse, Variant::Scse];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ssce => "ssce",
            Variant::Csse => "csse",
            Variant::Scse => "scse",
        }
    }

    pub fn has_ssce(self) -> bool {
        matches!(self, Variant::Ssce | Variant::Scse)
    }

    pub fn has_csse(self) -> bool {
        matches!(self, Variant::Csse | Variant::Scse)
    }

    /// Registers this variant's block parameters under `prefix`.
    pub fn register<T: Scalar>(
        self,
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if self.has_ssce() {
            SsceParams::<T>::init(channels, rng)?.register(store, &format!("{prefix}.ssce"))?;
        }
        if self.has_csse() {
            CsseParams::<T>::init(channels, rng)?.register(store, &format!("{prefix}.csse"))?;
        }
        Ok(())
    }

    pub fn apply<T: Scalar>(
        self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        prefix: &str,
        u: Var,
    ) -> Result<Var> {
        match self {
            Variant::Baseline => Ok(u),
            Variant::Ssce => ssce(tape, store, &format!("{prefix}.ssce"), u),
            Variant::Csse => csse(tape, store, &format!("{prefix}.csse"), u),
            Variant::Scse => scse(tape, store, prefix, u),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "ssce" => Ok(Variant::Ssce),
            "csse" => Ok(Variant::Csse),
            "scse" => Ok(Variant::Scse),
            other => Err(Error::config(
                "variant",
                format!("unknown variant `{other}` (expected baseline, ssce, csse or scse)"),
            )),
        }
    }
}

//! Named finite-difference checks over every tape op, each attention
//! block and a tiny end-to-end network, all in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::Variant;
use crate::autodiff::gradcheck::{GradCheckOptions, grad_check_with};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::init::param_rng;
use crate::network::{Network, NetworkConfig};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const OP_THRESHOLD: f64 = 1e-5;
pub const NETWORK_THRESHOLD: f64 = 1e-4;
pub const EPS: f64 = 1e-6;
/// Central differences on the full network cannot resolve gradients much
/// below 1e-6 in `f64`, so its probe is larger and its error denominator
/// is floored there.
pub const NETWORK_EPS: f64 = 1e-5;
pub const NETWORK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteItem {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub eps: f64,
    pub coords_checked: usize,
}

impl SuiteItem {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>>;

struct Case {
    name: &'static str,
    params: ParamStore<f64>,
    builder: Builder,
    threshold: f64,
    eps: f64,
    floor: f64,
}

/// Uniform in `±[0.1, 1]`: clear of ReLU kinks and of max-pool ties at
/// the probe step.
fn signed(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) { -m } else { m }
    })
}

fn store(items: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, t) in items {
        s.insert(*name, t.clone()).expect("distinct names");
    }
    s
}

/// `sum(out * r)` with a fixed random `r`, so every output element
/// carries a distinct weight.
fn project(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = tape.input(r.clone());
    let y = tape.mul(out, r)?;
    Ok(tape.sum(y))
}

fn unary(
    name: &'static str,
    shape: Shape,
    out_shape: Shape,
    rng: &mut ChaCha8Rng,
    op: fn(&mut Tape<f64>, Var) -> Result<Var>,
) -> Case {
    let params = store(&[("x", signed(shape, rng))]);
    let r = signed(out_shape, rng);
    Case {
        name,
        params,
        builder: Box::new(move |tape, p| {
            let x = tape.param(p, "x")?;
            let y = op(tape, x)?;
            project(tape, y, &r)
        }),
        threshold: OP_THRESHOLD,
        eps: EPS,
        floor: 1e-8,
    }
}

fn binary(
    name: &'static str,
    a: Shape,
    b: Shape,
    out_shape: Shape,
    rng: &mut ChaCha8Rng,
    op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
) -> Case {
    let params = store(&[("a", signed(a, rng)), ("b", signed(b, rng))]);
    let r = signed(out_shape, rng);
    Case {
        name,
        params,
        builder: Box::new(move |tape, p| {
            let a = tape.param(p, "a")?;
            let b = tape.param(p, "b")?;
            let y = op(tape, a, b)?;
            project(tape, y, &r)
        }),
        threshold: OP_THRESHOLD,
        eps: EPS,
        floor: 1e-8,
    }
}

fn conv(name: &'static str, x: Shape, w: Shape, stride: usize, padding: usize, out: Shape, rng: &mut ChaCha8Rng) -> Case {
    let params = store(&[
        ("x", signed(x, rng)),
        ("w", signed(w, rng)),
        ("b", signed([1, w[0], 1, 1], rng)),
    ]);
    let r = signed(out, rng);
    Case {
        name,
        params,
        builder: Box::new(move |tape, p| {
            let x = tape.param(p, "x")?;
            let w = tape.param(p, "w")?;
            let b = tape.param(p, "b")?;
            let y = tape.conv2d(x, w, b, stride, padding)?;
            project(tape, y, &r)
        }),
        threshold: OP_THRESHOLD,
        eps: EPS,
        floor: 1e-8,
    }
}

fn block(name: &'static str, variant: Variant, rng: &mut ChaCha8Rng) -> Result<Case> {
    let c = 4;
    let mut params = store(&[("u", signed([2, c, 5, 5], rng))]);
    variant.register(&mut params, "blk", c, rng)?;
    let r = signed([2, c, 5, 5], rng);
    Ok(Case {
        name,
        params,
        builder: Box::new(move |tape, p| {
            let u = tape.param(p, "u")?;
            let y = variant.apply(tape, p, "blk", u)?;
            project(tape, y, &r)
        }),
        threshold: OP_THRESHOLD,
        eps: EPS,
        floor: 1e-8,
    })
}

fn network(seed: u64) -> Result<Case> {
    let config = NetworkConfig {
        variant: Variant::Scse,
        base_channels: 2,
        input_size: 16,
        ..NetworkConfig::default()
    };
    let net = Network::<f64>::build(config, seed)?;
    let mut rng = param_rng(seed, "gradient_suite.network");
    let x = Tensor::from_fn([2, 1, 16, 16], |_, _, _, _| rng.gen_range(0.0..1.0));
    let target = Tensor::from_fn([2, 1, 16, 16], |_, _, h, w| {
        if (4..11).contains(&h) && (5..12).contains(&w) { 1.0 } else { 0.0 }
    });
    let params = net.params.clone();
    Ok(Case {
        name: "network_scse_end_to_end",
        params,
        builder: Box::new(move |tape, p| {
            let input = tape.input(x.clone());
            let logits = net.forward_with(tape, p, input)?;
            tape.seg_loss(logits, &target, 0.5)
        }),
        threshold: NETWORK_THRESHOLD,
        eps: NETWORK_EPS,
        floor: NETWORK_FLOOR,
    })
}

fn cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = vec![
        conv("conv2d_3x3_pad1", [2, 3, 5, 5], [4, 3, 3, 3], 1, 1, [2, 4, 5, 5], rng),
        conv("conv2d_3x3_stride2", [1, 2, 7, 7], [3, 2, 3, 3], 2, 0, [1, 3, 3, 3], rng),
        conv("conv2d_1x1", [2, 3, 4, 4], [2, 3, 1, 1], 1, 0, [2, 2, 4, 4], rng),
    ];
    {
        let params = store(&[
            ("x", signed([2, 6, 1, 1], rng)),
            ("w", signed([1, 1, 6, 3], rng)),
            ("b", signed([1, 3, 1, 1], rng)),
        ]);
        let r = signed([2, 3, 1, 1], rng);
        out.push(Case {
            name: "linear",
            params,
            builder: Box::new(move |tape, p| {
                let x = tape.param(p, "x")?;
                let w = tape.param(p, "w")?;
                let b = tape.param(p, "b")?;
                let y = tape.linear(x, w, b)?;
                project(tape, y, &r)
            }),
            threshold: OP_THRESHOLD,
            eps: EPS,
            floor: 1e-8,
        });
    }
    out.push(unary("global_avg_pool", [2, 3, 4, 5], [2, 3, 1, 1], rng, |t, x| t.global_avg_pool(x)));
    out.push(unary("relu", [2, 3, 4, 4], [2, 3, 4, 4], rng, |t, x| Ok(t.relu(x))));
    out.push(unary("sigmoid", [2, 3, 4, 4], [2, 3, 4, 4], rng, |t, x| Ok(t.sigmoid(x))));
    out.push(unary("scale", [1, 2, 3, 3], [1, 2, 3, 3], rng, |t, x| Ok(t.scale(x, -1.7))));
    out.push(unary("max_pool_2x2", [2, 2, 6, 6], [2, 2, 3, 3], rng, |t, x| t.max_pool_2x2(x)));
    out.push(unary("upsample_nearest_2x", [2, 2, 3, 3], [2, 2, 6, 6], rng, |t, x| Ok(t.upsample_nearest_2x(x))));
    out.push(binary("broadcast_mul_channel", [2, 3, 4, 4], [2, 3, 1, 1], [2, 3, 4, 4], rng, |t, a, b| {
        t.broadcast_mul(a, b)
    }));
    out.push(binary("broadcast_mul_spatial", [2, 3, 4, 4], [2, 1, 4, 4], [2, 3, 4, 4], rng, |t, a, b| {
        t.broadcast_mul(a, b)
    }));
    out.push(binary("add", [2, 3, 3, 3], [2, 3, 3, 3], [2, 3, 3, 3], rng, |t, a, b| t.add(a, b)));
    out.push(binary("mul", [2, 3, 3, 3], [2, 3, 3, 3], [2, 3, 3, 3], rng, |t, a, b| t.mul(a, b)));
    out.push(binary("concat_channels", [2, 2, 3, 3], [2, 3, 3, 3], [2, 5, 3, 3], rng, |t, a, b| {
        t.concat_channels(a, b)
    }));
    {
        let params = store(&[("x", signed([2, 1, 4, 4], rng).map(|v| 3.0 * v))]);
        let target = Tensor::from_fn([2, 1, 4, 4], |_, _, _, _| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
        out.push(Case {
            name: "seg_loss",
            params,
            builder: Box::new(move |tape, p| {
                let x = tape.param(p, "x")?;
                tape.seg_loss(x, &target, 0.3)
            }),
            threshold: OP_THRESHOLD,
            eps: EPS,
            floor: 1e-8,
        });
    }
    out.push(block("ssce_block", Variant::Ssce, rng)?);
    out.push(block("csse_block", Variant::Csse, rng)?);
    out.push(block("scse_block", Variant::Scse, rng)?);
    out.push(network(seed)?);
    Ok(out)
}

/// Runs every check. Items are returned in a fixed order whether or not
/// they pass.
pub fn run(seed: u64) -> Result<Vec<SuiteItem>> {
    cases(seed)?
        .into_iter()
        .map(|case| {
            let options = GradCheckOptions {
                seed,
                denominator_floor: case.floor,
                ..GradCheckOptions::default()
            };
            let report = grad_check_with(&case.builder, &case.params, case.eps, &options)?;
            Ok(SuiteItem {
                name: case.name,
                max_rel_error: report.max_rel_error,
                threshold: case.threshold,
                eps: case.eps,
                coords_checked: report.coords_checked,
            })
        })
        .collect()
}

/// `item,max_rel_error,threshold,eps,pass` lines with a header.
pub fn to_csv(items: &[SuiteItem]) -> String {
    let mut out = String::from("item,max_rel_error,threshold,eps,pass\n");
    for i in items {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{}\n",
            i.name,
            i.max_rel_error,
            i.threshold,
            i.eps,
            i.passed()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_is_repeatable() {
        let items = run(0).unwrap();
        println!("{}", to_csv(&items));
        assert!(items.len() >= 12);
        for i in &items {
            assert!(i.passed(), "{} at {:e}", i.name, i.max_rel_error);
            assert!(i.coords_checked > 0);
        }
        assert_eq!(run(0).unwrap(), items);
        assert!(to_csv(&items).lines().count() == items.len() + 1);
    }
}

//! Finite-difference suite over every differentiable operation, each
//! composite block and a tiny full model, all in 64-bit.
//!
//! Each trial draws fresh inputs, reduces the output to a scalar with a
//! random weighting, and compares the analytic gradient against central
//! differences along a random direction through all inputs and along a few
//! random coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::DecoderLevel;
use crate::error::Result;
use crate::ffm::{conv_spec, fuse, FfmVars, FusionMode};
use crate::gmm::{gate, NormReading, GMM_EPS};
use crate::model::{LcdNet, ModelConfig};
use crate::params::{ParamKind, ParamStore, Session, SessionMode};
use crate::tensor::gradcheck::{check_coordinates, check_direction};
use crate::tensor::{BatchNormMode, ConvSpec, Graph, Shape, Tensor, Var};
use crate::tif::ExchangeMask;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-6;
pub const MIN_TRIALS: usize = 20;
const COORDS_PER_INPUT: usize = 3;
/// Step for the session-level checks, whose directions move thousands of
/// coordinates at once.
pub const SESSION_STEP: f64 = 1e-7;
/// One-sided slopes of a smooth function differ by about `h · f''`. A gap
/// above the tolerance can only come from a crossed kink (or curvature too
/// strong for the step), so the trial says nothing and is redrawn.
const KINK_SLOPE_GAP: f64 = TOLERANCE;
const MAX_ATTEMPTS_FACTOR: usize = 5;

/// Worst error over all trials of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    /// Trials discarded because the difference window straddled a kink.
    pub redrawn: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && self.trials >= MIN_TRIALS
    }
}

type Rng64 = ChaCha8Rng;

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut Rng64) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = g.leaf(w.clone());
    let p = g.mul(y, wv)?;
    g.sum(p)
}

/// Runs `trials` checks of a graph function whose inputs come from `make`.
fn graph_check<M, F>(name: &str, trials: usize, seed: u64, make: M, f: F) -> Result<CheckResult>
where
    M: Fn(&mut Rng64) -> Vec<Tensor<f64>>,
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = Rng64::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let inputs = make(&mut rng);
        // reduction weights shaped like the output
        let probe = {
            let mut g = Graph::no_grad();
            let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
            let y = f(&mut g, &vars)?;
            g.shape(y)
        };
        let w = uniform(probe, -1.0, 1.0, &mut rng);
        let scalar = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let y = f(g, v)?;
            weighted_sum(g, y, &w)
        };
        worst = worst.max(check_direction(&scalar, &inputs, STEP, &mut rng)?);
        let coords = check_coordinates(&scalar, &inputs, STEP, Some(COORDS_PER_INPUT), &mut rng)?;
        worst = coords.into_iter().fold(worst, f64::max);
    }
    Ok(CheckResult {
        name: name.to_string(),
        trials,
        max_rel_error: worst,
        redrawn: 0,
    })
}

/// Session-level check over graph inputs and every trainable parameter.
/// `None` when the one-sided slopes disagree, i.e. a relu kink lies inside
/// the difference window and the central difference means nothing there.
fn session_check<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: &F, rng: &mut Rng64) -> Result<Option<f64>>
where
    F: Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut st = store.clone();
    st.zero_grads();
    let input_grads: Vec<Vec<f64>> = {
        let mut s = Session::new(&mut st, SessionMode::TRAIN);
        let vars: Vec<Var> = inputs.iter().map(|t| s.input(t.clone().with_requires_grad(true))).collect();
        let y = f(&mut s, &vars)?;
        let g = s.backward(y)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect()
    };
    let dir_in: Vec<Vec<f64>> = inputs.iter().map(|t| (0..t.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let names: Vec<String> = st.iter().filter(|(_, p)| p.kind.trainable()).map(|(n, _)| n.to_string()).collect();
    let dir_p: Vec<Vec<f64>> = names
        .iter()
        .map(|n| (0..st.get(n).map(|p| p.tensor.numel()).unwrap_or(0)).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut projected: f64 = input_grads.iter().zip(&dir_in).map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>()).sum();
    for (n, d) in names.iter().zip(&dir_p) {
        let g = st.get(n)?.tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; d.len()]);
        projected += g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
    }
    let eval = |sign: f64| -> Result<f64> {
        let mut moved = store.clone();
        for (n, d) in names.iter().zip(&dir_p) {
            let p = moved.get_mut(n)?;
            p.tensor.data_mut().iter_mut().zip(d).for_each(|(v, dv)| *v += sign * SESSION_STEP * dv);
        }
        let mode = SessionMode {
            grad: false,
            bn_batch_stats: true,
        };
        let mut s = Session::new(&mut moved, mode);
        let vars: Vec<Var> = inputs
            .iter()
            .zip(&dir_in)
            .map(|(t, d)| {
                let mut m = t.clone();
                m.data_mut().iter_mut().zip(d).for_each(|(v, dv)| *v += sign * SESSION_STEP * dv);
                s.input(m)
            })
            .collect();
        let y = f(&mut s, &vars)?;
        s.graph.value(y).item()
    };
    let (up, mid, down) = (eval(1.0)?, eval(0.0)?, eval(-1.0)?);
    let numeric = (up - down) / (2.0 * SESSION_STEP);
    let scale = numeric.abs().max(1.0);
    if ((up - mid) - (mid - down)).abs() / SESSION_STEP > KINK_SLOPE_GAP * scale {
        return Ok(None);
    }
    Ok(Some((projected - numeric).abs() / scale))
}

fn unary(name: &str, trials: usize, seed: u64, lo: f64, hi: f64, op: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Result<CheckResult> {
    graph_check(name, trials, seed, |r| vec![uniform(Shape::new(2, 3, 4, 5), lo, hi, r)], |g, v| op(g, v[0]))
}

fn conv_check(name: &str, trials: usize, seed: u64, spec: ConvSpec, input: Shape) -> Result<CheckResult> {
    let ws = spec.weight_shape();
    let bias = spec.has_bias;
    let oc = spec.out_channels;
    graph_check(
        name,
        trials,
        seed,
        |r| {
            let mut v = vec![uniform(input, -1.0, 1.0, r), uniform(ws, -0.5, 0.5, r)];
            if bias {
                v.push(uniform(Shape::channels(oc), -0.5, 0.5, r));
            }
            v
        },
        |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), &spec),
    )
}

fn bn_check(name: &str, trials: usize, seed: u64, train: bool) -> Result<CheckResult> {
    let s = Shape::new(3, 4, 3, 3);
    graph_check(
        name,
        trials,
        seed,
        |r| {
            vec![
                uniform(s, -2.0, 2.0, r),
                uniform(Shape::channels(4), 0.5, 1.5, r),
                uniform(Shape::channels(4), -0.5, 0.5, r),
            ]
        },
        |g, v| {
            let mut rm = Tensor::from_f64s(Shape::channels(4), &[0.1, -0.2, 0.3, 0.0])?;
            let mut rv = Tensor::from_f64s(Shape::channels(4), &[1.0, 0.5, 2.0, 1.5])?;
            let mode = if train { BatchNormMode::Train { momentum: 0.1 } } else { BatchNormMode::Eval };
            g.batch_norm(v[0], v[1], v[2], &mut rm, &mut rv, mode, 1e-5)
        },
    )
}

/// Every differentiable tape operation.
pub fn op_checks(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let s = Shape::new(2, 3, 4, 5);
    let mut out = vec![
        unary("relu", trials, seed, -2.0, 2.0, |g, x| g.relu(x))?,
        unary("relu6", trials, seed, -8.0, 8.0, |g, x| g.relu6(x))?,
        unary("tanh", trials, seed, -3.0, 3.0, |g, x| g.tanh(x))?,
        unary("sigmoid", trials, seed, -6.0, 6.0, |g, x| g.sigmoid(x))?,
        unary("abs", trials, seed, -2.0, 2.0, |g, x| g.abs(x))?,
        unary("powf(-0.5)", trials, seed, 0.5, 2.0, |g, x| g.powf(x, -0.5))?,
        unary("square", trials, seed, -2.0, 2.0, |g, x| g.square(x))?,
        unary("add_scalar", trials, seed, -2.0, 2.0, |g, x| g.add_scalar(x, 0.75))?,
        unary("mul_scalar", trials, seed, -2.0, 2.0, |g, x| g.mul_scalar(x, -1.5))?,
        unary("upsample2x", trials, seed, -2.0, 2.0, |g, x| g.upsample2x(x))?,
        unary("l2_norm_spatial", trials, seed, -2.0, 2.0, |g, x| g.l2_norm_spatial(x, GMM_EPS))?,
        unary("mean_channels", trials, seed, -2.0, 2.0, |g, x| g.mean_channels(x))?,
        unary("sum", trials, seed, -2.0, 2.0, |g, x| g.sum(x))?,
        unary("mean", trials, seed, -2.0, 2.0, |g, x| g.mean(x))?,
    ];
    type Binary = fn(&mut Graph<f64>, Var, Var) -> Result<Var>;
    let binaries: [(&str, Shape, Binary); 5] = [
        ("add", s, |g, a, b| g.add(a, b)),
        ("add[broadcast]", Shape::channels(3), |g, a, b| g.add(a, b)),
        ("mul", s, |g, a, b| g.mul(a, b)),
        ("mul[broadcast]", Shape::new(2, 1, 1, 1), |g, a, b| g.mul(a, b)),
        ("sub", s, |g, a, b| g.sub(a, b)),
    ];
    for (name, rhs, op) in binaries {
        out.push(graph_check(name, trials, seed, |r| vec![uniform(s, -2.0, 2.0, r), uniform(rhs, -2.0, 2.0, r)], |g, v| op(g, v[0], v[1]))?);
    }
    out.push(graph_check(
        "concat_channels",
        trials,
        seed,
        |r| vec![uniform(s, -2.0, 2.0, r), uniform(Shape::new(2, 2, 4, 5), -2.0, 2.0, r)],
        |g, v| g.concat_channels(v[0], v[1]),
    )?);
    let mask = ExchangeMask::even(3);
    out.push(graph_check(
        "channel_mix",
        trials,
        seed,
        |r| vec![uniform(s, -2.0, 2.0, r), uniform(s, -2.0, 2.0, r)],
        |g, v| g.channel_mix(v[0], v[1], mask.as_slice()),
    )?);
    let labels: Vec<f64> = (0..s.numel()).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
    let labels = Tensor::from_f64s(s, &labels)?;
    out.push(graph_check(
        "bce_with_logits",
        trials,
        seed,
        |r| vec![uniform(s, -4.0, 4.0, r)],
        |g, v| g.bce_with_logits(v[0], &labels),
    )?);
    out.push(bn_check("batch_norm[train]", trials, seed, true)?);
    out.push(bn_check("batch_norm[eval]", trials, seed, false)?);
    let convs = [
        ("conv3x3", ConvSpec::new(3, 4, 3).padding(1).bias(true), Shape::new(2, 3, 5, 5)),
        ("conv3x3[stride2]", ConvSpec::new(3, 4, 3).padding(1).stride(2), Shape::new(2, 3, 6, 6)),
        ("conv1x1", ConvSpec::new(4, 6, 1).bias(true), Shape::new(2, 4, 3, 3)),
        ("conv[grouped]", ConvSpec::new(4, 6, 3).padding(1).groups(2), Shape::new(1, 4, 4, 4)),
        ("conv[depthwise]", ConvSpec::depthwise(4, 3, 1), Shape::new(2, 4, 5, 5)),
        ("conv[depthwise,stride2]", ConvSpec::depthwise(4, 3, 2), Shape::new(2, 4, 6, 6)),
        ("conv3x3[large plane]", ConvSpec::new(2, 3, 3).padding(1).bias(true), Shape::new(1, 2, 17, 17)),
        ("conv1x1[large plane]", ConvSpec::new(2, 3, 1), Shape::new(2, 2, 16, 17)),
        ("conv[depthwise,large plane]", ConvSpec::depthwise(2, 3, 1), Shape::new(1, 2, 18, 18)),
    ];
    for (name, spec, input) in convs {
        out.push(conv_check(name, trials, seed, spec, input)?);
    }
    Ok(out)
}

fn ffm_check(mode: FusionMode, trials: usize, seed: u64) -> Result<CheckResult> {
    let c = 3;
    let x = Shape::new(2, c, 3, 3);
    let ws = conv_spec(c).weight_shape();
    graph_check(
        &format!("ffm[{mode:?}]"),
        trials,
        seed,
        |r| {
            vec![
                uniform(x, -1.0, 1.0, r),
                uniform(x, -1.0, 1.0, r),
                uniform(ws, -0.7, 0.7, r),
                uniform(Shape::channels(c), -0.3, 0.3, r),
                uniform(ws, -0.7, 0.7, r),
                uniform(Shape::channels(c), -0.3, 0.3, r),
            ]
        },
        |g, v| {
            let p = (mode != FusionMode::AbsDiff).then_some(FfmVars {
                w1: v[2],
                b1: v[3],
                conv2: (mode == FusionMode::Ffm).then_some((v[4], v[5])),
            });
            fuse(g, v[0], v[1], p, mode)
        },
    )
}

fn gmm_check(reading: NormReading, trials: usize, seed: u64) -> Result<CheckResult> {
    let c = 4;
    graph_check(
        &format!("gmm[{reading:?}]"),
        trials,
        seed,
        |r| {
            vec![
                uniform(Shape::new(2, c, 3, 3), -1.0, 1.0, r),
                uniform(Shape::channels(c), 0.5, 1.5, r),
                uniform(Shape::channels(c), -1.0, 1.0, r),
                uniform(Shape::channels(c), -0.5, 0.5, r),
            ]
        },
        |g, v| gate(g, v[0], v[1], v[2], v[3], GMM_EPS, reading),
    )
}

fn decoder_level_check(trials: usize, seed: u64) -> Result<CheckResult> {
    let level = DecoderLevel::new(1, 5, 4, Some((GMM_EPS, NormReading::MeanOfSquares)))?;
    session_trials("decoder_level", trials, seed, |rng| {
        let mut store = ParamStore::<f64>::new();
        level.build(&mut store, rng)?;
        jitter_init(&mut store, rng);
        let x = uniform(Shape::new(2, 5, 4, 4), -1.0, 1.0, rng);
        let w = uniform(Shape::new(2, 4, 4, 4), -1.0, 1.0, rng);
        let f = |s: &mut Session<'_, f64>, v: &[Var]| -> Result<Var> {
            let y = level.forward(s, v[0])?;
            weighted_sum(&mut s.graph, y, &w)
        };
        session_check(&store, &[x], &f, rng)
    })
}

/// Moves biases, batch-norm affine terms and gate parameters off their
/// zero/identity initialisation; a zero-bias conv over an all-zero
/// neighbourhood would otherwise put its relu input exactly on the kink.
fn jitter_init(store: &mut ParamStore<f64>, rng: &mut Rng64) {
    for (name, p) in store.iter_mut() {
        if p.kind == ParamKind::NoDecay || name.ends_with(".bias") {
            p.tensor.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }
}

/// Collects `trials` smooth-window trials, redrawing the others.
fn session_trials<F>(name: &str, trials: usize, seed: u64, mut trial: F) -> Result<CheckResult>
where
    F: FnMut(&mut Rng64) -> Result<Option<f64>>,
{
    let mut worst = 0.0f64;
    let (mut done, mut redrawn) = (0, 0);
    for attempt in 0..trials * MAX_ATTEMPTS_FACTOR {
        if done == trials {
            break;
        }
        let mut rng = Rng64::seed_from_u64(seed);
        rng.set_stream(attempt as u64);
        match trial(&mut rng)? {
            Some(e) => {
                worst = worst.max(e);
                done += 1;
            }
            None => redrawn += 1,
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        trials: done,
        max_rel_error: worst,
        redrawn,
    })
}

fn model_check(trials: usize, seed: u64) -> Result<CheckResult> {
    session_trials("tiny_model[2x3x32x32]", trials, seed, |rng| {
        let config = ModelConfig {
            init_seed: rng.random(),
            ..ModelConfig::tiny()
        };
        let mut model = LcdNet::<f64>::new(&config)?;
        jitter_init(&mut model.params, rng);
        let s = Shape::new(2, 3, 32, 32);
        let x1 = uniform(s, -1.0, 1.0, rng);
        let x2 = uniform(s, -1.0, 1.0, rng);
        let y: Vec<f64> = (0..2 * 32 * 32).map(|_| f64::from(u8::from(rng.random::<f64>() < 0.3))).collect();
        let label = Tensor::from_f64s(Shape::new(2, 1, 32, 32), &y)?;
        let net = &model.net;
        let f = |s: &mut Session<'_, f64>, v: &[Var]| -> Result<Var> {
            let (l0, l1) = net.forward(s, v[0], v[1])?;
            crate::trainer::dual_bce(s, l0, l1, &label)
        };
        session_check(&model.params, &[x1, x2], &f, rng)
    })
}

/// Composite blocks and the tiny full model.
pub fn block_checks(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for mode in [FusionMode::Ffm, FusionMode::Listing, FusionMode::AbsDiff] {
        out.push(ffm_check(mode, trials, seed)?);
    }
    for reading in [NormReading::MeanOfSquares, NormReading::SquareOfMean] {
        out.push(gmm_check(reading, trials, seed)?);
    }
    out.push(decoder_level_check(trials, seed)?);
    out.push(model_check(trials, seed)?);
    Ok(out)
}

/// The whole suite.
pub fn run(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = op_checks(trials, seed)?;
    out.extend(block_checks(trials, seed)?);
    Ok(out)
}

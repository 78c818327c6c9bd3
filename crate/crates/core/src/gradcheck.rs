//! Central finite-difference checks of every differentiable op, one ViT
//! block, and the full model loss.
//!
//! Each case maps a list of input tensors to a scalar. Non-scalar op
//! outputs are reduced with a fixed random weighting so every output
//! element contributes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{GeluKind, Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::block::{Block, BlockOpts};
use crate::model::{Batch, Binder, MimModel, ModelConfig, ParamGroup, ParamId, ParamStore};
use crate::objective::{build_targets, sample_mask};
use crate::tensor::Tensor;

/// Smallest denominator of the relative error.
pub const ABS_FLOOR: f64 = 1e-6;

/// Gradients smaller than this fraction of a case's largest gradient are
/// compared against that fraction instead of their own magnitude: near
/// zero, central differences measure only cancellation noise.
pub const SCALE_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckOptions {
    pub seeds: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates probed per input tensor; small tensors are probed fully.
    pub coords_per_input: usize,
    /// Coordinates probed per parameter tensor of the full model.
    pub model_coords_per_param: usize,
    pub model_batch: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            seeds: 20,
            step: 1e-5,
            tolerance: 1e-4,
            coords_per_input: 48,
            model_coords_per_param: 1,
            model_batch: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub seeds: u64,
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Scalar function of its inputs; with `grad` set it also returns one
/// gradient per input.
pub type Objective<'a> = dyn Fn(&[Tensor], bool) -> Result<(f64, Vec<Tensor>)> + 'a;

/// Compares analytic gradients with central differences on sampled
/// coordinates. Returns `(max relative error, coordinates probed)`.
pub fn check(
    inputs: &[Tensor],
    f: &Objective<'_>,
    step: f64,
    coords_per_input: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let (_, grads) = f(inputs, true)?;
    if grads.len() != inputs.len() {
        return Err(Error::contract(format!(
            "objective returned {} gradients for {} inputs",
            grads.len(),
            inputs.len()
        )));
    }
    let scale = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = ABS_FLOOR.max(SCALE_FLOOR * scale);
    let mut worst = 0.0f64;
    let mut probed = 0;
    let mut work = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let n = x.numel();
        let coords: Vec<usize> = if n <= coords_per_input {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, coords_per_input).into_vec()
        };
        for j in coords {
            let orig = x.data()[j];
            work[i].data_mut()[j] = orig + step;
            let (plus, _) = f(&work, false)?;
            work[i].data_mut()[j] = orig - step;
            let (minus, _) = f(&work, false)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_err(grads[i].data()[j], numeric, floor));
            probed += 1;
        }
    }
    Ok((worst, probed))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Builds the graph over leaf inputs, reduces a non-scalar output with
/// `weights`, and runs backward when asked.
fn graph_objective<'a>(
    weights_seed: u64,
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'a,
) -> impl Fn(&[Tensor], bool) -> Result<(f64, Vec<Tensor>)> + 'a {
    move |inputs, grad| {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &leaves)?;
        let loss = if g.value(out).numel() == 1 && g.value(out).rank() == 0 {
            out
        } else {
            let mut wr = ChaCha8Rng::seed_from_u64(weights_seed);
            let w = uniform(&mut wr, g.value(out).shape(), -1.0, 1.0);
            let w = g.constant(w);
            let prod = g.mul(out, w)?;
            g.sum(prod)
        };
        let value = g.value(loss).item()?;
        if !grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let out = leaves
            .iter()
            .zip(inputs)
            .map(|(n, t)| grads.get(*n).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        Ok((value, out))
    }
}

type Builder = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    /// Inputs drawn from `(0.5, 1.5)` instead of `(-1, 1)`.
    positive: bool,
    build: fn() -> Builder,
}

fn op_cases() -> Vec<OpCase> {
    fn case(name: &'static str, shapes: &[&[usize]], build: fn() -> Builder) -> OpCase {
        OpCase {
            name,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            positive: false,
            build,
        }
    }
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], || Box::new(|g, x| g.matmul(x[0], x[1]))),
        case("matmul_batched_lhs", &[&[2, 3, 4], &[4, 5]], || Box::new(|g, x| g.matmul(x[0], x[1]))),
        case("bmm", &[&[2, 3, 4], &[2, 4, 2]], || Box::new(|g, x| g.bmm(x[0], x[1]))),
        case("add", &[&[3, 4], &[3, 4]], || Box::new(|g, x| g.add(x[0], x[1]))),
        case("sub", &[&[3, 4], &[3, 4]], || Box::new(|g, x| g.sub(x[0], x[1]))),
        case("mul", &[&[3, 4], &[3, 4]], || Box::new(|g, x| g.mul(x[0], x[1]))),
        case("scale", &[&[3, 4]], || Box::new(|g, x| Ok(g.scale(x[0], -0.7)))),
        case("add_bias", &[&[2, 3, 4], &[4]], || Box::new(|g, x| g.add_bias(x[0], x[1]))),
        case("layer_norm", &[&[2, 8], &[8], &[8]], || {
            Box::new(|g, x| g.layer_norm(x[0], x[1], x[2], 1e-5))
        }),
        case("softmax_last", &[&[4, 6]], || Box::new(|g, x| Ok(g.softmax_last(x[0])))),
        case("gelu_tanh", &[&[16]], || Box::new(|g, x| Ok(g.gelu(x[0], GeluKind::Tanh)))),
        case("gelu_erf", &[&[16]], || Box::new(|g, x| Ok(g.gelu(x[0], GeluKind::Erf)))),
        case("reshape", &[&[2, 3, 4]], || Box::new(|g, x| g.reshape(x[0], &[6, 4]))),
        case("permute", &[&[2, 3, 4, 5]], || Box::new(|g, x| g.permute(x[0], &[0, 2, 3, 1]))),
        case("upsample2x", &[&[2, 4, 4], &[2, 2, 2]], || Box::new(|g, x| g.upsample2x(x[0], x[1]))),
        case("avgpool2x", &[&[2, 4, 4]], || Box::new(|g, x| g.avgpool2x(x[0]))),
        case("merge_tokens", &[&[2, 3, 4], &[4]], || {
            Box::new(|g, x| g.merge_tokens(x[0], x[1], &[vec![0, 2, 5], vec![4, 1, 3]], 6))
        }),
        case("weighted_sq_error", &[&[5, 3]], || {
            Box::new(|g, x| {
                let target = Tensor::from_fn([5, 3], |k| (k as f64 * 0.37).sin());
                g.weighted_sq_error(x[0], target, vec![0.0, 0.3, 1.0, 0.5, 0.25])
            })
        }),
        case("sum", &[&[3, 4]], || Box::new(|g, x| Ok(g.sum(x[0])))),
        case("mean", &[&[3, 4]], || Box::new(|g, x| Ok(g.mean(x[0])))),
        case("linear", &[&[2, 3, 4], &[4, 5], &[5]], || Box::new(|g, x| g.linear(x[0], x[1], x[2]))),
        OpCase {
            name: "attention_chain",
            shapes: vec![vec![1, 2, 3, 4], vec![1, 2, 4, 3]],
            positive: true,
            build: || {
                Box::new(|g, x| {
                    let s = g.bmm(x[0], x[1])?;
                    let s = g.scale(s, 0.5);
                    Ok(g.softmax_last(s))
                })
            },
        },
    ]
}

/// One ViT block over `[2, 5, 8]` tokens; inputs are the tokens followed
/// by every block parameter.
fn block_case(seed: u64) -> (Vec<Tensor>, Box<Objective<'static>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::default();
    let block = Block::new(&mut store, &mut rng, "blk", ParamGroup::Layer(1), 8, 2, 2);
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    // perturb the zero-initialized biases and unit norms so no input is special
    let mut inputs = vec![uniform(&mut rng, &[2, 5, 8], -1.0, 1.0)];
    for &id in &ids {
        let v = &store.get(id).value;
        inputs.push(Tensor::from_fn(v.shape().to_vec(), |k| v.data()[k] + rng.gen_range(-0.2..0.2)));
    }
    let f = move |xs: &[Tensor], grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut s = store.clone();
        for (id, t) in ids.iter().zip(&xs[1..]) {
            s.get_mut(*id).value = t.clone();
        }
        let mut g = Graph::new();
        let mut b = Binder::new(&s, vec![true; s.len()]);
        let x = g.leaf(xs[0].clone(), true);
        let opts = BlockOpts {
            eps: 1e-6,
            gelu: GeluKind::Tanh,
        };
        let out = block.forward(&mut g, &mut b, x, opts)?;
        let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let w = g.constant(uniform(&mut wr, g.value(out).shape(), -1.0, 1.0));
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod);
        let value = g.value(loss).item()?;
        if !grad {
            return Ok((value, Vec::new()));
        }
        let mut grads = g.backward(loss)?;
        let mut out = vec![grads.remove(x).ok_or_else(|| Error::contract("no token gradient"))?];
        for &id in &ids {
            let n = b.node(id).ok_or_else(|| Error::contract("block parameter unused"))?;
            out.push(grads.remove(n).unwrap_or_else(|| Tensor::zeros(s.get(id).value.shape().to_vec())));
        }
        Ok((value, out))
    };
    (inputs, Box::new(f))
}

/// Batch of smooth random images for the full-model check.
pub fn toy_batch(cfg: &ModelConfig, batch: usize, seed: u64) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Batch {
        images: Vec::new(),
        masks: Vec::new(),
        targets: Vec::new(),
    };
    for _ in 0..batch {
        let img = crate::io::synth_image(rng.gen(), 0, cfg.image_size, cfg.channels);
        out.masks.push(sample_mask(rng.gen(), cfg.num_patches(), cfg.mask_ratio)?);
        out.targets.push(build_targets(&img, &cfg.supervision_scales, &cfg.hog)?);
        out.images.push(img);
    }
    Ok(out)
}

/// The full toy loss as a function of every model parameter.
fn model_case(cfg: &ModelConfig, batch: usize, seed: u64) -> Result<(Vec<Tensor>, Box<Objective<'static>>)> {
    let model = MimModel::new(cfg.clone(), seed)?;
    let data = toy_batch(cfg, batch, seed)?;
    let inputs: Vec<Tensor> = model.params().iter().map(|(_, p)| p.value.clone()).collect();
    let f = move |xs: &[Tensor], grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut m = model.clone();
        for ((_, p), t) in m.params_mut().iter_mut().zip(xs) {
            p.value = t.clone();
        }
        let sg = m.forward_loss(&data, None)?;
        let value = sg.graph.value(sg.loss.total).item()?;
        if !grad {
            return Ok((value, Vec::new()));
        }
        let mut grads = sg.graph.backward(sg.loss.total)?;
        let (pairs, _) = sg.binder.collect(&mut grads);
        let mut out: Vec<Tensor> = xs.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        for (id, gt) in pairs {
            out[id.index()] = gt;
        }
        Ok((value, out))
    };
    Ok((inputs, Box::new(f)))
}

fn run_case(
    name: &str,
    opts: &GradCheckOptions,
    coords: usize,
    mut make: impl FnMut(u64) -> Result<(Vec<Tensor>, Box<Objective<'static>>)>,
) -> Result<CaseResult> {
    let mut res = CaseResult {
        name: name.to_string(),
        seeds: opts.seeds,
        coords: 0,
        max_rel_err: 0.0,
        worst_seed: 0,
    };
    for seed in 0..opts.seeds {
        let (inputs, f) = make(seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xfd));
        let (err, n) = check(&inputs, f.as_ref(), opts.step, coords, &mut rng)?;
        res.coords += n;
        if err > res.max_rel_err {
            res.max_rel_err = err;
            res.worst_seed = seed;
        }
    }
    Ok(res)
}

/// Every op case, the ViT block and the full toy loss.
pub fn run_suite(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut cases = Vec::new();
    for case in op_cases() {
        let r = run_case(case.name, opts, opts.coords_per_input, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (lo, hi) = if case.positive { (0.5, 1.5) } else { (-1.0, 1.0) };
            let inputs = case.shapes.iter().map(|s| uniform(&mut rng, s, lo, hi)).collect();
            let f = graph_objective(seed ^ 0xabc, (case.build)());
            Ok((inputs, Box::new(f) as Box<Objective<'static>>))
        })?;
        cases.push(r);
    }
    cases.push(run_case("vit_block", opts, opts.coords_per_input, |seed| Ok(block_case(seed)))?);
    let cfg = ModelConfig::vit_toy();
    cases.push(run_case("toy_model_loss", opts, opts.model_coords_per_param, |seed| {
        model_case(&cfg, opts.model_batch, seed)
    })?);
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        cases,
    })
}

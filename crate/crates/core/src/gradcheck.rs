//! Finite-difference gradient checks for every differentiable operation.
//!
//! Each case draws random inputs, reduces the op output to a scalar with a
//! random weight tensor, and compares the tape gradient with central
//! differences. The per-case error is `|a - n|_2 / max(|a|_2, |n|_2)` over
//! all input elements.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::derive_seed;
use crate::dsp::LogMelSpectrogram;
use crate::model::{
    clap_loss, mae_loss, similarity_matrix, Attention, Block, Bound, LayerNorm, Linear, ModelConfig, ModelError,
    ProjectionHead, SlapModel,
};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::train::{batch_losses, TrainError};

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckConfig {
    pub cases: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            cases: 50,
            eps: 1e-6,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OpResult {
    pub op: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub results: Vec<OpResult>,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

type Forward = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, ModelError>>;

/// Inputs and forward function of one random case.
struct Case {
    inputs: Vec<Tensor>,
    forward: Forward,
}

enum Check {
    Elementwise(fn(&mut ChaCha8Rng) -> Case),
    Directional(fn(&mut ChaCha8Rng, f64) -> Result<f64, ModelError>),
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=5), rng.gen_range(1..=5))
}

fn case(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var, ModelError> + 'static) -> Case {
    Case {
        inputs,
        forward: Box::new(f),
    }
}

/// Builds a layer on a fresh store; its tensors follow the input `x`.
fn layer_case<L: 'static>(
    rng: &mut ChaCha8Rng,
    x: Tensor,
    build: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> L,
    fwd: fn(&L, &mut Tape, &Bound, Var) -> Result<Var, ModelError>,
) -> Case {
    let mut store = ParamStore::new();
    let layer = build(&mut store, rng);
    let mut inputs = vec![x];
    for (_, _, t) in store.iter() {
        // perturb zero biases and unit gains so every entry is exercised
        let noise = randn(rng, t.shape());
        let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + 0.3 * b).collect();
        inputs.push(Tensor::new(t.shape().to_vec(), data).expect("same shape"));
    }
    case(inputs, move |tape, v| fwd(&layer, tape, &Bound::from_vars(v[1..].to_vec()), v[0]))
}

fn checks() -> Vec<(&'static str, Check)> {
    use Check::Elementwise as E;
    vec![
        ("matmul", E(|r| {
            let (m, k) = dims(r);
            let n = r.gen_range(1..=5);
            case(vec![randn(r, &[m, k]), randn(r, &[k, n])], |t, v| Ok(t.matmul(v[0], v[1])?))
        })),
        ("add", E(|r| {
            let (m, n) = dims(r);
            case(vec![randn(r, &[m, n]), randn(r, &[m, n])], |t, v| Ok(t.add(v[0], v[1])?))
        })),
        ("sub", E(|r| {
            let (m, n) = dims(r);
            case(vec![randn(r, &[m, n]), randn(r, &[m, n])], |t, v| Ok(t.sub(v[0], v[1])?))
        })),
        ("mul", E(|r| {
            let (m, n) = dims(r);
            case(vec![randn(r, &[m, n]), randn(r, &[m, n])], |t, v| Ok(t.mul(v[0], v[1])?))
        })),
        ("add_row", E(|r| {
            let (m, n) = dims(r);
            case(vec![randn(r, &[m, n]), randn(r, &[n])], |t, v| Ok(t.add_row(v[0], v[1])?))
        })),
        ("mul_row", E(|r| {
            let (m, n) = dims(r);
            case(vec![randn(r, &[m, n]), randn(r, &[n])], |t, v| Ok(t.mul_row(v[0], v[1])?))
        })),
        ("scale", E(|r| {
            let (m, n) = dims(r);
            let c = r.gen_range(-3.0..3.0);
            case(vec![randn(r, &[m, n])], move |t, v| Ok(t.scale(v[0], c)))
        })),
        ("add_scalar", E(|r| {
            let (m, n) = dims(r);
            let c = r.gen_range(-3.0..3.0);
            case(vec![randn(r, &[m, n])], move |t, v| Ok(t.add_scalar(v[0], c)))
        })),
        ("mul_scalar_var", E(|r| {
            let (m, n) = dims(r);
            case(vec![randn(r, &[m, n]), randn(r, &[])], |t, v| Ok(t.mul_scalar_var(v[0], v[1])?))
        })),
        ("transpose", E(|r| {
            let (m, n) = dims(r);
            case(vec![randn(r, &[m, n])], |t, v| Ok(t.transpose(v[0])?))
        })),
        ("reshape", E(|r| {
            let (m, n) = dims(r);
            case(vec![randn(r, &[m, n])], move |t, v| Ok(t.reshape(v[0], &[n, m])?))
        })),
        ("concat", E(|r| {
            let (m, n) = dims(r);
            let axis = r.gen_range(0..2);
            let other = if axis == 0 { [r.gen_range(1..=4), n] } else { [m, r.gen_range(1..=4)] };
            case(vec![randn(r, &[m, n]), randn(r, &other)], move |t, v| Ok(t.concat(&[v[0], v[1]], axis)?))
        })),
        ("slice", E(|r| {
            let (m, n) = dims(r);
            let axis = r.gen_range(0..2);
            let len = if axis == 0 { m } else { n };
            let start = r.gen_range(0..len);
            let count = r.gen_range(1..=len - start);
            case(vec![randn(r, &[m, n])], move |t, v| Ok(t.slice(v[0], axis, start, count)?))
        })),
        ("gather_rows", E(|r| {
            let (m, n) = dims(r);
            let idx: Vec<usize> = (0..r.gen_range(1..=6)).map(|_| r.gen_range(0..m)).collect();
            case(vec![randn(r, &[m, n])], move |t, v| Ok(t.gather_rows(v[0], &idx)?))
        })),
        ("sum", E(|r| {
            let (m, n) = dims(r);
            case(vec![randn(r, &[m, n])], |t, v| Ok(t.sum(v[0])))
        })),
        ("mean", E(|r| {
            let (m, n) = dims(r);
            case(vec![randn(r, &[m, n])], |t, v| Ok(t.mean(v[0])))
        })),
        ("mean_rows", E(|r| {
            let (m, n) = dims(r);
            case(vec![randn(r, &[m, n])], |t, v| Ok(t.mean_rows(v[0])?))
        })),
        ("softmax", E(|r| {
            let (m, n) = dims(r);
            let axis = r.gen_range(0..2);
            case(vec![randn(r, &[m, n])], move |t, v| Ok(t.softmax(v[0], axis)?))
        })),
        ("log_softmax", E(|r| {
            let (m, n) = dims(r);
            let axis = r.gen_range(0..2);
            case(vec![randn(r, &[m, n])], move |t, v| Ok(t.log_softmax(v[0], axis)?))
        })),
        ("layer_norm", E(|r| {
            // two features normalize to +-1 with a near-zero gradient
            let m = r.gen_range(1..=5);
            let n = r.gen_range(3..=6);
            case(vec![randn(r, &[m, n])], |t, v| Ok(t.layer_norm(v[0], 1e-6)?))
        })),
        ("gelu", E(|r| {
            let (m, n) = dims(r);
            case(vec![randn(r, &[m, n])], |t, v| Ok(t.gelu(v[0])))
        })),
        ("l2_normalize", E(|r| {
            let (m, n) = dims(r);
            let axis = r.gen_range(0..2);
            case(vec![randn(r, &[m, n])], move |t, v| Ok(t.l2_normalize(v[0], axis, 1e-12)?))
        })),
        ("exp", E(|r| {
            let (m, n) = dims(r);
            case(vec![randn(r, &[m, n])], |t, v| Ok(t.exp(v[0])))
        })),
        ("log", E(|r| {
            let (m, n) = dims(r);
            case(vec![uniform(r, &[m, n], 0.2, 3.0)], |t, v| Ok(t.log(v[0])?))
        })),
        ("diag", E(|r| {
            let n = r.gen_range(1..=5);
            case(vec![randn(r, &[n, n])], |t, v| Ok(t.diag(v[0])?))
        })),
        ("linear", E(|r| {
            let (m, i) = dims(r);
            let o = r.gen_range(1..=5);
            let x = randn(r, &[m, i]);
            layer_case(r, x, |s, r| Linear::new(s, "l", i, o, r), |l, t, p, x| Ok(l.forward(t, p, x)?))
        })),
        ("layer_norm_affine", E(|r| {
            let m = r.gen_range(1..=5);
            let n = r.gen_range(3..=6);
            let x = randn(r, &[m, n]);
            layer_case(r, x, |s, _| LayerNorm::new(s, "ln", n, 1e-6), |l, t, p, x| Ok(l.forward(t, p, x)?))
        })),
        ("projection_head", E(|r| {
            let (b, i) = dims(r);
            let d = r.gen_range(1..=6);
            let x = randn(r, &[b, i]);
            layer_case(r, x, |s, r| ProjectionHead::new(s, "proj", i, d, r), |l, t, p, x| {
                Ok(l.forward(t, p, x)?)
            })
        })),
        ("attention", E(|r| {
            let tokens = r.gen_range(1..=5);
            let heads = r.gen_range(1..=2);
            let dim = 2 * heads;
            let x = randn(r, &[tokens, dim]);
            layer_case(r, x, |s, r| Attention::new(s, "attn", dim, heads, r), |l, t, p, x| {
                Ok(l.forward(t, p, x)?)
            })
        })),
        ("encoder_block", E(|r| {
            let tokens = r.gen_range(1..=4);
            let heads = r.gen_range(1..=2);
            let dim = 2 * heads;
            let x = randn(r, &[tokens, dim]);
            layer_case(r, x, |s, r| Block::new(s, "blk", dim, heads, 2, 1e-6, r), |l, t, p, x| {
                Ok(l.forward(t, p, x)?)
            })
        })),
        ("similarity_matrix", E(|r| {
            let (b, d) = dims(r);
            case(vec![randn(r, &[b, d]), randn(r, &[b, d])], |t, v| similarity_matrix(t, v[0], v[1]))
        })),
        ("clap_loss", E(|r| {
            let b = r.gen_range(1..=6);
            let tau = r.gen_range(0.03f64..1.0);
            case(
                vec![uniform(r, &[b, b], -1.0, 1.0), Tensor::scalar(tau.ln())],
                |t, v| clap_loss(t, v[0], v[1]),
            )
        })),
        ("clap_loss_tau", E(|r| {
            let b = r.gen_range(1..=6);
            let sim = uniform(r, &[b, b], -1.0, 1.0);
            let tau = Tensor::scalar(r.gen_range(0.03..1.0));
            case(vec![tau], move |t, v| {
                let s = t.constant(sim.clone());
                let log_tau = t.log(v[0])?;
                clap_loss(t, s, log_tau)
            })
        })),
        ("mae_loss", E(|r| {
            let (p, c) = (r.gen_range(2..=6), r.gen_range(2..=6));
            let targets = randn(r, &[p, c]);
            let masked: Vec<usize> = (0..p).filter(|_| r.gen_bool(0.6)).collect();
            let masked = if masked.is_empty() { vec![0] } else { masked };
            case(vec![randn(r, &[p, c])], move |t, v| mae_loss(t, v[0], &targets, &masked))
        })),
        ("model_total_loss", Check::Directional(model_directional)),
    ]
}

fn reduce(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var, ModelError> {
    let w = tape.constant(weights.clone());
    let prod = if tape.shape(out).is_empty() {
        tape.mul_scalar_var(out, w)?
    } else {
        tape.mul(out, w)?
    };
    Ok(tape.sum(prod))
}

fn eval(case: &Case, inputs: &[Tensor], weights: &Tensor) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.forward)(&mut tape, &vars)?;
    let loss = reduce(&mut tape, out, weights)?;
    Ok(tape.value(loss).item())
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn check_elementwise(case: &Case, rng: &mut ChaCha8Rng, eps: f64) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.forward)(&mut tape, &vars)?;
    let weights = randn(rng, tape.shape(out));
    let loss = reduce(&mut tape, out, &weights)?;
    tape.backward(loss)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(&case.inputs) {
        match tape.grad(*v) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut inputs = case.inputs.clone();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            inputs[i].data_mut()[j] = x0 + eps;
            let up = eval(case, &inputs, &weights)?;
            inputs[i].data_mut()[j] = x0 - eps;
            let down = eval(case, &inputs, &weights)?;
            inputs[i].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * eps));
        }
    }
    Ok(rel_error(&analytic, &numeric))
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        patch_time: 2,
        patch_mel: 4,
        num_mels: 8,
        enc_dim: 4,
        enc_layers: 1,
        enc_heads: 2,
        dec_dim: 4,
        dec_layers: 1,
        dec_heads: 2,
        mlp_ratio: 2,
        embed_dim: 4,
        text_feat_dim: 16,
        ..Default::default()
    }
}

fn model_loss(model: &SlapModel, specs: &[LogMelSpectrogram], texts: &[&str], mask_seed: u64) -> Result<(f64, Vec<f64>), ModelError> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let refs: Vec<&LogMelSpectrogram> = specs.iter().collect();
    let losses = batch_losses(model, &mut tape, &p, &refs, texts, 1.0, mask_seed, -10.0).map_err(|e| match e {
        TrainError::Model(m) => m,
        other => ModelError::Checkpoint(other.to_string()),
    })?;
    let value = tape.value(losses.total).item();
    tape.backward(losses.total)?;
    let mut grads = Vec::with_capacity(model.params().numel());
    for (v, (_, _, t)) in p.vars().iter().zip(model.params().iter()) {
        match tape.grad(*v) {
            Some(g) => grads.extend_from_slice(g),
            None => grads.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }
    Ok((value, grads))
}

/// Total pretraining loss of a tiny model, checked along a random
/// direction in parameter space: `g . v` against `(L(p + hv) - L(p - hv)) / 2h`.
fn model_directional(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64, ModelError> {
    let mut model = SlapModel::new(tiny_model_config(), rng.gen())?;
    let b = rng.gen_range(2..=3);
    let specs: Vec<LogMelSpectrogram> = (0..b)
        .map(|_| LogMelSpectrogram {
            frames: (0..6 * 8).map(|_| rng.gen_range(-8.0..0.0)).collect(),
            num_frames: 6,
            num_mels: 8,
            hop_seconds: 0.01,
            window_seconds: 0.025,
        })
        .collect();
    let pool = ["a man in his thirties", "an elderly woman", "a hoarse speaker", "a young lady"];
    let texts: Vec<&str> = (0..b).map(|i| pool[i]).collect();
    let mask_seed = rng.gen();

    let (_, grads) = model_loss(&model, &specs, &texts, mask_seed)?;
    let dir: Vec<f64> = (0..grads.len()).map(|_| rng.sample(StandardNormal)).collect();
    let analytic: f64 = grads.iter().zip(&dir).map(|(g, d)| g * d).sum();

    let mut shifted = |sign: f64| -> Result<f64, ModelError> {
        let mut k = 0;
        for t in model.params_mut().tensors_mut() {
            for x in t.data_mut() {
                *x += sign * eps * dir[k];
                k += 1;
            }
        }
        let (v, _) = model_loss(&model, &specs, &texts, mask_seed)?;
        let mut k = 0;
        for t in model.params_mut().tensors_mut() {
            for x in t.data_mut() {
                *x -= sign * eps * dir[k];
                k += 1;
            }
        }
        Ok(v)
    };
    let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * eps);
    Ok(rel_error(&[analytic], &[numeric]))
}

/// Names of all checked operations, in run order.
pub fn op_names() -> Vec<&'static str> {
    checks().into_iter().map(|(n, _)| n).collect()
}

/// Runs the checks whose name contains `filter` (all when `None`).
pub fn run(cfg: &GradCheckConfig, filter: Option<&str>) -> Result<GradCheckReport, ModelError> {
    let start = Instant::now();
    let mut results = Vec::new();
    for (k, (name, check)) in checks().into_iter().enumerate() {
        if filter.is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let mut errors = Vec::with_capacity(cfg.cases);
        for c in 0..cfg.cases {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[k as u64, c as u64]));
            let err = match &check {
                Check::Elementwise(make) => {
                    let case = make(&mut rng);
                    check_elementwise(&case, &mut rng, cfg.eps)?
                }
                Check::Directional(f) => f(&mut rng, cfg.eps)?,
            };
            errors.push(err);
        }
        let max = errors.iter().cloned().fold(0.0, f64::max);
        let mean = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
        results.push(OpResult {
            op: name.to_string(),
            cases: errors.len(),
            max_rel_error: max,
            mean_rel_error: mean,
            passed: errors.iter().all(|e| *e < cfg.tolerance),
        });
    }
    Ok(GradCheckReport {
        config: cfg.clone(),
        results,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#![allow(dead_code)]

use asd_core::model::{Batch, Mode, Model, ModelConfig};
use asd_core::numgrad::{finite_diff_check, BnMode, GradCheckReport, Graph, ParamStore, Tensor, Var};
use asd_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1]` kept at least 0.05 away from zero so that
/// ReLU kinks and max-pool ties stay out of reach of the finite difference.
pub fn away_from_zero(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            if v.abs() < 0.05 {
                v.signum() * 0.05 + v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn case(name: &'static str, inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

/// One case per differentiable graph op, all on tensors of at most 4x4
/// entries per matrix.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let mut t = |shape: &[usize]| away_from_zero(shape.to_vec(), &mut r);
    let probs = Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap();
    let target = Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let mse_target = t(&[3, 4]);
    vec![
        case("matmul", vec![t(&[3, 4]), t(&[4, 2])], |g, v| g.matmul(v[0], v[1])),
        case("bmm", vec![t(&[2, 3, 4]), t(&[2, 4, 2])], |g, v| g.bmm(v[0], v[1], false)),
        case("bmm_trans_b", vec![t(&[2, 3, 4]), t(&[2, 2, 4])], |g, v| g.bmm(v[0], v[1], true)),
        case("add", vec![t(&[3, 4]), t(&[3, 4])], |g, v| g.add(v[0], v[1])),
        case("add_bias", vec![t(&[2, 3, 4]), t(&[4])], |g, v| g.add_bias(v[0], v[1])),
        case("scale", vec![t(&[3, 4])], |g, v| g.scale(v[0], -1.7)),
        case("relu", vec![t(&[4, 4])], |g, v| g.relu(v[0])),
        case("softmax", vec![t(&[3, 4])], |g, v| g.softmax(v[0])),
        case("layer_norm", vec![t(&[3, 4]), t(&[4]), t(&[4])], |g, v| g.layer_norm(v[0], v[1], v[2])),
        case("batch_norm_train", vec![t(&[4, 3]), t(&[3]), t(&[3])], |g, v| {
            Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Train)?.0)
        }),
        case("batch_norm_eval", vec![t(&[4, 3]), t(&[3]), t(&[3])], |g, v| {
            let mode = BnMode::Eval {
                mean: &[0.1, -0.2, 0.3],
                var: &[0.5, 1.5, 0.8],
            };
            Ok(g.batch_norm(v[0], v[1], v[2], mode)?.0)
        }),
        case("mean_pool", vec![t(&[2, 3, 4])], |g, v| g.mean_pool(v[0], 1)),
        case("max_pool", vec![t(&[2, 4, 3])], |g, v| g.max_pool(v[0], 1)),
        case("concat", vec![t(&[2, 3]), t(&[2, 1])], |g, v| g.concat(&[v[0], v[1]], 1)),
        case("reshape", vec![t(&[2, 6])], |g, v| g.reshape(v[0], vec![3, 4])),
        case("permute", vec![t(&[2, 3, 2])], |g, v| g.permute(v[0], &[2, 0, 1])),
        case("mse_loss", vec![t(&[3, 4])], move |g, v| {
            let y = g.input(mse_target.clone())?;
            g.mse_loss(v[0], y)
        }),
        case("cross_entropy", vec![probs], move |g, v| {
            let y = g.input(target.clone())?;
            g.cross_entropy(v[0], y)
        }),
        case("sum", vec![t(&[3, 4])], |g, v| g.sum(v[0])),
        case("sum_squares", vec![t(&[3, 4])], |g, v| g.sum_squares(v[0])),
        case("weighted_sum", vec![t(&[3, 4]), t(&[3, 4])], |g, v| g.weighted_sum(v[0], 0.7, v[1], 0.3)),
    ]
}

/// Scalarizes the op output as `<out, w> + 0.5 * ||out||^2` with a fixed
/// random `w`, then checks every input coordinate by central differences.
pub fn check_op(op: &OpCase, seed: u64) -> GradCheckReport {
    let mut store = ParamStore::new();
    let ids: Vec<_> = op
        .inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("{}.{i}", op.name), t.clone()))
        .collect();
    let n = {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(&store, id).unwrap()).collect();
        let out = (op.build)(&mut g, &vars).unwrap();
        g.value(out).len()
    };
    let mut r = rng(seed);
    let w = away_from_zero(vec![n, 1], &mut r);
    let f = |s: &ParamStore, g: &mut Graph| {
        let vars = ids.iter().map(|&id| g.param(s, id)).collect::<Result<Vec<_>>>()?;
        let out = (op.build)(g, &vars)?;
        let flat = g.reshape(out, vec![1, n])?;
        let wv = g.input(w.clone())?;
        let proj = g.matmul(flat, wv)?;
        let proj = g.sum(proj)?;
        let sq = g.sum_squares(out)?;
        g.weighted_sum(proj, 1.0, sq, 0.5)
    };
    finite_diff_check(f, &mut store, usize::MAX, 1e-5, &mut r).unwrap()
}

/// A batch of `b` random windows shaped for `config`, with IDs cycling over
/// the classes.
pub fn random_batch(config: &ModelConfig, b: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    let t = config.context_len;
    let mut uni = |shape: Vec<usize>, lo: f64, hi: f64| Tensor::uniform(shape, lo, hi, &mut r);
    let context = uni(vec![b, t, config.n_mels], -2.0, 2.0);
    let phase = uni(vec![b, t, config.phase_dim], -std::f64::consts::PI, std::f64::consts::PI);
    let target = uni(vec![b, config.n_mels], -2.0, 2.0);
    let labels: Vec<usize> = (0..b).map(|i| i % config.num_ids).collect();
    Batch {
        context,
        phase,
        target,
        ids: Some(asd_core::model::one_hot(&labels, config.num_ids).unwrap()),
    }
}

/// Central-difference check of the joint training loss over all model
/// parameters, sampling `probes` coordinates.
pub fn check_total_loss(model: &Model, batch: &Batch, probes: usize, seed: u64) -> GradCheckReport {
    let mut store = model.store.clone();
    let f = |s: &ParamStore, g: &mut Graph| {
        let mut m = model.clone();
        m.store = s.clone();
        Ok(m.batch_loss(g, batch, Mode::Train, true)?.0.total)
    };
    finite_diff_check(f, &mut store, probes, 1e-5, &mut rng(seed)).unwrap()
}

/// Small model shape used where the default size would only add runtime.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        ff_dim: 12,
        enc_layers: 1,
        dec_layers: 1,
        n_mels: 8,
        phase_dim: 6,
        context_len: 4,
        num_ids: 3,
        alpha: 0.3,
        classifier_hidden: 5,
    }
}

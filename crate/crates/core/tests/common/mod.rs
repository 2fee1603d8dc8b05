// SPDX-License-Identifier: Apache-2.0

//! Shared helpers for the integration tests: random tensors and central
//! finite-difference gradient checks in f64.

#![allow(dead_code)]

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsepose::graph::{Graph, Var};
use sparsepose::model::PoseModel;
use sparsepose::{Result, Tensor};

pub const FD_STEP: f64 = 1e-6;
/// Gradients below this magnitude are compared on an absolute scale, where
/// the finite-difference rounding error (~1e-10) would dominate a ratio.
pub const FD_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
}

impl GradCheck {
    fn merge(self, rel: f64) -> Self {
        Self {
            max_rel: self.max_rel.max(rel),
            checked: self.checked + 1,
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Picks up to `samples` coordinates spread as evenly as sizes allow.
fn coordinates(sizes: &[usize], samples: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut quota = vec![0; sizes.len()];
    let mut left = samples.min(sizes.iter().sum());
    while left > 0 {
        for (q, &n) in quota.iter_mut().zip(sizes) {
            if left > 0 && *q < n {
                *q += 1;
                left -= 1;
            }
        }
    }
    let mut out = Vec::new();
    for (i, (&q, &n)) in quota.iter().zip(sizes).enumerate() {
        out.extend(sample(rng, n, q).into_iter().map(|j| (i, j)));
    }
    out
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// element contributes a distinct amount.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(uniform(&mut rng(seed), &shape, -1.0, 1.0));
    let p = g.mul(out, w)?;
    g.sum(p)
}

/// Checks reverse-mode gradients of `build` with respect to every input.
pub fn check_op(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    samples: usize,
    seed: u64,
) -> GradCheck {
    let eval = |xs: &[Tensor<f64>]| -> (Graph<f64>, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        let loss = weighted_sum(&mut g, out, seed ^ 0xabcd).unwrap();
        (g, vars, loss)
    };
    let (g, vars, loss) = eval(inputs);
    let grads = g.backward(loss).unwrap();
    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let mut r = rng(seed);
    let mut res = GradCheck {
        max_rel: 0.0,
        checked: 0,
    };
    for (i, j) in coordinates(&sizes, samples, &mut r) {
        let analytic = grads.get(vars[i]).map_or(0.0, |t| t.data()[j]);
        let mut xs = inputs.to_vec();
        let base = xs[i].data()[j];
        xs[i].data_mut()[j] = base + FD_STEP;
        let (g1, _, l1) = eval(&xs);
        xs[i].data_mut()[j] = base - FD_STEP;
        let (g2, _, l2) = eval(&xs);
        let numeric = (g1.value(l1).data()[0] - g2.value(l2).data()[0]) / (2.0 * FD_STEP);
        res = res.merge(rel_err(analytic, numeric));
    }
    res
}

/// Adds uniform noise in ±`amp` to every parameter so that special initial
/// values (unit gains, zero biases) do not hide errors.
pub fn jitter_params(model: &mut PoseModel<f64>, amp: f64, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        for v in model.params.get_mut(&n).unwrap().data_mut() {
            *v += r.gen_range(-amp..amp);
        }
    }
}

/// Checks parameter gradients of a scalar loss built from `model`, sampling
/// only parameters whose names start with `prefix`.
pub fn check_params(
    model: &PoseModel<f64>,
    prefix: &str,
    loss: impl Fn(&PoseModel<f64>, &mut Graph<f64>) -> Result<Var>,
    samples: usize,
    seed: u64,
) -> GradCheck {
    let mut g = Graph::new();
    let l = loss(model, &mut g).unwrap();
    let grads = g.backward(l).unwrap();
    let pg = g.param_grads(&grads, &model.params);

    let names: Vec<(usize, String)> = model
        .params
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| n.starts_with(prefix))
        .map(|(i, (n, _))| (i, n.to_string()))
        .collect();
    let sizes: Vec<usize> = names
        .iter()
        .map(|(_, n)| model.params.get(n).unwrap().numel())
        .collect();
    let value = |m: &PoseModel<f64>| {
        let mut g = Graph::new();
        let l = loss(m, &mut g).unwrap();
        g.value(l).data()[0]
    };
    let mut r = rng(seed);
    let mut res = GradCheck {
        max_rel: 0.0,
        checked: 0,
    };
    let mut m = model.clone();
    for (k, j) in coordinates(&sizes, samples, &mut r) {
        let (idx, name) = &names[k];
        let analytic = pg[*idx].data()[j];
        let base = model.params.get(name).unwrap().data()[j];
        m.params.get_mut(name).unwrap().data_mut()[j] = base + FD_STEP;
        let up = value(&m);
        m.params.get_mut(name).unwrap().data_mut()[j] = base - FD_STEP;
        let down = value(&m);
        m.params.get_mut(name).unwrap().data_mut()[j] = base;
        res = res.merge(rel_err(analytic, (up - down) / (2.0 * FD_STEP)));
    }
    res
}

pub type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Every differentiable primitive with inputs of a size that offers at least
/// 20 coordinates to sample.
pub fn primitive_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    use sparsepose::graph::Padding;
    use sparsepose::kinematics::Skeleton;
    use sparsepose::ssd::SsdPath;

    let mut r = rng(seed);
    let mut u = |shape: &[usize]| uniform(&mut r, shape, -1.0, 1.0);
    let decay = |r: &mut ChaCha8Rng, t: usize| uniform(r, &[t], 0.5, 0.99);
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = vec![
        (
            "matmul",
            vec![u(&[4, 5]), u(&[5, 3])],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        (
            "matmul_bt",
            vec![u(&[4, 5]), u(&[3, 5])],
            Box::new(|g, v| g.matmul_bt(v[0], v[1])),
        ),
        ("add", vec![u(&[4, 6]), u(&[4, 6])], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![u(&[4, 6]), u(&[4, 6])], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![u(&[4, 6]), u(&[4, 6])], Box::new(|g, v| g.mul(v[0], v[1]))),
        (
            "add_row",
            vec![u(&[5, 6]), u(&[6])],
            Box::new(|g, v| g.add_row(v[0], v[1])),
        ),
        ("scale", vec![u(&[4, 6])], Box::new(|g, v| g.scale(v[0], -1.7))),
        (
            "mul_scalar",
            vec![u(&[4, 6]), u(&[1])],
            Box::new(|g, v| g.mul_scalar(v[0], v[1])),
        ),
        ("silu", vec![u(&[4, 6])], Box::new(|g, v| g.silu(v[0]))),
        ("relu", vec![u(&[4, 6])], Box::new(|g, v| g.relu(v[0]))),
        ("softplus", vec![u(&[4, 6])], Box::new(|g, v| g.softplus(v[0]))),
        ("exp", vec![u(&[4, 6])], Box::new(|g, v| g.exp(v[0]))),
        (
            "layer_norm",
            vec![u(&[4, 6]), u(&[6]), u(&[6])],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        (
            "conv1d_time_causal",
            vec![u(&[6, 3]), u(&[3, 3, 2]), u(&[2])],
            Box::new(|g, v| g.conv1d_time(v[0], v[1], Some(v[2]), Padding::Causal)),
        ),
        (
            "conv1d_time_same",
            vec![u(&[7, 3]), u(&[5, 3, 2]), u(&[2])],
            Box::new(|g, v| g.conv1d_time(v[0], v[1], Some(v[2]), Padding::Same)),
        ),
        (
            "depthwise_causal_conv",
            vec![u(&[6, 4]), u(&[4, 4]), u(&[4])],
            Box::new(|g, v| g.depthwise_causal_conv(v[0], v[1], Some(v[2]))),
        ),
        (
            "slice_cols",
            vec![u(&[5, 7])],
            Box::new(|g, v| g.slice_cols(v[0], 2, 4)),
        ),
        (
            "slice_rows",
            vec![u(&[7, 5])],
            Box::new(|g, v| g.slice_rows(v[0], 1, 4)),
        ),
        (
            "concat_cols",
            vec![u(&[4, 3]), u(&[4, 5])],
            Box::new(|g, v| g.concat_cols(&[v[0], v[1], v[0]])),
        ),
        ("softmax_rows", vec![u(&[4, 6])], Box::new(|g, v| g.softmax_rows(v[0]))),
        ("reshape", vec![u(&[4, 6])], Box::new(|g, v| g.reshape(v[0], &[6, 4]))),
        ("row_norms", vec![u(&[6, 4])], Box::new(|g, v| g.row_norms(v[0]))),
        ("mean", vec![u(&[4, 6])], Box::new(|g, v| g.mean(v[0]))),
        ("sum", vec![u(&[4, 6])], Box::new(|g, v| g.sum(v[0]))),
        (
            "forward_kinematics",
            vec![u(&[2, 132]), u(&[2, 3])],
            Box::new(|g, v| g.forward_kinematics(v[0], v[1], &Skeleton::default())),
        ),
    ];
    for (name, path) in [
        ("ssd_recurrent", SsdPath::Recurrent),
        ("ssd_dual", SsdPath::Dual),
        ("ssd_chunked", SsdPath::Chunked(3)),
    ] {
        let a = decay(&mut r, 8);
        let b = uniform(&mut r, &[8, 3], -1.0, 1.0);
        let c = uniform(&mut r, &[8, 3], -1.0, 1.0);
        let x = uniform(&mut r, &[8, 2], -1.0, 1.0);
        cases.push((
            name,
            vec![a, b, c, x],
            Box::new(move |g, v| g.ssd(v[0], v[1], v[2], v[3], path)),
        ));
    }
    // Longer than the matrix-form backward handles; exercises the reverse recurrence.
    let t = 300;
    let (a, b, c, x) = (
        decay(&mut r, t),
        uniform(&mut r, &[t, 2], -1.0, 1.0),
        uniform(&mut r, &[t, 2], -1.0, 1.0),
        uniform(&mut r, &[t, 2], -1.0, 1.0),
    );
    cases.push((
        "ssd_long",
        vec![a, b, c, x],
        Box::new(|g, v| g.ssd(v[0], v[1], v[2], v[3], SsdPath::Chunked(32))),
    ));
    cases
}

/// T=4, E=8, N=4, two heads, one block.
pub fn tiny_config() -> sparsepose::model::ModelConfig {
    sparsepose::model::ModelConfig {
        window: 4,
        heads: 2,
        ffn_hidden: 16,
        state_dim: 4,
        ..sparsepose::model::ModelConfig::with_latent(8, 1)
    }
}

pub fn tiny_model(seed: u64) -> PoseModel<f64> {
    let mut m = PoseModel::<f64>::init(tiny_config(), seed).unwrap();
    jitter_params(&mut m, 0.1, seed + 1);
    m
}

/// A short real motion window with tracker features and loss targets.
pub fn tiny_sample(frames: usize, seed: u64) -> sparsepose::window::Sample<f64> {
    use sparsepose::kinematics::Skeleton;
    use sparsepose::synth::{generate_motion, SynthConfig};
    use sparsepose::window::SequenceFeatures;

    let skel = Skeleton::default();
    let cfg = SynthConfig {
        seed,
        num_sequences: 1,
        frames_per_sequence: frames.max(4),
        ..SynthConfig::default()
    };
    let pose = generate_motion(&cfg).unwrap().remove(0);
    SequenceFeatures::new(pose, &skel, cfg.fps)
        .unwrap()
        .sample(0, frames, &skel)
        .unwrap()
}

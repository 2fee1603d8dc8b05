// SPDX-License-Identifier: Apache-2.0

//! The pose network.
//!
//! ```text
//! trackers (T×54) ─ linear ─ + positional ─┬─ [state-space block ─ attention block] × I ─ decoder ─ T×132
//! ```
//!
//! State-space block (gated, residual):
//!
//! ```text
//! u  = LN(V)
//! Y¹ = SiLU(DepthwiseConv(Linear_xbc(u)))          → x, B, C
//! Y² = SSM(A, B, C)(x),  A_t = exp(−softplus(a)·softplus(Linear_dt(u)_t))
//! Y³ = SiLU(Linear_z(u))
//! out = Linear(LN(Y² ⊙ Y³)) + V
//! ```
//!
//! Attention block: pre-norm bidirectional multi-head self-attention and a
//! pre-norm ReLU feed-forward layer, each with a residual connection.
//!
//! Decoder: `X = LN(V_I)`, features `[X, SiLU(Conv₁(X)) ⊙ X, SiLU(Conv₅(X)) + X]`
//! concatenated, then `Linear(LN(·))` to 22 × 6 rotation values.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Padding, Var};
use crate::kinematics::INPUT_DIM;
use crate::params::ParameterStore;
use crate::pose::POSE_DIM;
use crate::ssd::SsdPath;
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;
/// Width of the decoder's high-frequency temporal convolution.
const DECODER_WIDE_KERNEL: usize = 5;
/// Block length used by the state-space blocks.
const SSD_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Window length in frames.
    pub window: usize,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub state_dim: usize,
    pub conv_width: usize,
    pub output_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_latent(256, 4)
    }
}

impl ModelConfig {
    /// Standard layout for a latent width and block count: 8 heads (fewer when
    /// the width is not divisible), feed-forward width 8·E, 64 state entries,
    /// depthwise convolution width 4, 96-frame windows.
    pub fn with_latent(latent_dim: usize, blocks: usize) -> Self {
        let heads = (1..=8).rev().find(|h| latent_dim.is_multiple_of(*h)).unwrap_or(1);
        Self {
            window: 96,
            input_dim: INPUT_DIM,
            latent_dim,
            blocks,
            heads,
            ffn_hidden: 8 * latent_dim,
            state_dim: 64,
            conv_width: 4,
            output_dim: POSE_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.input_dim != INPUT_DIM {
            return bad(format!("input_dim must be {INPUT_DIM}, got {}", self.input_dim));
        }
        if self.output_dim != POSE_DIM {
            return bad(format!("output_dim must be {POSE_DIM}, got {}", self.output_dim));
        }
        if self.blocks == 0 {
            return bad("at least one block is required".into());
        }
        for (name, v) in [
            ("window", self.window),
            ("latent_dim", self.latent_dim),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("state_dim", self.state_dim),
            ("conv_width", self.conv_width),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.latent_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "latent_dim {} is not divisible by {} heads",
                self.latent_dim, self.heads
            ));
        }
        Ok(())
    }

    pub fn fields(&self) -> [(&'static str, usize); 9] {
        [
            ("window", self.window),
            ("input_dim", self.input_dim),
            ("latent_dim", self.latent_dim),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("state_dim", self.state_dim),
            ("conv_width", self.conv_width),
            ("output_dim", self.output_dim),
        ]
    }

    /// Sets one field by name; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: usize) -> bool {
        let slot = match key {
            "window" => &mut self.window,
            "input_dim" => &mut self.input_dim,
            "latent_dim" => &mut self.latent_dim,
            "blocks" => &mut self.blocks,
            "heads" => &mut self.heads,
            "ffn_hidden" => &mut self.ffn_hidden,
            "state_dim" => &mut self.state_dim,
            "conv_width" => &mut self.conv_width,
            "output_dim" => &mut self.output_dim,
            _ => return false,
        };
        *slot = value;
        true
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Inner width of the state-space block projection: gate, x, B, C, step.
    fn in_proj_width(&self) -> usize {
        2 * self.latent_dim + 2 * self.state_dim + 1
    }
}

/// Network parameters plus their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseModel<S: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParameterStore<S>,
}

struct Init<'a, S: Scalar> {
    store: &'a mut ParameterStore<S>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Init<'_, S> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<()> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                S::lit(if bound > 0.0 {
                    self.rng.gen_range(-bound..bound)
                } else {
                    0.0
                })
            })
            .collect();
        self.store.insert(name, Tensor::new(shape, data)?)
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, S::lit(value)))
    }

    /// Weight `fan_in × fan_out` and bias, both uniform in ±1/√fan_in.
    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.uniform(format!("{prefix}.weight"), &[fan_in, fan_out], bound)?;
        self.uniform(format!("{prefix}.bias"), &[fan_out], bound)
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.fill(format!("{prefix}.gain"), &[dim], 1.0)?;
        self.fill(format!("{prefix}.bias"), &[dim], 0.0)
    }

    fn conv(&mut self, prefix: &str, width: usize, c_in: usize, c_out: usize) -> Result<()> {
        let bound = 1.0 / ((width * c_in) as f64).sqrt();
        self.uniform(format!("{prefix}.weight"), &[width, c_in, c_out], bound)?;
        self.uniform(format!("{prefix}.bias"), &[c_out], bound)
    }
}

/// Inverse of softplus.
fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

impl<S: Scalar> PoseModel<S> {
    /// Deterministic initialisation from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        let mut init = Init {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (e, n) = (config.latent_dim, config.state_dim);
        init.linear("bfe", config.input_dim, e)?;
        init.uniform("pos_embedding".into(), &[config.window, e], 0.02)?;
        for i in 0..config.blocks {
            let p = format!("blocks.{i}.pssb");
            init.norm(&format!("{p}.norm"), e)?;
            init.linear(&format!("{p}.in_proj"), e, config.in_proj_width())?;
            // Step-size bias so that softplus(δ) starts near 0.05.
            let w = config.in_proj_width();
            init.store
                .get_mut(&format!("{p}.in_proj.bias"))
                .expect("just inserted")
                .data_mut()[w - 1] = S::lit(softplus_inv(0.05));
            let conv_ch = e + 2 * n;
            let bound = 1.0 / (config.conv_width as f64).sqrt();
            init.uniform(format!("{p}.conv.weight"), &[config.conv_width, conv_ch], bound)?;
            init.uniform(format!("{p}.conv.bias"), &[conv_ch], bound)?;
            init.fill(format!("{p}.decay_rate"), &[1], softplus_inv(1.0))?;
            init.norm(&format!("{p}.out_norm"), e)?;
            init.linear(&format!("{p}.out_proj"), e, e)?;

            let a = format!("blocks.{i}.attn");
            init.norm(&format!("{a}.norm1"), e)?;
            init.linear(&format!("{a}.qkv"), e, 3 * e)?;
            init.linear(&format!("{a}.out"), e, e)?;
            init.norm(&format!("{a}.norm2"), e)?;
            init.linear(&format!("{a}.ffn1"), e, config.ffn_hidden)?;
            init.linear(&format!("{a}.ffn2"), config.ffn_hidden, e)?;
        }
        init.norm("fad.norm_in", e)?;
        init.conv("fad.conv1", 1, e, e)?;
        init.conv("fad.conv5", DECODER_WIDE_KERNEL, e, e)?;
        init.norm("fad.norm_out", 3 * e)?;
        init.linear("fad.out", 3 * e, config.output_dim)?;
        Ok(Self { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        count_parameters(&self.params)
    }

    pub fn cast<T: Scalar>(&self) -> PoseModel<T> {
        PoseModel {
            config: self.config,
            params: self.params.cast(),
        }
    }

    fn p(&self, g: &mut Graph<S>, name: &str) -> Result<Var> {
        g.param(&self.params, name)
    }

    fn linear(&self, g: &mut Graph<S>, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}.weight"))?;
        let b = self.p(g, &format!("{prefix}.bias"))?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph<S>, prefix: &str, x: Var) -> Result<Var> {
        let gain = self.p(g, &format!("{prefix}.gain"))?;
        let bias = self.p(g, &format!("{prefix}.bias"))?;
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    /// Base feature extractor: one linear layer from tracker features to the
    /// latent width (positional embedding not included).
    pub fn bfe_forward(&self, g: &mut Graph<S>, input: Var) -> Result<Var> {
        let (_, c) = g.value(input).rows_cols();
        if c != self.config.input_dim {
            return Err(Error::shape(
                "bfe_forward",
                format!("input has {c} features, expected {}", self.config.input_dim),
            ));
        }
        self.linear(g, "bfe", input)
    }

    /// Gated state-space block of block `i`.
    pub fn pssb_forward(&self, g: &mut Graph<S>, i: usize, v: Var) -> Result<Var> {
        let p = format!("blocks.{i}.pssb");
        let (e, n) = (self.config.latent_dim, self.config.state_dim);
        let t = g.value(v).rows_cols().0;
        let u = self.norm(g, &format!("{p}.norm"), v)?;
        let proj = self.linear(g, &format!("{p}.in_proj"), u)?;
        let z = g.slice_cols(proj, 0, e)?;
        let xbc = g.slice_cols(proj, e, e + 2 * n)?;
        let dt = g.slice_cols(proj, 2 * e + 2 * n, 1)?;

        let kernel = self.p(g, &format!("{p}.conv.weight"))?;
        let bias = self.p(g, &format!("{p}.conv.bias"))?;
        let xbc = g.depthwise_causal_conv(xbc, kernel, Some(bias))?;
        let xbc = g.silu(xbc)?;
        let x = g.slice_cols(xbc, 0, e)?;
        let b = g.slice_cols(xbc, e, n)?;
        let c = g.slice_cols(xbc, e + n, n)?;

        let step = g.softplus(dt)?;
        let rate = self.p(g, &format!("{p}.decay_rate"))?;
        let rate = g.softplus(rate)?;
        let log_decay = g.mul_scalar(step, rate)?;
        let log_decay = g.scale(log_decay, -S::one())?;
        let decay = g.exp(log_decay)?;
        let decay = g.reshape(decay, &[t])?;

        let y2 = g.ssd(decay, b, c, x, SsdPath::Chunked(SSD_CHUNK.min(t)))?;
        let y3 = g.silu(z)?;
        let gated = g.mul(y2, y3)?;
        let gated = self.norm(g, &format!("{p}.out_norm"), gated)?;
        let out = self.linear(g, &format!("{p}.out_proj"), gated)?;
        g.add(out, v)
    }

    /// Attention block of block `i`.
    pub fn attention_forward(&self, g: &mut Graph<S>, i: usize, y: Var) -> Result<Var> {
        let p = format!("blocks.{i}.attn");
        let e = self.config.latent_dim;
        let heads = self.config.heads;
        let dh = e / heads;
        let h = self.norm(g, &format!("{p}.norm1"), y)?;
        let qkv = self.linear(g, &format!("{p}.qkv"), h)?;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = g.slice_cols(qkv, hd * dh, dh)?;
            let k = g.slice_cols(qkv, e + hd * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * e + hd * dh, dh)?;
            let scores = g.matmul_bt(q, k)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax_rows(scores)?;
            outs.push(g.matmul(weights, v)?);
        }
        let attn = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let attn = self.linear(g, &format!("{p}.out"), attn)?;
        let r = g.add(y, attn)?;

        let h = self.norm(g, &format!("{p}.norm2"), r)?;
        let f = self.linear(g, &format!("{p}.ffn1"), h)?;
        let f = g.relu(f)?;
        let f = self.linear(g, &format!("{p}.ffn2"), f)?;
        g.add(r, f)
    }

    /// Frequency-aware feature extractor on normalised features: T×E → T×3E.
    pub fn fafe_forward(&self, g: &mut Graph<S>, xm: Var) -> Result<Var> {
        let k1 = self.p(g, "fad.conv1.weight")?;
        let b1 = self.p(g, "fad.conv1.bias")?;
        let low = g.conv1d_time(xm, k1, Some(b1), Padding::Same)?;
        let low = g.silu(low)?;
        let f2 = g.mul(low, xm)?;
        let k5 = self.p(g, "fad.conv5.weight")?;
        let b5 = self.p(g, "fad.conv5.bias")?;
        let high = g.conv1d_time(xm, k5, Some(b5), Padding::Same)?;
        let high = g.silu(high)?;
        let f3 = g.add(high, xm)?;
        g.concat_cols(&[xm, f2, f3])
    }

    /// Decoder: T×E → T×132.
    pub fn fad_forward(&self, g: &mut Graph<S>, v: Var) -> Result<Var> {
        let xm = self.norm(g, "fad.norm_in", v)?;
        let f = self.fafe_forward(g, xm)?;
        let f = self.norm(g, "fad.norm_out", f)?;
        self.linear(g, "fad.out", f)
    }

    /// Tracker features to initial latent features, positional embedding added.
    pub fn embed(&self, g: &mut Graph<S>, input: Var) -> Result<Var> {
        let t = g.value(input).rows_cols().0;
        if t == 0 || t > self.config.window {
            return Err(Error::InvalidArgument(format!(
                "sequence length {t} outside 1..={}",
                self.config.window
            )));
        }
        let v0 = self.bfe_forward(g, input)?;
        let pos = self.p(g, "pos_embedding")?;
        let pos = if t == self.config.window {
            pos
        } else {
            g.slice_rows(pos, 0, t)?
        };
        g.add(v0, pos)
    }

    /// Full network: T×54 tracker features → T×132 local 6D rotations.
    pub fn forward(&self, g: &mut Graph<S>, input: Var) -> Result<Var> {
        let mut v = self.embed(g, input)?;
        for i in 0..self.config.blocks {
            let y = self.pssb_forward(g, i, v)?;
            v = self.attention_forward(g, i, y)?;
        }
        self.fad_forward(g, v)
    }

    /// Inference on one window.
    pub fn predict(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

pub fn count_parameters<S: Scalar>(params: &ParameterStore<S>) -> usize {
    params.count()
}

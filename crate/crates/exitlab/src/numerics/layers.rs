//! Parameterized layers built on the autodiff tape: dense projections,
//! multi-layer perceptrons, a GRU cell, and transformer encoder blocks.
//!
//! Each layer registers its tensors under a `prefix/...` naming scheme, so a
//! model is fully described by its parameter names and can be rebuilt from a
//! checkpoint by looking the names up again.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::store::{ParamId, ParameterStore};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Element, Tensor};
use crate::rng::Rng;

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`; used for the ReLU MLP encoders.
    KaimingNormal,
    /// Uniform in `±1/sqrt(fan_in)`; used everywhere else.
    UniformFanIn,
    /// Uniform in `±limit`.
    UniformSymmetric(f64),
    Zeros,
}

impl Init {
    /// Draws a fresh `(rows, cols)` tensor; `rows` is the fan-in.
    pub fn sample<E: Element>(self, rows: usize, cols: usize, rng: &mut Rng) -> Tensor<E> {
        let mut out = Tensor::zeros(rows, cols);
        match self {
            Init::KaimingNormal => {
                let std = (2.0 / rows as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("std is finite and positive");
                for v in out.data_mut() {
                    *v = E::from_f64(dist.sample(rng));
                }
            }
            Init::UniformFanIn => {
                let limit = 1.0 / (rows as f64).sqrt();
                for v in out.data_mut() {
                    *v = E::from_f64(rand::Rng::random_range(rng, -limit..limit));
                }
            }
            Init::UniformSymmetric(limit) => {
                for v in out.data_mut() {
                    *v = E::from_f64(rand::Rng::random_range(rng, -limit..limit));
                }
            }
            Init::Zeros => {}
        }
        out
    }
}

fn lookup<E: Element>(
    store: &ParameterStore<E>,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::MissingArtifact(format!("parameter {name:?} not found in checkpoint")))?;
    let shape = store.value(id).shape();
    if shape != (rows, cols) {
        return Err(Error::Config(format!(
            "parameter {name:?} has shape {}x{}, expected {rows}x{cols}; checkpoint does not match config",
            shape.0, shape.1
        )));
    }
    Ok(id)
}

/// Fully connected layer `y = x W + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn register<E: Element>(
        store: &mut ParameterStore<E>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Result<Dense> {
        let w = store.register(format!("{prefix}/w"), init.sample(in_dim, out_dim, rng))?;
        let b = store.register(format!("{prefix}/b"), Tensor::zeros(1, out_dim))?;
        Ok(Dense { w, b, in_dim, out_dim })
    }

    pub fn from_store<E: Element>(
        store: &ParameterStore<E>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Dense> {
        Ok(Dense {
            w: lookup(store, &format!("{prefix}/w"), in_dim, out_dim)?,
            b: lookup(store, &format!("{prefix}/b"), 1, out_dim)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &ParameterStore<E>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }
}

/// Applies a dense layer: `x (n,in) -> (n,out)`.
pub fn dense_forward<E: Element>(
    tape: &mut Tape<E>,
    store: &ParameterStore<E>,
    layer: &Dense,
    x: Var,
) -> Result<Var> {
    layer.forward(tape, store, x)
}

/// Stack of dense layers with ReLU after every layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn register<E: Element>(
        store: &mut ParameterStore<E>,
        prefix: &str,
        in_dim: usize,
        widths: &[usize],
        rng: &mut Rng,
    ) -> Result<Mlp> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut dim = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Dense::register(
                store,
                &format!("{prefix}/fc{i}"),
                dim,
                w,
                Init::KaimingNormal,
                rng,
            )?);
            dim = w;
        }
        Ok(Mlp { layers })
    }

    pub fn from_store<E: Element>(
        store: &ParameterStore<E>,
        prefix: &str,
        in_dim: usize,
        widths: &[usize],
    ) -> Result<Mlp> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut dim = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Dense::from_store(store, &format!("{prefix}/fc{i}"), dim, w)?);
            dim = w;
        }
        Ok(Mlp { layers })
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &ParameterStore<E>,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, store, h)?;
            h = tape.relu(h);
        }
        Ok(h)
    }
}

/// Gated recurrent unit cell with separate input and hidden biases:
///
/// ```text
/// r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub in_dim: usize,
    pub hidden: usize,
    w_i: [ParamId; 3],
    w_h: [ParamId; 3],
    b_i: [ParamId; 3],
    b_h: [ParamId; 3],
}

const GRU_GATES: [&str; 3] = ["r", "z", "n"];

impl GruCell {
    pub fn register<E: Element>(
        store: &mut ParameterStore<E>,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<GruCell> {
        let limit = 1.0 / (hidden as f64).sqrt();
        let init = Init::UniformSymmetric(limit);
        let mut w_i = [ParamId(0); 3];
        let mut w_h = [ParamId(0); 3];
        let mut b_i = [ParamId(0); 3];
        let mut b_h = [ParamId(0); 3];
        for (g, gate) in GRU_GATES.iter().enumerate() {
            w_i[g] = store.register(format!("{prefix}/w_i{gate}"), init.sample(in_dim, hidden, rng))?;
            w_h[g] = store.register(format!("{prefix}/w_h{gate}"), init.sample(hidden, hidden, rng))?;
            b_i[g] = store.register(format!("{prefix}/b_i{gate}"), Tensor::zeros(1, hidden))?;
            b_h[g] = store.register(format!("{prefix}/b_h{gate}"), Tensor::zeros(1, hidden))?;
        }
        Ok(GruCell { in_dim, hidden, w_i, w_h, b_i, b_h })
    }

    pub fn from_store<E: Element>(
        store: &ParameterStore<E>,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Result<GruCell> {
        let mut w_i = [ParamId(0); 3];
        let mut w_h = [ParamId(0); 3];
        let mut b_i = [ParamId(0); 3];
        let mut b_h = [ParamId(0); 3];
        for (g, gate) in GRU_GATES.iter().enumerate() {
            w_i[g] = lookup(store, &format!("{prefix}/w_i{gate}"), in_dim, hidden)?;
            w_h[g] = lookup(store, &format!("{prefix}/w_h{gate}"), hidden, hidden)?;
            b_i[g] = lookup(store, &format!("{prefix}/b_i{gate}"), 1, hidden)?;
            b_h[g] = lookup(store, &format!("{prefix}/b_h{gate}"), 1, hidden)?;
        }
        Ok(GruCell { in_dim, hidden, w_i, w_h, b_i, b_h })
    }

    fn gate<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &ParameterStore<E>,
        g: usize,
        x: Var,
        h: Var,
    ) -> Result<(Var, Var)> {
        let w_i = tape.param(store, self.w_i[g]);
        let b_i = tape.param(store, self.b_i[g]);
        let w_h = tape.param(store, self.w_h[g]);
        let b_h = tape.param(store, self.b_h[g]);
        let xi = tape.matmul(x, w_i)?;
        let xi = tape.add_bias(xi, b_i)?;
        let hh = tape.matmul(h, w_h)?;
        let hh = tape.add_bias(hh, b_h)?;
        Ok((xi, hh))
    }

    /// One recurrence step: `(x (1,in), h (1,hidden)) -> h' (1,hidden)`.
    pub fn step<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &ParameterStore<E>,
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let (r_xi, r_hh) = self.gate(tape, store, 0, x, h)?;
        let r_pre = tape.add(r_xi, r_hh)?;
        let r = tape.sigmoid(r_pre);

        let (z_xi, z_hh) = self.gate(tape, store, 1, x, h)?;
        let z_pre = tape.add(z_xi, z_hh)?;
        let z = tape.sigmoid(z_pre);

        let (n_xi, n_hh) = self.gate(tape, store, 2, x, h)?;
        let gated = tape.mul(r, n_hh)?;
        let n_pre = tape.add(n_xi, gated)?;
        let n = tape.tanh(n_pre);

        // h' = (1 - z) * n + z * h = n - z*n + z*h
        let zn = tape.mul(z, n)?;
        let zh = tape.mul(z, h)?;
        let diff = tape.sub(n, zn)?;
        tape.add(diff, zh)
    }

    pub fn zero_state<E: Element>(&self) -> Tensor<E> {
        Tensor::zeros(1, self.hidden)
    }
}

/// One GRU recurrence step.
pub fn gru_step<E: Element>(
    tape: &mut Tape<E>,
    store: &ParameterStore<E>,
    cell: &GruCell,
    x: Var,
    h: Var,
) -> Result<Var> {
    cell.step(tape, store, x, h)
}

/// Learned per-feature scale and shift for layer normalization.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn register<E: Element>(
        store: &mut ParameterStore<E>,
        prefix: &str,
        dim: usize,
    ) -> Result<LayerNorm> {
        let gamma = store.register(format!("{prefix}/gamma"), Tensor::full(1, dim, E::ONE))?;
        let beta = store.register(format!("{prefix}/beta"), Tensor::zeros(1, dim))?;
        Ok(LayerNorm { gamma, beta, eps: 1e-5 })
    }

    pub fn from_store<E: Element>(
        store: &ParameterStore<E>,
        prefix: &str,
        dim: usize,
    ) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: lookup(store, &format!("{prefix}/gamma"), 1, dim)?,
            beta: lookup(store, &format!("{prefix}/beta"), 1, dim)?,
            eps: 1e-5,
        })
    }

    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &ParameterStore<E>,
        x: Var,
    ) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        tape.layer_norm_rows(x, gamma, beta, self.eps)
    }
}

/// Multi-head self-attention over a token sequence `(n, d)`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Dense,
    pub wk: Dense,
    pub wv: Dense,
    pub wo: Dense,
    pub heads: usize,
    pub model_dim: usize,
}

impl MultiHeadAttention {
    pub fn register<E: Element>(
        store: &mut ParameterStore<E>,
        prefix: &str,
        model_dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<MultiHeadAttention> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention model dim {model_dim} must be divisible by heads {heads}"
            )));
        }
        let proj = |store: &mut ParameterStore<E>, name: &str, rng: &mut Rng| {
            Dense::register(store, &format!("{prefix}/{name}"), model_dim, model_dim, Init::UniformFanIn, rng)
        };
        Ok(MultiHeadAttention {
            wq: proj(store, "wq", rng)?,
            wk: proj(store, "wk", rng)?,
            wv: proj(store, "wv", rng)?,
            wo: proj(store, "wo", rng)?,
            heads,
            model_dim,
        })
    }

    pub fn from_store<E: Element>(
        store: &ParameterStore<E>,
        prefix: &str,
        model_dim: usize,
        heads: usize,
    ) -> Result<MultiHeadAttention> {
        Ok(MultiHeadAttention {
            wq: Dense::from_store(store, &format!("{prefix}/wq"), model_dim, model_dim)?,
            wk: Dense::from_store(store, &format!("{prefix}/wk"), model_dim, model_dim)?,
            wv: Dense::from_store(store, &format!("{prefix}/wv"), model_dim, model_dim)?,
            wo: Dense::from_store(store, &format!("{prefix}/wo"), model_dim, model_dim)?,
            heads,
            model_dim,
        })
    }

    /// Returns `(output (n,d), per-head attention probabilities (n,n))`.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &ParameterStore<E>,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.wq.forward(tape, store, x)?;
        let k = self.wk.forward(tape, store, x)?;
        let v = self.wv.forward(tape, store, x)?;
        let head_dim = self.model_dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut contexts = Vec::with_capacity(self.heads);
        let mut probs_by_head = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.affine(scores, scale, 0.0);
            let probs = tape.softmax_rows(scores);
            let ctx = tape.matmul(probs, vh)?;
            contexts.push(ctx);
            probs_by_head.push(probs);
        }
        let merged = tape.concat_cols(&contexts)?;
        let out = self.wo.forward(tape, store, merged)?;
        Ok((out, probs_by_head))
    }
}

/// Post-norm transformer encoder block: self-attention and a ReLU feed-forward
/// stage, each wrapped in residual + layer norm.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ff1: Dense,
    pub ff2: Dense,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn register<E: Element>(
        store: &mut ParameterStore<E>,
        prefix: &str,
        model_dim: usize,
        ff_dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<EncoderLayer> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::register(store, &format!("{prefix}/attn"), model_dim, heads, rng)?,
            ln1: LayerNorm::register(store, &format!("{prefix}/ln1"), model_dim)?,
            ff1: Dense::register(store, &format!("{prefix}/ff1"), model_dim, ff_dim, Init::KaimingNormal, rng)?,
            ff2: Dense::register(store, &format!("{prefix}/ff2"), ff_dim, model_dim, Init::UniformFanIn, rng)?,
            ln2: LayerNorm::register(store, &format!("{prefix}/ln2"), model_dim)?,
        })
    }

    pub fn from_store<E: Element>(
        store: &ParameterStore<E>,
        prefix: &str,
        model_dim: usize,
        ff_dim: usize,
        heads: usize,
    ) -> Result<EncoderLayer> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::from_store(store, &format!("{prefix}/attn"), model_dim, heads)?,
            ln1: LayerNorm::from_store(store, &format!("{prefix}/ln1"), model_dim)?,
            ff1: Dense::from_store(store, &format!("{prefix}/ff1"), model_dim, ff_dim)?,
            ff2: Dense::from_store(store, &format!("{prefix}/ff2"), ff_dim, model_dim)?,
            ln2: LayerNorm::from_store(store, &format!("{prefix}/ln2"), model_dim)?,
        })
    }

    /// Returns `(output (n,d), per-head attention probabilities)`.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &ParameterStore<E>,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        self.forward_dropout(tape, store, x, None)
    }

    /// Forward pass with optional inverted dropout on the attention output
    /// and the feed-forward hidden activations (training only).
    pub fn forward_dropout<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &ParameterStore<E>,
        x: Var,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<(Var, Vec<Var>)> {
        let (attn_out, probs) = self.attn.forward(tape, store, x)?;
        let attn_out = apply_dropout(tape, attn_out, dropout.as_deref_mut())?;
        let res1 = tape.add(x, attn_out)?;
        let normed1 = self.ln1.forward(tape, store, res1)?;
        let ff_hidden = self.ff1.forward(tape, store, normed1)?;
        let ff_hidden = tape.relu(ff_hidden);
        let ff_hidden = apply_dropout(tape, ff_hidden, dropout.as_deref_mut())?;
        let ff_out = self.ff2.forward(tape, store, ff_hidden)?;
        let res2 = tape.add(normed1, ff_out)?;
        let out = self.ln2.forward(tape, store, res2)?;
        Ok((out, probs))
    }
}

/// Inverted-dropout context: drop probability plus the RNG that draws masks.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut Rng,
}

fn apply_dropout<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<Var> {
    let Some(ctx) = dropout else { return Ok(x) };
    if ctx.p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - ctx.p;
    let scale = E::from_f64(1.0 / keep);
    let (rows, cols) = tape.value(x).shape();
    let mut mask = Tensor::<E>::zeros(rows, cols);
    for v in mask.data_mut() {
        if rand::Rng::random_bool(ctx.rng, keep) {
            *v = scale;
        }
    }
    let mask = tape.constant(mask);
    tape.mul(x, mask)
}

/// Applies one transformer encoder block to a token sequence.
pub fn attention_encoder_forward<E: Element>(
    tape: &mut Tape<E>,
    store: &ParameterStore<E>,
    layer: &EncoderLayer,
    tokens: Var,
) -> Result<(Var, Vec<Var>)> {
    layer.forward(tape, store, tokens)
}

//! Layers composed from tape primitives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamGroup, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::TensorError;

/// Dropout state threaded through a forward pass.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
    pub train: bool,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, train: bool, seed: u64) -> Self {
        Dropout { p, train, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Evaluation mode.
    pub fn off() -> Self {
        Dropout::new(0.0, false, 0)
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        tape.dropout(x, self.p, self.train, &mut self.rng)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Result<Self, TensorError> {
        let w = store.add_uniform(&format!("{name}.w"), &[input, output], input, ParamGroup::Main, rng)?;
        let b = store.add_uniform(&format!("{name}.b"), &[1, output], input, ParamGroup::Main, rng)?;
        Ok(Linear { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    /// Gain starts at one and bias at zero.
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, TensorError> {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::filled(&[1, dim], 1.0), ParamGroup::Main)?;
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[1, dim]), ParamGroup::Main)?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, Self::EPS)
    }
}

/// LSTM cell with fused gate weights over `[x ; h]`, gate order i, f, g, o.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub gates: Linear,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self, TensorError> {
        Ok(LstmCell { gates: Linear::new(store, name, input + hidden, 4 * hidden, rng)?, hidden })
    }

    /// Zero `(h, c)` state, each `[1, hidden]`.
    pub fn zero_state(&self, tape: &mut Tape) -> (Var, Var) {
        (tape.constant(Tensor::zeros(&[1, self.hidden])), tape.constant(Tensor::zeros(&[1, self.hidden])))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, state: (Var, Var)) -> Result<(Var, Var), TensorError> {
        let (h, c) = state;
        let xh = tape.concat(&[x, h], 1)?;
        let z = self.gates.forward(tape, store, xh)?;
        let n = self.hidden;
        let i = tape.slice(z, 1, 0, n)?;
        let f = tape.slice(z, 1, n, n)?;
        let g = tape.slice(z, 1, 2 * n, n)?;
        let o = tape.slice(z, 1, 3 * n, n)?;
        let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c2 = tape.add(fc, ig)?;
        let tc = tape.tanh(c2);
        let h2 = tape.mul(o, tc)?;
        Ok((h2, c2))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self, TensorError> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// Scaled dot-product attention of `x` (`[L, dim]`) over itself. `mask`
    /// is row-major `[L, L]`; `false` blocks a query from a key.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        let dk = self.dim / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 1, h * dk, dk)?;
            let kh = tape.slice(k, 1, h * dk, dk)?;
            let vh = tape.slice(v, 1, h * dk, dk)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale);
            let a = match mask {
                Some(m) => tape.masked_softmax(s, m)?,
                None => tape.softmax(s, 1)?,
            };
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        self.o.forward(tape, store, cat)
    }
}

/// Post-norm transformer encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
}

impl TransformerLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn: usize, rng: &mut R) -> Result<Self, TensorError> {
        Ok(TransformerLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, ffn, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), ffn, dim, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: Option<&[bool]>,
        drop: &mut Dropout,
    ) -> Result<Var, TensorError> {
        let a = self.attn.forward(tape, store, x, mask)?;
        let a = drop.apply(tape, a)?;
        let r = tape.add(x, a)?;
        let x1 = self.ln1.forward(tape, store, r)?;
        let f = self.ff1.forward(tape, store, x1)?;
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, store, f)?;
        let f = drop.apply(tape, f)?;
        let r2 = tape.add(x1, f)?;
        self.ln2.forward(tape, store, r2)
    }
}

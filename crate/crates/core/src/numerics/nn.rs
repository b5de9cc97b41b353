//! Parameterized building blocks recorded onto a [`Graph`].

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply<S: Scalar>(self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Affine map `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights `N(0, gain² / fan_in)`, zero bias.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        let weight = store.add_normal(format!("{name}.weight"), &[fan_in, fan_out], std, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[fan_out]);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Stack of linear layers with a shared hidden activation and no
/// activation after the last layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `widths` lists input, hidden and output sizes. `last_gain` scales
    /// the initialization of the final layer (0 gives a zero output).
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        widths: &[usize],
        activation: Activation,
        last_gain: f64,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { last_gain } else { 1.0 };
                Linear::new(store, &format!("{name}.{i}"), widths[i], widths[i + 1], gain, rng)
            })
            .collect();
        Self { layers, activation }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < n {
                h = self.activation.apply(g, h)?;
            }
        }
        Ok(h)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim])),
            bias: store.add_zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, S::lit(Self::EPS))
    }
}

/// `softmax(Q Kᵀ / √d) V` for `Q: [m, d]`, `K, V: [n, d]`.
pub fn scaled_dot_attention<S: Scalar>(g: &mut Graph<S>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (w, _) = attention_weights(g, q, k)?;
    let n = g.shape(k)[0];
    let d = g.shape(v)[1];
    let w3 = g.reshape(w, &[1, g.shape(q)[0], n])?;
    let v3 = g.reshape(v, &[1, n, d])?;
    let out = g.batch_matmul(w3, v3, false)?;
    g.reshape(out, &[g.shape(q)[0], d])
}

/// Attention weights `softmax(Q Kᵀ / √d)` as `[m, n]`, plus the node of
/// the scaled logits.
pub fn attention_weights<S: Scalar>(g: &mut Graph<S>, q: Var, k: Var) -> Result<(Var, Var)> {
    let (qs, ks) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] || qs[1] == 0 {
        return Err(Error::dim("attention", format!("{qs:?} vs {ks:?}")));
    }
    if ks[0] == 0 {
        return Err(Error::EmptyContext);
    }
    let (m, d, n) = (qs[0], qs[1], ks[0]);
    let q3 = g.reshape(q, &[1, m, d])?;
    let k3 = g.reshape(k, &[1, n, d])?;
    let logits = g.batch_matmul(q3, k3, true)?;
    let logits = g.scale(logits, S::one() / S::from_usize_lossy(d).sqrt())?;
    let logits = g.reshape(logits, &[m, n])?;
    Ok((g.softmax(logits)?, logits))
}

/// Gated recurrent unit with the update convention
/// `h' = (1 − z) ∘ h + z ∘ h̃`, `h̃ = tanh(W_h [x, r ∘ h] + b_h)`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub update: Linear,
    pub reset: Linear,
    pub candidate: Linear,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl Gru {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let cat = input_dim + hidden_dim;
        Self {
            update: Linear::new(store, &format!("{name}.z"), cat, hidden_dim, 1.0, rng),
            reset: Linear::new(store, &format!("{name}.r"), cat, hidden_dim, 1.0, rng),
            candidate: Linear::new(store, &format!("{name}.h"), cat, hidden_dim, 1.0, rng),
            input_dim,
            hidden_dim,
        }
    }

    /// One step for a batch: `x: [B, in]`, `h: [B, hidden]`.
    pub fn step<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let xh = g.concat(&[x, h])?;
        let z = self.update.forward(g, store, xh)?;
        let z = g.sigmoid(z)?;
        let r = self.reset.forward(g, store, xh)?;
        let r = g.sigmoid(r)?;
        let rh = g.mul(r, h)?;
        let xrh = g.concat(&[x, rh])?;
        let cand = self.candidate.forward(g, store, xrh)?;
        let cand = g.tanh(cand)?;
        // h + z ∘ (h̃ − h)
        let delta = g.sub(cand, h)?;
        let delta = g.mul(z, delta)?;
        g.add(h, delta)
    }

    /// Runs the sequence and returns the final hidden state. `masks[t]`
    /// (shape `[B, hidden]`, entries 0/1) freezes the state of masked rows.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        xs: &[Var],
        h0: Var,
        masks: Option<&[Var]>,
    ) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut h = h0;
        for (t, &x) in xs.iter().enumerate() {
            let next = self.step(g, store, x, h)?;
            h = match masks {
                Some(m) => {
                    let delta = g.sub(next, h)?;
                    let delta = g.mul(m[t], delta)?;
                    g.add(h, delta)?
                }
                None => next,
            };
        }
        Ok(h)
    }
}

/// Same-length 1-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv1d {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {k}")));
        }
        let std = 1.0 / ((k * c_in) as f64).sqrt();
        Ok(Self {
            kernel: store.add_normal(format!("{name}.kernel"), &[k, c_in, c_out], std, rng),
            bias: store.add_zeros(format!("{name}.bias"), &[c_out]),
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        let y = g.conv1d(x, k)?;
        g.add_row(y, b)
    }
}

/// Multi-head self-attention over `[B, T, d]` with per-position key masks.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadSelfAttention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, 1.0, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, 1.0, rng),
            heads,
            dim,
        })
    }

    /// `key_valid` has `B * T` entries; invalid keys get zero weight.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        key_valid: &[bool],
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim || key_valid.len() != s[0] * s[1] {
            return Err(Error::dim("self_attention", format!("{s:?}")));
        }
        let (b, t, d, h) = (s[0], s[1], s[2], self.heads);
        let dh = d / h;
        let qkv = self.qkv.forward(g, store, x)?;
        let split = |g: &mut Graph<S>, i: usize| -> Result<Var> {
            let part = g.slice(qkv, i * d, d)?;
            let part = g.reshape(part, &[b, t, h, dh])?;
            let part = g.swap_axes12(part)?;
            g.reshape(part, &[b * h, t, dh])
        };
        let q = split(g, 0)?;
        let k = split(g, 1)?;
        let v = split(g, 2)?;
        let logits = g.batch_matmul(q, k, true)?;
        let logits = g.scale(logits, S::one() / S::from_usize_lossy(dh).sqrt())?;
        let mut mask = Vec::with_capacity(b * h * t * t);
        for bi in 0..b {
            for _ in 0..h {
                for _ in 0..t {
                    mask.extend_from_slice(&key_valid[bi * t..(bi + 1) * t]);
                }
            }
        }
        let w = g.masked_softmax(logits, Some(&mask))?;
        let ctx = g.batch_matmul(w, v, false)?;
        let ctx = g.reshape(ctx, &[b, h, t, dh])?;
        let ctx = g.swap_axes12(ctx)?;
        let ctx = g.reshape(ctx, &[b, t, d])?;
        self.out.forward(g, store, ctx)
    }
}

/// Post-norm transformer encoder layer with a GELU feed-forward block.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn: MultiHeadSelfAttention,
    pub norm1: LayerNorm,
    pub ff: Mlp,
    pub norm2: LayerNorm,
}

impl TransformerLayer {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_mult: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadSelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ff: Mlp::new(
                store,
                &format!("{name}.ff"),
                &[dim, ff_mult * dim, dim],
                Activation::Gelu,
                1.0,
                rng,
            ),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        key_valid: &[bool],
    ) -> Result<Var> {
        let a = self.attn.forward(g, store, x, key_valid)?;
        let h = g.add(x, a)?;
        let h = self.norm1.forward(g, store, h)?;
        let f = self.ff.forward(g, store, h)?;
        let h2 = g.add(h, f)?;
        self.norm2.forward(g, store, h2)
    }
}

//! Layers built on the tape: linear maps, MLPs, layer norm and attention.

use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = store.add(&format!("{name}.w"), fan_in, fan_out, Init::Glorot);
        let b = bias.then(|| store.add(&format!("{name}.b"), 1, fan_out, Init::Zeros));
        Self { w, b }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Stack of linear layers with leaky-ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true))
            .collect();
        Self { layers }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, mut x: Var) -> Var {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, store, x);
            if i + 1 < n {
                x = g.leaky_relu(x, LEAKY_SLOPE);
            }
        }
        x
    }

    /// Forward with an activation after the last layer too.
    pub fn forward_act<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Var {
        let y = self.forward(g, store, x);
        g.leaky_relu(y, LEAKY_SLOPE)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("empty mlp")
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(&format!("{name}.gain"), 1, width, Init::Const(1.0)),
            bias: store.add(&format!("{name}.bias"), 1, width, Init::Zeros),
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x, Self::EPS);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Multi-head scaled dot-product attention without projection biases, so a
/// query whose keys are all masked receives an exactly zero update.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub width: usize,
}

pub struct AttentionOut {
    pub out: Var,
    /// Head-averaged attention weights `[n_q × n_kv]`.
    pub weights: Tensor,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize) -> Self {
        assert!(heads >= 1 && width % heads == 0, "width {width} not divisible by {heads} heads");
        Self {
            wq: store.add(&format!("{name}.wq"), width, width, Init::Glorot),
            wk: store.add(&format!("{name}.wk"), width, width, Init::Glorot),
            wv: store.add(&format!("{name}.wv"), width, width, Init::Glorot),
            wo: store.add(&format!("{name}.wo"), width, width, Init::Glorot),
            heads,
            width,
        }
    }

    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        store: &'a ParamStore,
        q_in: Var,
        kv_in: Var,
        key_mask: Option<&[bool]>,
    ) -> AttentionOut {
        let (nq, _) = g.shape(q_in);
        let (nk, _) = g.shape(kv_in);
        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let wo = g.param(store, self.wo);
        let q = g.matmul(q_in, wq);
        let k = g.matmul(kv_in, wk);
        let v = g.matmul(kv_in, wv);
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut weights = Tensor::zeros(nq, nk);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let a = match key_mask {
                Some(m) => g.softmax_rows_masked(s, m),
                None => g.softmax_rows(s),
            };
            weights.add_assign(g.value(a));
            outs.push(g.matmul(a, vh));
        }
        weights.scale_assign(1.0 / self.heads as f64);
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        AttentionOut { out: g.matmul(cat, wo), weights }
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, true),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, true),
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        self.down.forward(g, store, h)
    }
}

/// Pre-norm self-attention block: `x + SA(LN x)`, then `x + FF(LN x)`.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl SelfAttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, ff_hidden: usize) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), width),
            attn: Attention::new(store, &format!("{name}.attn"), width, heads),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), width),
            ff: FeedForward::new(store, &format!("{name}.ff"), width, ff_hidden),
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var, mask: Option<&[bool]>) -> Var {
        let n = self.ln_attn.forward(g, store, x);
        let a = self.attn.forward(g, store, n, n, mask).out;
        let x = g.add(x, a);
        let n = self.ln_ff.forward(g, store, x);
        let f = self.ff.forward(g, store, n);
        g.add(x, f)
    }

    /// Zeros the value projection and the feed-forward output so the block
    /// becomes the identity.
    pub fn zero_output_paths(&self, store: &mut ParamStore) {
        for id in [self.attn.wv, self.ff.down.w] {
            zero(store, id);
        }
        if let Some(b) = self.ff.down.b {
            zero(store, b);
        }
    }
}

pub(crate) fn zero(store: &mut ParamStore, id: ParamId) {
    store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
}

//! Anchor-seeded refinement decoder. Queries first self-attend, then each
//! layer attends to the focal token, to the environment tokens and through
//! a feed-forward block, all pre-norm with residuals.

use crate::nn::{zero, Attention, FeedForward, LayerNorm, SelfAttentionBlock};
use crate::params::ParamStore;
use crate::tape::{Graph, Var};

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln_focal: LayerNorm,
    pub ca_focal: Attention,
    pub ln_env: LayerNorm,
    pub ca_env: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub init: SelfAttentionBlock,
    pub layers: Vec<DecoderLayer>,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, ff_hidden: usize) -> Self {
        Self {
            ln_focal: LayerNorm::new(store, &format!("{name}.ln_focal"), d),
            ca_focal: Attention::new(store, &format!("{name}.ca_focal"), d, heads),
            ln_env: LayerNorm::new(store, &format!("{name}.ln_env"), d),
            ca_env: Attention::new(store, &format!("{name}.ca_env"), d, heads),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, ff_hidden),
        }
    }

    fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, q: Var, focal: Var, env: Var, env_mask: &[bool]) -> Var {
        let n = self.ln_focal.forward(g, store, q);
        let a = self.ca_focal.forward(g, store, n, focal, None).out;
        let q = g.add(q, a);
        let n = self.ln_env.forward(g, store, q);
        let a = self.ca_env.forward(g, store, n, env, Some(env_mask)).out;
        let q = g.add(q, a);
        let n = self.ln_ff.forward(g, store, q);
        let f = self.ff.forward(g, store, n);
        g.add(q, f)
    }
}

impl Decoder {
    pub fn new(store: &mut ParamStore, d: usize, heads: usize, layers: usize, ff_hidden: usize) -> Self {
        Self {
            init: SelfAttentionBlock::new(store, "decoder.init", d, heads, ff_hidden),
            layers: (0..layers).map(|i| DecoderLayer::new(store, &format!("decoder.layer{i}"), d, heads, ff_hidden)).collect(),
        }
    }

    /// Refines `[K × D]` queries against the focal token `[1 × D]` and the
    /// environment tokens.
    pub fn decode<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, queries: Var, focal: Var, env: Var, env_mask: &[bool]) -> Var {
        let mut q = self.init.forward(g, store, queries, None);
        for layer in &self.layers {
            q = layer.forward(g, store, q, focal, env, env_mask);
        }
        q
    }

    pub fn zero_output_paths(&self, store: &mut ParamStore) {
        self.init.zero_output_paths(store);
        for l in &self.layers {
            for id in [l.ca_focal.wv, l.ca_env.wv, l.ff.down.w] {
                zero(store, id);
            }
            if let Some(b) = l.ff.down.b {
                zero(store, b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn inputs() -> (Tensor, Tensor, Tensor) {
        let f = |r: usize, c: usize, s: f64| Tensor::from_vec(r, c, (0..r * c).map(|i| ((i as f64 + s) * 0.77).sin()).collect());
        (f(3, 8, 0.0), f(1, 8, 1.0), f(4, 8, 2.0))
    }

    fn decode(dec: &Decoder, store: &ParamStore, mask: &[bool]) -> Tensor {
        let (q, f, e) = inputs();
        let mut g = Graph::new();
        let (q, f, e) = (g.input(q), g.input(f), g.input(e));
        let out = dec.decode(&mut g, store, q, f, e, mask);
        g.value(out).clone()
    }

    #[test]
    fn zero_layers_is_initial_self_attention() {
        let mut store = ParamStore::new(1);
        let dec = Decoder::new(&mut store, 8, 2, 0, 16);
        let (q, _, _) = inputs();
        let mut g = Graph::new();
        let qv = g.input(q);
        let want = dec.init.forward(&mut g, &store, qv, None);
        assert_eq!(&decode(&dec, &store, &[true; 4]), g.value(want));
    }

    #[test]
    fn zero_value_paths_give_identity() {
        let mut store = ParamStore::new(2);
        let dec = Decoder::new(&mut store, 8, 2, 3, 16);
        dec.zero_output_paths(&mut store);
        assert_eq!(decode(&dec, &store, &[true, false, true, true]), inputs().0);
    }

    #[test]
    fn masked_environment_is_finite() {
        let mut store = ParamStore::new(3);
        let dec = Decoder::new(&mut store, 8, 2, 3, 16);
        assert!(decode(&dec, &store, &[false; 4]).is_finite());
    }
}

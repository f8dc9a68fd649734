//! Factorized-then-fused scene encoder. Agents and environment are encoded
//! by separate self-attention stacks, then jointly; the target token is kept
//! at row 0 so it can be split back out as the focal token.

use crate::error::{Error, Result};
use crate::nn::SelfAttentionBlock;
use crate::params::ParamStore;
use crate::tape::{Graph, Var};

#[derive(Clone, Debug)]
pub struct SceneEncoder {
    pub agent: Vec<SelfAttentionBlock>,
    pub env: Vec<SelfAttentionBlock>,
    pub joint: Vec<SelfAttentionBlock>,
}

pub struct EncoderInput<'m> {
    /// `[1 × D]`
    pub target: Var,
    pub target_valid: bool,
    pub neighbors: Var,
    pub neighbor_mask: &'m [bool],
    pub lanes: Var,
    pub lane_mask: &'m [bool],
    pub lights: Var,
    pub light_mask: &'m [bool],
}

pub struct EncodedScene {
    /// `[1 × D]`
    pub focal: Var,
    /// `[(N_m + N_tl) × D]`
    pub env: Var,
    pub env_mask: Vec<bool>,
    /// `[N_a × D]`
    pub neighbors: Var,
    pub neighbor_mask: Vec<bool>,
}

fn stack(store: &mut ParamStore, name: &str, layers: usize, d: usize, heads: usize, ff: usize) -> Vec<SelfAttentionBlock> {
    (0..layers).map(|i| SelfAttentionBlock::new(store, &format!("{name}.{i}"), d, heads, ff)).collect()
}

fn run<'a>(blocks: &[SelfAttentionBlock], g: &mut Graph<'a>, store: &'a ParamStore, mut x: Var, mask: &[bool]) -> Var {
    for b in blocks {
        x = b.forward(g, store, x, Some(mask));
    }
    x
}

impl SceneEncoder {
    pub fn new(store: &mut ParamStore, d: usize, heads: usize, layers: usize, ff_hidden: usize) -> Self {
        Self {
            agent: stack(store, "encoder.agent", layers, d, heads, ff_hidden),
            env: stack(store, "encoder.env", layers, d, heads, ff_hidden),
            joint: stack(store, "encoder.joint", layers, d, heads, ff_hidden),
        }
    }

    pub fn encode<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, input: EncoderInput<'_>) -> Result<EncodedScene> {
        if !input.target_valid {
            return Err(Error::invalid("target agent is fully masked"));
        }
        let n_a = input.neighbor_mask.len();
        let agent_mask: Vec<bool> = std::iter::once(true).chain(input.neighbor_mask.iter().copied()).collect();
        let env_mask: Vec<bool> = input.lane_mask.iter().chain(input.light_mask).copied().collect();

        let agents = g.concat_rows(&[input.target, input.neighbors]);
        let agents = run(&self.agent, g, store, agents, &agent_mask);
        let env = g.concat_rows(&[input.lanes, input.lights]);
        let env = run(&self.env, g, store, env, &env_mask);

        let joint_mask: Vec<bool> = agent_mask.iter().chain(&env_mask).copied().collect();
        let joint = g.concat_rows(&[agents, env]);
        let joint = run(&self.joint, g, store, joint, &joint_mask);

        Ok(EncodedScene {
            focal: g.slice_rows(joint, 0, 1),
            neighbors: g.slice_rows(joint, 1, n_a),
            env: g.slice_rows(joint, 1 + n_a, env_mask.len()),
            env_mask,
            neighbor_mask: input.neighbor_mask.to_vec(),
        })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &SelfAttentionBlock> {
        self.agent.iter().chain(&self.env).chain(&self.joint)
    }
}

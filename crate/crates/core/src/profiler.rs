//! Parameter and FLOP accounting for the segmentation network.
//!
//! FLOPs are counted analytically from the layer graph at a given input
//! resolution. Convention: one multiply-accumulate = one FLOP; softmax adds
//! five FLOPs per normalized element (exp, two adds amortized, divide,
//! max-subtract).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::order::{OrderConfig, OrderNetwork, STAGES};
use crate::param::ParamStore;

pub const SOFTMAX_FLOPS_PER_ELEM: u64 = 5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProfileReport {
    pub input_size: usize,
    pub attn_stages: Vec<usize>,
    pub total_params: usize,
    pub backbone_params: usize,
    pub attn_params: usize,
    pub attn_params_per_stage: Vec<(usize, usize)>,
    pub total_flops: u64,
    pub backbone_flops: u64,
    pub attn_flops: u64,
}

/// Scalar parameter counts split into backbone vs attention, via the
/// registered name prefixes.
pub fn count_params(store: &ParamStore, network: &OrderNetwork) -> (usize, usize, Vec<(usize, usize)>) {
    let total = store.count_scalars("net.");
    let mut per_stage = Vec::new();
    let mut attn = 0;
    for (i, unit) in network.attn.iter().enumerate() {
        if unit.is_some() {
            let n = store.count_scalars(&format!("net.attn{i}."));
            attn += n;
            per_stage.push((i, n));
        }
    }
    (total - attn, attn, per_stage)
}

/// Per-stage spatial side lengths for a square input.
fn stage_sides(input: usize) -> [usize; STAGES] {
    let mut s = [0; STAGES];
    for (i, v) in s.iter_mut().enumerate() {
        *v = input >> i;
    }
    s
}

/// Analytic FLOPs (backbone, attention) for a square input.
pub fn estimate_flops(network: &OrderNetwork, input: usize) -> Result<(u64, u64)> {
    if input % 16 != 0 || input == 0 {
        return Err(Error::InvalidArg(format!("profile: input {input} not divisible by 16")));
    }
    let sides = stage_sides(input);
    let mut backbone: u64 = 0;

    backbone += network.stem.macs(sides[0], sides[0]);
    for i in 0..STAGES {
        backbone += network.enc[i].macs(sides[i], sides[i]);
        if i + 1 < STAGES {
            backbone += network.down[i].macs(sides[i + 1], sides[i + 1]);
        }
    }
    for i in 0..STAGES - 1 {
        backbone += network.up[i].macs(sides[i], sides[i]);
        backbone += network.dec[i].macs(sides[i], sides[i]);
    }
    backbone += network.head.macs(sides[0], sides[0]);

    let mut attn: u64 = 0;
    for (i, unit) in network.attn.iter().enumerate() {
        if let Some(u) = unit {
            attn += u.macs(sides[i], sides[i]);
            attn += SOFTMAX_FLOPS_PER_ELEM * u.softmax_elems(sides[i], sides[i]);
        }
    }
    Ok((backbone, attn))
}

pub fn profile(store: &ParamStore, network: &OrderNetwork, input: usize) -> Result<ProfileReport> {
    let (backbone_params, attn_params, attn_params_per_stage) = count_params(store, network);
    let (backbone_flops, attn_flops) = estimate_flops(network, input)?;
    Ok(ProfileReport {
        input_size: input,
        attn_stages: network.cfg.attn_stages.clone(),
        total_params: backbone_params + attn_params,
        backbone_params,
        attn_params,
        attn_params_per_stage,
        total_flops: backbone_flops + attn_flops,
        backbone_flops,
        attn_flops,
    })
}

/// Build a throwaway network just to profile a configuration.
pub fn profile_config(cfg: OrderConfig, input: usize) -> Result<ProfileReport> {
    let mut store = ParamStore::new();
    let network = OrderNetwork::new(&mut store, cfg, 0)?;
    profile(&store, &network, input)
}

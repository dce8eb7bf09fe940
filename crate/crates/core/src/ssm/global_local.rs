use super::block::MambaBlock;
use crate::error::{ensure, Result};
use crate::tensor::{Ctx, Var};

pub struct ChainOutput<'a> {
    /// One `[Lᵢ, d]` output per segment.
    pub outputs: Vec<Var<'a>>,
    /// Final scan state after each segment, one entry per branch.
    pub states: Vec<Vec<Var<'a>>>,
}

/// Run `block` over the segments in order, seeding each segment's scan with
/// the state the previous segment finished in. Only the SSM state crosses
/// segment boundaries; normalization, projections and the causal conv see
/// each segment alone.
pub fn global_local_scan<'a>(ctx: &Ctx<'a>, block: &MambaBlock, segments: &[Var<'a>]) -> Result<ChainOutput<'a>> {
    ensure!(!segments.is_empty(), Contract, "global-local scan needs at least one segment");
    let d = block.cfg.d_model;
    for s in segments {
        let shape = s.shape();
        ensure!(shape.len() == 2 && shape[1] == d, Dimension, "segment {:?} does not match block width {}", shape, d);
    }
    let mut outputs = Vec::with_capacity(segments.len());
    let mut states: Vec<Vec<Var<'a>>> = Vec::with_capacity(segments.len());
    for seg in segments {
        let h0: Vec<Option<Var<'a>>> = match states.last() {
            Some(prev) => prev.iter().map(|h| Some(*h)).collect(),
            None => Vec::new(),
        };
        let (y, h) = block.forward_with_state(ctx, seg, &h0)?;
        outputs.push(y);
        states.push(h);
    }
    Ok(ChainOutput { outputs, states })
}

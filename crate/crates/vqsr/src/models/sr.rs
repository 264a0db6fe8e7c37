//! End-to-end restoration graph: degraded input -> LR encoder -> nearest-code
//! match against the frozen codebook -> decoder conditioned on the shortcut
//! bundle. The straight-through node keeps the whole chain differentiable
//! even though the code match itself is discrete.

use super::{BoundNet, Decoder, LrEncoder};
use crate::autodiff::{Tape, Var};
use crate::codebook::quantize_on_tape;
use crate::error::Result;
use crate::tensor::Real;
use std::sync::Arc;

/// Handles into one restoration forward pass.
pub struct SrForward {
    /// LR-encoder features on the latent grid, before quantization.
    pub zhat_l: Var,
    /// Winning code per latent position, (n, h, w) order.
    pub indices: Arc<Vec<usize>>,
    /// Gathered code vectors; gradients scatter into the codebook table.
    pub zq: Var,
    /// Straight-through node feeding the decoder; gradients route to `zhat_l`.
    pub ste: Var,
    /// Shortcut features, one per decoder stage.
    pub bundle: Vec<Var>,
    /// Restored image.
    pub output: Var,
}

pub fn sr_forward_graph<F: Real>(
    tape: &mut Tape<F>,
    enc: &LrEncoder,
    enc_bound: &BoundNet,
    table: Var,
    dec: &Decoder,
    dec_bound: &BoundNet,
    x: Var,
) -> Result<SrForward> {
    enc.check_input(tape.shape(x))?;
    let fwd = enc.forward_with_bundle(tape, enc_bound, x)?;
    let tq = quantize_on_tape(tape, table, fwd.zhat_l)?;
    let output = dec.forward(tape, dec_bound, tq.ste, Some(&fwd.bundle))?;
    Ok(SrForward {
        zhat_l: fwd.zhat_l,
        indices: tq.indices,
        zq: tq.zq,
        ste: tq.ste,
        bundle: fwd.bundle,
        output,
    })
}

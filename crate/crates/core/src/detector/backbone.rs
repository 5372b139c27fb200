use alloc::format;

use crate::error::{invalid, Result};
use crate::layers::Conv;
use crate::tensor::{Tape, Var};

/// Downsampling from the image to the deep tap.
pub const TOTAL_STRIDE: usize = 16;
/// Downsampling from the image to the shallow tap.
pub const SHALLOW_STRIDE: usize = 4;

/// The two alignment taps of the backbone.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePair {
    /// `H/4 × W/4 × Cs`, after stage 1.
    pub shallow: Var,
    /// `H/16 × W/16 × Cd`, after stage 3.
    pub deep: Var,
}

/// Stage 1 is two stride-2 3×3 convolutions; stages 2 and 3 are one each.
/// Every convolution is followed by a ReLU.
pub fn backbone_forward(tape: &mut Tape, convs: &[Conv<Var>; 4], image: Var) -> Result<FeaturePair> {
    let shape = tape.shape(image);
    if shape.len() != 3 || shape[2] != 3 {
        return Err(invalid(format!("expected an H×W×3 image, got {shape:?}")));
    }
    if !shape[0].is_multiple_of(TOTAL_STRIDE) || !shape[1].is_multiple_of(TOTAL_STRIDE) {
        return Err(invalid(format!(
            "image {}×{} is not divisible by the backbone stride {TOTAL_STRIDE}",
            shape[1], shape[0]
        )));
    }
    let mut x = image;
    let mut shallow = image;
    for (i, conv) in convs.iter().enumerate() {
        x = conv.apply(tape, x, 2, 1)?;
        x = tape.relu(x);
        if i == 1 {
            shallow = x;
        }
    }
    Ok(FeaturePair { shallow, deep: x })
}

//! Instance-to-image aggregation: RPN objectness is routed to each
//! proposal's most and least likely classes, and the resulting matrix is
//! combined with the per-proposal class scores into image-level
//! multi-label probabilities.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::aiam::{DomainLabel, ImageLabelVector};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Axis, Tape, Var};

/// Class-specific objectness `ō`, shape `[N, C]`, on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ClassSpecificObjectness(pub Var);

/// Image-level class probabilities `P`, shape `[C]`, on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ImagePrediction(pub Var);

/// Per row of the `n × c` logits: `(argmax, argmin)`. Argmax ties go to the
/// lowest index, argmin ties to the highest; the two never coincide.
pub fn assignment_pattern(x: &[f64], n: usize, c: usize) -> Result<Vec<(usize, usize)>> {
    if c < 2 {
        return Err(invalid(format!("need at least 2 classes, got {c}")));
    }
    if x.len() != n * c {
        return Err(invalid("logit matrix has the wrong size"));
    }
    Ok(x
        .chunks_exact(c)
        .map(|row| {
            let mut hi = 0;
            let mut lo = c - 1;
            for (k, &v) in row.iter().enumerate() {
                if v > row[hi] {
                    hi = k;
                }
            }
            for (k, &v) in row.iter().enumerate().rev() {
                if v < row[lo] {
                    lo = k;
                }
            }
            if lo == hi {
                lo = if hi == c - 1 { c - 2 } else { c - 1 };
            }
            (hi, lo)
        })
        .collect())
}

/// Plain-value `ō` for inspection and tests.
pub fn objectness_matrix(o: &[f64], x: &[f64], c: usize) -> Result<Vec<f64>> {
    let pattern = assignment_pattern(x, o.len(), c)?;
    let mut out = vec![0.0; o.len() * c];
    for (n, (&v, &(i, j))) in o.iter().zip(&pattern).enumerate() {
        out[n * c + i] = v;
        out[n * c + j] = -v;
    }
    Ok(out)
}

/// Builds `ō` from objectness `o: [N]` and class logits `x: [N, C]`.
/// Gradients flow to `o`; the assignment pattern is held fixed.
pub fn build_objectness_matrix(tape: &mut Tape, o: Var, x: Var) -> Result<ClassSpecificObjectness> {
    let xs = tape.shape(x);
    if xs.len() != 2 {
        return Err(invalid("class logits must be N×C"));
    }
    let (n, c) = (xs[0], xs[1]);
    if tape.value(o).len() != n {
        return Err(invalid("objectness and class logits disagree on N"));
    }
    let pattern = assignment_pattern(tape.value(x).data(), n, c)?;
    Ok(ClassSpecificObjectness(tape.scatter_pairs(o, c, &pattern)?))
}

/// `P_c = Σ_n softmax_row(x̄)[n, c] · softmax_col(ō)[n, c]`.
pub fn aggregate_image_prediction(
    tape: &mut Tape,
    xbar: Var,
    obar: ClassSpecificObjectness,
) -> Result<ImagePrediction> {
    if tape.shape(xbar) != tape.shape(obar.0) {
        return Err(Error::ShapeMismatch {
            expected: tape.shape(xbar).to_vec(),
            actual: tape.shape(obar.0).to_vec(),
        });
    }
    let rows = tape.softmax(xbar, Axis::Row)?;
    let cols = tape.softmax(obar.0, Axis::Column)?;
    let prod = tape.mul(rows, cols)?;
    Ok(ImagePrediction(tape.sum_rows(prod)?))
}

/// Mean BCE of the image prediction; target-domain images only.
pub fn i2itm_loss(
    tape: &mut Tape,
    p: ImagePrediction,
    y: &ImageLabelVector,
    domain: DomainLabel,
) -> Result<Var> {
    if domain != DomainLabel::Target {
        return Err(Error::ContractViolation(
            "instance-to-image loss is only applied to target-domain images".into(),
        ));
    }
    tape.bce_loss(p.0, &y.as_targets())
}

use alloc::vec::Vec;

use super::geometry::{encode, iou, Bbox};
use super::rpn::SMOOTH_L1_BETA;
use super::GtInstance;
use crate::aiam::DomainLabel;
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::tensor::{Tape, Var};

/// Proposals at or above this IoU with a GT are foreground in `det_loss`.
pub const FOREGROUND_IOU: f64 = 0.5;

/// Bilinear crop-resize of each image-space box into a `size × size` grid of
/// the feature map with the given stride. Output is `[boxes, size²·C]`.
pub fn roi_crop(tape: &mut Tape, feature: Var, boxes: &[Bbox], stride: usize, size: usize) -> Result<Var> {
    let s = stride as f64;
    let mut scaled = Vec::with_capacity(boxes.len());
    for b in boxes {
        if b.area() <= 0.0 {
            return Err(Error::EmptyBox);
        }
        scaled.push([b.x1 / s, b.y1 / s, b.x2 / s, b.y2 / s]);
    }
    tape.bilinear_crop(feature, &scaled, size)
}

/// Detection-head outputs for a batch of crops.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[M, classes + 1]`, background last.
    pub class_logits: Var,
    /// `[M, 4]` class-agnostic deltas relative to each proposal.
    pub refinement: Var,
}

/// Two-layer perceptron over flattened crops.
pub fn det_head(
    tape: &mut Tape,
    fc1: &Linear<Var>,
    fc2: &Linear<Var>,
    pooled: Var,
    classes: usize,
) -> Result<HeadOutput> {
    let h = fc1.apply(tape, pooled)?;
    let h = tape.relu(h);
    let out = fc2.apply(tape, h)?;
    Ok(HeadOutput {
        class_logits: tape.columns(out, 0, classes + 1)?,
        refinement: tape.columns(out, classes + 1, classes + 5)?,
    })
}

/// Class index per proposal (`classes` for background) and the matched GT.
pub fn label_proposals(boxes: &[Bbox], gts: &[GtInstance], classes: usize) -> Vec<(usize, Option<usize>)> {
    boxes
        .iter()
        .map(|b| {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in gts.iter().enumerate() {
                let v = iou(b, &g.bbox);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((i, v));
                }
            }
            match best {
                Some((i, v)) if v >= FOREGROUND_IOU => (gts[i].class_id, Some(i)),
                _ => (classes, None),
            }
        })
        .collect()
}

/// Softmax cross-entropy over `classes + 1` plus smooth-L1 on refinements of
/// foreground proposals, averaged over foreground proposals.
pub fn det_loss(
    tape: &mut Tape,
    boxes: &[Bbox],
    head: &HeadOutput,
    gts: &[GtInstance],
    classes: usize,
    domain: DomainLabel,
) -> Result<Var> {
    if domain != DomainLabel::Source {
        return Err(Error::ContractViolation("det_loss called on a target-domain image".into()));
    }
    let labels = label_proposals(boxes, gts, classes);
    let cls: Vec<usize> = labels.iter().map(|l| l.0).collect();
    let mut loss = tape.softmax_cross_entropy(head.class_logits, &cls)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (n, &(_, m)) in labels.iter().enumerate() {
        if let Some(g) = m {
            rows.push(n);
            targets.extend_from_slice(&encode(&boxes[n], &gts[g].bbox));
        }
    }
    if !rows.is_empty() {
        let r = tape.gather_rows(head.refinement, &rows)?;
        let reg = tape.smooth_l1(r, &targets, SMOOTH_L1_BETA)?;
        let reg = tape.scale(reg, 1.0 / rows.len() as f64);
        loss = tape.add(loss, reg)?;
    }
    Ok(loss)
}

use alloc::vec::Vec;

use super::geometry::{decode, encode, iou, Bbox};
use super::GtInstance;
use crate::aiam::DomainLabel;
use crate::error::{invalid, Error, Result};
use crate::layers::Conv;
use crate::tensor::{Tape, Var};

/// Anchors with IoU at or above this against some GT are positives.
pub const POSITIVE_IOU: f64 = 0.5;
/// Anchors whose best IoU is at or below this are negatives.
pub const NEGATIVE_IOU: f64 = 0.3;
/// Smooth-L1 transition used for both box-regression losses.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// One square anchor per deep cell, centred on the cell, row-major.
pub fn anchors(rows: usize, cols: usize, stride: usize, size: f64) -> Vec<Bbox> {
    let s = stride as f64;
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| Bbox::centered((c as f64 + 0.5) * s, (r as f64 + 0.5) * s, size)))
        .collect()
}

/// Top-N proposals: boxes plus the objectness logits `o` on the tape.
#[derive(Debug, Clone)]
pub struct Proposals {
    pub boxes: Vec<Bbox>,
    pub anchor_index: Vec<usize>,
    /// Shape `[N]`.
    pub objectness: Var,
}

#[derive(Debug, Clone)]
pub struct RpnOutput {
    pub anchors: Vec<Bbox>,
    /// Shape `[A, 1]`.
    pub anchor_objectness: Var,
    /// Shape `[A, 4]`.
    pub anchor_deltas: Var,
    pub proposals: Proposals,
}

/// Sorted anchor indices by descending objectness, ties to the lower index.
pub fn top_n(objectness: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..objectness.len()).collect();
    order.sort_by(|&a, &b| objectness[b].total_cmp(&objectness[a]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

/// 1×1 conv head over the deep map: per anchor one objectness logit and
/// four box deltas. Decoded boxes are clipped to the image.
pub fn rpn_forward(
    tape: &mut Tape,
    head: &Conv<Var>,
    deep: Var,
    image_size: (usize, usize),
    stride: usize,
    anchor_size: f64,
    n_proposals: usize,
) -> Result<RpnOutput> {
    if n_proposals < 1 {
        return Err(invalid("proposal count must be at least 1"));
    }
    let raw = head.apply(tape, deep, 1, 0)?;
    let (rows, cols, ch) = {
        let s = tape.shape(raw);
        (s[0], s[1], s[2])
    };
    if ch != 5 {
        return Err(invalid("rpn head must emit 5 channels"));
    }
    let flat = tape.reshape(raw, &[rows * cols, 5])?;
    let anchor_objectness = tape.columns(flat, 0, 1)?;
    let anchor_deltas = tape.columns(flat, 1, 5)?;
    let anchors = anchors(rows, cols, stride, anchor_size);

    let idx = top_n(tape.value(anchor_objectness).data(), n_proposals);
    let deltas = tape.value(anchor_deltas).data();
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    let boxes = idx
        .iter()
        .map(|&a| decode(&anchors[a], &deltas[a * 4..a * 4 + 4]).clip(w, h))
        .collect();
    let picked = tape.gather_rows(anchor_objectness, &idx)?;
    let objectness = tape.reshape(picked, &[idx.len()])?;
    Ok(RpnOutput {
        anchors,
        anchor_objectness,
        anchor_deltas,
        proposals: Proposals {
            boxes,
            anchor_index: idx,
            objectness,
        },
    })
}

/// Anchor label: `Some(gt index)` positive, `None` negative, or ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignored,
}

pub fn label_anchors(anchors: &[Bbox], gts: &[GtInstance]) -> Vec<AnchorLabel> {
    anchors
        .iter()
        .map(|a| {
            let best = gts
                .iter()
                .enumerate()
                .map(|(i, g)| (i, iou(a, &g.bbox)))
                .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((i, v)),
                });
            match best {
                Some((i, v)) if v >= POSITIVE_IOU => AnchorLabel::Positive(i),
                Some((_, v)) if v > NEGATIVE_IOU => AnchorLabel::Ignored,
                _ => AnchorLabel::Negative,
            }
        })
        .collect()
}

/// Objectness BCE over labelled anchors plus smooth-L1 on the deltas of
/// positives, averaged over positives. Source-domain images only.
pub fn rpn_loss(tape: &mut Tape, rpn: &RpnOutput, gts: &[GtInstance], domain: DomainLabel) -> Result<Var> {
    if domain != DomainLabel::Source {
        return Err(Error::ContractViolation("rpn_loss called on a target-domain image".into()));
    }
    let labels = label_anchors(&rpn.anchors, gts);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut pos_rows = Vec::new();
    let mut pos_targets = Vec::new();
    for (a, l) in labels.iter().enumerate() {
        match *l {
            AnchorLabel::Positive(g) => {
                rows.push(a);
                targets.push(1.0);
                pos_rows.push(a);
                pos_targets.extend_from_slice(&encode(&rpn.anchors[a], &gts[g].bbox));
            }
            AnchorLabel::Negative => {
                rows.push(a);
                targets.push(0.0);
            }
            AnchorLabel::Ignored => {}
        }
    }
    let mut loss = if rows.is_empty() {
        tape.constant(crate::tensor::Tensor::scalar(0.0))
    } else {
        let logits = tape.gather_rows(rpn.anchor_objectness, &rows)?;
        let p = tape.sigmoid(logits);
        tape.bce_loss(p, &targets)?
    };
    if !pos_rows.is_empty() {
        let d = tape.gather_rows(rpn.anchor_deltas, &pos_rows)?;
        let reg = tape.smooth_l1(d, &pos_targets, SMOOTH_L1_BETA)?;
        let reg = tape.scale(reg, 1.0 / pos_rows.len() as f64);
        loss = tape.add(loss, reg)?;
    }
    Ok(loss)
}

//! Image-level alignment: adversarial domain classifiers on the shallow and
//! (attended) deep taps, and a multi-label image classifier on the deep tap.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::layers::{Conv, Linear};
use crate::tensor::{Tape, Var};
#[cfg(test)]
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DomainLabel {
    Source = 0,
    Target = 1,
}

impl DomainLabel {
    pub fn value(self) -> f64 {
        self as u8 as f64
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DomainLabel::Source => "source",
            DomainLabel::Target => "target",
        }
    }
}

/// Per-class presence labels of one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageLabelVector(pub Vec<bool>);

impl ImageLabelVector {
    pub fn from_classes(classes: usize, present: impl IntoIterator<Item = usize>) -> Self {
        let mut v = alloc::vec![false; classes];
        for c in present {
            v[c] = true;
        }
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }

    pub fn as_targets(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Whether the domain classifiers sit behind a gradient-reversal layer.
/// `Identity` exists to check the reversal sign against plain training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reversal {
    Reversed,
    Identity,
}

fn maybe_reverse(tape: &mut Tape, x: Var, r: Reversal) -> Var {
    match r {
        Reversal::Reversed => tape.gradient_reversal(x),
        Reversal::Identity => x,
    }
}

/// Per-pixel domain classifier on the shallow map.
#[derive(Debug, Clone)]
pub struct LocalClassifier<T> {
    pub hidden: Conv<T>,
    pub out: Conv<T>,
}

/// Image-wide domain classifier on the attended deep map.
#[derive(Debug, Clone)]
pub struct GlobalClassifier<T> {
    pub conv: Conv<T>,
    pub fc: Linear<T>,
}

/// Mean over pixels of `(s_ij - d)^2`, where `s` is the sigmoid score of a
/// 1×1-conv classifier applied after gradient reversal.
pub fn local_domain_loss(
    tape: &mut Tape,
    clf: &LocalClassifier<Var>,
    shallow: Var,
    d: DomainLabel,
    reversal: Reversal,
) -> Result<Var> {
    let x = maybe_reverse(tape, shallow, reversal);
    let h = clf.hidden.apply(tape, x, 1, 0)?;
    let h = tape.relu(h);
    let logit = clf.out.apply(tape, h, 1, 0)?;
    let s = tape.sigmoid(logit);
    let diff = tape.offset(s, -d.value());
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// BCE of a single sigmoid logit from conv, global pooling and a linear layer.
pub fn global_domain_loss(
    tape: &mut Tape,
    clf: &GlobalClassifier<Var>,
    deep_attended: Var,
    d: DomainLabel,
    reversal: Reversal,
) -> Result<Var> {
    let x = maybe_reverse(tape, deep_attended, reversal);
    let logit = global_domain_logit(tape, clf, x)?;
    let p = tape.sigmoid(logit);
    tape.bce_loss(p, &[d.value()])
}

/// Raw domain logit (positive means target) without reversal.
pub fn global_domain_logit(tape: &mut Tape, clf: &GlobalClassifier<Var>, x: Var) -> Result<Var> {
    let h = clf.conv.apply(tape, x, 1, 0)?;
    let h = tape.relu(h);
    let pooled = tape.global_avg_pool(h)?;
    let c = tape.shape(pooled)[0];
    let row = tape.reshape(pooled, &[1, c])?;
    let logit = clf.fc.apply(tape, row)?;
    tape.reshape(logit, &[1])
}

/// Mean BCE of per-class sigmoid scores of a linear layer over pooled
/// attended deep features.
pub fn image_multilabel_loss(
    tape: &mut Tape,
    clf: &Linear<Var>,
    deep_attended: Var,
    y: &ImageLabelVector,
) -> Result<Var> {
    let logits = image_logits(tape, clf, deep_attended)?;
    let p = tape.sigmoid(logits);
    tape.bce_loss(p, &y.as_targets())
}

pub fn image_logits(tape: &mut Tape, clf: &Linear<Var>, deep_attended: Var) -> Result<Var> {
    let pooled = tape.global_avg_pool(deep_attended)?;
    let c = tape.shape(pooled)[0];
    let row = tape.reshape(pooled, &[1, c])?;
    let logits = clf.apply(tape, row)?;
    let k = tape.shape(logits)[1];
    tape.reshape(logits, &[k])
}

/// `λ_dc · (local + global) + λ_ic · ic` on the tape.
pub fn aiam_loss(
    tape: &mut Tape,
    local: Var,
    global: Var,
    ic: Var,
    lambda_dc: f64,
    lambda_ic: f64,
) -> Result<Var> {
    check_weights(lambda_dc, lambda_ic)?;
    let dc = tape.add(local, global)?;
    let dc = tape.scale(dc, lambda_dc);
    let ic = tape.scale(ic, lambda_ic);
    tape.add(dc, ic)
}

/// Scalar form of [`aiam_loss`].
pub fn aiam_total(local: f64, global: f64, ic: f64, lambda_dc: f64, lambda_ic: f64) -> Result<f64> {
    check_weights(lambda_dc, lambda_ic)?;
    Ok(lambda_dc * (local + global) + lambda_ic * ic)
}

fn check_weights(lambda_dc: f64, lambda_ic: f64) -> Result<()> {
    if !(lambda_dc >= 0.0 && lambda_ic >= 0.0) {
        return Err(invalid("loss weights must be non-negative"));
    }
    Ok(())
}

//! Desk-scale two-stage detector: strided conv backbone with shallow and
//! deep taps, single-anchor RPN, and a bilinear-crop detection head.

mod backbone;
mod geometry;
mod head;
mod rpn;

pub use backbone::{backbone_forward, FeaturePair, SHALLOW_STRIDE, TOTAL_STRIDE};
pub use geometry::{decode, encode, iou, nms, Bbox};
pub use head::{det_head, det_loss, label_proposals, roi_crop, HeadOutput, FOREGROUND_IOU};
pub use rpn::{
    anchors, label_anchors, rpn_forward, rpn_loss, top_n, AnchorLabel, Proposals, RpnOutput, NEGATIVE_IOU,
    POSITIVE_IOU, SMOOTH_L1_BETA,
};

/// A labelled object instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtInstance {
    pub bbox: Bbox,
    pub class_id: usize,
}

/// Architecture hyper-parameters of the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub classes: usize,
    pub stem_channels: usize,
    pub shallow_channels: usize,
    pub mid_channels: usize,
    pub deep_channels: usize,
    pub anchor_size: f64,
    pub n_proposals: usize,
    pub crop_size: usize,
    pub head_hidden: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            classes: 3,
            stem_channels: 16,
            shallow_channels: 32,
            mid_channels: 64,
            deep_channels: 128,
            anchor_size: 32.0,
            n_proposals: 32,
            crop_size: 7,
            head_hidden: 32,
        }
    }
}

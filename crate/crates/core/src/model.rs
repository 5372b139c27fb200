//! Full detector with its alignment heads, and single-image inference.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::aiam::{GlobalClassifier, LocalClassifier};
use crate::cis::{self, cis_forward};
use crate::detector::{
    backbone_forward, decode, det_head, nms, roi_crop, rpn_forward, Bbox, DetectorConfig, FeaturePair, HeadOutput,
    RpnOutput, TOTAL_STRIDE,
};
use crate::error::{invalid, Result};
use crate::layers::{Conv, Linear};
use crate::math;
use crate::rng::Lcg;
use crate::tensor::{Axis, Tape, Tensor, Var};

/// Channel attention applied to the deep tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttentionMode {
    /// No attention: the deep map is used as is.
    None,
    /// Kernel width fixed at [`FIXED_KERNEL`].
    FixedK,
    /// Kernel width chosen from the channel count.
    Cis,
}

/// Width used by [`AttentionMode::FixedK`].
pub const FIXED_KERNEL: usize = 3;

impl AttentionMode {
    pub const ALL: [AttentionMode; 3] = [AttentionMode::Cis, AttentionMode::FixedK, AttentionMode::None];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::None => "none",
            AttentionMode::FixedK => "fixed_k",
            AttentionMode::Cis => "cis",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionMode::None),
            "fixed_k" => Ok(AttentionMode::FixedK),
            "cis" => Ok(AttentionMode::Cis),
            other => Err(invalid(format!("unknown attention mode {other:?}"))),
        }
    }

    /// Kernel width for a deep map with `channels` channels, if any.
    pub fn kernel_width(self, channels: usize) -> Result<Option<usize>> {
        Ok(match self {
            AttentionMode::None => None,
            AttentionMode::FixedK => Some(FIXED_KERNEL),
            AttentionMode::Cis => Some(cis::kernel_size(channels, cis::DEFAULT_GAMMA, cis::DEFAULT_B)?),
        })
    }
}

/// Every learnable tensor of the model. `T` is `Tensor` for owned weights
/// and `Var` once bound to a tape.
#[derive(Debug, Clone)]
pub struct Params<T> {
    pub backbone: [Conv<T>; 4],
    pub attention: Option<T>,
    pub rpn: Conv<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub local: LocalClassifier<T>,
    pub global: GlobalClassifier<T>,
    pub image_cls: Linear<T>,
}

impl<T> Params<T> {
    /// Parameters in their canonical (checkpoint) order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (i, c) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &c.weight));
            out.push((format!("backbone.{i}.bias"), &c.bias));
        }
        if let Some(a) = &self.attention {
            out.push((String::from("attention.kernel"), a));
        }
        let pairs: [(&str, &T, &T); 8] = [
            ("rpn", &self.rpn.weight, &self.rpn.bias),
            ("head.fc1", &self.fc1.weight, &self.fc1.bias),
            ("head.fc2", &self.fc2.weight, &self.fc2.bias),
            ("local.hidden", &self.local.hidden.weight, &self.local.hidden.bias),
            ("local.out", &self.local.out.weight, &self.local.out.bias),
            ("global.conv", &self.global.conv.weight, &self.global.conv.bias),
            ("global.fc", &self.global.fc.weight, &self.global.fc.bias),
            ("image_cls", &self.image_cls.weight, &self.image_cls.bias),
        ];
        for (name, w, b) in pairs {
            out.push((format!("{name}.weight"), w));
            out.push((format!("{name}.bias"), b));
        }
        out
    }

    /// Mutable references in the same order as [`Params::named`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = Vec::new();
        for c in self.backbone.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        if let Some(a) = self.attention.as_mut() {
            out.push(a);
        }
        out.push(&mut self.rpn.weight);
        out.push(&mut self.rpn.bias);
        out.push(&mut self.fc1.weight);
        out.push(&mut self.fc1.bias);
        out.push(&mut self.fc2.weight);
        out.push(&mut self.fc2.bias);
        out.push(&mut self.local.hidden.weight);
        out.push(&mut self.local.hidden.bias);
        out.push(&mut self.local.out.weight);
        out.push(&mut self.local.out.bias);
        out.push(&mut self.global.conv.weight);
        out.push(&mut self.global.conv.bias);
        out.push(&mut self.global.fc.weight);
        out.push(&mut self.global.fc.bias);
        out.push(&mut self.image_cls.weight);
        out.push(&mut self.image_cls.bias);
        out
    }
}

impl Params<Tensor> {
    pub fn bind(&self, tape: &mut Tape) -> Params<Var> {
        Params {
            backbone: [
                self.backbone[0].bind(tape),
                self.backbone[1].bind(tape),
                self.backbone[2].bind(tape),
                self.backbone[3].bind(tape),
            ],
            attention: self.attention.as_ref().map(|a| tape.leaf(a.clone())),
            rpn: self.rpn.bind(tape),
            fc1: self.fc1.bind(tape),
            fc2: self.fc2.bind(tape),
            local: LocalClassifier {
                hidden: self.local.hidden.bind(tape),
                out: self.local.out.bind(tape),
            },
            global: GlobalClassifier {
                conv: self.global.conv.bind(tape),
                fc: self.global.fc.bind(tape),
            },
            image_cls: self.image_cls.bind(tape),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub detector: DetectorConfig,
    pub attention: AttentionMode,
}

/// Hidden width of the local domain classifier.
const LOCAL_HIDDEN: usize = 16;
/// Hidden width of the global domain classifier.
const GLOBAL_HIDDEN: usize = 64;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params<Tensor>,
}

/// Everything the losses need from one image's forward pass.
#[derive(Debug, Clone)]
pub struct ImageForward {
    pub features: FeaturePair,
    pub attended: Var,
    pub rpn: RpnOutput,
    /// Proposal boxes followed by any extra training boxes.
    pub head_boxes: Vec<Bbox>,
    pub head: HeadOutput,
}

/// One scored box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: Bbox,
}

/// Minimum class probability kept at inference.
pub const SCORE_THRESHOLD: f64 = 0.05;
/// Per-class suppression IoU at inference.
pub const NMS_IOU: f64 = 0.5;

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let d = &config.detector;
        if d.classes < 2 {
            return Err(invalid("at least two object classes are required"));
        }
        let mut rng = Lcg::new(seed);
        let backbone = [
            Conv::he(3, 3, d.stem_channels, &mut rng),
            Conv::he(3, d.stem_channels, d.shallow_channels, &mut rng),
            Conv::he(3, d.shallow_channels, d.mid_channels, &mut rng),
            Conv::he(3, d.mid_channels, d.deep_channels, &mut rng),
        ];
        let attention = config
            .attention
            .kernel_width(d.deep_channels)?
            .map(|k| Tensor::vector(alloc::vec![1.0 / k as f64; k]).with_grad());
        let crop = d.crop_size * d.crop_size * d.deep_channels;
        let params = Params {
            backbone,
            attention,
            rpn: Conv::init(1, d.deep_channels, 5, 0.01, &mut rng),
            fc1: Linear::he(crop, d.head_hidden, &mut rng),
            fc2: Linear::init(d.head_hidden, d.classes + 5, 0.01, &mut rng),
            local: LocalClassifier {
                hidden: Conv::he(1, d.shallow_channels, LOCAL_HIDDEN, &mut rng),
                out: Conv::init(1, LOCAL_HIDDEN, 1, 0.01, &mut rng),
            },
            global: GlobalClassifier {
                conv: Conv::he(1, d.deep_channels, GLOBAL_HIDDEN, &mut rng),
                fc: Linear::init(GLOBAL_HIDDEN, 1, 0.01, &mut rng),
            },
            image_cls: Linear::init(d.deep_channels, d.classes, 0.01, &mut rng),
        };
        Ok(Self { config, params })
    }

    /// Replaces the weights after checking every shape against a freshly
    /// initialised model of the same configuration.
    pub fn with_params(config: ModelConfig, named: &[(String, Tensor)]) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != named.len() {
            return Err(invalid(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(named) {
            if en != n || es.as_slice() != t.shape() {
                return Err(invalid(format!(
                    "parameter {n} {:?} does not match expected {en} {es:?}",
                    t.shape()
                )));
            }
        }
        for (slot, (_, t)) in model.params.values_mut().into_iter().zip(named) {
            *slot = t.clone().with_grad();
        }
        Ok(model)
    }

    pub fn classes(&self) -> usize {
        self.config.detector.classes
    }

    /// Backbone, attention, RPN and detection head for one image. The head
    /// scores the proposals followed by `extra_boxes`.
    pub fn forward_image(
        &self,
        tape: &mut Tape,
        vars: &Params<Var>,
        image: &Tensor,
        extra_boxes: &[Bbox],
    ) -> Result<ImageForward> {
        let d = &self.config.detector;
        let img = tape.constant(image.clone());
        let features = backbone_forward(tape, &vars.backbone, img)?;
        let attended = match vars.attention {
            Some(kernel) => cis_forward(tape, features.deep, kernel, d.deep_channels)?.0,
            None => features.deep,
        };
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let rpn = rpn_forward(
            tape,
            &vars.rpn,
            attended,
            (w, h),
            TOTAL_STRIDE,
            d.anchor_size,
            d.n_proposals,
        )?;
        let mut head_boxes = rpn.proposals.boxes.clone();
        head_boxes.extend_from_slice(extra_boxes);
        let pooled = roi_crop(tape, attended, &head_boxes, TOTAL_STRIDE, d.crop_size)?;
        let head = det_head(tape, &vars.fc1, &vars.fc2, pooled, d.classes)?;
        Ok(ImageForward {
            features,
            attended,
            rpn,
            head_boxes,
            head,
        })
    }

    /// Scored, per-class suppressed detections for one image.
    pub fn detect(&self, image: &Tensor) -> Result<Vec<Detection>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let out = self.forward_image(&mut tape, &vars, image, &[])?;
        let probs = tape.softmax(out.head.class_logits, Axis::Row)?;
        let c = self.classes();
        let probs = tape.value(probs).data();
        let refine = tape.value(out.head.refinement).data();
        let (h, w) = (image.shape()[0] as f64, image.shape()[1] as f64);
        let boxes: Vec<Bbox> = out
            .head_boxes
            .iter()
            .enumerate()
            .map(|(n, b)| decode(b, &refine[n * 4..n * 4 + 4]).clip(w, h))
            .collect();
        let mut dets = Vec::new();
        for class_id in 0..c {
            let mut cand_boxes = Vec::new();
            let mut cand_scores = Vec::new();
            for (n, b) in boxes.iter().enumerate() {
                let s = probs[n * (c + 1) + class_id];
                if s >= SCORE_THRESHOLD && math::abs(s).is_finite() {
                    cand_boxes.push(*b);
                    cand_scores.push(s);
                }
            }
            for k in nms(&cand_boxes, &cand_scores, NMS_IOU) {
                dets.push(Detection {
                    class_id,
                    score: cand_scores[k],
                    bbox: cand_boxes[k],
                });
            }
        }
        Ok(dets)
    }
}

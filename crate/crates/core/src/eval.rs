//! VOC-style evaluation: greedy IoU matching, all-point interpolated AP per
//! class, and mAP over the classes that have ground truth.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::detector::{iou, Bbox};
use crate::error::Result;
use crate::model::{Detection, Model};
use crate::synth::DatasetManifest;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// A detection of one class, keyed for deterministic ordering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    /// Position of the image in image-id order.
    pub image: usize,
    /// Position of the box within its image's detections.
    pub order: usize,
    pub score: f64,
    pub bbox: Bbox,
}

/// Ground truth of one class, grouped by image index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassGroundTruth {
    pub boxes: Vec<Vec<Bbox>>,
}

impl ClassGroundTruth {
    pub fn new(images: usize) -> Self {
        Self {
            boxes: vec![Vec::new(); images],
        }
    }

    pub fn count(&self) -> usize {
        self.boxes.iter().map(Vec::len).sum()
    }
}

/// Indices of `dets` in evaluation order: score descending, then image,
/// then box order.
pub fn ranking(dets: &[ScoredBox]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| {
        let (da, db) = (&dets[a], &dets[b]);
        db.score
            .total_cmp(&da.score)
            .then(da.image.cmp(&db.image))
            .then(da.order.cmp(&db.order))
    });
    idx
}

/// True/false-positive flag per ranked detection. Each detection takes the
/// best-overlapping still-unmatched GT in its image if that IoU reaches the
/// threshold.
pub fn match_detections(dets: &[ScoredBox], ranked: &[usize], gt: &ClassGroundTruth, threshold: f64) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gt.boxes.iter().map(|b| vec![false; b.len()]).collect();
    ranked
        .iter()
        .map(|&i| {
            let d = &dets[i];
            let Some(gts) = gt.boxes.get(d.image) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (g, gb) in gts.iter().enumerate() {
                if used[d.image][g] {
                    continue;
                }
                let v = iou(&d.bbox, gb);
                if v >= threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    used[d.image][g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated average precision, or `None` without GT.
pub fn voc_ap(dets: &[ScoredBox], gt: &ClassGroundTruth, threshold: f64) -> Option<f64> {
    let n_gt = gt.count();
    if n_gt == 0 {
        return None;
    }
    let ranked = ranking(dets);
    let tp = match_detections(dets, &ranked, gt, threshold);
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &hit in &tp {
        if hit {
            ctp += 1;
        } else {
            cfp += 1;
        }
        recall.push(ctp as f64 / n_gt as f64);
        precision.push(ctp as f64 / (ctp + cfp) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..recall.len() {
        if recall[i] != recall[i - 1] {
            ap += (recall[i] - recall[i - 1]) * precision[i];
        }
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAp {
    pub name: String,
    pub ap: f64,
    pub n_gt: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class_ap: Vec<ClassAp>,
    /// Mean AP over classes with at least one GT box.
    pub map: f64,
    pub n_images: usize,
    pub iou_threshold: f64,
}

/// Scores per-image detections against a manifest's ground truth. Images
/// are visited in image-id order; `detections[i]` belongs to
/// `data.records[i]`.
pub fn evaluate_detections(data: &DatasetManifest, detections: &[Vec<Detection>], threshold: f64) -> EvalReport {
    let mut order: Vec<usize> = (0..data.records.len()).collect();
    order.sort_by(|&a, &b| data.records[a].image_id.cmp(&data.records[b].image_id));
    let classes = data.classes();
    let mut per_class = Vec::with_capacity(classes);
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..classes {
        let mut gt = ClassGroundTruth::new(order.len());
        let mut dets = Vec::new();
        for (rank, &ri) in order.iter().enumerate() {
            let rec = &data.records[ri];
            gt.boxes[rank] = rec.instances.iter().filter(|g| g.class_id == c).map(|g| g.bbox).collect();
            let mine = detections.get(ri).map(Vec::as_slice).unwrap_or(&[]);
            for (k, d) in mine.iter().filter(|d| d.class_id == c).enumerate() {
                dets.push(ScoredBox {
                    image: rank,
                    order: k,
                    score: d.score,
                    bbox: d.bbox,
                });
            }
        }
        let n_gt = gt.count();
        let ap = voc_ap(&dets, &gt, threshold).unwrap_or(0.0);
        if n_gt > 0 {
            sum += ap;
            counted += 1;
        }
        per_class.push(ClassAp {
            name: data.class_names[c].clone(),
            ap,
            n_gt,
        });
    }
    EvalReport {
        per_class_ap: per_class,
        map: if counted > 0 { sum / counted as f64 } else { 0.0 },
        n_images: data.records.len(),
        iou_threshold: threshold,
    }
}

/// Runs the detector over every image of `data` and scores it.
pub fn evaluate(model: &Model, data: &DatasetManifest) -> Result<EvalReport> {
    let dets = data
        .records
        .iter()
        .map(|r| model.detect(&r.to_tensor()))
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate_detections(data, &dets, DEFAULT_IOU_THRESHOLD))
}

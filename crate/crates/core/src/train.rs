//! End-to-end training: per-domain mini-batches, the combined detection and
//! alignment objective, SGD with momentum and a step learning-rate schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::aiam::{global_domain_loss, image_multilabel_loss, local_domain_loss, DomainLabel, Reversal};
use crate::detector::{det_loss, rpn_loss, Bbox, DetectorConfig};
use crate::error::{invalid, Error, Result};
use crate::i2itm::{aggregate_image_prediction, build_objectness_matrix, i2itm_loss};
use crate::model::{AttentionMode, Model, ModelConfig, Params};
use crate::rng::{mix, Lcg};
use crate::synth::{DatasetManifest, SceneRecord};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_dc: f64,
    pub lambda_ic: f64,
    pub lambda_cls: f64,
    pub base_lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub total_iters: usize,
    pub batch_per_domain: usize,
    pub seed: u64,
    pub attention_mode: AttentionMode,
    /// Skip the target half of every batch and all adaptation terms.
    pub source_only: bool,
}

impl Default for TrainConfig {
    /// Desk-scale schedule: 3000 iterations, decays at 2000 and 2700.
    fn default() -> Self {
        Self {
            lambda_dc: 1.0,
            lambda_ic: 0.1,
            lambda_cls: 1.0,
            base_lr: 0.005,
            lr_milestones: vec![2000, 2700],
            lr_factor: 0.1,
            momentum: 0.9,
            total_iters: 3000,
            batch_per_domain: 2,
            seed: 0,
            attention_mode: AttentionMode::Cis,
            source_only: false,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 24k iterations, decays at 16k and 21.5k, four
    /// images per domain.
    pub fn reference_scale() -> Self {
        Self {
            lr_milestones: vec![16_000, 21_500],
            total_iters: 24_000,
            batch_per_domain: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_dc", self.lambda_dc),
            ("lambda_ic", self.lambda_ic),
            ("lambda_cls", self.lambda_cls),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(invalid("base_lr must be positive"));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor.is_finite()) {
            return Err(invalid("lr_factor must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must be in [0, 1)"));
        }
        if self.total_iters == 0 {
            return Err(invalid("total_iters must be positive"));
        }
        if self.batch_per_domain == 0 {
            return Err(invalid("batch_per_domain must be at least 1"));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("lr_milestones must be strictly increasing"));
        }
        if self.lr_milestones.last().is_some_and(|&m| m >= self.total_iters) {
            return Err(invalid("lr_milestones must be below total_iters"));
        }
        Ok(())
    }
}

/// `base_lr · factor^(milestones ≤ iter)`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    let drops = cfg.lr_milestones.iter().filter(|&&m| m <= iter).count();
    let mut lr = cfg.base_lr;
    for _ in 0..drops {
        lr *= cfg.lr_factor;
    }
    lr
}

/// Per-term values of one step's objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub rpn: f64,
    pub det: f64,
    pub dc: f64,
    pub ic: f64,
    pub cls: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `λ_dc·dc + λ_ic·ic + rpn + det + λ_cls·cls`, in the order the
    /// trainer accumulates it.
    pub fn weighted_total(&self, cfg: &TrainConfig) -> f64 {
        let detection = self.rpn + self.det;
        detection + cfg.lambda_dc * self.dc + cfg.lambda_ic * self.ic + cfg.lambda_cls * self.cls
    }

    fn check_finite(&self) -> Result<()> {
        for (component, v) in [
            ("rpn", self.rpn),
            ("det", self.det),
            ("dc", self.dc),
            ("ic", self.ic),
            ("cls", self.cls),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite { component });
            }
        }
        Ok(())
    }
}

struct Terms {
    rpn: Vec<Var>,
    det: Vec<Var>,
    dc: Vec<Var>,
    ic: Vec<Var>,
    cls: Vec<Var>,
}

fn mean_of(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = xs.split_first() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let mut acc = first;
    for &x in rest {
        acc = tape.add(acc, x)?;
    }
    Ok(tape.scale(acc, 1.0 / xs.len() as f64))
}

/// Builds the full objective for one batch on `tape`. Returns the total
/// and the per-term scalars.
pub fn batch_objective(
    model: &Model,
    tape: &mut Tape,
    vars: &Params<Var>,
    source: &[&SceneRecord],
    target: &[&SceneRecord],
    cfg: &TrainConfig,
    reversal: Reversal,
) -> Result<(Var, LossBreakdown)> {
    if source.is_empty() {
        return Err(invalid("batch has no source images"));
    }
    if target.is_empty() && !cfg.source_only {
        return Err(invalid("batch has no target images"));
    }
    let classes = model.classes();
    let mut t = Terms {
        rpn: Vec::new(),
        det: Vec::new(),
        dc: Vec::new(),
        ic: Vec::new(),
        cls: Vec::new(),
    };
    for rec in source {
        if rec.domain != DomainLabel::Source {
            return Err(invalid(format!("{} is not a source image", rec.image_id)));
        }
        let gt_boxes: Vec<Bbox> = rec.instances.iter().map(|g| g.bbox).collect();
        let out = model.forward_image(tape, vars, &rec.to_tensor(), &gt_boxes)?;
        t.rpn.push(rpn_loss(tape, &out.rpn, &rec.instances, DomainLabel::Source)?);
        t.det.push(det_loss(
            tape,
            &out.head_boxes,
            &out.head,
            &rec.instances,
            classes,
            DomainLabel::Source,
        )?);
        if !cfg.source_only {
            let local = local_domain_loss(tape, &vars.local, out.features.shallow, DomainLabel::Source, reversal)?;
            let global = global_domain_loss(tape, &vars.global, out.attended, DomainLabel::Source, reversal)?;
            t.dc.push(tape.add(local, global)?);
            t.ic.push(image_multilabel_loss(tape, &vars.image_cls, out.attended, &rec.image_labels)?);
        }
    }
    if !cfg.source_only {
        for rec in target {
            if rec.domain != DomainLabel::Target {
                return Err(invalid(format!("{} is not a target image", rec.image_id)));
            }
            let out = model.forward_image(tape, vars, &rec.to_tensor(), &[])?;
            let local = local_domain_loss(tape, &vars.local, out.features.shallow, DomainLabel::Target, reversal)?;
            let global = global_domain_loss(tape, &vars.global, out.attended, DomainLabel::Target, reversal)?;
            t.dc.push(tape.add(local, global)?);
            t.ic.push(image_multilabel_loss(tape, &vars.image_cls, out.attended, &rec.image_labels)?);
            let x = tape.columns(out.head.class_logits, 0, classes)?;
            let obar = build_objectness_matrix(tape, out.rpn.proposals.objectness, x)?;
            let p = aggregate_image_prediction(tape, x, obar)?;
            t.cls.push(i2itm_loss(tape, p, &rec.image_labels, DomainLabel::Target)?);
        }
    }
    let rpn = mean_of(tape, &t.rpn)?;
    let det = mean_of(tape, &t.det)?;
    let mut total = tape.add(rpn, det)?;
    let mut parts = LossBreakdown {
        rpn: tape.value(rpn).item(),
        det: tape.value(det).item(),
        ..LossBreakdown::default()
    };
    if !cfg.source_only {
        let dc = mean_of(tape, &t.dc)?;
        let ic = mean_of(tape, &t.ic)?;
        let cls = mean_of(tape, &t.cls)?;
        parts.dc = tape.value(dc).item();
        parts.ic = tape.value(ic).item();
        parts.cls = tape.value(cls).item();
        for (v, w) in [(dc, cfg.lambda_dc), (ic, cfg.lambda_ic), (cls, cfg.lambda_cls)] {
            let term = tape.scale(v, w);
            total = tape.add(total, term)?;
        }
    }
    parts.total = tape.value(total).item();
    Ok((total, parts))
}

/// Detector configuration matching a dataset.
pub fn model_config(data: &DatasetManifest, attention: AttentionMode) -> Result<ModelConfig> {
    let first = data.records.first().ok_or_else(|| invalid("dataset is empty"))?;
    if first.width != first.height {
        return Err(invalid("only square images are supported"));
    }
    Ok(ModelConfig {
        detector: DetectorConfig {
            image_size: first.width,
            classes: data.classes(),
            ..DetectorConfig::default()
        },
        attention,
    })
}

/// Model plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    velocity: Vec<Vec<f64>>,
    sampler: Lcg,
    iter: usize,
}

const INIT_STREAM: u64 = 0x1A17;
const SAMPLER_STREAM: u64 = 0xBA7C;

impl Trainer {
    pub fn new(cfg: TrainConfig, model_cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg, mix(cfg.seed, INIT_STREAM))?;
        let velocity = model.params.named().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Ok(Self {
            sampler: Lcg::new(mix(cfg.seed, SAMPLER_STREAM)),
            model,
            cfg,
            velocity,
            iter: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// One forward/backward pass and SGD-momentum update.
    pub fn train_step(&mut self, source: &[&SceneRecord], target: &[&SceneRecord]) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let vars = self.model.params.bind(&mut tape);
        let (total, parts) = batch_objective(
            &self.model,
            &mut tape,
            &vars,
            source,
            target,
            &self.cfg,
            Reversal::Reversed,
        )?;
        parts.check_finite()?;
        let handles: Vec<Var> = vars.named().into_iter().map(|(_, v)| *v).collect();
        let mut grads = tape.backward(total)?;
        let lr = lr_at(self.iter, &self.cfg);
        let mu = self.cfg.momentum;
        for ((param, vel), h) in self
            .model
            .params
            .values_mut()
            .into_iter()
            .zip(self.velocity.iter_mut())
            .zip(handles)
        {
            let g = grads.take(h);
            let pd = param.data_mut();
            match g {
                Some(g) => {
                    for ((p, v), gi) in pd.iter_mut().zip(vel.iter_mut()).zip(g.data()) {
                        *v = mu * *v + gi;
                        *p -= lr * *v;
                    }
                }
                None => {
                    for (p, v) in pd.iter_mut().zip(vel.iter_mut()) {
                        *v *= mu;
                        *p -= lr * *v;
                    }
                }
            }
        }
        self.iter += 1;
        Ok(parts)
    }

    /// Draws the next batch: `batch_per_domain` indices per domain, uniform
    /// with replacement. The draw is identical whether or not the target
    /// half is later used.
    pub fn sample_batch<'a>(
        &mut self,
        source: &[&'a SceneRecord],
        target: &[&'a SceneRecord],
    ) -> (Vec<&'a SceneRecord>, Vec<&'a SceneRecord>) {
        let b = self.cfg.batch_per_domain;
        let s = (0..b)
            .map(|_| source[self.sampler.below(source.len() as u32) as usize])
            .collect();
        let t = (0..b)
            .map(|_| target[self.sampler.below(target.len() as u32) as usize])
            .collect();
        (s, t)
    }

    /// Trains for the remaining iterations, calling `on_step` after each.
    pub fn run(
        &mut self,
        data: &DatasetManifest,
        mut on_step: impl FnMut(usize, f64, &LossBreakdown),
    ) -> Result<()> {
        let source: Vec<&SceneRecord> = data.domain(DomainLabel::Source).collect();
        let target: Vec<&SceneRecord> = data.domain(DomainLabel::Target).collect();
        if source.is_empty() || target.is_empty() {
            return Err(invalid("training data needs images from both domains"));
        }
        while self.iter < self.cfg.total_iters {
            let lr = lr_at(self.iter, &self.cfg);
            let (s, t) = self.sample_batch(&source, &target);
            let parts = self.train_step(&s, &t)?;
            on_step(self.iter - 1, lr, &parts);
        }
        Ok(())
    }
}

/// Trains a fresh model with `cfg` on `data`.
pub fn train(cfg: &TrainConfig, data: &DatasetManifest) -> Result<Model> {
    let mc = model_config(data, cfg.attention_mode)?;
    let mut trainer = Trainer::new(cfg.clone(), mc)?;
    trainer.run(data, |_, _, _| {})?;
    Ok(trainer.model)
}

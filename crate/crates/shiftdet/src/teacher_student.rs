//! Teacher-student orchestration: burn-in on labeled source data, EMA weight
//! fusion, pseudo-label generation on weak target views, and the combined
//! adaptation step that stacks the supervised, distillation, adversarial,
//! and contrastive losses onto one optimizer update.

use rayon::prelude::*;

use crate::align::{
    ca_loss, extract_instances_traced, pool_backward, AlignModel, CAConfig, InstanceFeature,
    PoolTrace, QueueKey, QueueSet, Stage,
};
use crate::checkpoint::{Checkpoint, Phase};
use crate::core::{Detection, DomainTag, LabeledBox};
use crate::detector::{
    assign, build_anchors, harvest_detections, nms, Anchor, AssignConfig, DecodedGrid, Detector,
    DetectorConfig, GradTaps, ImageForward,
};
use crate::dynaug::{
    apply_strong, apply_weak, divergence_score, update_gain, AugmentationPolicy, GainState,
};
use crate::error::{Error, Result};
use crate::img::ImageBuf;
use crate::nn::{sgd_step, FeatMap, ParamSet, SgdConfig};
use crate::rng::Rng;
use crate::sup_losses::{supervised_loss, ClsTargetMode, ImageLossCtx, LogitGrads, LossWeights};
use crate::uncertainty::{distill_loss, grade, DistillMode, DistillWeights, Thresholds};

/// EMA fusion: `theta_t <- alpha * theta_t + (1 - alpha) * theta_s` for every
/// entry of the weight map (parameters and any statistics alike). Rejects
/// maps with different keys or shapes.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("ema decay {alpha} outside [0,1]")));
    }
    teacher.same_layout(student)?;
    for i in 0..teacher.len() {
        let id = crate::nn::ParamId(i);
        let s = &student.get(id).data;
        let t = &mut teacher.get_mut(id).data;
        for (tv, sv) in t.iter_mut().zip(s) {
            *tv = (alpha * (*tv as f64) + (1.0 - alpha) * (*sv as f64)) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct EMAConfig {
    pub decay: f64,
}

impl Default for EMAConfig {
    fn default() -> Self {
        EMAConfig { decay: 0.999 }
    }
}

/// Loss mixing weights of the adaptation objective.
#[derive(Debug, Clone, Copy)]
pub struct Lambdas {
    pub distill: f64,
    pub adv: f64,
    pub ca: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            distill: 1.0,
            adv: 0.1,
            ca: 0.1,
        }
    }
}

/// Component switches for ablations. A disabled component computes nothing.
#[derive(Debug, Clone, Copy)]
pub struct Toggles {
    /// Teacher-student self-training on target pseudo-labels.
    pub self_training: bool,
    /// Tiered uncertainty treatment (vs. hard positives only).
    pub uncertainty: bool,
    /// Divergence-driven augmentation gain.
    pub dynaug: bool,
    /// Gradient-reversed domain discriminators.
    pub adversarial: bool,
    /// Queue-based contrastive alignment.
    pub contrastive: bool,
}

impl Toggles {
    pub fn all_on() -> Self {
        Toggles {
            self_training: true,
            uncertainty: true,
            dynaug: true,
            adversarial: true,
            contrastive: true,
        }
    }

    pub fn all_off() -> Self {
        Toggles {
            self_training: false,
            uncertainty: false,
            dynaug: false,
            adversarial: false,
            contrastive: false,
        }
    }
}

/// Full programmatic training configuration.
#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub detector: DetectorConfig,
    pub seed: u64,
    pub batch_size: usize,
    pub burn_in_steps: usize,
    pub adapt_steps: usize,
    pub optimizer: SgdConfig,
    /// Peak learning rate of the adaptation phase; burn-in uses
    /// `optimizer.lr`.
    pub adapt_lr: f64,
    pub loss_weights: LossWeights,
    pub cls_target_mode: ClsTargetMode,
    pub distill_weights: DistillWeights,
    pub thresholds: Thresholds,
    pub lambdas: Lambdas,
    pub toggles: Toggles,
    pub ema_decay: f64,
    /// Teacher confidence floor before grading.
    pub pseudo_conf_floor: f64,
    pub pseudo_nms_iou: f64,
    pub eval_conf_floor: f64,
    pub eval_nms_iou: f64,
    pub assign: AssignConfig,
    pub ca: CAConfig,
    pub lambda_grl: f64,
    pub gain_alpha: f64,
    pub gain_gamma: f64,
    pub gain_warmup: usize,
    pub gain_min: f64,
    pub gain_max: f64,
    /// Multiply the divergence score by the teacher-entropy factor. The
    /// gain formula as published has no such term; this is available for
    /// sweeps and stays off by default.
    pub gain_entropy_weight: bool,
    pub policy: AugmentationPolicy,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            detector: DetectorConfig::default(),
            seed: 0,
            batch_size: 4,
            burn_in_steps: 300,
            adapt_steps: 200,
            optimizer: SgdConfig::default(),
            adapt_lr: 0.01,
            loss_weights: LossWeights::default(),
            cls_target_mode: ClsTargetMode::IouSoft,
            distill_weights: DistillWeights::default(),
            thresholds: Thresholds::default(),
            lambdas: Lambdas::default(),
            toggles: Toggles::all_on(),
            ema_decay: 0.999,
            pseudo_conf_floor: 0.05,
            pseudo_nms_iou: 0.65,
            eval_conf_floor: 0.001,
            eval_nms_iou: 0.65,
            assign: AssignConfig::default(),
            ca: CAConfig::default(),
            lambda_grl: 1.0,
            gain_alpha: 0.999,
            gain_gamma: 1.0,
            gain_warmup: 50,
            gain_min: 0.5,
            gain_max: 2.0,
            gain_entropy_weight: false,
            policy: AugmentationPolicy::default(),
        }
    }
}

/// Per-step loss breakdown, one line of the training log.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: u64,
    pub phase: Phase,
    pub l_sup: f64,
    pub l_distill: f64,
    pub l_adv: f64,
    pub l_ca: f64,
    pub total: f64,
    pub gain: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub pseudo_pos: usize,
    pub pseudo_unc: usize,
    pub pseudo_neg: usize,
    pub dropped_boxes: u64,
    pub skipped_negatives: u64,
    pub dfl_clamped: u64,
    pub aborted: bool,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!(
            "step={} phase={} l_sup={:.6} l_distill={:.6} l_adv={:.6} l_ca={:.6} gain={:.6} lr={:.8} total={:.6} grad_norm={:.4} pos={} unc={} neg={} dropped={} skipped={} clamped={} aborted={}",
            self.step,
            self.phase.as_str(),
            self.l_sup,
            self.l_distill,
            self.l_adv,
            self.l_ca,
            self.gain,
            self.lr,
            self.total,
            self.grad_norm,
            self.pseudo_pos,
            self.pseudo_unc,
            self.pseudo_neg,
            self.dropped_boxes,
            self.skipped_negatives,
            self.dfl_clamped,
            self.aborted,
        )
    }
}

/// Deterministic epoch-shuffled index stream; fully stateless in (seed,
/// step), so resumed runs replay the exact same batch order.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    n: usize,
    seed: u64,
    cached: Option<(u64, Vec<u32>)>,
}

impl BatchPlan {
    pub fn new(n: usize, seed: u64) -> Self {
        BatchPlan {
            n,
            seed,
            cached: None,
        }
    }

    fn perm(&mut self, epoch: u64) -> &[u32] {
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut idx: Vec<u32> = (0..self.n as u32).collect();
            let mut rng = Rng::seed_from(self.seed).fork(0xba7c).fork(epoch);
            rng.shuffle(&mut idx);
            self.cached = Some((epoch, idx));
        }
        &self.cached.as_ref().unwrap().1
    }

    /// Indices for the batch at a global step.
    pub fn batch(&mut self, step: u64, batch_size: usize) -> Vec<usize> {
        (0..batch_size)
            .map(|j| {
                let g = step * batch_size as u64 + j as u64;
                let epoch = g / self.n as u64;
                let slot = (g % self.n as u64) as usize;
                self.perm(epoch)[slot] as usize
            })
            .collect()
    }
}

const STREAM_SRC_AUG: u64 = 0x01;
const STREAM_TGT_WEAK: u64 = 0x02;
const STREAM_TGT_STRONG: u64 = 0x03;

/// The training engine. Owns both weight sets; the optimizer only ever sees
/// the student (and auxiliary) sets, the teacher moves by EMA alone.
pub struct Trainer {
    pub cfg: TrainerConfig,
    pub det: Detector,
    pub anchors: Vec<Anchor>,
    pub student: ParamSet,
    pub teacher: ParamSet,
    vel_student: ParamSet,
    pub align: AlignModel,
    pub aux: ParamSet,
    vel_aux: ParamSet,
    pub queues: QueueSet,
    pub gain: GainState,
    pub step: u64,
    pub phase: Phase,
}

impl Trainer {
    pub fn new(cfg: TrainerConfig) -> Result<Self> {
        cfg.ca.validate()?;
        cfg.loss_weights.validate()?;
        let (det, student) = Detector::build(&cfg.detector, cfg.seed)?;
        let anchors = build_anchors(&cfg.detector);
        let teacher = student.clone();
        let vel_student = student.zeros_like();
        let (align, aux) = AlignModel::build(&cfg.detector, &cfg.ca, cfg.seed ^ 0x5a5a);
        let vel_aux = aux.zeros_like();
        let queues = QueueSet::new(cfg.ca.queue_capacity);
        let gain = GainState::new(
            cfg.gain_alpha,
            cfg.gain_gamma,
            cfg.gain_warmup,
            cfg.gain_min,
            cfg.gain_max,
        )?;
        Ok(Trainer {
            cfg,
            det,
            anchors,
            student,
            teacher,
            vel_student,
            align,
            aux,
            vel_aux,
            queues,
            gain,
            step: 0,
            phase: Phase::BurnIn,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.cfg.detector.config_hash(),
            step: self.step,
            phase: self.phase,
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            vel_student: self.vel_student.clone(),
            aux: self.aux.clone(),
            vel_aux: self.vel_aux.clone(),
            gain: self.gain.clone(),
        }
    }

    /// Rebuild a trainer around checkpointed state. Queues restart empty;
    /// they refill within a few steps and are not part of the durable state.
    pub fn from_checkpoint(cfg: TrainerConfig, ckpt: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(cfg)?;
        t.student.same_layout(&ckpt.student)?;
        t.aux.same_layout(&ckpt.aux)?;
        t.student = ckpt.student;
        t.teacher = ckpt.teacher;
        t.vel_student = ckpt.vel_student;
        t.aux = ckpt.aux;
        t.vel_aux = ckpt.vel_aux;
        t.gain = ckpt.gain;
        t.step = ckpt.step;
        t.phase = ckpt.phase;
        Ok(t)
    }

    /// Learning-rate schedule bound to the current phase's step budget and
    /// peak rate.
    fn phase_schedule(&self) -> SgdConfig {
        let mut opt = self.cfg.optimizer.clone();
        match self.phase {
            Phase::BurnIn => opt.total_steps = self.cfg.burn_in_steps.max(1),
            Phase::Adapt => {
                opt.total_steps = self.cfg.adapt_steps.max(1);
                opt.lr = self.cfg.adapt_lr;
            }
        }
        opt
    }

    fn stream(&self, purpose: u64, step: u64, slot: u64) -> Rng {
        Rng::seed_from(self.cfg.seed)
            .fork(purpose)
            .fork(step)
            .fork(slot)
    }

    fn grid_of(&self, fwd: &ImageForward) -> DecodedGrid {
        DecodedGrid::from_forward(&self.cfg.detector, &self.anchors, fwd)
    }

    /// Spread per-anchor logit gradients into per-level tap maps.
    fn logit_grads_into_taps(&self, grads: &LogitGrads, scale: f64, taps: &mut GradTaps) {
        let cfg = &self.cfg.detector;
        let c = cfg.num_classes;
        let rb = 4 * cfg.bins();
        let mut cls_maps: Vec<FeatMap> = (0..crate::detector::NUM_LEVELS)
            .map(|l| crate::detector::zero_tap(cfg, l, c))
            .collect();
        let mut reg_maps: Vec<FeatMap> = (0..crate::detector::NUM_LEVELS)
            .map(|l| crate::detector::zero_tap(cfg, l, rb))
            .collect();
        for (ai, a) in self.anchors.iter().enumerate() {
            let dst = cls_maps[a.level].at_mut(a.iy, a.ix);
            for (k, d) in dst.iter_mut().enumerate() {
                *d += (grads.d_cls[ai * c + k] * scale) as f32;
            }
            let dst = reg_maps[a.level].at_mut(a.iy, a.ix);
            for (k, d) in dst.iter_mut().enumerate() {
                *d += (grads.d_reg[ai * rb + k] * scale) as f32;
            }
        }
        for (l, m) in cls_maps.into_iter().enumerate() {
            taps.add_cls(l, m);
        }
        for (l, m) in reg_maps.into_iter().enumerate() {
            taps.add_reg(l, m);
        }
    }

    /// One supervised step on a labeled source batch.
    pub fn burn_in_step(&mut self, batch: &[(ImageBuf, Vec<LabeledBox>)]) -> Result<StepRecord> {
        if self.phase != Phase::BurnIn {
            return Err(Error::Training("burn_in_step outside burn-in phase".into()));
        }
        let step = self.step;
        let (h, w) = (
            self.cfg.detector.resolution.0 as f64,
            self.cfg.detector.resolution.1 as f64,
        );
        let policy = self.cfg.policy;
        let views: Vec<(ImageBuf, Vec<LabeledBox>)> = batch
            .par_iter()
            .enumerate()
            .map(|(i, (img, labels))| {
                let mut rng = self.stream(STREAM_SRC_AUG, step, i as u64);
                let (weak, t_flip) = apply_weak(&policy, img, &mut rng);
                let (strong, t_aff) = apply_strong(&policy, &weak, 1.0, &mut rng);
                let full = t_flip.then(&t_aff);
                let mapped = labels
                    .iter()
                    .filter_map(|l| {
                        let b = full.bbox(&l.bbox).ok()?;
                        let clipped = b.clip(w, h)?;
                        Some(LabeledBox {
                            bbox: clipped,
                            category: l.category,
                        })
                    })
                    .collect();
                (strong, mapped)
            })
            .collect();
        let images: Vec<ImageBuf> = views.iter().map(|(im, _)| im.clone()).collect();
        let fwds = self.det.forward_batch(&self.student, &images)?;
        let grids: Vec<DecodedGrid> = fwds.iter().map(|f| self.grid_of(f)).collect();
        let assignments: Vec<_> = grids
            .iter()
            .zip(&views)
            .map(|(g, (_, gts))| assign(&self.anchors, g, gts, &self.cfg.assign))
            .collect();
        let ctxs: Vec<ImageLossCtx> = grids
            .iter()
            .zip(&assignments)
            .zip(&views)
            .map(|((grid, asn), (_, gts))| ImageLossCtx {
                grid,
                assignment: asn,
                gts,
                domain: DomainTag::Source,
            })
            .collect();
        let (l_sup, per_image_grads, bd) = supervised_loss(
            &self.cfg.detector,
            &self.anchors,
            &ctxs,
            &self.cfg.loss_weights,
            self.cfg.cls_target_mode,
        )?;
        if !l_sup.is_finite() {
            self.step += 1;
            return Ok(self.aborted_record(l_sup, 0.0, 0.0, 0.0));
        }
        let grad_sets: Vec<ParamSet> = fwds
            .par_iter()
            .zip(&per_image_grads)
            .map(|(fwd, lg)| {
                let mut taps = GradTaps::empty();
                self.logit_grads_into_taps(lg, 1.0, &mut taps);
                let mut g = self.student.zeros_like();
                self.det
                    .backward_single(&self.student, &fwd.trace, &taps, &mut g);
                g
            })
            .collect();
        let mut grads = self.student.zeros_like();
        for g in &grad_sets {
            add_params(&mut grads, g);
        }
        let schedule = self.phase_schedule();
        let lr = schedule.lr_at(step as usize);
        let grad_norm = sgd_step(
            &mut self.student,
            &grads,
            &mut self.vel_student,
            &schedule,
            lr,
        );
        self.step += 1;
        Ok(StepRecord {
            step,
            phase: Phase::BurnIn,
            l_sup,
            l_distill: 0.0,
            l_adv: 0.0,
            l_ca: 0.0,
            total: l_sup,
            gain: 1.0,
            lr,
            grad_norm,
            pseudo_pos: 0,
            pseudo_unc: 0,
            pseudo_neg: 0,
            dropped_boxes: 0,
            skipped_negatives: 0,
            dfl_clamped: bd.dfl_clamped,
            aborted: false,
        })
    }

    /// Complete burn-in: the teacher becomes a bit-exact copy of the student
    /// and the step counter resets for the adaptation schedule.
    pub fn finish_burn_in(&mut self) {
        self.teacher = self.student.clone();
        self.phase = Phase::Adapt;
        self.step = 0;
    }

    /// Teacher inference on weakly augmented target images: forward, decode,
    /// confidence floor, NMS; detections carry their source-anchor side
    /// distributions and are clipped to image bounds.
    pub fn generate_pseudo_labels(&self, weak_images: &[ImageBuf]) -> Result<Vec<Vec<Detection>>> {
        self.det.infer(
            &self.teacher,
            &self.anchors,
            weak_images,
            self.cfg.pseudo_conf_floor,
            self.cfg.pseudo_nms_iou,
            true,
        )
    }

    fn aborted_record(&self, l_sup: f64, l_distill: f64, l_adv: f64, l_ca: f64) -> StepRecord {
        StepRecord {
            step: self.step - 1,
            phase: self.phase,
            l_sup,
            l_distill,
            l_adv,
            l_ca,
            total: f64::NAN,
            gain: self.gain.gain,
            lr: 0.0,
            grad_norm: 0.0,
            pseudo_pos: 0,
            pseudo_unc: 0,
            pseudo_neg: 0,
            dropped_boxes: 0,
            skipped_negatives: 0,
            dfl_clamped: 0,
            aborted: true,
        }
    }

    /// One adaptation step over half-source half-target batches.
    pub fn train_step(
        &mut self,
        source: &[(ImageBuf, Vec<LabeledBox>)],
        target: &[ImageBuf],
    ) -> Result<StepRecord> {
        if self.phase != Phase::Adapt {
            return Err(Error::Training(
                "train_step requires the adapt phase (run burn-in first)".into(),
            ));
        }
        let step = self.step;
        let cfg = &self.cfg;
        let tog = cfg.toggles;
        let det_cfg = &cfg.detector;
        let (res_h, res_w) = (det_cfg.resolution.0 as f64, det_cfg.resolution.1 as f64);
        let gain_value = if tog.dynaug { self.gain.gain } else { 1.0 };
        let policy = cfg.policy;

        // Source strong views with transformed labels.
        let src_views: Vec<(ImageBuf, Vec<LabeledBox>)> = source
            .par_iter()
            .enumerate()
            .map(|(i, (img, labels))| {
                let mut rng = self.stream(STREAM_SRC_AUG, step, i as u64);
                let (weak, t_flip) = apply_weak(&policy, img, &mut rng);
                let (strong, t_aff) = apply_strong(&policy, &weak, gain_value, &mut rng);
                let full = t_flip.then(&t_aff);
                let mapped = labels
                    .iter()
                    .filter_map(|l| {
                        let b = full.bbox(&l.bbox).ok()?;
                        let clipped = b.clip(res_w, res_h)?;
                        Some(LabeledBox {
                            bbox: clipped,
                            category: l.category,
                        })
                    })
                    .collect();
                (strong, mapped)
            })
            .collect();

        // Target views: the strong view builds on the weak one, so teacher
        // boxes map into the student frame through the recorded affine only.
        struct TgtView {
            weak: ImageBuf,
            strong: ImageBuf,
            t_aff: crate::dynaug::RecordedTransform,
        }
        let tgt_views: Vec<TgtView> = target
            .par_iter()
            .enumerate()
            .map(|(i, img)| {
                let mut wrng = self.stream(STREAM_TGT_WEAK, step, i as u64);
                let (weak, _t_flip) = apply_weak(&policy, img, &mut wrng);
                let mut srng = self.stream(STREAM_TGT_STRONG, step, i as u64);
                let (strong, t_aff) = apply_strong(&policy, &weak, gain_value, &mut srng);
                TgtView {
                    weak,
                    strong,
                    t_aff,
                }
            })
            .collect();

        let needs_teacher = tog.self_training || tog.dynaug;
        let weak_imgs: Vec<ImageBuf> = tgt_views.iter().map(|v| v.weak.clone()).collect();
        let teacher_grids: Vec<DecodedGrid> = if needs_teacher {
            let fwds = self.det.forward_batch(&self.teacher, &weak_imgs)?;
            fwds.iter().map(|f| self.grid_of(f)).collect()
        } else {
            Vec::new()
        };
        let pseudo: Vec<Vec<Detection>> = if tog.self_training {
            teacher_grids
                .iter()
                .map(|g| {
                    let dets = harvest_detections(
                        det_cfg,
                        &self.anchors,
                        g,
                        cfg.pseudo_conf_floor,
                        true,
                    );
                    nms(&dets, cfg.pseudo_nms_iou)
                })
                .collect()
        } else {
            Vec::new()
        };

        // Teacher-student divergence on the shared weak view.
        let divergence = if tog.dynaug {
            let fwds = self.det.forward_batch(&self.student, &weak_imgs)?;
            let mut acc = 0.0;
            for (fwd, tg) in fwds.iter().zip(&teacher_grids) {
                let sg = self.grid_of(fwd);
                let mut score = divergence_score(
                    &sg.side_dists,
                    &tg.side_dists,
                    det_cfg.bins(),
                    cfg.gain_gamma,
                )?;
                if cfg.gain_entropy_weight {
                    let n = det_cfg.total_anchors();
                    let peaks: Vec<f64> = (0..n)
                        .map(|ai| {
                            (0..det_cfg.num_classes)
                                .map(|c| tg.prob(ai, c))
                                .fold(0.0, f64::max)
                        })
                        .collect();
                    score *= crate::dynaug::entropy_factor(&peaks);
                }
                acc += score;
            }
            Some(acc / tgt_views.len().max(1) as f64)
        } else {
            None
        };

        // Student forward with gradients on all strong views.
        let n_src = src_views.len();
        let n_tgt = tgt_views.len();
        let n_all = n_src + n_tgt;
        let all_imgs: Vec<ImageBuf> = src_views
            .iter()
            .map(|(im, _)| im.clone())
            .chain(tgt_views.iter().map(|v| v.strong.clone()))
            .collect();
        let fwds = self.det.forward_batch(&self.student, &all_imgs)?;
        let grids: Vec<DecodedGrid> = fwds.iter().map(|f| self.grid_of(f)).collect();

        // Supervised term over the source half.
        let src_assignments: Vec<_> = (0..n_src)
            .map(|i| assign(&self.anchors, &grids[i], &src_views[i].1, &cfg.assign))
            .collect();
        let ctxs: Vec<ImageLossCtx> = (0..n_src)
            .map(|i| ImageLossCtx {
                grid: &grids[i],
                assignment: &src_assignments[i],
                gts: &src_views[i].1,
                domain: DomainTag::Source,
            })
            .collect();
        let (l_sup, sup_grads, sup_bd) = supervised_loss(
            det_cfg,
            &self.anchors,
            &ctxs,
            &cfg.loss_weights,
            cfg.cls_target_mode,
        )?;

        // Distillation term over the target half.
        let mut l_distill = 0.0;
        let mut distill_grads: Vec<Option<LogitGrads>> = vec![None; n_tgt];
        let mut pseudo_counts = (0usize, 0usize, 0usize);
        let mut dropped = 0u64;
        let mut skipped = 0u64;
        let mut clamped = sup_bd.dfl_clamped;
        if tog.self_training {
            let mode = if tog.uncertainty {
                DistillMode::Tiered
            } else {
                DistillMode::PositivesOnly
            };
            let inv_bt = 1.0 / n_tgt.max(1) as f64;
            for (j, view) in tgt_views.iter().enumerate() {
                let mapped: Vec<Detection> = pseudo[j]
                    .iter()
                    .filter_map(|d| {
                        let bbox = view.t_aff.bbox(&d.bbox).ok()?;
                        let mut m = d.clone();
                        m.bbox = bbox;
                        Some(m)
                    })
                    .collect();
                let graded = grade(mapped, &cfg.thresholds);
                pseudo_counts.0 += graded.positives.len();
                pseudo_counts.1 += graded.uncertains.len();
                pseudo_counts.2 += graded.negatives.len();
                let (l, g, bd) = distill_loss(
                    det_cfg,
                    &self.anchors,
                    &grids[n_src + j],
                    &graded,
                    &cfg.distill_weights,
                    &cfg.assign,
                    mode,
                )?;
                l_distill += l * inv_bt;
                dropped += bd.dropped_boxes;
                skipped += bd.skipped_negatives;
                clamped += bd.dfl_clamped;
                distill_grads[j] = Some(g);
            }
        }

        // Adversarial term over every strong view's backbone features.
        let mut l_adv = 0.0;
        let mut disc_traces: Vec<Vec<crate::align::DiscTrace>> = Vec::new();
        if tog.adversarial {
            let denom = (n_all * crate::detector::NUM_LEVELS) as f64;
            for (i, fwd) in fwds.iter().enumerate() {
                let domain = if i < n_src {
                    DomainTag::Source
                } else {
                    DomainTag::Target
                };
                let mut per_level = Vec::new();
                for level in 0..crate::detector::NUM_LEVELS {
                    let (bce, trace) = self.align.disc_forward(
                        &self.aux,
                        level,
                        &fwd.features.backbone[level],
                        domain,
                    );
                    l_adv += bce / denom;
                    per_level.push(trace);
                }
                disc_traces.push(per_level);
            }
        }

        // Contrastive term: pool instances from post-NMS student predictions
        // on both domains, compare against home and cross queues.
        let mut l_ca = 0.0;
        let mut d_tau_total = 0.0;
        // Per image: (stage, level, pool trace, feature gradient).
        let mut ca_grads: Vec<Vec<(Stage, usize, PoolTrace, Vec<f64>)>> =
            (0..n_all).map(|_| Vec::new()).collect();
        let mut queue_deposit: Vec<InstanceFeature> = Vec::new();
        if tog.contrastive {
            let tau = self.align.tau(&self.aux);
            let inv_b = 1.0 / n_all as f64;
            for (i, fwd) in fwds.iter().enumerate() {
                let domain = if i < n_src {
                    DomainTag::Source
                } else {
                    DomainTag::Target
                };
                let dets = {
                    let harvested = harvest_detections(
                        det_cfg,
                        &self.anchors,
                        &grids[i],
                        cfg.ca.harvest_floor,
                        true,
                    );
                    nms(&harvested, cfg.eval_nms_iou)
                };
                for stage in [Stage::Backbone, Stage::Head] {
                    for level in 0..crate::detector::NUM_LEVELS {
                        let level_dets: Vec<Detection> = dets
                            .iter()
                            .filter(|d| {
                                d.box_distribution
                                    .as_ref()
                                    .map_or(false, |bd| bd.level == level)
                            })
                            .cloned()
                            .collect();
                        if level_dets.is_empty() {
                            continue;
                        }
                        let map = match stage {
                            Stage::Backbone => &fwd.features.backbone[level],
                            Stage::Head => &fwd.features.head[level],
                        };
                        let stride = det_cfg.strides[level] as f64;
                        let traced = extract_instances_traced(
                            map,
                            &level_dets,
                            stride,
                            stage,
                            domain,
                            level,
                            cfg.ca.harvest_floor,
                        );
                        if traced.is_empty() {
                            continue;
                        }
                        let insts: Vec<InstanceFeature> =
                            traced.iter().map(|(inst, _)| inst.clone()).collect();
                        let home = self.queues.get(QueueKey {
                            domain,
                            stage,
                            level,
                        });
                        let cross = self.queues.get(QueueKey {
                            domain: match domain {
                                DomainTag::Source => DomainTag::Target,
                                DomainTag::Target => DomainTag::Source,
                            },
                            stage,
                            level,
                        });
                        for queue in [home, cross] {
                            let (l, d_feats, d_tau) = ca_loss(&insts, queue, &cfg.ca, tau);
                            l_ca += l * inv_b;
                            d_tau_total += d_tau * inv_b;
                            for ((_, trace), df) in traced.iter().zip(&d_feats) {
                                if df.iter().any(|&v| v != 0.0) {
                                    ca_grads[i].push((stage, level, trace.clone(), df.clone()));
                                }
                            }
                        }
                        queue_deposit.extend(insts);
                    }
                }
            }
        }

        let lam = cfg.lambdas;
        let total = l_sup + lam.distill * l_distill + lam.adv * l_adv + lam.ca * l_ca;
        if !total.is_finite() {
            self.step += 1;
            return Ok(self.aborted_record(l_sup, l_distill, l_adv, l_ca));
        }

        // Backward: per-image gradient sets merged in index order.
        let lambda_grl = cfg.lambda_grl;
        let adv_scale = lam.adv / (n_all * crate::detector::NUM_LEVELS) as f64;
        let results: Vec<(ParamSet, Option<ParamSet>)> = (0..n_all)
            .into_par_iter()
            .map(|i| {
                let mut taps = GradTaps::empty();
                if i < n_src {
                    // Supervised gradients are always live.
                    self.logit_grads_into_taps(&sup_grads[i], 1.0, &mut taps);
                } else if let Some(g) = &distill_grads[i - n_src] {
                    if lam.distill != 0.0 {
                        self.logit_grads_into_taps(
                            g,
                            lam.distill / n_tgt.max(1) as f64,
                            &mut taps,
                        );
                    }
                }
                if lam.ca != 0.0 {
                    let inv_b = 1.0 / n_all as f64;
                    for (stage, level, trace, d_feat) in &ca_grads[i] {
                        let scaled: Vec<f64> =
                            d_feat.iter().map(|v| v * lam.ca * inv_b).collect();
                        let fwd = &fwds[i];
                        let shape = match stage {
                            Stage::Backbone => &fwd.features.backbone[*level],
                            Stage::Head => &fwd.features.head[*level],
                        };
                        let mut d_map = FeatMap::zeros(shape.h, shape.w, shape.c);
                        pool_backward(trace, &scaled, &mut d_map);
                        match stage {
                            Stage::Backbone => taps.add_backbone(*level, d_map),
                            Stage::Head => taps.add_head(*level, d_map),
                        }
                    }
                }
                let mut aux_grads = None;
                if tog.adversarial && lam.adv != 0.0 {
                    let domain = if i < n_src {
                        DomainTag::Source
                    } else {
                        DomainTag::Target
                    };
                    let mut ag = self.aux.zeros_like();
                    for level in 0..crate::detector::NUM_LEVELS {
                        let rev = self.align.disc_backward(
                            &self.aux,
                            level,
                            &fwds[i].features.backbone[level],
                            &disc_traces[i][level],
                            domain,
                            lambda_grl,
                            adv_scale,
                            &mut ag,
                        );
                        taps.add_backbone(level, rev);
                    }
                    aux_grads = Some(ag);
                }
                let mut g = self.student.zeros_like();
                if !taps.is_empty() {
                    self.det
                        .backward_single(&self.student, &fwds[i].trace, &taps, &mut g);
                }
                (g, aux_grads)
            })
            .collect();
        let mut grads = self.student.zeros_like();
        let mut aux_grads = self.aux.zeros_like();
        for (g, ag) in &results {
            add_params(&mut grads, g);
            if let Some(ag) = ag {
                add_params(&mut aux_grads, ag);
            }
        }
        if tog.contrastive && lam.ca != 0.0 {
            self.align
                .add_tau_grad(&self.aux, &mut aux_grads, d_tau_total * lam.ca);
        }

        let schedule = self.phase_schedule();
        let lr = schedule.lr_at(step as usize);
        let grad_norm = sgd_step(
            &mut self.student,
            &grads,
            &mut self.vel_student,
            &schedule,
            lr,
        );
        if tog.adversarial || tog.contrastive {
            sgd_step(
                &mut self.aux,
                &aux_grads,
                &mut self.vel_aux,
                &schedule,
                lr,
            );
            self.align.clamp_temperature(&mut self.aux, &self.cfg.ca);
        }
        ema_update(&mut self.teacher, &self.student, self.cfg.ema_decay)?;
        if tog.contrastive {
            self.queues.update(queue_deposit)?;
        }
        if let Some(d) = divergence {
            update_gain(&mut self.gain, d);
        }
        self.step += 1;
        Ok(StepRecord {
            step,
            phase: Phase::Adapt,
            l_sup,
            l_distill,
            l_adv,
            l_ca,
            total,
            gain: self.gain.gain,
            lr,
            grad_norm,
            pseudo_pos: pseudo_counts.0,
            pseudo_unc: pseudo_counts.1,
            pseudo_neg: pseudo_counts.2,
            dropped_boxes: dropped,
            skipped_negatives: skipped,
            dfl_clamped: clamped,
            aborted: false,
        })
    }
}

fn add_params(dst: &mut ParamSet, src: &ParamSet) {
    for i in 0..dst.len() {
        let id = crate::nn::ParamId(i);
        let s = &src.get(id).data;
        let d = &mut dst.get_mut(id).data;
        for (dv, sv) in d.iter_mut().zip(s) {
            *dv += sv;
        }
    }
}

/// Fetchable sample collections the training loops iterate over.
pub trait SampleStore: Sync {
    fn len(&self) -> usize;
    fn fetch(&self, idx: usize) -> (ImageBuf, Option<Vec<LabeledBox>>);
}

impl SampleStore for crate::data_synth::SplitData {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn fetch(&self, idx: usize) -> (ImageBuf, Option<Vec<LabeledBox>>) {
        let (img, labels) = &self.samples[idx];
        (img.to_image(), labels.clone())
    }
}

/// Run burn-in steps up to `until` (exclusive upper step bound), invoking
/// `on_step` after every step. Rejects stores containing unlabeled samples.
/// Does not finish the phase; callers may interleave checkpoint saves.
pub fn run_burn_in_span(
    trainer: &mut Trainer,
    source: &dyn SampleStore,
    until: u64,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<()> {
    if source.len() == 0 {
        return Err(Error::Dataset("burn-in needs a non-empty source split".into()));
    }
    let batch_size = trainer.cfg.batch_size.max(1);
    let mut plan = BatchPlan::new(source.len(), trainer.cfg.seed ^ 0xb0);
    while trainer.step < until {
        let idxs = plan.batch(trainer.step, batch_size);
        let batch: Vec<(ImageBuf, Vec<LabeledBox>)> = idxs
            .iter()
            .map(|&i| {
                let (img, labels) = source.fetch(i);
                labels
                    .map(|l| (img, l))
                    .ok_or_else(|| Error::DomainContract("unlabeled sample in burn-in loader".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let rec = trainer.burn_in_step(&batch)?;
        on_step(&rec)?;
    }
    Ok(())
}

/// Full burn-in phase: run to `cfg.burn_in_steps`, then copy the student
/// into the teacher and switch to the adapt phase.
pub fn run_burn_in(
    trainer: &mut Trainer,
    source: &dyn SampleStore,
    on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<()> {
    let until = trainer.cfg.burn_in_steps as u64;
    run_burn_in_span(trainer, source, until, on_step)?;
    trainer.finish_burn_in();
    Ok(())
}

/// Run adaptation steps up to `until` with equal-half batches.
pub fn run_adapt_span(
    trainer: &mut Trainer,
    source: &dyn SampleStore,
    target: &dyn SampleStore,
    until: u64,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<()> {
    if source.len() == 0 || target.len() == 0 {
        return Err(Error::Dataset("adaptation needs both splits non-empty".into()));
    }
    if trainer.phase != Phase::Adapt {
        return Err(Error::Training(
            "trainer is not in the adapt phase; run burn-in first".into(),
        ));
    }
    let half = (trainer.cfg.batch_size / 2).max(1);
    let mut src_plan = BatchPlan::new(source.len(), trainer.cfg.seed ^ 0xa1);
    let mut tgt_plan = BatchPlan::new(target.len(), trainer.cfg.seed ^ 0xa2);
    while trainer.step < until {
        let src_batch: Vec<(ImageBuf, Vec<LabeledBox>)> = src_plan
            .batch(trainer.step, half)
            .into_iter()
            .map(|i| {
                let (img, labels) = source.fetch(i);
                labels
                    .map(|l| (img, l))
                    .ok_or_else(|| Error::DomainContract("unlabeled source sample".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let tgt_batch: Vec<ImageBuf> = tgt_plan
            .batch(trainer.step, half)
            .into_iter()
            .map(|i| target.fetch(i).0)
            .collect();
        let rec = trainer.train_step(&src_batch, &tgt_batch)?;
        on_step(&rec)?;
    }
    Ok(())
}

/// Full adaptation phase to `cfg.adapt_steps`.
pub fn run_adapt(
    trainer: &mut Trainer,
    source: &dyn SampleStore,
    target: &dyn SampleStore,
    on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<()> {
    let until = trainer.cfg.adapt_steps as u64;
    run_adapt_span(trainer, source, target, until, on_step)
}

/// Evaluate a weight set on a labeled store with the eval-time decode
/// settings; rejects empty or unlabeled splits.
pub fn evaluate_store(
    trainer: &Trainer,
    params: &ParamSet,
    store: &dyn SampleStore,
) -> Result<crate::eval::EvalResult> {
    if store.len() == 0 {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let cfg = &trainer.cfg;
    let mut per_image = Vec::with_capacity(store.len());
    let chunk = 16usize;
    let mut idx = 0;
    while idx < store.len() {
        let hi = (idx + chunk).min(store.len());
        let mut images = Vec::with_capacity(hi - idx);
        let mut gts = Vec::with_capacity(hi - idx);
        for i in idx..hi {
            let (img, labels) = store.fetch(i);
            let labels = labels.ok_or_else(|| {
                Error::Dataset("evaluation split has samples without labels".into())
            })?;
            images.push(img);
            gts.push(labels);
        }
        let dets = trainer.det.infer(
            params,
            &trainer.anchors,
            &images,
            cfg.eval_conf_floor,
            cfg.eval_nms_iou,
            false,
        )?;
        for (d, g) in dets.into_iter().zip(gts) {
            per_image.push((d, g));
        }
        idx = hi;
    }
    Ok(crate::eval::evaluate_detections(
        &per_image,
        cfg.detector.num_classes,
        0.5,
    ))
}

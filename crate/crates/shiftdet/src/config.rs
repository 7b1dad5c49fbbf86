//! Run configuration: a flat key-value text format with one section per
//! subsystem. Every tunable has a documented default; unknown keys are
//! rejected; the resolved configuration serializes canonically so it can be
//! persisted next to checkpoints and diffed between runs.

use std::fmt::Write as _;
use std::path::Path;

use crate::align::CAConfig;
use crate::data_synth::{DomainShiftSpec, SceneSpec, SplitCounts};
use crate::detector::{AssignConfig, DetectorConfig};
use crate::dynaug::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::nn::SgdConfig;
use crate::sup_losses::{ClsTargetMode, LossWeights};
use crate::teacher_student::{Lambdas, Toggles, TrainerConfig};
use crate::uncertainty::{DistillWeights, Thresholds};

/// Everything a run needs, resolved. Field groups mirror the sections of the
/// on-disk format.
#[derive(Debug, Clone)]
pub struct RunConfig {
    // [detector]
    pub num_classes: usize,
    pub reg_max: usize,
    pub stem_width: usize,
    pub stage_widths: [usize; 4],
    pub head_width: usize,
    pub resolution: usize,
    pub cls_prior: f64,
    // [data]
    pub data_seed: u64,
    pub source_train: usize,
    pub source_eval: usize,
    pub target_train: usize,
    pub target_eval: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub size_min: f64,
    pub size_max: f64,
    pub max_overlap: f64,
    pub fog_beta: f64,
    pub fog_light: f64,
    pub color_shift: f64,
    pub sensor_noise: f64,
    // [train]
    pub seed: u64,
    pub batch_size: usize,
    pub burn_in_steps: usize,
    pub adapt_steps: usize,
    pub lr: f64,
    pub adapt_lr: f64,
    pub min_lr_frac: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub warmup_steps: usize,
    pub ema_decay: f64,
    pub lambda_distill: f64,
    pub lambda_adv: f64,
    pub lambda_ca: f64,
    pub enable_self_training: bool,
    pub enable_uncertainty: bool,
    pub enable_dynaug: bool,
    pub enable_adversarial: bool,
    pub enable_contrastive: bool,
    pub checkpoint_every: usize,
    // [sup]
    pub w_cls: f64,
    pub w_dfl: f64,
    pub w_iou: f64,
    pub cls_target: ClsTargetMode,
    // [distill]
    pub p_low: f64,
    pub p_high: f64,
    pub distill_w_cls: f64,
    pub distill_w_dfl: f64,
    pub distill_w_iou: f64,
    pub distill_w_ng: f64,
    pub pseudo_conf_floor: f64,
    pub pseudo_nms_iou: f64,
    // [assign]
    pub kappa1: f64,
    pub kappa2: f64,
    pub topk: usize,
    // [dynaug]
    pub gain_alpha: f64,
    pub gain_gamma: f64,
    pub gain_warmup: usize,
    pub gain_min: f64,
    pub gain_max: f64,
    pub gain_entropy_weight: bool,
    pub flip_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub aug_noise: f64,
    pub blur_sigma: f64,
    pub erase_prob: f64,
    pub erase_frac: f64,
    pub affine_scale: f64,
    pub affine_translate: f64,
    // [align]
    pub alpha_c: f64,
    pub beta_c: f64,
    pub temp_init: f64,
    pub queue_capacity: usize,
    pub harvest_floor: f64,
    pub lambda_grl: f64,
    // [eval]
    pub eval_conf_floor: f64,
    pub eval_nms_iou: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            num_classes: 3,
            reg_max: 8,
            stem_width: 16,
            stage_widths: [32, 64, 128, 256],
            head_width: 48,
            resolution: 256,
            cls_prior: 0.05,
            data_seed: 17,
            source_train: 800,
            source_eval: 200,
            target_train: 800,
            target_eval: 200,
            min_objects: 1,
            max_objects: 4,
            size_min: 28.0,
            size_max: 80.0,
            max_overlap: 0.2,
            fog_beta: 1.4,
            fog_light: 0.85,
            color_shift: 0.06,
            sensor_noise: 0.02,
            seed: 0,
            batch_size: 4,
            burn_in_steps: 300,
            adapt_steps: 200,
            lr: 0.01,
            adapt_lr: 0.01,
            min_lr_frac: 0.05,
            momentum: 0.9,
            clip_norm: 10.0,
            warmup_steps: 20,
            ema_decay: 0.999,
            lambda_distill: 1.0,
            lambda_adv: 0.1,
            lambda_ca: 0.1,
            enable_self_training: true,
            enable_uncertainty: true,
            enable_dynaug: true,
            enable_adversarial: true,
            enable_contrastive: true,
            checkpoint_every: 100,
            w_cls: 0.5,
            w_dfl: 1.5,
            w_iou: 7.5,
            cls_target: ClsTargetMode::IouSoft,
            p_low: 0.3,
            p_high: 0.8,
            distill_w_cls: 0.5,
            distill_w_dfl: 1.5,
            distill_w_iou: 7.5,
            distill_w_ng: 1.0,
            pseudo_conf_floor: 0.05,
            pseudo_nms_iou: 0.65,
            kappa1: 1.0,
            kappa2: 6.0,
            topk: 10,
            gain_alpha: 0.999,
            gain_gamma: 1.0,
            gain_warmup: 50,
            gain_min: 0.5,
            gain_max: 2.0,
            gain_entropy_weight: false,
            flip_p: 0.5,
            brightness: 0.15,
            contrast: 0.15,
            saturation: 0.25,
            aug_noise: 0.03,
            blur_sigma: 0.6,
            erase_prob: 0.3,
            erase_frac: 0.15,
            affine_scale: 0.15,
            affine_translate: 0.08,
            alpha_c: 1.0,
            beta_c: 1.0,
            temp_init: std::f64::consts::E,
            queue_capacity: 1024,
            harvest_floor: 0.1,
            lambda_grl: 1.0,
            eval_conf_floor: 0.001,
            eval_nms_iou: 0.65,
        }
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| {
        Error::Config(format!("[{section}] {key}: cannot parse value {v:?}"))
    })
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "[{section}] {key}: expected true/false, got {v:?}"
        ))),
    }
}

impl RunConfig {
    /// Apply one `section.key = value` assignment.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        macro_rules! num {
            ($field:ident) => {{
                self.$field = parse_num(section, key, v)?;
            }};
        }
        match (section, key) {
            ("detector", "num_classes") => num!(num_classes),
            ("detector", "reg_max") => num!(reg_max),
            ("detector", "stem_width") => num!(stem_width),
            ("detector", "head_width") => num!(head_width),
            ("detector", "resolution") => num!(resolution),
            ("detector", "cls_prior") => num!(cls_prior),
            ("detector", "stage_widths") => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 4 {
                    return Err(Error::Config(
                        "[detector] stage_widths wants 4 comma-separated widths".into(),
                    ));
                }
                for (i, p) in parts.iter().enumerate() {
                    self.stage_widths[i] = parse_num(section, key, p)?;
                }
            }
            ("data", "seed") => num!(data_seed),
            ("data", "source_train") => num!(source_train),
            ("data", "source_eval") => num!(source_eval),
            ("data", "target_train") => num!(target_train),
            ("data", "target_eval") => num!(target_eval),
            ("data", "min_objects") => num!(min_objects),
            ("data", "max_objects") => num!(max_objects),
            ("data", "size_min") => num!(size_min),
            ("data", "size_max") => num!(size_max),
            ("data", "max_overlap") => num!(max_overlap),
            ("data", "fog_beta") => num!(fog_beta),
            ("data", "fog_light") => num!(fog_light),
            ("data", "color_shift") => num!(color_shift),
            ("data", "sensor_noise") => num!(sensor_noise),
            ("train", "seed") => num!(seed),
            ("train", "batch_size") => num!(batch_size),
            ("train", "burn_in_steps") => num!(burn_in_steps),
            ("train", "adapt_steps") => num!(adapt_steps),
            ("train", "lr") => num!(lr),
            ("train", "adapt_lr") => num!(adapt_lr),
            ("train", "min_lr_frac") => num!(min_lr_frac),
            ("train", "momentum") => num!(momentum),
            ("train", "clip_norm") => num!(clip_norm),
            ("train", "warmup_steps") => num!(warmup_steps),
            ("train", "ema_decay") => num!(ema_decay),
            ("train", "lambda_distill") => num!(lambda_distill),
            ("train", "lambda_adv") => num!(lambda_adv),
            ("train", "lambda_ca") => num!(lambda_ca),
            ("train", "enable_self_training") => {
                self.enable_self_training = parse_bool(section, key, v)?
            }
            ("train", "enable_uncertainty") => {
                self.enable_uncertainty = parse_bool(section, key, v)?
            }
            ("train", "enable_dynaug") => self.enable_dynaug = parse_bool(section, key, v)?,
            ("train", "enable_adversarial") => {
                self.enable_adversarial = parse_bool(section, key, v)?
            }
            ("train", "enable_contrastive") => {
                self.enable_contrastive = parse_bool(section, key, v)?
            }
            ("train", "checkpoint_every") => num!(checkpoint_every),
            ("sup", "w_cls") => num!(w_cls),
            ("sup", "w_dfl") => num!(w_dfl),
            ("sup", "w_iou") => num!(w_iou),
            ("sup", "cls_target") => {
                self.cls_target = match v {
                    "iou_soft" => ClsTargetMode::IouSoft,
                    "hard" => ClsTargetMode::Hard,
                    _ => {
                        return Err(Error::Config(format!(
                            "[sup] cls_target: expected iou_soft or hard, got {v:?}"
                        )))
                    }
                }
            }
            ("distill", "p_low") => num!(p_low),
            ("distill", "p_high") => num!(p_high),
            ("distill", "w_cls") => num!(distill_w_cls),
            ("distill", "w_dfl") => num!(distill_w_dfl),
            ("distill", "w_iou") => num!(distill_w_iou),
            ("distill", "w_ng") => num!(distill_w_ng),
            ("distill", "pseudo_conf_floor") => num!(pseudo_conf_floor),
            ("distill", "pseudo_nms_iou") => num!(pseudo_nms_iou),
            ("assign", "kappa1") => num!(kappa1),
            ("assign", "kappa2") => num!(kappa2),
            ("assign", "topk") => num!(topk),
            ("dynaug", "gain_alpha") => num!(gain_alpha),
            ("dynaug", "gamma") => num!(gain_gamma),
            ("dynaug", "warmup") => num!(gain_warmup),
            ("dynaug", "gain_min") => num!(gain_min),
            ("dynaug", "gain_max") => num!(gain_max),
            ("dynaug", "entropy_weight") => {
                self.gain_entropy_weight = parse_bool(section, key, v)?
            }
            ("dynaug", "flip_p") => num!(flip_p),
            ("dynaug", "brightness") => num!(brightness),
            ("dynaug", "contrast") => num!(contrast),
            ("dynaug", "saturation") => num!(saturation),
            ("dynaug", "noise") => num!(aug_noise),
            ("dynaug", "blur") => num!(blur_sigma),
            ("dynaug", "erase_prob") => num!(erase_prob),
            ("dynaug", "erase_frac") => num!(erase_frac),
            ("dynaug", "affine_scale") => num!(affine_scale),
            ("dynaug", "affine_translate") => num!(affine_translate),
            ("align", "alpha_c") => num!(alpha_c),
            ("align", "beta_c") => num!(beta_c),
            ("align", "temp_init") => num!(temp_init),
            ("align", "queue_capacity") => num!(queue_capacity),
            ("align", "harvest_floor") => num!(harvest_floor),
            ("align", "lambda_grl") => num!(lambda_grl),
            ("eval", "conf_floor") => num!(eval_conf_floor),
            ("eval", "nms_iou") => num!(eval_nms_iou),
            _ => {
                return Err(Error::Config(format!(
                    "unknown configuration key [{section}] {key}"
                )))
            }
        }
        Ok(())
    }

    /// Parse the on-disk format: `[section]` headers, `key = value` lines,
    /// `#` comments. Keys outside a section are rejected.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.merge(text)?;
        Ok(cfg)
    }

    pub fn merge(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = Some(line[1..line.len() - 1].trim().to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    ln + 1
                )));
            };
            let Some(section) = section.as_deref() else {
                return Err(Error::Config(format!(
                    "line {}: key outside any [section]",
                    ln + 1
                )));
            };
            self.set(section, key.trim(), value)?;
        }
        Ok(())
    }

    /// Apply a `section.key=value` command-line override.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let Some((path, value)) = assignment.split_once('=') else {
            return Err(Error::Config(format!(
                "--set wants section.key=value, got {assignment:?}"
            )));
        };
        let Some((section, key)) = path.trim().split_once('.') else {
            return Err(Error::Config(format!(
                "--set key must be section.key, got {path:?}"
            )));
        };
        self.set(section.trim(), key.trim(), value)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical snapshot of every key. Parsing the output reproduces the
    /// config exactly.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "# resolved run configuration");
        let _ = writeln!(w, "[detector]");
        let _ = writeln!(w, "num_classes = {}", self.num_classes);
        let _ = writeln!(w, "reg_max = {}", self.reg_max);
        let _ = writeln!(w, "stem_width = {}", self.stem_width);
        let _ = writeln!(
            w,
            "stage_widths = {},{},{},{}",
            self.stage_widths[0], self.stage_widths[1], self.stage_widths[2], self.stage_widths[3]
        );
        let _ = writeln!(w, "head_width = {}", self.head_width);
        let _ = writeln!(w, "resolution = {}", self.resolution);
        let _ = writeln!(w, "cls_prior = {}", self.cls_prior);
        let _ = writeln!(w, "[data]");
        let _ = writeln!(w, "seed = {}", self.data_seed);
        let _ = writeln!(w, "source_train = {}", self.source_train);
        let _ = writeln!(w, "source_eval = {}", self.source_eval);
        let _ = writeln!(w, "target_train = {}", self.target_train);
        let _ = writeln!(w, "target_eval = {}", self.target_eval);
        let _ = writeln!(w, "min_objects = {}", self.min_objects);
        let _ = writeln!(w, "max_objects = {}", self.max_objects);
        let _ = writeln!(w, "size_min = {}", self.size_min);
        let _ = writeln!(w, "size_max = {}", self.size_max);
        let _ = writeln!(w, "max_overlap = {}", self.max_overlap);
        let _ = writeln!(w, "fog_beta = {}", self.fog_beta);
        let _ = writeln!(w, "fog_light = {}", self.fog_light);
        let _ = writeln!(w, "color_shift = {}", self.color_shift);
        let _ = writeln!(w, "sensor_noise = {}", self.sensor_noise);
        let _ = writeln!(w, "[train]");
        let _ = writeln!(w, "seed = {}", self.seed);
        let _ = writeln!(w, "batch_size = {}", self.batch_size);
        let _ = writeln!(w, "burn_in_steps = {}", self.burn_in_steps);
        let _ = writeln!(w, "adapt_steps = {}", self.adapt_steps);
        let _ = writeln!(w, "lr = {}", self.lr);
        let _ = writeln!(w, "adapt_lr = {}", self.adapt_lr);
        let _ = writeln!(w, "min_lr_frac = {}", self.min_lr_frac);
        let _ = writeln!(w, "momentum = {}", self.momentum);
        let _ = writeln!(w, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(w, "warmup_steps = {}", self.warmup_steps);
        let _ = writeln!(w, "ema_decay = {}", self.ema_decay);
        let _ = writeln!(w, "lambda_distill = {}", self.lambda_distill);
        let _ = writeln!(w, "lambda_adv = {}", self.lambda_adv);
        let _ = writeln!(w, "lambda_ca = {}", self.lambda_ca);
        let _ = writeln!(w, "enable_self_training = {}", self.enable_self_training);
        let _ = writeln!(w, "enable_uncertainty = {}", self.enable_uncertainty);
        let _ = writeln!(w, "enable_dynaug = {}", self.enable_dynaug);
        let _ = writeln!(w, "enable_adversarial = {}", self.enable_adversarial);
        let _ = writeln!(w, "enable_contrastive = {}", self.enable_contrastive);
        let _ = writeln!(w, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(w, "[sup]");
        let _ = writeln!(w, "w_cls = {}", self.w_cls);
        let _ = writeln!(w, "w_dfl = {}", self.w_dfl);
        let _ = writeln!(w, "w_iou = {}", self.w_iou);
        let _ = writeln!(
            w,
            "cls_target = {}",
            match self.cls_target {
                ClsTargetMode::IouSoft => "iou_soft",
                ClsTargetMode::Hard => "hard",
            }
        );
        let _ = writeln!(w, "[distill]");
        let _ = writeln!(w, "p_low = {}", self.p_low);
        let _ = writeln!(w, "p_high = {}", self.p_high);
        let _ = writeln!(w, "w_cls = {}", self.distill_w_cls);
        let _ = writeln!(w, "w_dfl = {}", self.distill_w_dfl);
        let _ = writeln!(w, "w_iou = {}", self.distill_w_iou);
        let _ = writeln!(w, "w_ng = {}", self.distill_w_ng);
        let _ = writeln!(w, "pseudo_conf_floor = {}", self.pseudo_conf_floor);
        let _ = writeln!(w, "pseudo_nms_iou = {}", self.pseudo_nms_iou);
        let _ = writeln!(w, "[assign]");
        let _ = writeln!(w, "kappa1 = {}", self.kappa1);
        let _ = writeln!(w, "kappa2 = {}", self.kappa2);
        let _ = writeln!(w, "topk = {}", self.topk);
        let _ = writeln!(w, "[dynaug]");
        let _ = writeln!(w, "gain_alpha = {}", self.gain_alpha);
        let _ = writeln!(w, "gamma = {}", self.gain_gamma);
        let _ = writeln!(w, "warmup = {}", self.gain_warmup);
        let _ = writeln!(w, "gain_min = {}", self.gain_min);
        let _ = writeln!(w, "gain_max = {}", self.gain_max);
        let _ = writeln!(w, "entropy_weight = {}", self.gain_entropy_weight);
        let _ = writeln!(w, "flip_p = {}", self.flip_p);
        let _ = writeln!(w, "brightness = {}", self.brightness);
        let _ = writeln!(w, "contrast = {}", self.contrast);
        let _ = writeln!(w, "saturation = {}", self.saturation);
        let _ = writeln!(w, "noise = {}", self.aug_noise);
        let _ = writeln!(w, "blur = {}", self.blur_sigma);
        let _ = writeln!(w, "erase_prob = {}", self.erase_prob);
        let _ = writeln!(w, "erase_frac = {}", self.erase_frac);
        let _ = writeln!(w, "affine_scale = {}", self.affine_scale);
        let _ = writeln!(w, "affine_translate = {}", self.affine_translate);
        let _ = writeln!(w, "[align]");
        let _ = writeln!(w, "alpha_c = {}", self.alpha_c);
        let _ = writeln!(w, "beta_c = {}", self.beta_c);
        let _ = writeln!(w, "temp_init = {}", self.temp_init);
        let _ = writeln!(w, "queue_capacity = {}", self.queue_capacity);
        let _ = writeln!(w, "harvest_floor = {}", self.harvest_floor);
        let _ = writeln!(w, "lambda_grl = {}", self.lambda_grl);
        let _ = writeln!(w, "[eval]");
        let _ = writeln!(w, "conf_floor = {}", self.eval_conf_floor);
        let _ = writeln!(w, "nms_iou = {}", self.eval_nms_iou);
        s
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            num_classes: self.num_classes,
            reg_max: self.reg_max,
            strides: [8, 16, 32],
            stem_width: self.stem_width,
            stage_widths: self.stage_widths,
            head_width: self.head_width,
            resolution: (self.resolution, self.resolution),
            cls_prior: self.cls_prior,
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            canvas: self.resolution,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            size_min: self.size_min,
            size_max: self.size_max,
            max_overlap: self.max_overlap,
            ..Default::default()
        }
    }

    pub fn shift_spec(&self) -> DomainShiftSpec {
        DomainShiftSpec {
            beta_fog: self.fog_beta,
            atm_light: self.fog_light,
            color_shift: self.color_shift,
            noise_sigma: self.sensor_noise,
            ..Default::default()
        }
    }

    pub fn split_counts(&self) -> SplitCounts {
        SplitCounts {
            source_train: self.source_train,
            source_eval: self.source_eval,
            target_train: self.target_train,
            target_eval: self.target_eval,
        }
    }

    pub fn trainer_config(&self) -> Result<TrainerConfig> {
        let total = self.burn_in_steps.max(self.adapt_steps).max(1);
        Ok(TrainerConfig {
            detector: self.detector_config(),
            seed: self.seed,
            batch_size: self.batch_size,
            burn_in_steps: self.burn_in_steps,
            adapt_steps: self.adapt_steps,
            adapt_lr: self.adapt_lr,
            optimizer: SgdConfig {
                lr: self.lr,
                min_lr_frac: self.min_lr_frac,
                momentum: self.momentum,
                clip_norm: self.clip_norm,
                warmup_steps: self.warmup_steps,
                total_steps: total,
            },
            loss_weights: LossWeights {
                w_cls: self.w_cls,
                w_dfl: self.w_dfl,
                w_iou: self.w_iou,
            },
            cls_target_mode: self.cls_target,
            distill_weights: DistillWeights {
                w_cls: self.distill_w_cls,
                w_dfl: self.distill_w_dfl,
                w_iou: self.distill_w_iou,
                w_ng: self.distill_w_ng,
            },
            thresholds: Thresholds::new(self.p_low, self.p_high)?,
            lambdas: Lambdas {
                distill: self.lambda_distill,
                adv: self.lambda_adv,
                ca: self.lambda_ca,
            },
            toggles: Toggles {
                self_training: self.enable_self_training,
                uncertainty: self.enable_uncertainty,
                dynaug: self.enable_dynaug,
                adversarial: self.enable_adversarial,
                contrastive: self.enable_contrastive,
            },
            ema_decay: self.ema_decay,
            pseudo_conf_floor: self.pseudo_conf_floor,
            pseudo_nms_iou: self.pseudo_nms_iou,
            eval_conf_floor: self.eval_conf_floor,
            eval_nms_iou: self.eval_nms_iou,
            assign: AssignConfig {
                kappa1: self.kappa1,
                kappa2: self.kappa2,
                topk: self.topk,
            },
            ca: CAConfig {
                alpha: self.alpha_c,
                beta: self.beta_c,
                temp_init: self.temp_init,
                temp_min: 1.0 + 1e-3,
                queue_capacity: self.queue_capacity,
                harvest_floor: self.harvest_floor,
            },
            lambda_grl: self.lambda_grl,
            gain_alpha: self.gain_alpha,
            gain_gamma: self.gain_gamma,
            gain_warmup: self.gain_warmup,
            gain_min: self.gain_min,
            gain_max: self.gain_max,
            gain_entropy_weight: self.gain_entropy_weight,
            policy: AugmentationPolicy {
                flip_p: self.flip_p,
                brightness: self.brightness,
                contrast: self.contrast,
                saturation: self.saturation,
                noise_sigma: self.aug_noise,
                blur_sigma: self.blur_sigma,
                erase_prob: self.erase_prob,
                erase_frac: self.erase_frac,
                affine_scale: self.affine_scale,
                affine_translate: self.affine_translate,
                scaled: Default::default(),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_serialization() {
        let cfg = RunConfig::default();
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(text, back.serialize());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[train]\nbananas = 4\n").is_err());
        assert!(RunConfig::parse("[made_up]\nseed = 4\n").is_err());
        assert!(RunConfig::parse("seed = 4\n").is_err());
    }

    #[test]
    fn overrides_apply_and_validate() {
        let mut cfg = RunConfig::default();
        cfg.set_override("train.batch_size=8").unwrap();
        assert_eq!(cfg.batch_size, 8);
        cfg.set_override("distill.p_low=0.25").unwrap();
        assert!((cfg.p_low - 0.25).abs() < 1e-12);
        assert!(cfg.set_override("nonsense").is_err());
        assert!(cfg.set_override("train.bananas=3").is_err());
        assert!(cfg.set_override("train.batch_size=abc").is_err());
    }

    #[test]
    fn comments_and_spacing_are_tolerated() {
        let text = "# hello\n[train]\n  seed = 9   # tail comment\n\n[sup]\nw_iou = 5.0\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert!((cfg.w_iou - 5.0).abs() < 1e-12);
    }

    #[test]
    fn trainer_config_materializes() {
        let cfg = RunConfig::default();
        let tc = cfg.trainer_config().unwrap();
        assert_eq!(tc.batch_size, 4);
        assert!((tc.thresholds.p_h - 0.8).abs() < 1e-12);
        assert!(tc.toggles.contrastive);
    }

    #[test]
    fn bad_threshold_ordering_fails_materialization() {
        let mut cfg = RunConfig::default();
        cfg.set_override("distill.p_low=0.9").unwrap();
        assert!(cfg.trainer_config().is_err());
    }
}

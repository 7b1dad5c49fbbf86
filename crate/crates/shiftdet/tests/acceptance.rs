//! Acceptance gate: one test per criterion, each printing a [PASS]/[FAIL]
//! line with the measured quantities. Criteria 1-4 and 6 are exact-value,
//! brute-force, gradient, structural, and determinism suites; criterion 5
//! trains the full pipeline on the default synthetic dataset and checks the
//! adaptation-gain ladder.

use std::f64::consts::LN_2;

use shiftdet::align::{
    ca_loss, grl_backward, grl_forward, AlignModel, CAConfig, DomainQueue, InstanceFeature,
    QueueKey, QueueSet, Stage,
};
use shiftdet::core::{iou, js_divergence, BBox, Detection, DomainTag, LabeledBox};
use shiftdet::data_synth;
use shiftdet::detector::{
    assign, build_anchors, decode_dfl, nms, Anchor, AssignConfig, Assignment, DecodedGrid,
    DetectorConfig,
};
use shiftdet::dynaug::{update_gain, GainState};
use shiftdet::eval::average_precision;
use shiftdet::img::ImageBuf;
use shiftdet::nn::{FeatMap, ParamId, ParamSet, Tensor};
use shiftdet::rng::Rng;
use shiftdet::sup_losses::{bce_with_logit, supervised_loss, ClsTargetMode, ImageLossCtx, LossWeights};
use shiftdet::teacher_student::ema_update;
use shiftdet::uncertainty::{
    grade, negative_box_loss, uncertain_cls_loss, Thresholds, Tier, TieredBox,
};

const TOL: f64 = 1e-6;

fn check(name: &str, pass: bool, detail: String) -> bool {
    println!(
        "[{}] {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn inst(feature: Vec<f64>, conf: f64, cat: usize, domain: DomainTag) -> InstanceFeature {
    InstanceFeature {
        feature: unit(feature),
        confidence: conf,
        category: cat,
        domain,
        stage: Stage::Backbone,
        level: 0,
    }
}

fn queue_of(items: Vec<InstanceFeature>) -> DomainQueue {
    let mut q = DomainQueue::new(
        QueueKey {
            domain: DomainTag::Source,
            stage: Stage::Backbone,
            level: 0,
        },
        64,
    );
    for mut i in items {
        i.domain = DomainTag::Source;
        i.stage = Stage::Backbone;
        i.level = 0;
        q.push(i).unwrap();
    }
    q
}

/// Criterion 1: closed-form loss oracles within 1e-6.
#[test]
fn criterion_1_closed_form_oracles() {
    let mut ok = true;

    // BCE = ln 2 family.
    ok &= check(
        "bce(logit 0, target 1) = ln 2",
        (bce_with_logit(0.0, 1.0) - LN_2).abs() < TOL,
        format!("{}", bce_with_logit(0.0, 1.0)),
    );
    // Uncertain-tier BCE(0.5, 0.5) through the Eq. 3 path.
    let cfg = DetectorConfig {
        num_classes: 2,
        reg_max: 3,
        ..Default::default()
    };
    let anchors = vec![Anchor {
        level: 0,
        iy: 0,
        ix: 0,
        stride: 8.0,
        cx: 4.0,
        cy: 4.0,
    }];
    let grid = DecodedGrid::from_logits(&cfg, &anchors, vec![0.0; 2], vec![0.0; 4 * 4]);
    let tiered = vec![TieredBox {
        lbox: LabeledBox {
            bbox: BBox::new(0.0, 0.0, 8.0, 8.0).unwrap(),
            category: 0,
        },
        tier: Tier::Uncertain,
        teacher_conf: 0.5,
    }];
    let asn = Assignment {
        matched_gt: vec![Some(0)],
        score: vec![1.0],
        target_iou: vec![1.0],
        num_gts: 1,
    };
    let (l_unc, _) = uncertain_cls_loss(&grid, &asn, &tiered);
    ok &= check(
        "uncertain-tier BCE(student .5, teacher .5) = ln 2",
        (l_unc - LN_2).abs() < TOL,
        format!("{l_unc}"),
    );

    // JS divergence of disjoint one-hots = ln 2.
    let js = js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
    ok &= check("js(one-hot, opposite) = ln 2", (js - LN_2).abs() < TOL, format!("{js}"));

    // Sigmoid contrastive single-pair values.
    let ca_cfg = CAConfig::default();
    let q = queue_of(vec![inst(vec![1.0, 0.0], 1.0, 0, DomainTag::Source)]);
    let batch = vec![inst(vec![0.6, 0.8], 1.0, 0, DomainTag::Target)];
    let (l_zero, _, _) = ca_loss(&batch, &q, &ca_cfg, 1.0);
    ok &= check(
        "contrastive pair at full confidence has zero weight",
        l_zero.abs() < TOL,
        format!("{l_zero}"),
    );
    let q = queue_of(vec![inst(vec![1.0, 0.0], 0.0, 0, DomainTag::Source)]);
    let batch = vec![inst(vec![0.0, 1.0], 0.0, 0, DomainTag::Target)];
    let (l_orth, _, _) = ca_loss(&batch, &q, &ca_cfg, 1.0);
    ok &= check(
        "contrastive orthogonal zero-confidence pair = ln 2",
        (l_orth - LN_2).abs() < TOL,
        format!("{l_orth}"),
    );

    // Adversarial BCE at discriminator output 0.5 = ln 2.
    let det_cfg = DetectorConfig::default();
    let (align, mut aux) = AlignModel::build(&det_cfg, &CAConfig::default(), 1);
    for i in 0..aux.len() {
        let name = aux.name(ParamId(i)).to_string();
        if name.starts_with("disc") {
            aux.get_mut(ParamId(i)).data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let feat = FeatMap::zeros(8, 8, det_cfg.stage_widths[1]);
    let (l_adv, _) = align.disc_forward(&aux, 0, &feat, DomainTag::Source);
    ok &= check(
        "adversarial BCE at D = 0.5 is ln 2",
        (l_adv - LN_2).abs() < TOL,
        format!("{l_adv}"),
    );

    // Fog scalar closed form.
    let img = ImageBuf::filled(1, 1, [0.2, 0.2, 0.2]);
    let shift = data_synth::DomainShiftSpec {
        beta_fog: 1.0,
        atm_light: 0.8,
        color_shift: 0.0,
        noise_sigma: 0.0,
        ..Default::default()
    };
    let out = data_synth::apply_domain_shift(&img, &[1.0], &shift, &mut Rng::seed_from(1));
    let want = 0.2 * (-1.0f64).exp() + 0.8 * (1.0 - (-1.0f64).exp());
    ok &= check(
        "fog pixel 0.2 @ beta 1, depth 1, A 0.8",
        (out.data[0] as f64 - want).abs() < 1e-6 + 0.5 / 255.0,
        format!("{} vs {want:.6}", out.data[0]),
    );

    // AP envelope = 5/6.
    let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2).unwrap();
    ok &= check("AP of (TP,FP,TP) over 2 GT = 5/6", (ap - 5.0 / 6.0).abs() < TOL, format!("{ap}"));

    // Supporting closed forms from the remaining modules.
    let v = iou(
        &BBox::new(0.0, 0.0, 2.0, 2.0).unwrap(),
        &BBox::new(1.0, 1.0, 3.0, 3.0).unwrap(),
    );
    ok &= check("iou unit-overlap case = 1/7", (v - 1.0 / 7.0).abs() < TOL, format!("{v}"));
    let off = decode_dfl(&[1.0 / 9.0; 9], 8.0).unwrap();
    ok &= check("dfl expectation of uniform 9 bins @ stride 8 = 32", (off - 32.0).abs() < TOL, format!("{off}"));
    let neg_cfg = DetectorConfig::default();
    let neg_anchors = build_anchors(&neg_cfg);
    let bins = neg_cfg.bins();
    let n = neg_anchors.len();
    let mut reg = vec![0.0; n * 4 * bins];
    for ai in 0..n {
        reg[(ai * 4) * bins] = 600.0;
        for side in 1..4 {
            reg[(ai * 4 + side) * bins + 5] = 600.0;
        }
    }
    let neg_grid =
        DecodedGrid::from_logits(&neg_cfg, &neg_anchors, vec![0.0; n * 3], reg);
    let mut rows = vec![0.0; 4 * bins];
    rows[8] = 1.0;
    for side in 1..4 {
        rows[side * bins + 5] = 1.0;
    }
    let mut neg_det = Detection::new(BBox::new(8.0, 8.0, 16.0, 16.0).unwrap(), 0, 0.05).unwrap();
    neg_det.box_distribution =
        Some(shiftdet::core::BoxDistribution::new(0, bins, rows).unwrap());
    let (l_ng, _, _) = negative_box_loss(&neg_cfg, &neg_grid, &[neg_det]).unwrap();
    ok &= check(
        "negative-tier JS, one side flipped = ln 2 / 4",
        (l_ng - LN_2 / 4.0).abs() < TOL,
        format!("{l_ng}"),
    );
    // EMA scalar formula.
    let mut t = ParamSet::new();
    t.register("w", Tensor { shape: vec![1], data: vec![1.0] });
    let mut s = ParamSet::new();
    s.register("w", Tensor { shape: vec![1], data: vec![0.0] });
    ema_update(&mut t, &s, 0.9).unwrap();
    ok &= check(
        "ema(1.0, 0.0; alpha .9) = 0.9",
        (t.get(ParamId(0)).data[0] as f64 - 0.9).abs() < 1e-7,
        format!("{}", t.get(ParamId(0)).data[0]),
    );
    // Gain ratio formula.
    let mut g = GainState::new(0.0, 1.0, 1, 0.5, 4.0).unwrap();
    update_gain(&mut g, 0.5);
    update_gain(&mut g, 0.25);
    ok &= check("gain ratio 0.5/0.25 with alpha 0 = 2", (g.gain - 2.0).abs() < TOL, format!("{}", g.gain));

    assert!(ok, "criterion 1 failed");
}

/// Criterion 2: brute-force equivalence for ca_loss, NMS, and matching.
#[test]
fn criterion_2_brute_force_equivalence() {
    let mut ok = true;
    // ca_loss against a scalar double-loop oracle: 20 random configurations.
    let cfg = CAConfig::default();
    let mut rng = Rng::seed_from(0xca);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let dim = 3 + rng.below(5);
        let mk = |rng: &mut Rng, domain| {
            inst(
                (0..dim).map(|_| rng.range(-1.0, 1.0)).collect(),
                rng.uniform(),
                rng.below(3),
                domain,
            )
        };
        let q = queue_of((0..1 + rng.below(6)).map(|_| mk(&mut rng, DomainTag::Source)).collect());
        let batch: Vec<InstanceFeature> = (0..1 + rng.below(5))
            .map(|_| mk(&mut rng, DomainTag::Target))
            .collect();
        let tau = rng.range(0.5, 2.5);
        let (got, _, _) = ca_loss(&batch, &q, &cfg, tau);
        let mut want = 0.0;
        for qi in q.entries() {
            for bj in &batch {
                let w = 1.0
                    - qi.confidence.powf(cfg.alpha / 2.0) * bj.confidence.powf(cfg.beta / 2.0);
                let dot: f64 = qi.feature.iter().zip(&bj.feature).map(|(a, b)| a * b).sum();
                let m = if qi.category == bj.category { 1.0 } else { -1.0 };
                want -= w * (1.0 / (1.0 + (-dot * m * tau).exp())).ln();
            }
        }
        want /= q.len() as f64;
        worst = worst.max((got - want).abs());
    }
    ok &= check(
        "ca_loss equals pairwise double-loop oracle on 20 configs",
        worst < TOL,
        format!("max |delta| {worst:.2e}"),
    );

    // NMS and greedy matching against exhaustive oracles on 50 instances.
    let mut rng = Rng::seed_from(0x9a);
    let mut nms_agree = true;
    let mut match_agree = true;
    for _ in 0..50 {
        let n = 5 + rng.below(6);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let x = rng.range(0.0, 40.0);
                let y = rng.range(0.0, 40.0);
                Detection::new(
                    BBox::new(x, y, x + rng.range(6.0, 22.0), y + rng.range(6.0, 22.0)).unwrap(),
                    rng.below(3),
                    rng.uniform(),
                )
                .unwrap()
            })
            .collect();
        // Exhaustive suppression oracle.
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&i, &j| {
            dets[j]
                .confidence
                .partial_cmp(&dets[i].confidence)
                .unwrap()
                .then(dets[i].category.cmp(&dets[j].category))
                .then(dets[i].bbox.x1.partial_cmp(&dets[j].bbox.x1).unwrap())
                .then(dets[i].bbox.y1.partial_cmp(&dets[j].bbox.y1).unwrap())
                .then(dets[i].bbox.x2.partial_cmp(&dets[j].bbox.x2).unwrap())
                .then(dets[i].bbox.y2.partial_cmp(&dets[j].bbox.y2).unwrap())
        });
        let mut keep: Vec<usize> = Vec::new();
        for &i in &order {
            if keep.iter().all(|&k| {
                dets[k].category != dets[i].category
                    || iou(&dets[k].bbox, &dets[i].bbox) <= 0.5
            }) {
                keep.push(i);
            }
        }
        let got = nms(&dets, 0.5);
        if got.len() != keep.len()
            || !keep
                .iter()
                .zip(&got)
                .all(|(&k, g)| dets[k].bbox == g.bbox && dets[k].confidence == g.confidence)
        {
            nms_agree = false;
        }

        // Matching oracle.
        let gts: Vec<LabeledBox> = (0..1 + rng.below(5))
            .map(|_| {
                let x = rng.range(0.0, 40.0);
                let y = rng.range(0.0, 40.0);
                LabeledBox {
                    bbox: BBox::new(x, y, x + rng.range(6.0, 22.0), y + rng.range(6.0, 22.0))
                        .unwrap(),
                    category: rng.below(3),
                }
            })
            .collect();
        let flags = shiftdet::eval::match_predictions(&dets, &gts, 0.5);
        let mut used = vec![false; gts.len()];
        let mut want = vec![false; dets.len()];
        for &pi in &order {
            let mut best: Option<(f64, usize)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if used[gi] || g.category != dets[pi].category {
                    continue;
                }
                let v = iou(&g.bbox, &dets[pi].bbox);
                if v >= 0.5 && best.map_or(true, |(bv, _)| v > bv) {
                    best = Some((v, gi));
                }
            }
            if let Some((_, gi)) = best {
                used[gi] = true;
                want[pi] = true;
            }
        }
        if flags != want {
            match_agree = false;
        }
    }
    ok &= check("nms equals exhaustive oracle on 50 instances", nms_agree, String::new());
    ok &= check("matching equals exhaustive oracle on 50 instances", match_agree, String::new());
    assert!(ok, "criterion 2 failed");
}

fn fd_close(an: &[f64], fd: &[f64], rel: f64) -> (bool, f64) {
    let mut worst = 0.0f64;
    for (a, f) in an.iter().zip(fd) {
        let scale = f.abs().max(1e-6);
        let e = (a - f).abs() / scale;
        if (a - f).abs() > 1e-9 {
            worst = worst.max(e);
        }
    }
    (worst <= rel, worst)
}

/// Criterion 3: analytic gradients vs central finite differences at f64.
#[test]
fn criterion_3_gradient_suite() {
    let mut ok = true;
    let cfg = DetectorConfig {
        num_classes: 2,
        reg_max: 3,
        ..Default::default()
    };
    let anchors = vec![
        Anchor {
            level: 0,
            iy: 0,
            ix: 0,
            stride: 8.0,
            cx: 4.0,
            cy: 4.0,
        },
        Anchor {
            level: 0,
            iy: 0,
            ix: 1,
            stride: 8.0,
            cx: 12.0,
            cy: 4.0,
        },
    ];
    let mut rng = Rng::seed_from(33);
    let cls: Vec<f64> = (0..anchors.len() * 2).map(|_| rng.range(-2.0, 2.0)).collect();
    let reg: Vec<f64> = (0..anchors.len() * 16).map(|_| rng.range(-1.5, 1.5)).collect();
    let grid = DecodedGrid::from_logits(&cfg, &anchors, cls.clone(), reg.clone());
    let gts = vec![LabeledBox {
        bbox: BBox::new(1.0, 1.0, 9.0, 7.0).unwrap(),
        category: 1,
    }];
    let asn = assign(&anchors, &grid, &gts, &AssignConfig::default());
    let weights = LossWeights::default();

    let eval_sup = |cls: &[f64], reg: &[f64]| {
        let g = DecodedGrid::from_logits(&cfg, &anchors, cls.to_vec(), reg.to_vec());
        let ctx = ImageLossCtx {
            grid: &g,
            assignment: &asn,
            gts: &gts,
            domain: DomainTag::Source,
        };
        supervised_loss(&cfg, &anchors, &[ctx], &weights, ClsTargetMode::IouSoft)
            .unwrap()
            .0
    };
    let ctx = ImageLossCtx {
        grid: &grid,
        assignment: &asn,
        gts: &gts,
        domain: DomainTag::Source,
    };
    let (_, sup_grads, _) =
        supervised_loss(&cfg, &anchors, &[ctx], &weights, ClsTargetMode::IouSoft).unwrap();
    let h = 1e-5;
    let fd_of = |f: &dyn Fn(&[f64], &[f64]) -> f64| {
        let mut d_cls = vec![0.0; cls.len()];
        for i in 0..cls.len() {
            let mut up = cls.clone();
            up[i] += h;
            let mut dn = cls.clone();
            dn[i] -= h;
            d_cls[i] = (f(&up, &reg) - f(&dn, &reg)) / (2.0 * h);
        }
        let mut d_reg = vec![0.0; reg.len()];
        for i in 0..reg.len() {
            let mut up = reg.clone();
            up[i] += h;
            let mut dn = reg.clone();
            dn[i] -= h;
            d_reg[i] = (f(&cls, &up) - f(&cls, &dn)) / (2.0 * h);
        }
        (d_cls, d_reg)
    };
    let (fd_cls, fd_reg) = fd_of(&eval_sup);
    let (pass_c, wc) = fd_close(&sup_grads[0].d_cls, &fd_cls, 1e-4);
    let (pass_r, wr) = fd_close(&sup_grads[0].d_reg, &fd_reg, 1e-4);
    ok &= check(
        "supervised-loss gradients match finite differences",
        pass_c && pass_r,
        format!("worst rel err cls {wc:.2e}, reg {wr:.2e}"),
    );

    // Tiered classification term.
    let tiered = vec![TieredBox {
        lbox: gts[0],
        tier: Tier::Uncertain,
        teacher_conf: 0.55,
    }];
    let eval_unc = |cls: &[f64], reg: &[f64]| {
        let g = DecodedGrid::from_logits(&cfg, &anchors, cls.to_vec(), reg.to_vec());
        uncertain_cls_loss(&g, &asn, &tiered).0
    };
    let (an_unc_l, an_unc) = uncertain_cls_loss(&grid, &asn, &tiered);
    assert!(an_unc_l.is_finite());
    let (fd_unc, _) = fd_of(&eval_unc);
    let (pass_u, wu) = fd_close(&an_unc, &fd_unc, 1e-4);
    ok &= check(
        "uncertain-tier classification gradient matches",
        pass_u,
        format!("worst rel err {wu:.2e}"),
    );

    // Negative-tier JS term.
    let mut rows = vec![0.0; 4 * cfg.bins()];
    for side in 0..4 {
        rows[side * cfg.bins()] = 0.3;
        rows[side * cfg.bins() + 2] = 0.7;
    }
    let mut neg = Detection::new(BBox::new(1.0, 1.0, 7.0, 7.0).unwrap(), 0, 0.05).unwrap();
    neg.box_distribution = Some(shiftdet::core::BoxDistribution::new(0, cfg.bins(), rows).unwrap());
    let negs = vec![neg];
    let eval_ng = |cls: &[f64], reg: &[f64]| {
        let g = DecodedGrid::from_logits(&cfg, &anchors, cls.to_vec(), reg.to_vec());
        negative_box_loss(&cfg, &g, &negs).unwrap().0
    };
    let (_, an_ng, _) = negative_box_loss(&cfg, &grid, &negs).unwrap();
    let (_, fd_ng) = fd_of(&eval_ng);
    let (pass_n, wn) = fd_close(&an_ng, &fd_ng, 1e-4);
    ok &= check(
        "negative-tier JS gradient matches",
        pass_n,
        format!("worst rel err {wn:.2e}"),
    );

    // Contrastive loss gradient (batch features and temperature).
    let ca_cfg = CAConfig::default();
    let mut rng = Rng::seed_from(0xfd);
    let mk = |rng: &mut Rng, domain| {
        inst(
            (0..4).map(|_| rng.range(-1.0, 1.0)).collect(),
            rng.range(0.1, 0.9),
            rng.below(3),
            domain,
        )
    };
    let q = queue_of((0..3).map(|_| mk(&mut rng, DomainTag::Source)).collect());
    let batch: Vec<InstanceFeature> = (0..2).map(|_| mk(&mut rng, DomainTag::Target)).collect();
    let tau = 1.2;
    let (_, d_batch, d_tau) = ca_loss(&batch, &q, &ca_cfg, tau);
    let hh = 1e-6;
    let mut worst_ca = 0.0f64;
    let mut pass_ca = true;
    for j in 0..batch.len() {
        for k in 0..4 {
            let mut up = batch.clone();
            up[j].feature[k] += hh;
            let mut dn = batch.clone();
            dn[j].feature[k] -= hh;
            let fd = (ca_loss(&up, &q, &ca_cfg, tau).0 - ca_loss(&dn, &q, &ca_cfg, tau).0)
                / (2.0 * hh);
            let an = d_batch[j][k];
            let rel = (fd - an).abs() / an.abs().max(1e-6);
            if (fd - an).abs() > 1e-9 {
                worst_ca = worst_ca.max(rel);
                pass_ca &= rel <= 1e-4;
            }
        }
    }
    let fd_tau = (ca_loss(&batch, &q, &ca_cfg, tau + hh).0
        - ca_loss(&batch, &q, &ca_cfg, tau - hh).0)
        / (2.0 * hh);
    pass_ca &= (fd_tau - d_tau).abs() / d_tau.abs().max(1e-6) <= 1e-4;
    ok &= check(
        "contrastive-loss gradients (features, temperature) match",
        pass_ca,
        format!("worst rel err {worst_ca:.2e}"),
    );

    // GRL backward: exactly -lambda times the upstream gradient.
    let upstream = [2.0];
    let reversed = grl_backward(&upstream, 0.1);
    let identity = grl_forward(&[7.25]);
    ok &= check(
        "grl forward identity, backward -lambda * upstream",
        (reversed[0] + 0.2).abs() < 1e-12 && identity[0] == 7.25,
        format!("{}", reversed[0]),
    );
    assert!(ok, "criterion 3 failed");
}

/// Criterion 4: structural invariants.
#[test]
fn criterion_4_structural_invariants() {
    let mut ok = true;

    // EMA exactness for alpha in {0, 0.5, 1}.
    let mut rng = Rng::seed_from(0xe);
    let mut teacher = ParamSet::new();
    let mut student = ParamSet::new();
    let data_t: Vec<f32> = (0..64).map(|_| rng.range(-2.0, 2.0) as f32).collect();
    let data_s: Vec<f32> = (0..64).map(|_| rng.range(-2.0, 2.0) as f32).collect();
    teacher.register("w", Tensor { shape: vec![64], data: data_t.clone() });
    student.register("w", Tensor { shape: vec![64], data: data_s.clone() });
    let mut exact = true;
    for alpha in [0.0, 0.5, 1.0] {
        let mut t = teacher.clone();
        ema_update(&mut t, &student, alpha).unwrap();
        for i in 0..64 {
            let want = (alpha * data_t[i] as f64 + (1.0 - alpha) * data_s[i] as f64) as f32;
            if t.get(ParamId(0)).data[i] != want {
                exact = false;
            }
        }
    }
    ok &= check("EMA exact at alpha in {0, 0.5, 1}", exact, String::new());

    // Teacher untouched by the optimizer: with decay 1 the teacher hash is
    // invariant across adaptation steps that update the student.
    {
        let mut cfg = shiftdet::teacher_student::TrainerConfig::default();
        cfg.detector.resolution = (64, 64);
        cfg.batch_size = 2;
        cfg.burn_in_steps = 1;
        cfg.adapt_steps = 3;
        cfg.ema_decay = 1.0;
        cfg.gain_warmup = 1;
        let mut tr = shiftdet::teacher_student::Trainer::new(cfg).unwrap();
        let spec = data_synth::SceneSpec {
            canvas: 64,
            size_min: 14.0,
            size_max: 26.0,
            ..Default::default()
        };
        let (img, labels, _) = data_synth::generate_scene(1, &spec);
        tr.burn_in_step(&[(img.clone(), labels.clone())]).unwrap();
        tr.finish_burn_in();
        let teacher_hash = tr.teacher.fingerprint();
        let student_hash_before = tr.student.fingerprint();
        for s in 0..2 {
            let (t_img, _, _) = data_synth::generate_scene(10 + s, &spec);
            tr.train_step(&[(img.clone(), labels.clone())], &[t_img]).unwrap();
        }
        ok &= check(
            "optimizer never touches teacher weights (hash check)",
            tr.teacher.fingerprint() == teacher_hash
                && tr.student.fingerprint() != student_hash_before,
            String::new(),
        );
    }

    // Queue FIFO, capacity, and key isolation.
    {
        let mut qs = QueueSet::new(3);
        let mk = |v: f64, cat: usize| inst(vec![v, 1.0], 0.4, cat, DomainTag::Target);
        for i in 0..5 {
            qs.update(vec![{
                let mut it = mk(i as f64 + 1.0, 0);
                it.domain = DomainTag::Target;
                it.stage = Stage::Head;
                it.level = 1;
                it
            }])
            .unwrap();
        }
        let q = qs.get(QueueKey {
            domain: DomainTag::Target,
            stage: Stage::Head,
            level: 1,
        });
        let firsts: Vec<f64> = q.entries().map(|e| e.feature[0]).collect();
        let fifo_ok = q.len() == 3 && firsts.windows(2).all(|w| w[0] < w[1]);
        let isolated = qs.iter().filter(|q| !q.is_empty()).count() == 1;
        let mismatch = qs
            .get_mut(QueueKey {
                domain: DomainTag::Source,
                stage: Stage::Head,
                level: 1,
            })
            .push(mk(9.0, 0))
            .is_err();
        ok &= check(
            "queues are FIFO, capacity-bounded, key-isolated",
            fifo_ok && isolated && mismatch,
            String::new(),
        );
    }

    // Tier partition over 10k random confidences.
    {
        let t = Thresholds::new(0.3, 0.8).unwrap();
        let mut rng = Rng::seed_from(0x71e5);
        let confs: Vec<f64> = (0..10_000).map(|_| rng.uniform()).collect();
        let dets: Vec<Detection> = confs
            .iter()
            .map(|&c| Detection::new(BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(), 0, c).unwrap())
            .collect();
        let g = grade(dets, &t);
        let partition = g.total() == 10_000
            && g.positives.iter().all(|d| d.confidence >= 0.8)
            && g.negatives.iter().all(|d| d.confidence <= 0.3)
            && g
                .uncertains
                .iter()
                .all(|d| d.confidence > 0.3 && d.confidence < 0.8);
        ok &= check("pseudo-label tiers partition 10k confidences", partition, format!(
            "pos {} unc {} neg {}",
            g.positives.len(),
            g.uncertains.len(),
            g.negatives.len()
        ));
    }

    // Gain clamp and monotone growth under decreasing divergence.
    {
        let mut st = GainState::new(0.0, 1.0, 1, 0.5, 2.0).unwrap();
        update_gain(&mut st, 1.0);
        let mut prev = st.gain;
        let mut monotone = true;
        let mut clamped = true;
        let mut d = 1.0;
        for _ in 0..30 {
            d *= 0.85;
            update_gain(&mut st, d);
            if !(0.5..=2.0).contains(&st.gain) {
                clamped = false;
            }
            if st.gain < prev - 1e-12 {
                monotone = false;
            }
            prev = st.gain;
        }
        ok &= check(
            "gain monotone under shrinking divergence and always clamped",
            monotone && clamped && (st.gain - 2.0).abs() < 1e-12,
            format!("final gain {}", st.gain),
        );
    }
    assert!(ok, "criterion 4 failed");
}

/// Criterion 6: determinism of seeded runs and dataset bytes.
#[test]
fn criterion_6_determinism() {
    let mut ok = true;

    // Two seeded adapt runs with identical configs produce identical
    // per-step loss logs.
    let run = || {
        let mut cfg = shiftdet::teacher_student::TrainerConfig::default();
        cfg.detector.resolution = (64, 64);
        cfg.batch_size = 2;
        cfg.burn_in_steps = 2;
        cfg.adapt_steps = 3;
        cfg.gain_warmup = 1;
        cfg.seed = 42;
        let mut tr = shiftdet::teacher_student::Trainer::new(cfg).unwrap();
        let spec = data_synth::SceneSpec {
            canvas: 64,
            size_min: 14.0,
            size_max: 26.0,
            ..Default::default()
        };
        let src = data_synth::SplitData {
            samples: (0..4)
                .map(|s| {
                    let (img, labels, _) = data_synth::generate_scene(s, &spec);
                    (data_synth::CompactImage::from_image(&img), Some(labels))
                })
                .collect(),
            domain: Some(DomainTag::Source),
        };
        let tgt = data_synth::SplitData {
            samples: (0..4)
                .map(|s| {
                    let (img, _, _) = data_synth::generate_scene(50 + s, &spec);
                    (data_synth::CompactImage::from_image(&img), None)
                })
                .collect(),
            domain: Some(DomainTag::Target),
        };
        let mut lines = Vec::new();
        shiftdet::teacher_student::run_burn_in(&mut tr, &src, |r| {
            lines.push(r.log_line());
            Ok(())
        })
        .unwrap();
        shiftdet::teacher_student::run_adapt(&mut tr, &src, &tgt, |r| {
            lines.push(r.log_line());
            Ok(())
        })
        .unwrap();
        lines
    };
    let a = run();
    let b = run();
    ok &= check(
        "seeded train runs emit identical per-step loss logs",
        a == b,
        format!("{} log lines", a.len()),
    );

    // Dataset generation byte-reproducible from (seed, spec).
    let base = std::env::temp_dir().join(format!("shiftdet_acc6_{}", std::process::id()));
    let spec = data_synth::SceneSpec {
        canvas: 64,
        size_min: 12.0,
        size_max: 26.0,
        ..Default::default()
    };
    let counts = data_synth::SplitCounts {
        source_train: 3,
        source_eval: 2,
        target_train: 3,
        target_eval: 2,
    };
    let mut digests = Vec::new();
    for i in 0..2 {
        let dir = base.join(format!("d{i}"));
        let _ = std::fs::remove_dir_all(&dir);
        data_synth::write_dataset(&dir, 99, &spec, &data_synth::DomainShiftSpec::default(), &counts)
            .unwrap();
        fn walk(d: &std::path::Path, out: &mut Vec<std::path::PathBuf>) {
            for e in std::fs::read_dir(d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    walk(&p, out);
                } else {
                    out.push(p);
                }
            }
        }
        let mut files = Vec::new();
        walk(&dir, &mut files);
        files.sort();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for f in files {
            for b in std::fs::read(&f).unwrap() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
        digests.push(h);
    }
    let _ = std::fs::remove_dir_all(&base);
    ok &= check(
        "dataset bytes reproducible from (seed, spec)",
        digests[0] == digests[1],
        format!("digest {:#x}", digests[0]),
    );
    assert!(ok, "criterion 6 failed");
}

// ---------------------------------------------------------------------------
// Criterion 5: desk-scale adaptation gain on the default synthetic dataset.
// ---------------------------------------------------------------------------

use shiftdet::checkpoint::Checkpoint;
use shiftdet::config::RunConfig;
use shiftdet::teacher_student::{
    evaluate_store, run_adapt, run_burn_in, Toggles, Trainer, TrainerConfig,
};

/// The known-good desk-scale training recipe. Everything else stays at the
/// documented defaults; these overrides compensate for the tiny schedule
/// (the classification term averages over all anchors, so it needs more
/// weight than the full-scale recipe) and set grading thresholds where the
/// fog-domain teacher actually operates.
fn acceptance_recipe(seed: u64) -> TrainerConfig {
    let mut rc = RunConfig::default();
    rc.seed = seed;
    rc.batch_size = 8;
    rc.w_cls = 40.0;
    rc.min_lr_frac = 0.1;
    rc.p_low = 0.15;
    rc.p_high = 0.4;
    rc.burn_in_steps = 300;
    rc.adapt_steps = 150;
    rc.trainer_config().unwrap()
}

fn with_toggles(mut cfg: TrainerConfig, toggles: Toggles) -> TrainerConfig {
    cfg.toggles = toggles;
    cfg
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

#[test]
fn criterion_5_desk_scale_adaptation_gain() {
    let mut ok = true;
    let data_dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_data");
    let rc = RunConfig::default();
    if !data_dir.join("manifest.txt").exists() {
        let t = std::time::Instant::now();
        data_synth::write_dataset(
            &data_dir,
            rc.data_seed,
            &rc.scene_spec(),
            &rc.shift_spec(),
            &rc.split_counts(),
        )
        .unwrap();
        println!(
            "[info] default dataset generated in {:.0}s",
            t.elapsed().as_secs_f64()
        );
    }
    let (canvas, entries) = data_synth::read_manifest(&data_dir).unwrap();
    let load = |domain, split| {
        data_synth::load_split(&data_dir, canvas, &entries, domain, split).unwrap()
    };
    let src_train = load(DomainTag::Source, data_synth::Split::Train);
    let src_eval = load(DomainTag::Source, data_synth::Split::Eval);
    let tgt_train = load(DomainTag::Target, data_synth::Split::Train);
    let tgt_eval = load(DomainTag::Target, data_synth::Split::Eval);
    println!(
        "[info] dataset: {}/{} source train/eval, {}/{} target train/eval",
        src_train.len(),
        src_eval.len(),
        tgt_train.len(),
        tgt_eval.len()
    );

    let ladder: [(&str, Toggles); 4] = [
        (
            "ST",
            Toggles {
                self_training: true,
                uncertainty: false,
                dynaug: false,
                adversarial: false,
                contrastive: false,
            },
        ),
        (
            "ST+UC",
            Toggles {
                self_training: true,
                uncertainty: true,
                dynaug: false,
                adversarial: false,
                contrastive: false,
            },
        ),
        (
            "ST+UC+CA",
            Toggles {
                self_training: true,
                uncertainty: true,
                dynaug: false,
                adversarial: false,
                contrastive: true,
            },
        ),
        ("FULL", Toggles::all_on()),
    ];

    let seeds = [0u64, 1, 2];
    let mut gaps = Vec::new();
    let mut source_only_tgt = Vec::new();
    let mut ladder_maps: Vec<Vec<f64>> = vec![Vec::new(); ladder.len()];

    for (si, &seed) in seeds.iter().enumerate() {
        let t = std::time::Instant::now();
        let mut trainer = Trainer::new(acceptance_recipe(seed)).unwrap();
        let mut first_losses = Vec::new();
        let mut last_losses = Vec::new();
        let total_burn = trainer.cfg.burn_in_steps as u64;
        run_burn_in(&mut trainer, &src_train, |r| {
            if r.step < 20 {
                first_losses.push(r.l_sup);
            }
            if r.step + 20 >= total_burn {
                last_losses.push(r.l_sup);
            }
            Ok(())
        })
        .unwrap();
        let early: f64 = first_losses.iter().sum::<f64>() / first_losses.len() as f64;
        let late: f64 = last_losses.iter().sum::<f64>() / last_losses.len() as f64;
        if si == 0 {
            ok &= check(
                "supervised loss decreases over burn-in (held-out oracle: first vs last 20 steps)",
                late < early,
                format!("{early:.3} -> {late:.3}"),
            );
            // A trained model keeps blank frames near-empty.
            let blank = ImageBuf::filled(canvas, canvas, [0.5, 0.5, 0.5]);
            let dets = trainer.generate_pseudo_labels(&[blank]).unwrap();
            let confident = dets[0].iter().filter(|d| d.confidence >= 0.4).count();
            ok &= check(
                "blank image after burn-in yields a near-empty confident set",
                confident <= 2,
                format!("{confident} detections at conf >= 0.4"),
            );
        }
        let src_map = evaluate_store(&trainer, &trainer.student, &src_eval)
            .unwrap()
            .map50;
        let tgt_map = evaluate_store(&trainer, &trainer.student, &tgt_eval)
            .unwrap()
            .map50;
        gaps.push((src_map - tgt_map) * 100.0);
        source_only_tgt.push(tgt_map * 100.0);
        println!(
            "[info] seed {seed}: burn-in {:.0}s, source mAP {:.3}, target mAP {:.3} (gap {:.1})",
            t.elapsed().as_secs_f64(),
            src_map,
            tgt_map,
            (src_map - tgt_map) * 100.0
        );
        let base = trainer.to_checkpoint();
        for (li, (name, toggles)) in ladder.iter().enumerate() {
            let t = std::time::Instant::now();
            let cfg = with_toggles(acceptance_recipe(seed), *toggles);
            let ck = Checkpoint {
                student: base.student.clone(),
                teacher: base.teacher.clone(),
                vel_student: base.vel_student.clone(),
                aux: base.aux.clone(),
                vel_aux: base.vel_aux.clone(),
                ..base.clone()
            };
            let mut adapted = Trainer::from_checkpoint(cfg, ck).unwrap();
            run_adapt(&mut adapted, &src_train, &tgt_train, |_| Ok(())).unwrap();
            let m = evaluate_store(&adapted, &adapted.teacher, &tgt_eval)
                .unwrap()
                .map50
                * 100.0;
            ladder_maps[li].push(m);
            println!(
                "[info] seed {seed} {name}: teacher target mAP {:.1} ({:.0}s)",
                m,
                t.elapsed().as_secs_f64()
            );
        }
    }

    let gap_med = median(&mut gaps.clone());
    ok &= check(
        "criterion 5a: source-only domain gap >= 15 mAP points (median of 3 seeds)",
        gap_med >= 15.0,
        format!("gaps {gaps:.1?}, median {gap_med:.1}"),
    );
    let base_med = median(&mut source_only_tgt.clone());
    let full_med = median(&mut ladder_maps[3].clone());
    ok &= check(
        "criterion 5b: full adaptation beats source-only target mAP by >= 5 points (median)",
        full_med - base_med >= 5.0,
        format!(
            "source-only {base_med:.1}, full {full_med:.1} ({:+.1})",
            full_med - base_med
        ),
    );
    let st_med = median(&mut ladder_maps[0].clone());
    let uc_med = median(&mut ladder_maps[1].clone());
    let ca_med = median(&mut ladder_maps[2].clone());
    ok &= check(
        "criterion 5c: ablation medians non-decreasing ST -> +UC -> +CA",
        st_med <= uc_med && uc_med <= ca_med,
        format!(
            "ST {st_med:.1} (runs {:.1?}), +UC {uc_med:.1} ({:.1?}), +CA {ca_med:.1} ({:.1?})",
            ladder_maps[0], ladder_maps[1], ladder_maps[2]
        ),
    );
    assert!(ok, "criterion 5 failed");
}

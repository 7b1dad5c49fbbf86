use shiftdet::checkpoint;
use shiftdet::config::RunConfig;
use shiftdet::core::DomainTag;
use shiftdet::data_synth::{self, Split};
use shiftdet::eval::evaluate_detections;
use shiftdet::teacher_student::{evaluate_store, run_adapt_span, SampleStore, Trainer};

fn main() {
    let dir = std::path::PathBuf::from(std::env::var("DIAG_DIR").unwrap_or_else(|_| "/tmp/probe_ds".into()));
    let mut cfg = RunConfig::default();
    cfg.source_train = 200; cfg.source_eval = 50; cfg.target_train = 200; cfg.target_eval = 50;
    cfg.batch_size = 8; cfg.w_cls = 40.0; cfg.min_lr_frac = 0.1; cfg.burn_in_steps = 300;
    cfg.p_low = 0.15; cfg.p_high = 0.4; cfg.ema_decay = 0.99;
    cfg.adapt_steps = 200;
    cfg.enable_self_training = true; cfg.enable_uncertainty = true;
    cfg.enable_dynaug = false; cfg.enable_adversarial = false; cfg.enable_contrastive = false;
    if let Ok(v) = std::env::var("DIAG_EMA") { cfg.ema_decay = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("DIAG_LR") { cfg.adapt_lr = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("DIAG_PH") { cfg.p_high = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("DIAG_WIOU") { cfg.distill_w_iou = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("DIAG_WDFL") { cfg.distill_w_dfl = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("DIAG_LDISTILL") { cfg.lambda_distill = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("DIAG_STEPS") { cfg.adapt_steps = v.parse().unwrap(); }
    if std::env::var("DIAG_AUG").as_deref() == Ok("wide") {
        cfg.brightness = 0.3; cfg.contrast = 0.4; cfg.saturation = 0.4; cfg.aug_noise = 0.05;
    }
    cfg.p_high = 0.55;
    cfg.adapt_lr = 0.005;
    if let Ok(v) = std::env::var("DIAG_PH2") { cfg.p_high = v.parse().unwrap(); }

    let (canvas, entries) = data_synth::read_manifest(&dir).unwrap();
    let src_train = data_synth::load_split(&dir, canvas, &entries, DomainTag::Source, Split::Train).unwrap();
    let src_eval = data_synth::load_split(&dir, canvas, &entries, DomainTag::Source, Split::Eval).unwrap();
    let tgt_train = data_synth::load_split(&dir, canvas, &entries, DomainTag::Target, Split::Train).unwrap();
    let tgt_eval = data_synth::load_split(&dir, canvas, &entries, DomainTag::Target, Split::Eval).unwrap();

    let tcfg = cfg.trainer_config().unwrap();
    let gain = shiftdet::dynaug::GainState::new(tcfg.gain_alpha, tcfg.gain_gamma, tcfg.gain_warmup, tcfg.gain_min, tcfg.gain_max).unwrap();
    let ckpt_path = std::env::var("DIAG_CKPT").unwrap_or_else(|_| "/tmp/probe_burnin.bin".into());
    let ck = checkpoint::load(std::path::Path::new(&ckpt_path), tcfg.detector.config_hash(), &gain).unwrap();
    let mut tr = Trainer::from_checkpoint(tcfg, ck).unwrap();

    let pseudo_quality = |tr: &Trainer| {
        // Pseudo-label precision at the positive threshold on held-out target.
        let mut per_image = Vec::new();
        for i in 0..tgt_eval.len() {
            let (img, labels) = tgt_eval.fetch(i);
            let dets = tr.generate_pseudo_labels(&[img]).unwrap().remove(0);
            let pos: Vec<_> = dets.into_iter().filter(|d| d.confidence >= tr.cfg.thresholds.p_h).collect();
            per_image.push((pos, labels.unwrap()));
        }
        let n_pos: usize = per_image.iter().map(|(p, _)| p.len()).sum();
        let r = evaluate_detections(&per_image, 3, 0.5);
        let tp: usize = r.per_class.iter().map(|c| c.tp).sum();
        let gt: usize = r.per_class.iter().map(|c| c.num_gt).sum();
        (n_pos, tp, gt)
    };

    let (n0, tp0, gt0) = pseudo_quality(&tr);
    println!("step 0: pseudo-positives {n0} (tp {tp0} / gt {gt0})");
    let mut next_probe = 0u64;
    let total = tr.cfg.adapt_steps as u64;
    while tr.step < total {
        let until = (next_probe + 25).min(total);
        run_adapt_span(&mut tr, &src_train, &tgt_train, until, |_| Ok(())).unwrap();
        next_probe = until;
        let t_tgt = evaluate_store(&tr, &tr.teacher, &tgt_eval).unwrap().map50;
        let s_src = evaluate_store(&tr, &tr.student, &src_eval).unwrap().map50;
        let (np, tp, gt) = pseudo_quality(&tr);
        println!("step {:>3}: teacher_tgt={:.4} student_src={:.4} pseudo_pos={np} (tp {tp}/gt {gt})",
            tr.step, t_tgt, s_src);
    }
}

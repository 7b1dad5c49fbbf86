use shiftdet::checkpoint;
use shiftdet::config::RunConfig;
use shiftdet::core::DomainTag;
use shiftdet::data_synth::{self, Split};
use shiftdet::teacher_student::{evaluate_store, run_adapt, run_burn_in, Trainer};
use std::time::Instant;

fn main() {
    let dir = std::path::PathBuf::from(
        std::env::var("PROBE_DIR").unwrap_or_else(|_| "/tmp/probe_ds".into()));
    let mut cfg = RunConfig::default();
    if std::env::var("PROBE_BIG").as_deref() == Ok("1") {
        // acceptance-scale dataset (the RunConfig defaults)
    } else {
        cfg.source_train = 200;
        cfg.source_eval = 50;
        cfg.target_train = 200;
        cfg.target_eval = 50;
    }
    cfg.burn_in_steps = 300;
    cfg.adapt_steps = 150;
    cfg.batch_size = 8;
    cfg.w_cls = 40.0;
    cfg.min_lr_frac = 0.1;
    cfg.p_low = 0.15;
    cfg.p_high = 0.55;
    cfg.adapt_lr = 0.005;
    cfg.harvest_floor = 0.25;
    cfg.lambda_ca = 0.02;
    cfg.lambda_adv = 0.05;
    cfg.ema_decay = 0.99;
    if let Ok(v) = std::env::var("PROBE_EMA") { cfg.ema_decay = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("PROBE_FLOOR") { cfg.harvest_floor = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("PROBE_SEED") { cfg.seed = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("PROBE_LR") { cfg.adapt_lr = v.parse().unwrap(); }
    if std::env::var("PROBE_AUG").as_deref() == Ok("wide") {
        cfg.brightness = 0.3;
        cfg.contrast = 0.4;
        cfg.saturation = 0.4;
        cfg.aug_noise = 0.05;
    }
    if let Ok(v) = std::env::var("PROBE_LDISTILL") { cfg.lambda_distill = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("PROBE_CKPT") { /* named burn-in cache */
        let _ = v; }
    let ckpt_path = std::path::PathBuf::from(
        std::env::var("PROBE_CKPT").unwrap_or_else(|_| "/tmp/probe_burnin.bin".into()));
    if let Ok(v) = std::env::var("PROBE_ADAPT") { cfg.adapt_steps = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("PROBE_LCA") { cfg.lambda_ca = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("PROBE_PH") { cfg.p_high = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("PROBE_LADV") { cfg.lambda_adv = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("PROBE_LDIST") { cfg.lambda_distill = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("PROBE_SETTING") {
        // st | uc | ca | full | none
        cfg.enable_self_training = true;
        cfg.enable_uncertainty = false;
        cfg.enable_dynaug = false;
        cfg.enable_adversarial = false;
        cfg.enable_contrastive = false;
        match v.as_str() {
            "st" => {}
            "uc" => { cfg.enable_uncertainty = true; }
            "ca" => { cfg.enable_uncertainty = true; cfg.enable_contrastive = true; }
            "full" => { cfg.enable_uncertainty = true; cfg.enable_dynaug = true; cfg.enable_adversarial = true; cfg.enable_contrastive = true; }
            _ => {}
        }
    }

    if !dir.join("manifest.txt").exists() {
        let t = Instant::now();
        data_synth::write_dataset(&dir, cfg.data_seed, &cfg.scene_spec(), &cfg.shift_spec(), &cfg.split_counts()).unwrap();
        println!("dataset gen: {:.1}s", t.elapsed().as_secs_f64());
    }
    let (canvas, entries) = data_synth::read_manifest(&dir).unwrap();
    let src_train = data_synth::load_split(&dir, canvas, &entries, DomainTag::Source, Split::Train).unwrap();
    let src_eval = data_synth::load_split(&dir, canvas, &entries, DomainTag::Source, Split::Eval).unwrap();
    let tgt_train = data_synth::load_split(&dir, canvas, &entries, DomainTag::Target, Split::Train).unwrap();
    let tgt_eval = data_synth::load_split(&dir, canvas, &entries, DomainTag::Target, Split::Eval).unwrap();

    let tcfg = cfg.trainer_config().unwrap();
    let mut trainer = if ckpt_path.exists() {
        let gain = shiftdet::dynaug::GainState::new(tcfg.gain_alpha, tcfg.gain_gamma, tcfg.gain_warmup, tcfg.gain_min, tcfg.gain_max).unwrap();
        let ck = checkpoint::load(&ckpt_path, tcfg.detector.config_hash(), &gain).unwrap();
        println!("loaded burn-in checkpoint (step {})", ck.step);
        Trainer::from_checkpoint(tcfg, ck).unwrap()
    } else {
        let mut tr = Trainer::new(tcfg).unwrap();
        let t = Instant::now();
        run_burn_in(&mut tr, &src_train, |r| {
            if r.step % 50 == 0 { println!("{}", r.log_line()); }
            Ok(())
        }).unwrap();
        println!("burn-in {} steps: {:.1}s", tr.cfg.burn_in_steps, t.elapsed().as_secs_f64());
        checkpoint::save(&ckpt_path, &tr.to_checkpoint()).unwrap();
        tr
    };

    let src_map = evaluate_store(&trainer, &trainer.student, &src_eval).unwrap().map50;
    let tgt_map0 = evaluate_store(&trainer, &trainer.student, &tgt_eval).unwrap().map50;
    println!("burn-in student: source mAP={:.4} target mAP={:.4} gap={:.1} pts", src_map, tgt_map0, (src_map-tgt_map0)*100.0);

    if trainer.cfg.adapt_steps > 0 {
        let t = Instant::now();
        run_adapt(&mut trainer, &src_train, &tgt_train, |r| {
            if r.step % 25 == 0 { println!("{}", r.log_line()); }
            Ok(())
        }).unwrap();
        println!("adapt {} steps: {:.1}s", trainer.cfg.adapt_steps, t.elapsed().as_secs_f64());
        let tgt_map_teacher = evaluate_store(&trainer, &trainer.teacher, &tgt_eval).unwrap().map50;
        let tgt_map_student = evaluate_store(&trainer, &trainer.student, &tgt_eval).unwrap().map50;
        println!("RESULT setting={} lca={} teacher_tgt={:.4} student_tgt={:.4} gain={:+.1}pts",
            std::env::var("PROBE_SETTING").unwrap_or_else(|_| "full".into()),
            trainer.cfg.lambdas.ca, tgt_map_teacher, tgt_map_student, (tgt_map_teacher-tgt_map0)*100.0);
    }
}

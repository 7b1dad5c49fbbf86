// Headroom probe: train directly on labeled target data (labels exist on
// disk; the manifest hides them from real training). Upper-bounds what any
// adaptation method could reach on the target eval split.
use shiftdet::config::RunConfig;
use shiftdet::core::DomainTag;
use shiftdet::data_synth::{self, Split};
use shiftdet::teacher_student::{evaluate_store, run_burn_in, Trainer};

fn main() {
    let dir = std::path::PathBuf::from(
        std::env::var("PROBE_DIR").unwrap_or_else(|_| "/tmp/probe_big".into()));
    let mut cfg = RunConfig::default();
    cfg.batch_size = 8; cfg.w_cls = 40.0; cfg.min_lr_frac = 0.1; cfg.burn_in_steps = 300;
    let (canvas, entries) = data_synth::read_manifest(&dir).unwrap();
    // Load target-train WITH labels straight from disk, bypassing the manifest's NONE.
    let mut store = data_synth::SplitData { samples: vec![], domain: Some(DomainTag::Source) };
    for e in entries.iter().filter(|e| e.domain == DomainTag::Target && e.split == Split::Train) {
        let bytes = std::fs::read(dir.join(&e.image_path)).unwrap();
        let img = shiftdet::img::ImageBuf::from_ppm(&bytes).unwrap();
        let label_path = dir.join("labels/target").join(
            e.image_path.file_name().unwrap().to_str().unwrap().replace(".ppm", ".txt"));
        let labels = data_synth::parse_labels(
            &std::fs::read_to_string(&label_path).unwrap(), canvas as f64, &label_path).unwrap();
        store.samples.push((data_synth::CompactImage::from_image(&img), Some(labels)));
    }
    let tgt_eval = data_synth::load_split(&dir, canvas, &entries, DomainTag::Target, Split::Eval).unwrap();
    if let Ok(ckpt) = std::env::var("ORACLE_FROM_CKPT") {
        // Fine-tune the source burn-in weights on labeled target data: the
        // recoverable-headroom oracle for adaptation.
        cfg.burn_in_steps = 150;
        cfg.lr = 0.005;
        cfg.warmup_steps = 10;
        let tcfg = cfg.trainer_config().unwrap();
        let gain = shiftdet::dynaug::GainState::new(tcfg.gain_alpha, tcfg.gain_gamma, tcfg.gain_warmup, tcfg.gain_min, tcfg.gain_max).unwrap();
        let ck = shiftdet::checkpoint::load(std::path::Path::new(&ckpt), tcfg.detector.config_hash(), &gain).unwrap();
        let mut tr = Trainer::new(tcfg).unwrap();
        tr.student = ck.student.clone();
        tr.teacher = ck.student;
        let base = evaluate_store(&tr, &tr.student, &tgt_eval).unwrap().map50;
        run_burn_in(&mut tr, &store, |r| { if r.step % 50 == 0 { println!("{}", r.log_line()); } Ok(()) }).unwrap();
        let m = evaluate_store(&tr, &tr.student, &tgt_eval).unwrap().map50;
        println!("FINETUNE-ORACLE target mAP@.5 = {m:.4} (from {base:.4}, headroom {:+.1} pts)", (m-base)*100.0);
    } else {
        let mut tr = Trainer::new(cfg.trainer_config().unwrap()).unwrap();
        run_burn_in(&mut tr, &store, |r| { if r.step % 100 == 0 { println!("{}", r.log_line()); } Ok(()) }).unwrap();
        let m = evaluate_store(&tr, &tr.student, &tgt_eval).unwrap().map50;
        println!("ORACLE target-supervised mAP@.5 = {m:.4}");
    }
}

use shiftdet::checkpoint;
use shiftdet::config::RunConfig;
use shiftdet::core::DomainTag;
use shiftdet::data_synth::{self, Split};
use shiftdet::teacher_student::{SampleStore, Trainer};

fn main() {
    let dir = std::path::PathBuf::from("/tmp/probe_ds");
    let ckpt_path = std::path::PathBuf::from("/tmp/probe_burnin.bin");
    let mut cfg = RunConfig::default();
    cfg.source_train = 200; cfg.source_eval = 50; cfg.target_train = 200; cfg.target_eval = 50;
    cfg.batch_size = 8; cfg.w_cls = 40.0; cfg.min_lr_frac = 0.1; cfg.burn_in_steps = 300;
    let tcfg = cfg.trainer_config().unwrap();
    let gain = shiftdet::dynaug::GainState::new(tcfg.gain_alpha, tcfg.gain_gamma, tcfg.gain_warmup, tcfg.gain_min, tcfg.gain_max).unwrap();
    let ck = checkpoint::load(&ckpt_path, tcfg.detector.config_hash(), &gain).unwrap();
    let trainer = Trainer::from_checkpoint(tcfg, ck).unwrap();
    let (canvas, entries) = data_synth::read_manifest(&dir).unwrap();
    for (name, domain) in [("source", DomainTag::Source), ("target", DomainTag::Target)] {
        let store = data_synth::load_split(&dir, canvas, &entries, domain, Split::Eval).unwrap();
        let mut hist = [0usize; 10];
        let mut total = 0usize;
        let mut gt_total = 0usize;
        for i in 0..store.len() {
            let (img, labels) = store.fetch(i);
            gt_total += labels.map(|l| l.len()).unwrap_or(0);
            let dets = trainer.generate_pseudo_labels(&[img]).unwrap();
            for d in &dets[0] {
                hist[((d.confidence * 10.0) as usize).min(9)] += 1;
                total += 1;
            }
        }
        println!("{name}-eval: {total} teacher detections (floor 0.05, nms 0.65), {gt_total} gt objects");
        for (b, c) in hist.iter().enumerate() {
            println!("  conf [{:.1},{:.1}): {c}", b as f64 / 10.0, (b + 1) as f64 / 10.0);
        }
    }
}

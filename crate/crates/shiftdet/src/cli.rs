//! Command-line surface: dataset generation, the two training phases,
//! evaluation, feature export, and run reporting.
//!
//! Exit codes are a stable contract: 0 success, 1 usage/configuration
//! error, 2 runtime failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::align::{extract_instances, QueueKey, QueueSet, Stage};
use crate::checkpoint::{self, Phase};
use crate::config::RunConfig;
use crate::core::DomainTag;
use crate::data_synth::{self, Split};
use crate::detector::{harvest_detections, nms, DecodedGrid};
use crate::error::{Error, Result};
use crate::teacher_student::{evaluate_store, run_adapt_span, run_burn_in_span, SampleStore, Trainer};

#[derive(Parser, Debug)]
#[command(
    name = "shiftdet",
    about = "Domain-adaptive training toolkit for a small anchor-free detector",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Configuration file (flat key-value with [sections]).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Inline overrides, e.g. --set train.batch_size=8 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.set_override(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic two-domain dataset.
    GenerateData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output dataset directory.
        #[arg(long, default_value = "data/synth")]
        out: PathBuf,
        /// Overwrite an existing non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Run one training phase.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Which phase to run.
        #[arg(long, value_parser = ["burn-in", "adapt"])]
        phase: String,
        /// Dataset directory (from generate-data).
        #[arg(long, default_value = "data/synth")]
        data: PathBuf,
        /// Run directory for logs, checkpoints and the config snapshot.
        /// Defaults to $SHIFTDET_RUN_ROOT/default.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Continue from the latest checkpoint of this phase.
        #[arg(long)]
        resume: bool,
        /// Burn-in checkpoint to start adaptation from (defaults to the one
        /// in the run directory).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Evaluate a checkpointed model on one dataset split.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long, default_value = "data/synth")]
        data: PathBuf,
        #[arg(long, value_parser = ["source", "target"])]
        domain: String,
        #[arg(long, value_parser = ["train", "eval"], default_value = "eval")]
        split: String,
        /// Which weight set to evaluate.
        #[arg(long, value_parser = ["student", "teacher"], default_value = "teacher")]
        model: String,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pool instance features over both domains and dump them as rows for
    /// offline projection.
    ExportFeatures {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data/synth")]
        data: PathBuf,
        /// Destination text table.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = ["student", "teacher"], default_value = "teacher")]
        model: String,
        /// Images sampled per domain.
        #[arg(long, default_value_t = 50)]
        per_domain: usize,
    },
    /// Summarize a run directory (loss logs, checkpoints, eval reports).
    Report {
        /// Run directory to summarize.
        #[arg(long)]
        run_dir: PathBuf,
    },
}

pub fn default_run_dir() -> PathBuf {
    let root = std::env::var("SHIFTDET_RUN_ROOT").unwrap_or_else(|_| "runs".into());
    Path::new(&root).join("default")
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { cfg, out, force } => cmd_generate_data(&cfg.resolve()?, &out, force),
        Command::Train {
            cfg,
            phase,
            data,
            run_dir,
            resume,
            from,
        } => {
            let run_dir = run_dir.unwrap_or_else(default_run_dir);
            cmd_train(&cfg.resolve()?, &phase, &data, &run_dir, resume, from.as_deref())
        }
        Command::Evaluate {
            cfg,
            checkpoint,
            data,
            domain,
            split,
            model,
            out,
        } => cmd_evaluate(
            &cfg.resolve()?,
            &checkpoint,
            &data,
            &domain,
            &split,
            &model,
            out.as_deref(),
        ),
        Command::ExportFeatures {
            cfg,
            checkpoint,
            data,
            out,
            model,
            per_domain,
        } => cmd_export_features(&cfg.resolve()?, &checkpoint, &data, &out, &model, per_domain),
        Command::Report { run_dir } => cmd_report(&run_dir),
    }
}

pub fn cmd_generate_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    if out.exists() && out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        fs::remove_dir_all(out)?;
    }
    let entries = data_synth::write_dataset(
        out,
        cfg.data_seed,
        &cfg.scene_spec(),
        &cfg.shift_spec(),
        &cfg.split_counts(),
    )?;
    // Read-back pass validates the manifest and one sample per split.
    let (canvas, read) = data_synth::read_manifest(out)?;
    if read.len() != entries.len() {
        return Err(Error::Dataset("manifest read-back count mismatch".into()));
    }
    let mut seen: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for e in &read {
        *seen.entry((e.domain.as_str(), e.split.as_str())).or_default() += 1;
    }
    for ((domain, split), count) in &seen {
        println!("{domain}/{split}: {count} samples");
    }
    for (domain, split) in [
        (DomainTag::Source, Split::Train),
        (DomainTag::Source, Split::Eval),
        (DomainTag::Target, Split::Train),
        (DomainTag::Target, Split::Eval),
    ] {
        if let Some(e) = read.iter().find(|e| e.domain == domain && e.split == split) {
            data_synth::load_sample(out, canvas, e)?;
        }
    }
    println!("dataset written to {}", out.display());
    Ok(())
}

struct LogSink {
    file: fs::File,
}

impl LogSink {
    fn open(path: &Path, append: bool) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(append)
            .truncate(!append)
            .write(true)
            .open(path)?;
        Ok(LogSink { file })
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}")?;
        self.file.flush()?;
        Ok(())
    }
}

fn load_store(
    data: &Path,
    domain: DomainTag,
    split: Split,
) -> Result<(usize, data_synth::SplitData)> {
    let (canvas, entries) = data_synth::read_manifest(data)?;
    let store = data_synth::load_split(data, canvas, &entries, domain, split)?;
    Ok((canvas, store))
}

pub fn cmd_train(
    cfg: &RunConfig,
    phase: &str,
    data: &Path,
    run_dir: &Path,
    resume: bool,
    from: Option<&Path>,
) -> Result<()> {
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("config.resolved.txt"), cfg.serialize())?;
    let tcfg = cfg.trainer_config()?;
    let ckpt_every = cfg.checkpoint_every.max(1);
    match phase {
        "burn-in" => {
            let (_, source) = load_store(data, DomainTag::Source, Split::Train)?;
            let latest = run_dir.join("ckpt_burn_in_latest.bin");
            let mut trainer = if resume && latest.exists() {
                let gain_template = crate::dynaug::GainState::new(
                    tcfg.gain_alpha,
                    tcfg.gain_gamma,
                    tcfg.gain_warmup,
                    tcfg.gain_min,
                    tcfg.gain_max,
                )?;
                let ck = checkpoint::load(&latest, tcfg.detector.config_hash(), &gain_template)?;
                if ck.phase != Phase::BurnIn {
                    return Err(Error::Config(
                        "checkpoint is past burn-in; use --phase adapt".into(),
                    ));
                }
                Trainer::from_checkpoint(tcfg, ck)?
            } else {
                Trainer::new(tcfg)?
            };
            let mut log = LogSink::open(&run_dir.join("burn_in.log"), resume)?;
            println!(
                "burn-in: {} steps, batch {}, starting at step {}",
                trainer.cfg.burn_in_steps, trainer.cfg.batch_size, trainer.step
            );
            let total = trainer.cfg.burn_in_steps as u64;
            while trainer.step < total {
                let until = (trainer.step + ckpt_every as u64).min(total);
                run_burn_in_span(&mut trainer, &source, until, |rec| {
                    log.write_line(&rec.log_line())
                })?;
                checkpoint::save(&latest, &trainer.to_checkpoint())?;
            }
            trainer.finish_burn_in();
            checkpoint::save(&run_dir.join("ckpt_burn_in.bin"), &trainer.to_checkpoint())?;
            println!(
                "burn-in complete; checkpoint at {}",
                run_dir.join("ckpt_burn_in.bin").display()
            );
            Ok(())
        }
        "adapt" => {
            let (_, source) = load_store(data, DomainTag::Source, Split::Train)?;
            let (_, target) = load_store(data, DomainTag::Target, Split::Train)?;
            let gain_template = crate::dynaug::GainState::new(
                tcfg.gain_alpha,
                tcfg.gain_gamma,
                tcfg.gain_warmup,
                tcfg.gain_min,
                tcfg.gain_max,
            )?;
            let latest = run_dir.join("ckpt_adapt_latest.bin");
            let start = if resume && latest.exists() {
                latest.clone()
            } else {
                match from {
                    Some(p) => p.to_path_buf(),
                    None => run_dir.join("ckpt_burn_in.bin"),
                }
            };
            if !start.exists() {
                return Err(Error::Config(format!(
                    "no burn-in checkpoint at {}; run `shiftdet train --phase burn-in` first",
                    start.display()
                )));
            }
            let ck = checkpoint::load(&start, tcfg.detector.config_hash(), &gain_template)?;
            if ck.phase != Phase::Adapt {
                return Err(Error::Config(
                    "checkpoint has not completed burn-in; run burn-in to completion first".into(),
                ));
            }
            let mut trainer = Trainer::from_checkpoint(tcfg, ck)?;
            let mut log = LogSink::open(&run_dir.join("adapt.log"), resume)?;
            println!(
                "adapt: {} steps, batch {} ({} per domain), starting at step {}",
                trainer.cfg.adapt_steps,
                trainer.cfg.batch_size,
                (trainer.cfg.batch_size / 2).max(1),
                trainer.step
            );
            let total = trainer.cfg.adapt_steps as u64;
            while trainer.step < total {
                let until = (trainer.step + ckpt_every as u64).min(total);
                run_adapt_span(&mut trainer, &source, &target, until, |rec| {
                    log.write_line(&rec.log_line())
                })?;
                checkpoint::save(&latest, &trainer.to_checkpoint())?;
            }
            checkpoint::save(&run_dir.join("ckpt_adapt.bin"), &trainer.to_checkpoint())?;
            println!(
                "adaptation complete; checkpoint at {}",
                run_dir.join("ckpt_adapt.bin").display()
            );
            Ok(())
        }
        other => Err(Error::Config(format!(
            "unknown phase {other:?}; expected burn-in or adapt"
        ))),
    }
}

fn select_model<'a>(trainer: &'a Trainer, model: &str) -> &'a crate::nn::ParamSet {
    match model {
        "student" => &trainer.student,
        _ => &trainer.teacher,
    }
}

pub fn cmd_evaluate(
    cfg: &RunConfig,
    ckpt_path: &Path,
    data: &Path,
    domain: &str,
    split: &str,
    model: &str,
    out: Option<&Path>,
) -> Result<()> {
    let tcfg = cfg.trainer_config()?;
    let gain_template = crate::dynaug::GainState::new(
        tcfg.gain_alpha,
        tcfg.gain_gamma,
        tcfg.gain_warmup,
        tcfg.gain_min,
        tcfg.gain_max,
    )?;
    let ck = checkpoint::load(ckpt_path, tcfg.detector.config_hash(), &gain_template)?;
    let trainer = Trainer::from_checkpoint(tcfg, ck)?;
    let domain = DomainTag::parse(domain)?;
    let split = Split::parse(split)?;
    let (_, store) = load_store(data, domain, split)?;
    let result = evaluate_store(&trainer, select_model(&trainer, model), &store)?;
    let report = crate::eval::format_report(&result, &data_synth::CLASS_NAMES);
    print!("{report}");
    if let Some(out) = out {
        if let Some(parent) = out.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(out, &report)?;
    }
    Ok(())
}

pub fn cmd_export_features(
    cfg: &RunConfig,
    ckpt_path: &Path,
    data: &Path,
    out: &Path,
    model: &str,
    per_domain: usize,
) -> Result<()> {
    let tcfg = cfg.trainer_config()?;
    let gain_template = crate::dynaug::GainState::new(
        tcfg.gain_alpha,
        tcfg.gain_gamma,
        tcfg.gain_warmup,
        tcfg.gain_min,
        tcfg.gain_max,
    )?;
    let ck = checkpoint::load(ckpt_path, tcfg.detector.config_hash(), &gain_template)?;
    let trainer = Trainer::from_checkpoint(tcfg, ck)?;
    let params = select_model(&trainer, model);
    let mut queues = QueueSet::new(trainer.cfg.ca.queue_capacity);
    for domain in [DomainTag::Source, DomainTag::Target] {
        let (_, store) = load_store(data, domain, Split::Eval)?;
        let n = store.len().min(per_domain);
        for i in 0..n {
            let (img, _) = store.fetch(i);
            let fwd = trainer.det.forward_single(params, &img)?;
            let grid = DecodedGrid::from_forward(&trainer.cfg.detector, &trainer.anchors, &fwd);
            let dets = nms(
                &harvest_detections(
                    &trainer.cfg.detector,
                    &trainer.anchors,
                    &grid,
                    trainer.cfg.ca.harvest_floor,
                    true,
                ),
                trainer.cfg.eval_nms_iou,
            );
            for stage in [Stage::Backbone, Stage::Head] {
                for level in 0..crate::detector::NUM_LEVELS {
                    let level_dets: Vec<_> = dets
                        .iter()
                        .filter(|d| {
                            d.box_distribution
                                .as_ref()
                                .map_or(false, |b| b.level == level)
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
                    let insts = extract_instances(
                        map,
                        &level_dets,
                        trainer.cfg.detector.strides[level] as f64,
                        stage,
                        domain,
                        level,
                        trainer.cfg.ca.harvest_floor,
                    );
                    queues.update(insts)?;
                }
            }
        }
    }
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(out)?;
    writeln!(f, "domain\tlevel\tstage\tcategory\tconfidence\tfeature...")?;
    let mut rows = 0usize;
    for stage in [Stage::Backbone, Stage::Head] {
        for domain in [DomainTag::Source, DomainTag::Target] {
            for level in 0..crate::detector::NUM_LEVELS {
                let q = queues.get(QueueKey {
                    domain,
                    stage,
                    level,
                });
                for inst in q.entries() {
                    let feat = inst
                        .feature
                        .iter()
                        .map(|v| format!("{v:.6}"))
                        .collect::<Vec<_>>()
                        .join("\t");
                    writeln!(
                        f,
                        "{}\t{}\t{}\t{}\t{:.6}\t{}",
                        domain.as_str(),
                        level,
                        stage.as_str(),
                        inst.category,
                        inst.confidence,
                        feat
                    )?;
                    rows += 1;
                }
            }
        }
    }
    println!("wrote {rows} instance rows to {}", out.display());
    Ok(())
}

/// Parse a `key=value` training log line.
pub fn parse_log_line(line: &str) -> BTreeMap<String, String> {
    line.split_whitespace()
        .filter_map(|tok| tok.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

pub fn cmd_report(run_dir: &Path) -> Result<()> {
    println!("run directory: {}", run_dir.display());
    let cfg_path = run_dir.join("config.resolved.txt");
    if cfg_path.exists() {
        println!("config snapshot: {}", cfg_path.display());
    }
    for (name, path) in [
        ("burn-in", run_dir.join("burn_in.log")),
        ("adapt", run_dir.join("adapt.log")),
    ] {
        if !path.exists() {
            continue;
        }
        let text = fs::read_to_string(&path)?;
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.is_empty() {
            continue;
        }
        let first = parse_log_line(lines[0]);
        let last = parse_log_line(lines[lines.len() - 1]);
        let tail = lines.iter().rev().take(10);
        let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for l in tail {
            let kv = parse_log_line(l);
            for key in ["l_sup", "l_distill", "l_adv", "l_ca", "total", "gain"] {
                if let Some(v) = kv.get(key).and_then(|v| v.parse::<f64>().ok()) {
                    let e = sums.entry(key).or_insert((0.0, 0));
                    e.0 += v;
                    e.1 += 1;
                }
            }
        }
        println!(
            "{name}: {} steps logged (step {} .. {})",
            lines.len(),
            first.get("step").map(String::as_str).unwrap_or("?"),
            last.get("step").map(String::as_str).unwrap_or("?"),
        );
        for (key, (sum, n)) in sums {
            if n > 0 {
                println!("  mean {key} over last {n} steps: {:.6}", sum / n as f64);
            }
        }
    }
    if let Ok(dir) = fs::read_dir(run_dir) {
        let mut ckpts: Vec<String> = dir
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with("ckpt_") && n.ends_with(".bin"))
            .collect();
        ckpts.sort();
        for c in ckpts {
            println!("checkpoint: {c}");
        }
    }
    Ok(())
}

/// Map an error to the documented exit code.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        _ => 2,
    }
}

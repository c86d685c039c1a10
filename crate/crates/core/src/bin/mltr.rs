//! `mltr` command line tool.
//!
//! Exit codes: 0 success, 1 failed check or internal error, 2 usage or
//! configuration error, 3 dataset or I/O error, 4 checkpoint mismatch or
//! corruption.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mltr::checkpoint::{self, Checkpoint};
use mltr::config::RunConfig;
use mltr::data::manifest::{self, CLASSES};
use mltr::data::synth::{self, SynthSpec};
use mltr::data::{pnm, preprocess};
use mltr::model::Mltr;
use mltr::train::{self, DirSink, CKPT_FILE, LOG_FILE, METRICS_FILE};
use mltr::{gradcheck, Error};

#[derive(Parser)]
#[command(name = "mltr", version, about = "Masked latent transformer: training, evaluation and tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes log.csv, model.ckpt and metrics.json to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root (class subdirectories); overrides the config.
        #[arg(long, conflicts_with = "synth")]
        data: Option<PathBuf>,
        /// Use the synthetic corpus (the config's, or 8 images per class).
        #[arg(long)]
        synth: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint; prints the metrics JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Model configuration to load the checkpoint into, instead of the
        /// one embedded in it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "synth")]
        data: Option<PathBuf>,
        #[arg(long)]
        synth: bool,
        /// Also write the metrics JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Preprocess every image of a dataset tree into gray PGM files.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take the output size and preprocessing settings from this run
        /// configuration; otherwise keep each image's size.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a synthetic corpus and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 0.7)]
        split_ratio: f64,
    },
    /// Dump one inference attention map as CSV and PGM.
    AttnDump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        head: usize,
        /// Output prefix; writes PREFIX.csv and PREFIX.pgm.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every op and the tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain the latent-embedder backbone as a classifier.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, conflicts_with = "synth")]
        data: Option<PathBuf>,
        #[arg(long)]
        synth: bool,
        #[arg(long, default_value_t = 10)]
        epochs: u64,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Dataset(_) | Error::Io(_) | Error::Format { .. } => 3,
        Error::Mismatch(_) | Error::Corrupt(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Mismatch(items) = &e {
                for item in items {
                    eprintln!("  {item}");
                }
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Writes a line to stdout; a closed pipe is not an error.
fn emit(text: &str) -> mltr::Result<()> {
    use std::io::Write;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn with_synth(mut cfg: RunConfig, synth: bool) -> RunConfig {
    if synth {
        cfg.data.root = None;
        if cfg.data.synth.is_none() {
            cfg.data.synth = Some(SynthSpec {
                n_per_class: 8,
                seed: cfg.train.seed,
                height: cfg.model.image_height,
                width: cfg.model.image_width,
                split_ratio: cfg.data.split_ratio,
            });
        }
    }
    cfg
}

fn run(cmd: Command) -> mltr::Result<u8> {
    match cmd {
        Command::Train { config, data, synth, out, seed } => {
            let mut cfg = with_synth(RunConfig::load(&config)?, synth);
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            let run_data = train::prepare_data(&cfg, data.as_deref())?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("manifest.json"), run_data.manifest.to_json()?)?;
            let outcome = train::train(&cfg, &run_data, &mut DirSink { dir: &out })?;
            std::fs::write(out.join(METRICS_FILE), outcome.metrics.to_json()?)?;
            log::info!(
                "best epoch {}; wrote {}, {} and {} to {}",
                outcome.best_epoch,
                LOG_FILE,
                CKPT_FILE,
                METRICS_FILE,
                out.display()
            );
            emit(&outcome.metrics.to_json()?)?;
            Ok(0)
        }
        Command::Eval { ckpt, config, data, synth, out } => {
            let ck = Checkpoint::read(&ckpt)?;
            let (mut cfg, mut model) = train::from_checkpoint(&ck)?;
            if let Some(path) = config {
                cfg = RunConfig::load(&path)?;
                let mut model_cfg = cfg.model.clone();
                model_cfg.backbone.pretrained = None;
                model = Mltr::new(model_cfg, cfg.train.seed)?;
                checkpoint::load_into(model.params_mut(), &ck.tensors, |n| !n.starts_with("optim."), true)?;
            }
            let cfg = with_synth(cfg, synth);
            let run_data = train::prepare_data(&cfg, data.as_deref())?;
            let metrics = train::evaluate(&model, &run_data.eval)?;
            let json = metrics.to_json()?;
            if let Some(out) = out {
                std::fs::write(out, &json)?;
            }
            emit(&json)?;
            Ok(0)
        }
        Command::Preprocess { data, out, config } => {
            let cfg = config.map(|p| RunConfig::load(&p)).transpose()?;
            let pre = cfg.as_ref().map(|c| c.data.preprocess.clone()).unwrap_or_default();
            let mut count = 0;
            for class in CLASSES {
                let dir = data.join(class);
                if !dir.is_dir() {
                    return Err(Error::Dataset(format!("missing class directory {}", dir.display())));
                }
                std::fs::create_dir_all(out.join(class))?;
                let mut names: Vec<_> =
                    std::fs::read_dir(&dir)?.map(|e| e.map(|e| e.file_name())).collect::<std::io::Result<_>>()?;
                names.sort();
                for name in names {
                    let path = dir.join(&name);
                    let lower = name.to_string_lossy().to_ascii_lowercase();
                    if !(lower.ends_with(".pgm") || lower.ends_with(".ppm")) {
                        continue;
                    }
                    let img = pnm::read(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
                    let (w, h) =
                        cfg.as_ref().map_or((img.width, img.height), |c| (c.model.image_width, c.model.image_height));
                    let processed = preprocess::preprocess_u8(&img, w, h, &pre)?;
                    pnm::write(&out.join(class).join(Path::new(&name).with_extension("pgm")), &processed)?;
                    count += 1;
                }
            }
            if data.join(manifest::SPLIT_FILE).is_file() {
                std::fs::copy(data.join(manifest::SPLIT_FILE), out.join(manifest::SPLIT_FILE))?;
            }
            log::info!("preprocessed {count} images into {}", out.display());
            Ok(0)
        }
        Command::Synth { out, n, seed, height, width, split_ratio } => {
            let spec = SynthSpec { n_per_class: n, seed, height, width, split_ratio };
            let m = synth::write_corpus(&out, &spec)?;
            log::info!("wrote {} images to {}", m.entries.len(), out.display());
            Ok(0)
        }
        Command::AttnDump { ckpt, image, layer, head, out } => {
            let ck = Checkpoint::read(&ckpt)?;
            let (cfg, model) = train::from_checkpoint(&ck)?;
            let layers = model.num_layers();
            let heads = cfg.model.heads;
            if layer >= layers || head >= heads {
                return Err(Error::Config(format!(
                    "layer {layer} head {head} out of range ({layers} layers, {heads} heads)"
                )));
            }
            let img = pnm::read(&image)?;
            let x = preprocess::preprocess(&img, cfg.model.image_width, cfg.model.image_height, &cfg.data.preprocess)?;
            let map = train::attention_map(&model, &x, layer, head)?;
            std::fs::write(out.with_extension("csv"), train::attention_csv(&map))?;
            pnm::write(&out.with_extension("pgm"), &train::attention_image(&map))?;
            Ok(0)
        }
        Command::Gradcheck { seed } => {
            let mut reports = gradcheck::op_suite(seed)?;
            reports.push(gradcheck::tiny_model_check(seed)?);
            let ok = reports.iter().all(|r| r.passed);
            emit(&serde_json::to_string_pretty(&reports)?)?;
            Ok(if ok { 0 } else { 1 })
        }
        Command::Pretrain { config, data, synth, epochs, out } => {
            let cfg = with_synth(RunConfig::load(&config)?, synth);
            let run_data = train::prepare_data(&cfg, data.as_deref())?;
            let ck = train::pretrain_backbone(&cfg, &run_data, epochs)?;
            ck.write(&out)?;
            Ok(0)
        }
    }
}

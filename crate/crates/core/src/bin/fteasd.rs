use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fteasd::ablation::{self, Corpus};
use fteasd::audio::{read_wav, Manifest};
use fteasd::excitation::MaskSet;
use fteasd::synth::{default_profiles, generate_dataset, ClipParams};
use fteasd::{checkpoint, evaluate, featuremaps, ExperimentConfig, Preset};

#[derive(Parser)]
#[command(name = "fteasd", version, about = "Dual-path anomalous sound detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `section.key = value` lines applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Extra `section.key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let preset: Preset = self.preset.parse()?;
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(preset, p)?,
            None => ExperimentConfig::preset(preset),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablate {
    NoFtc,
    NoExcitation,
    None,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides paths.data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset seed (overrides synth.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Manifest CSV (default: <paths.data_dir>/manifest.csv).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Checkpoint path (default: <paths.out_dir>/model.ftea).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Drop a module: no-ftc, no-excitation, or none (plain network without either).
        #[arg(long, value_enum)]
        ablate: Option<Ablate>,
        /// Mask families, e.g. `c,f,t`, `c`, or `none`.
        #[arg(long)]
        masks: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score the test split and write CSVs plus a text report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write excitation inputs, outputs and masks of one block for a clip.
    DumpMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        /// WAV file.
        #[arg(long)]
        clip: PathBuf,
        /// Excitation block index (0 is the block before the stem).
        #[arg(long, default_value_t = 0)]
        stage: usize,
        /// Archive directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every ablation variant and write the comparison table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Table CSV path (default: <paths.out_dir>/ablation.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FTEASD_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("FTEASD_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("FTEASD_THREADS must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn manifest_path(cfg: &ExperimentConfig, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| cfg.paths.data_dir.join("manifest.csv"))
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Command::Synth { cfg, out, seed } => {
            let mut c = cfg.resolve()?;
            if let Some(s) = seed {
                c.synth.seed = s;
            }
            let dir = out.unwrap_or(c.paths.data_dir.clone());
            let params = ClipParams {
                sample_rate: c.audio.sample_rate,
                seconds: c.synth.clip_seconds,
                interference: c.synth.interference,
            };
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let m = generate_dataset(
                &default_profiles(),
                c.synth.counts(),
                &c.synth.anomaly_specs()?,
                params,
                &dir,
                c.synth.seed,
            )?;
            println!("{} ({} clips)", dir.join("manifest.csv").display(), m.rows.len());
        }
        Command::Train {
            cfg,
            manifest,
            out,
            ablate,
            masks,
            seed,
            epochs,
        } => {
            let mut c = cfg.resolve()?;
            if let Some(s) = seed {
                c.training.seed = s;
            }
            if let Some(e) = epochs {
                c.training.epochs = e;
            }
            if let Some(m) = masks {
                c.model.masks = m.parse::<MaskSet>()?;
            }
            match ablate {
                Some(Ablate::NoFtc) => c.model.use_ftc_encoder = false,
                Some(Ablate::NoExcitation) => c.model.use_excitation_network = false,
                Some(Ablate::None) => {
                    c.model.use_ftc_encoder = false;
                    c.model.masks = MaskSet::NONE;
                }
                None => {}
            }
            c.validate()?;
            let manifest = Manifest::read(&manifest_path(&c, manifest))?;
            let out = out.unwrap_or_else(|| c.paths.out_dir.join("model.ftea"));
            ensure_parent(&out)?;
            let corpus = Corpus::load(&manifest, &c)?;
            let log = out.with_extension("loss.csv");
            let (det, hist) = ablation::fit(&c, &corpus, Some(&log))?;
            checkpoint::save(&det, &out)?;
            let last = hist.last().map_or(f64::NAN, |h| h.loss);
            println!("{} (final loss {last:.5}; log {})", out.display(), log.display());
        }
        Command::Evaluate {
            checkpoint: ck,
            manifest,
            out,
        } => {
            let mut det = checkpoint::load(&ck)?;
            let manifest = Manifest::read(&manifest)?;
            let rep = evaluate::evaluate(&mut det, &manifest)?;
            rep.write(&out)?;
            print!("{}", rep.text());
            if !rep.complete() {
                eprintln!("not every machine could be scored");
                return Ok(ExitCode::from(2));
            }
        }
        Command::DumpMaps {
            checkpoint: ck,
            clip,
            stage,
            out,
        } => {
            let mut det = checkpoint::load(&ck)?;
            let (samples, sr) = read_wav(&clip)?;
            if sr != det.config.audio.sample_rate {
                bail!(
                    "{}: sample rate {sr} differs from the model's {}",
                    clip.display(),
                    det.config.audio.sample_rate
                );
            }
            let names = featuremaps::dump_feature_maps(&mut det, &samples, stage, &out)?;
            println!("{}: {}", out.display(), names.join(" "));
        }
        Command::Ablate {
            cfg,
            manifest,
            out,
            seed,
            epochs,
        } => {
            let mut c = cfg.resolve()?;
            if let Some(s) = seed {
                c.training.seed = s;
            }
            if let Some(e) = epochs {
                c.training.epochs = e;
            }
            let manifest = Manifest::read(&manifest_path(&c, manifest))?;
            let out = out.unwrap_or_else(|| c.paths.out_dir.join("ablation.csv"));
            ensure_parent(&out)?;
            let corpus = Corpus::load(&manifest, &c)?;
            let rows = ablation::run_suite(&c, &corpus, |v, _, rep| {
                log::info!("{} / {}: integrated {:?}", v.table, v.system, rep.integrated);
                Ok(())
            })?;
            let csv = ablation::rows_csv(&rows);
            std::fs::write(&out, &csv).with_context(|| format!("writing {}", out.display()))?;
            print!("{csv}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

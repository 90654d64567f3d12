use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use t2i_forge::ablate::{run_ablation, AblationAxis};
use t2i_forge::captioner::{caption_manifest, CaptionBackend, CaptionerEndpoint};
use t2i_forge::config::RunConfig;
use t2i_forge::cutmix::{curate_cutmix, CutMixPattern};
use t2i_forge::data::build_dataset;
use t2i_forge::manifest::{pattern_counts, DatasetManifest, ImageSource};
use t2i_forge::metrics::{fit_gaussian, frechet_distance, load_features, paired_cosine_score, prdc};
use t2i_forge::raster::Raster;
use t2i_forge::rng::split;
use t2i_forge::schedule::{Dataset, NoiseSchedule};
use t2i_forge::trainer::{
    load_checkpoint, sample, save_checkpoint, train, write_loss_csv, CheckpointMeta,
};
use t2i_forge::{par, toy, Error, Result};

/// Desk-scale data-constrained text-to-image training toolkit.
#[derive(Parser, Debug)]
#[command(name = "t2i-forge", version)]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides `seed` from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Extra `key=value` setting applied after the config file (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Curate CutMix images from a labelled manifest and caption them.
    Curate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// half | quarter | ninth | sixteenth | all
        #[arg(long)]
        setting: Option<CutMixPattern>,
        #[arg(long)]
        count: Option<usize>,
        /// Output manifest (default: next to the input, `manifest-cutmix-<setting>.jsonl`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        endpoint: EndpointArgs,
    },
    /// Write the built-in two-class 8x8 dataset.
    ToyDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_per_class: Option<usize>,
    },
    /// Add descriptive captions to records that lack one.
    Caption {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output manifest (default: rewrite the input).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        endpoint: EndpointArgs,
    },
    /// Train the toy denoiser; writes `model.ckpt` and `loss.csv` to `--out`.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample PNG images from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate feature files; prints a JSON object.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
        /// Paired image features for the cosine score (needs `--text-feats`).
        #[arg(long, requires = "text_feats")]
        image_feats: Option<PathBuf>,
        #[arg(long, requires = "image_feats")]
        text_feats: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        /// Also write the JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one axis on the toy dataset and write a CSV report.
    Ablate {
        /// tau | aug_prob | pattern
        #[arg(long)]
        axis: AblationAxis,
        /// Comma-separated values (default: the reference grid of the axis).
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct EndpointArgs {
    /// Captioning service base URL; `T2I_FORGE_CAPTION_URL` takes precedence.
    /// Without either, the offline stub is used.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
    #[arg(long, default_value_t = 3)]
    max_retries: u32,
}

impl EndpointArgs {
    fn backend(&self, seed: u64) -> Result<CaptionBackend> {
        let ep = CaptionerEndpoint::from_env_or(
            self.endpoint.as_deref(),
            Duration::from_secs(self.timeout_secs),
            self.max_retries,
        )?;
        Ok(match ep {
            Some(e) => CaptionBackend::Remote(e),
            None => CaptionBackend::Stub { seed },
        })
    }
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &g.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn with_manifest(cfg: &mut RunConfig, manifest: &Option<PathBuf>) -> Result<()> {
    if let Some(m) = manifest {
        cfg.manifest = Some(m.clone());
    }
    cfg.check_paths()
}

#[derive(Serialize)]
struct EvalReport {
    fid: f64,
    precision: f64,
    recall: f64,
    density: f64,
    coverage: f64,
    paired_cosine: Option<f64>,
}

/// Runs a command; `Ok` carries the exit status for partial failures.
fn run(cli: Cli) -> Result<u8> {
    let mut cfg = load_config(&cli.global)?;
    match cli.command {
        Command::ToyDataset { out, n_per_class } => {
            let n = n_per_class.unwrap_or(cfg.n_per_class);
            let m = toy::write_toy_dataset(&out, n, cfg.seed)?;
            println!("{}", serde_json::json!({ "records": m.records.len(), "classes": m.classes() }));
        }
        Command::Curate {
            manifest,
            setting,
            count,
            out,
            endpoint,
        } => {
            with_manifest(&mut cfg, &manifest)?;
            let setting = setting.unwrap_or(cfg.setting);
            let count = count.unwrap_or(cfg.count);
            let path = cfg.manifest_path()?.to_path_buf();
            let root = cfg.images_root()?;
            let input = DatasetManifest::read_from_path(&path)?;
            let curated = curate_cutmix(&input, &root, setting, count, cfg.seed)?;
            let (captioned, _) = caption_manifest(&curated, &root, &endpoint.backend(cfg.seed)?)?;
            let out = out.unwrap_or_else(|| {
                path.with_file_name(format!("manifest-cutmix-{}.jsonl", setting.tag()))
            });
            captioned.write_to_path(&out)?;
            let counts: serde_json::Map<String, serde_json::Value> = pattern_counts(&captioned)
                .into_iter()
                .map(|(p, n)| (p.tag().to_string(), n.into()))
                .collect();
            println!("{}", serde_json::Value::Object(counts));
        }
        Command::Caption {
            manifest,
            out,
            endpoint,
        } => {
            with_manifest(&mut cfg, &manifest)?;
            let path = cfg.manifest_path()?.to_path_buf();
            let root = cfg.images_root()?;
            let input = DatasetManifest::read_from_path(&path)?;
            let (captioned, added) = caption_manifest(&input, &root, &endpoint.backend(cfg.seed)?)?;
            captioned.write_to_path(out.as_deref().unwrap_or(&path))?;
            println!("{}", serde_json::json!({ "added": added }));
        }
        Command::Train { manifest, out } => {
            with_manifest(&mut cfg, &manifest)?;
            cfg.validate()?;
            let m = DatasetManifest::read_from_path(cfg.manifest_path()?)?;
            let root = cfg.images_root()?;
            let shape = cfg.shape();
            let original = build_dataset(&m, None, &root, ImageSource::Original, cfg.captions, shape)?;
            let cutmix = if cfg.aug_prob > 0.0 {
                if !m.records.iter().any(|r| r.source == ImageSource::Cutmix) {
                    return Err(Error::Config(format!(
                        "aug_prob is {} but {} has no cutmix records; run `curate` first or set aug_prob=0",
                        cfg.aug_prob,
                        cfg.manifest_path()?.display()
                    )));
                }
                Some(build_dataset(&m, None, &root, ImageSource::Cutmix, cfg.captions, shape)?)
            } else {
                None
            };
            let tc = cfg.train_config();
            let (model, reports) = train(&tc, shape, &original, cutmix.as_ref().map(|c| c as &dyn Dataset))?;
            let meta = CheckpointMeta {
                shape: *model.shape(),
                config: tc,
            };
            save_checkpoint(&out.join("model.ckpt"), &meta, &model)?;
            let mut csv = Vec::new();
            write_loss_csv(&mut csv, &reports)?;
            write_file(&out.join("loss.csv"), &csv)?;
            let last = reports.last().map(|r| r.loss);
            println!("{}", serde_json::json!({ "steps": reports.len(), "final_loss": last }));
        }
        Command::Sample {
            checkpoint,
            caption,
            count,
            guidance,
            out,
        } => {
            let (meta, model) = load_checkpoint(&checkpoint)?;
            let schedule = NoiseSchedule::new(meta.shape.horizon)?;
            let w = guidance.unwrap_or(cfg.guidance);
            let img = meta.shape.image;
            let images = par::try_map_range(count, |i| sample(&model, &caption, &schedule, w, split(cfg.seed, i as u64)))?;
            for (i, px) in images.iter().enumerate() {
                let data = px.iter().map(|&v| v as f32).collect();
                Raster::new(img.width, img.height, img.channels, data)?
                    .save_png(&out.join(format!("sample-{i:04}.png")))?;
            }
            println!("{}", serde_json::json!({ "written": count }));
        }
        Command::Eval {
            real,
            fake,
            image_feats,
            text_feats,
            k,
            out,
        } => {
            let (real, fake) = (load_features(&real)?, load_features(&fake)?);
            let fid = frechet_distance(&fit_gaussian(&real)?, &fit_gaussian(&fake)?)?;
            let p = prdc(&real, &fake, k.unwrap_or(cfg.k))?;
            let paired_cosine = match (image_feats, text_feats) {
                (Some(i), Some(t)) => Some(paired_cosine_score(&load_features(&i)?, &load_features(&t)?)?),
                _ => None,
            };
            let report = EvalReport {
                fid,
                precision: p.precision,
                recall: p.recall,
                density: p.density,
                coverage: p.coverage,
                paired_cosine,
            };
            let text = serde_json::to_string(&report)?;
            if let Some(path) = out {
                write_file(&path, format!("{text}\n").as_bytes())?;
            }
            println!("{text}");
        }
        Command::Ablate { axis, grid, out } => {
            let grid = match grid {
                Some(g) => axis.parse_grid(&g)?,
                None => axis.reference_grid(),
            };
            let report = run_ablation(axis, &grid, &cfg)?;
            report.save_csv(&out)?;
            let failed = report.failed_rows();
            println!("{}", serde_json::json!({ "rows": report.rows.len(), "failed": failed }));
            if failed > 0 {
                eprintln!("error: {failed} ablation point(s) failed; see {}", out.display());
                return Ok(2);
            }
        }
    }
    Ok(0)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes).map_err(Error::Io)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = cli.global.threads;
    let result = match threads {
        Some(n) => par::with_threads(n, || run(cli)),
        None => run(cli),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

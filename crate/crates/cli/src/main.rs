use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sdaie::augment::{perturb_tree, PerturbOp, PerturbationSpec};
use sdaie::binary::{cache_reference_features, train_binary, write_binary_log_csv, ReferenceCache};
use sdaie::checkpoint::{Model, ModelKind};
use sdaie::config::Config;
use sdaie::dataset::{load_manifest, DatasetManifest, DiskStore};
use sdaie::eval::{evaluate_report, export_features, export_scores, fit_one_class, Detector, ScoredImage};
use sdaie::gmm::GmmModel;
use sdaie::imaging::Image;
use sdaie::pretext::train_pretext;
use sdaie::synth::{build_suite, write_suite, GeneratorFamily, SuiteSpec};
use sdaie::{Error, Result};

#[derive(Parser)]
#[command(name = "sdaie", version, about = "Camera-metadata features for detecting AI-generated images")]
struct Cli {
    /// Seed for every stochastic step; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint directory to read (schema.json + weights.bin).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// JSONL manifest; relative image paths resolve against its directory.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the metadata pretext model on photographs with complete EXIF.
    Pretrain {
        /// Output directory: periodic snapshots, train_log.csv and final/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the one-class GMM on the manifest's photographs.
    FitGmm {
        #[arg(long, default_value = "gmm.json")]
        out: PathBuf,
    },
    /// Fine-tune the binary detector from a pretext checkpoint.
    TrainBinary {
        /// Output checkpoint directory; also receives train_log.csv.
        #[arg(long)]
        out: PathBuf,
        /// Reference feature cache; built and written here when missing.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Score images. Uses the one-class detector when --gmm is given.
    Detect {
        #[arg(long)]
        gmm: Option<PathBuf>,
        /// Image files; without any, the manifest is scored.
        images: Vec<PathBuf>,
    },
    /// Accuracy and AP per source, optionally under the robustness grid.
    Evaluate {
        #[arg(long)]
        gmm: Option<PathBuf>,
        /// Directory receiving report.json and report.csv.
        #[arg(long)]
        out: PathBuf,
        /// Also evaluate under JPEG 95, blur σ=1 and ×2 downsampling.
        #[arg(long)]
        robustness: bool,
    },
    /// Apply one perturbation to every image of a directory tree.
    Perturb {
        #[arg(long, value_enum)]
        op: OpArg,
        /// JPEG quality, blur σ, or downsampling ratio.
        #[arg(long)]
        param: f64,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Smallest side downsampling may produce.
        #[arg(long, default_value_t = sdaie::augment::MIN_SIDE)]
        min_side: usize,
    },
    /// Per-image scores as CSV: image_path, label, score, decision.
    ExportScores {
        #[arg(long)]
        gmm: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-image features as CSV: image_path, label, f0, f1, ...
    ExportFeatures {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic camera/generator suite with its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        camera: usize,
        /// Images per generator family.
        #[arg(long, default_value_t = 100)]
        generated: usize,
        #[arg(long, default_value_t = 48)]
        size: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OpArg {
    Jpeg,
    Blur,
    Down,
}

impl From<OpArg> for PerturbOp {
    fn from(op: OpArg) -> Self {
        match op {
            OpArg::Jpeg => PerturbOp::Jpeg,
            OpArg::Blur => PerturbOp::Blur,
            OpArg::Down => PerturbOp::Downsample,
        }
    }
}

struct Ctx {
    config: Config,
    checkpoint: Option<PathBuf>,
    manifest: Option<PathBuf>,
}

impl Ctx {
    fn manifest(&self) -> Result<(DatasetManifest, DiskStore)> {
        let path = self.manifest.as_deref().ok_or_else(|| usage("--manifest is required"))?;
        Ok((load_manifest(path)?, DiskStore::beside(path)))
    }

    fn model(&self) -> Result<Model> {
        let dir = self.checkpoint.as_deref().ok_or_else(|| usage("--checkpoint is required"))?;
        Model::load(dir)
    }

    fn detector(&self, gmm: Option<&Path>) -> Result<Detector> {
        let model = self.model()?;
        match gmm {
            Some(path) => Detector::new_one_class(model, GmmModel::load(path)?),
            None if model.kind == ModelKind::Binary => Detector::new_binary(model),
            None => Err(usage("a pretext checkpoint needs --gmm to detect")),
        }
    }

    fn seed(&self) -> u64 {
        self.config.seed.unwrap_or(self.config.pretext.seed)
    }
}

fn usage(msg: &str) -> Error {
    Error::InvalidArgument(msg.to_string())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    let ctx = Ctx {
        config,
        checkpoint: cli.checkpoint,
        manifest: cli.manifest,
    };
    match cli.command {
        Command::Pretrain { out } => {
            let (manifest, store) = ctx.manifest()?;
            std::fs::create_dir_all(&out)?;
            let run = train_pretext(&manifest, &store, &ctx.config.pretext, Some(&out))?;
            let final_dir = out.join("final");
            run.model.save(&final_dir)?;
            let last = run.log.last().map(|r| r.report.total).unwrap_or(f64::NAN);
            println!("pretext: {} iterations, final loss {last:.4}", run.log.len());
            println!("checkpoint: {}", final_dir.display());
        }
        Command::FitGmm { out } => {
            let (manifest, store) = ctx.manifest()?;
            let model = ctx.model()?;
            let (gmm, report) = fit_one_class(&manifest, &store, &model, &ctx.config.gmm)?;
            gmm.save(&out)?;
            println!(
                "gmm: K={} dim={} iterations={} converged={} tau={}",
                gmm.k(),
                gmm.feature_dim(),
                report.iterations,
                report.converged,
                gmm.tau
            );
            println!("written: {}", out.display());
        }
        Command::TrainBinary { out, cache } => {
            let (manifest, store) = ctx.manifest()?;
            let pretext = ctx.model()?;
            if pretext.kind != ModelKind::Pretext {
                return Err(usage("train-binary starts from a pretext checkpoint"));
            }
            let cache_path = cache.unwrap_or_else(|| out.join("reference.cache"));
            let digest = pretext.digest()?;
            let refs = if cache_path.is_file() {
                let c = ReferenceCache::load(&cache_path)?;
                if c.model_digest != digest {
                    return Err(usage("reference cache was built from a different checkpoint"));
                }
                c
            } else {
                let c = cache_reference_features(&manifest, &pretext, &store)?;
                if let Some(parent) = cache_path.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                c.save(&cache_path)?;
                c
            };
            let run = train_binary(&manifest, &store, &pretext, &refs, &ctx.config.binary)?;
            run.model.save(&out)?;
            write_binary_log_csv(&run.log, create(&out.join("train_log.csv"))?)?;
            println!("binary: {} iterations, checkpoint {}", run.log.len(), out.display());
        }
        Command::Detect { gmm, images } => {
            let detector = ctx.detector(gmm.as_deref())?;
            let scored = if images.is_empty() {
                let (manifest, store) = ctx.manifest()?;
                sdaie::eval::score_manifest(&manifest, &store, &detector, None)?
            } else {
                images
                    .iter()
                    .map(|p| {
                        let score = detector.score(&Image::open(p)?)?;
                        Ok(ScoredImage {
                            image_path: p.display().to_string(),
                            label: sdaie::dataset::Label::Photographic,
                            source: String::new(),
                            score,
                            generated: detector.is_generated(score),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let mut out = std::io::stdout().lock();
            writeln!(out, "image_path,score,decision")?;
            for s in &scored {
                let decision = if s.generated { "generated" } else { "photographic" };
                writeln!(out, "{},{},{decision}", s.image_path, s.score)?;
            }
        }
        Command::Evaluate { gmm, out, robustness } => {
            let (manifest, store) = ctx.manifest()?;
            let detector = ctx.detector(gmm.as_deref())?;
            let report = evaluate_report(&manifest, &store, &detector, robustness, ctx.seed())?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("report.json"), report.to_json()?)?;
            report.write_csv(create(&out.join("report.csv"))?)?;
            for c in &report.conditions {
                let ap = c.summary.mean_ap.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
                println!("{:<10} Acc {:.4}  mAP {ap}", c.condition, c.summary.mean_accuracy);
            }
        }
        Command::Perturb { op, param, input, output, min_side } => {
            let spec = PerturbationSpec::new(op.into(), param)?;
            let r = perturb_tree(&spec, &input, &output, min_side)?;
            println!("{}: {} images perturbed, {} files copied", spec.label(), r.images, r.copied);
        }
        Command::ExportScores { gmm, out } => {
            let (manifest, store) = ctx.manifest()?;
            let detector = ctx.detector(gmm.as_deref())?;
            let scored = export_scores(&manifest, &store, &detector, create(&out)?)?;
            println!("{} scores written to {}", scored.len(), out.display());
        }
        Command::ExportFeatures { out } => {
            let (manifest, store) = ctx.manifest()?;
            let model = ctx.model()?;
            export_features(&manifest, &store, &model, create(&out)?)?;
            println!("{} feature rows written to {}", manifest.len(), out.display());
        }
        Command::Synth { out, camera, generated, size } => {
            let spec = SuiteSpec {
                size,
                camera,
                generated: GeneratorFamily::ALL.iter().map(|&f| (f, generated)).collect(),
                seed: ctx.seed(),
            };
            let (manifest, store) = build_suite(&spec)?;
            write_suite(&manifest, &store, &out)?;
            println!("{} images and manifest.jsonl written to {}", manifest.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

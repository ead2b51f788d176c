use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gwinpaint::commands::{self, InpaintSource};
use gwinpaint::config::RunConfig;
use gwinpaint::{formats, Error, Result};
use gwinpaint_core::codec::CodecKind;
use gwinpaint_core::sampling::Method;
use gwinpaint_core::synthdata::{PhantomSpec, Split};
use gwinpaint_core::training::TrainVariant;
use gwinpaint_core::{Landmark, Level, Pathology, Severity};

/// Pathology insertion by Gaussian-weighted latent diffusion inpainting.
#[derive(Parser)]
#[command(name = "gwinpaint", version)]
struct Cli {
    /// Run configuration (TOML). Flags override values from the file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root for outputs when --out is omitted.
    #[arg(long, global = true, env = "GWINPAINT_OUT_ROOT", default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset.
    GenData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = pathology)]
        pathology: Option<Pathology>,
        /// Phantom generator parameters (TOML).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the latent codec.
    TrainCodec {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = codec_kind)]
        kind: Option<CodecKind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the evaluation classifier.
    TrainClassifier {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = pathology)]
        pathology: Pathology,
        /// Add reconstructions from this codec to the training patches.
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one diffusion variant.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = pathology)]
        pathology: Pathology,
        #[arg(long)]
        codec: PathBuf,
        /// weighted | repaint-base | masked
        #[arg(long, value_parser = variant)]
        variant: TrainVariant,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Insert pathology into normal images.
    Inpaint {
        /// Single input volume; needs --landmark, --level and --severity.
        #[arg(long, conflicts_with = "dataset_split", requires_all = ["landmark", "level", "severity"])]
        input: Option<PathBuf>,
        /// Dataset directory whose test split is inpainted cell by cell.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_parser = split, requires = "dataset")]
        dataset_split: Option<Split>,
        /// Insertion point in mm, `x,y,z`.
        #[arg(long, value_parser = point)]
        landmark: Option<[f64; 3]>,
        #[arg(long, value_parser = level)]
        level: Option<Level>,
        #[arg(long, value_parser = severity)]
        severity: Option<Severity>,
        /// weighted | repaint | masked
        #[arg(long, value_parser = method)]
        method: Method,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score inpainting outputs against the test split.
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        outputs: Vec<PathBuf>,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the comparison table from evaluation results.
    Report {
        #[arg(long)]
        eval_dir: PathBuf,
    },
    /// Every stage end to end under one directory.
    Run {
        #[arg(long, value_parser = pathology)]
        pathology: Option<Pathology>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parsed<T>(s: &str, what: &str, f: impl Fn(&str) -> Option<T>) -> std::result::Result<T, String> {
    f(s).ok_or_else(|| format!("unknown {what} '{s}'"))
}
fn pathology(s: &str) -> std::result::Result<Pathology, String> {
    parsed(s, "pathology", Pathology::parse)
}
fn codec_kind(s: &str) -> std::result::Result<CodecKind, String> {
    parsed(s, "codec kind", CodecKind::parse)
}
fn variant(s: &str) -> std::result::Result<TrainVariant, String> {
    parsed(s, "variant", TrainVariant::parse)
}
fn method(s: &str) -> std::result::Result<Method, String> {
    parsed(s, "method", Method::parse)
}
fn split(s: &str) -> std::result::Result<Split, String> {
    parsed(s, "split", Split::parse)
}
fn level(s: &str) -> std::result::Result<Level, String> {
    parsed(s, "level", Level::parse)
}
fn severity(s: &str) -> std::result::Result<Severity, String> {
    parsed(s, "severity", Severity::parse)
}
fn point(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| e.to_string())?;
    match v[..] {
        [x, y] => Ok([x, y, 0.0]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err(format!("expected x,y[,z], got '{s}'")),
    }
}

fn out_dir(out: Option<PathBuf>, root: &Path, name: &str) -> PathBuf {
    out.unwrap_or_else(|| root.join(name))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    let root = cli.out_root;
    match cli.cmd {
        Cmd::GenData { n, seed, pathology, spec, out } => {
            if let Some(n) = n {
                cfg.data.samples = n;
            }
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            if let Some(p) = pathology {
                cfg.pathology = p;
            }
            if let Some(path) = spec {
                let text = String::from_utf8(formats::read(&path)?).map_err(|_| Error::format(&path, "not UTF-8"))?;
                cfg.data.phantom = toml::from_str::<PhantomSpec>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            }
            cfg.validate()?;
            let out = out_dir(out, &root, "data");
            let d = commands::gen_data(&cfg, &out)?;
            println!("{} samples written to {}", d.samples.len(), out.display());
        }
        Cmd::TrainCodec { data, kind, out } => {
            let out = out_dir(out, &root, "codec");
            let fp = commands::train_codec_cmd(&data, kind, &cfg, &out)?;
            println!("codec {} -> {}", &fp[..12], out.display());
        }
        Cmd::TrainClassifier { data, pathology, codec, out } => {
            cfg.pathology = pathology;
            let out = out_dir(out, &root, "classifier");
            let fp = commands::train_classifier_cmd(&data, pathology, codec.as_deref(), &cfg, &out)?;
            println!("classifier {} -> {}", &fp[..12], out.display());
        }
        Cmd::Train { data, pathology, codec, variant, out } => {
            cfg.pathology = pathology;
            let out = out_dir(out, &root, &format!("models/{}", variant.name()));
            let fp = commands::train_cmd(&data, pathology, &codec, variant, &cfg, &out)?;
            println!("{} model {} -> {}", variant, &fp[..12], out.display());
        }
        Cmd::Inpaint { input, dataset, dataset_split, landmark, level, severity, method, checkpoint, codec, steps, seed, out } => {
            if let Some(s) = steps {
                cfg.sampler.num_inference_steps = s;
            }
            if let Some(s) = seed {
                cfg.sampler.seed = s;
            }
            cfg.sampler.method = method;
            let source = match (input, dataset) {
                (Some(image), None) => {
                    let (Some(p), Some(l), Some(s)) = (landmark, level, severity) else {
                        return Err(Error::Config("--input needs --landmark, --level and --severity".into()));
                    };
                    InpaintSource::Single { image, landmark: Landmark::new(p, l, s) }
                }
                (None, Some(dir)) => InpaintSource::Dataset { dir, split: dataset_split.unwrap_or(Split::Test) },
                _ => return Err(Error::Config("give exactly one of --input and --dataset".into())),
            };
            let out = out_dir(out, &root, &format!("outputs/{}", method.name()));
            let idx = commands::inpaint_cmd(&source, method, &checkpoint, &codec, &cfg, &out)?;
            let n: usize = idx.cells.iter().map(|c| c.outputs.len()).sum();
            println!("{n} {} outputs -> {}", method, out.display());
        }
        Cmd::Evaluate { outputs, testset, classifier, out } => {
            let out = out_dir(out, &root, "eval");
            let e = commands::evaluate_cmd(&outputs, &testset, &classifier, &cfg, &out)?;
            print!("{}", gwinpaint_core::eval::render_table(e.pathology, &e.reports));
        }
        Cmd::Report { eval_dir } => {
            print!("{}", commands::report_cmd(&eval_dir)?);
        }
        Cmd::Run { pathology, out } => {
            if let Some(p) = pathology {
                cfg.pathology = p;
            }
            cfg.validate()?;
            let out = out_dir(out, &root, cfg.pathology.name());
            commands::run_all(&cfg, &out)?;
            print!("{}", std::fs::read_to_string(out.join("eval/report.txt")).map_err(|e| Error::io(&out, e))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

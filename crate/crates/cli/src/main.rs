use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lic_cli::artifacts::{self, verify_dir};
use lic_cli::bench::{self, DrmBench};
use lic_cli::config::Overrides;
use lic_cli::error::{exit, CliError, Result};
use lic_cli::stages::{self, load_images, open_model, write_report};
use lic_cli::PipelineConfig;
use lic_core::metrics::BdMethod;
use lic_drm::keys::passphrase_from_env;
use serde::Serialize;

/// Train, prune, watermark, package and run learned image codecs.
#[derive(Parser)]
#[command(name = "lic", version, arg_required_else_help = true)]
struct Cli {
    /// Pipeline configuration (JSON). Flags override its values.
    #[arg(long, global = true, env = "LIC_CONFIG")]
    config: Option<PathBuf>,
    /// Print the stage report as JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Check every artifact under DIR and exit.
    #[arg(long, value_name = "DIR")]
    verify: Option<PathBuf>,
    #[command(flatten)]
    overrides: OverrideArgs,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct OverrideArgs {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Corpus root holding train/ and test/.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Output directory for artifacts and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory of provider, registry and client key files.
    #[arg(long, global = true)]
    keys: Option<PathBuf>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    channels: Option<usize>,
    #[arg(long, global = true)]
    stages: Option<usize>,
    #[arg(long, global = true)]
    train_steps: Option<usize>,
    #[arg(long, global = true)]
    qat_steps: Option<usize>,
    #[arg(long, global = true)]
    prune_steps: Option<usize>,
    /// Watermark length M.
    #[arg(long, global = true)]
    bits: Option<usize>,
    /// Initial watermark loss weight.
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    patch: Option<usize>,
    #[arg(long, global = true)]
    overlap: Option<usize>,
}

impl From<&OverrideArgs> for Overrides {
    fn from(a: &OverrideArgs) -> Self {
        Overrides {
            seed: a.seed,
            corpus: a.corpus.clone(),
            out: a.out.clone(),
            keys: a.keys.clone(),
            lambda: a.lambda,
            channels: a.channels,
            stages: a.stages,
            train_steps: a.train_steps,
            qat_steps: a.qat_steps,
            prune_steps: a.prune_steps,
            bits: a.bits,
            beta: a.beta,
            patch: a.patch,
            overlap: a.overlap,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Cubic,
    Pchip,
}

#[derive(Args)]
struct ModelArg {
    /// LICQ model or LICE container.
    #[arg(long)]
    model: PathBuf,
    /// Client private key for LICE containers; defaults to a match in the keys directory.
    #[arg(long)]
    key: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus (train/ and test/).
    GenCorpus,
    /// Train the float model.
    Train {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Iteratively prune channels and fine-tune.
    Prune {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Create and register a client key pair. The private key is encrypted
    /// when LIC_KEY_PASSPHRASE is set.
    Keygen {
        #[arg(long)]
        client: String,
        /// Derive keys from the pipeline seed (reproducible demos only).
        #[arg(long)]
        seeded: bool,
        #[arg(long)]
        force: bool,
    },
    /// Quantization-aware watermarking for one client.
    Qaw {
        #[arg(long)]
        client: String,
        /// Pruned checkpoint (default: <out>/pruned.licf).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Also train a non-watermarked QAT twin and report the PSNR penalty.
        #[arg(long)]
        twin: bool,
    },
    /// Encrypt a client's watermarked model into a LICE container.
    Package {
        #[arg(long)]
        client: String,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Authenticate and load a container in memory.
    Unlock {
        #[arg(long)]
        container: PathBuf,
        #[arg(long)]
        key: Option<PathBuf>,
    },
    /// Compress an image to a LICB bitstream.
    Encode {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Reconstruct an image from a LICB bitstream.
    Decode {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Original image for PSNR and MS-SSIM.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Read one client's watermark from a model.
    Extract {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        client: String,
    },
    /// Rank every registered client against a leaked model.
    Trace {
        #[command(flatten)]
        model: ModelArg,
    },
    /// Rate-distortion points for one or more models.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        key: Option<PathBuf>,
        /// Images to evaluate on (default: the corpus test split).
        #[arg(long)]
        images: Option<PathBuf>,
        /// RD CSV to compute BD-PSNR and BD-rate against.
        #[arg(long)]
        anchor: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cubic")]
        bd_method: Method,
    },
    /// Throughput with a per-stage split; with --container, also DRM-on.
    Bench {
        #[command(flatten)]
        model: ModelArg,
        /// Encrypted container of the same model for the DRM-on run.
        #[arg(long)]
        container: Option<PathBuf>,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        repeat: usize,
        /// Reuse the unwrapped content key across repeats.
        #[arg(long)]
        cache_key: bool,
    },
    /// Run every stage from corpus generation to watermark extraction.
    Run {
        #[arg(long, default_value = "client-01")]
        client: String,
        /// Derive provider and client keys from the pipeline seed.
        #[arg(long)]
        seeded_keys: bool,
    },
    /// Check every artifact under a directory.
    Verify { dir: PathBuf },
}

/// `println!` that ignores a closed stdout (for example when piped to `head`).
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

fn emit<T: Serialize>(json: bool, report: &T) {
    let v = serde_json::to_value(report).expect("reports serialize");
    if json {
        out!("{v}");
        return;
    }
    if let serde_json::Value::Object(map) = &v {
        for (k, val) in map {
            match val {
                serde_json::Value::Object(_) | serde_json::Value::Array(_) => {}
                serde_json::Value::String(s) => out!("{k}: {s}"),
                other => out!("{k}: {other}"),
            }
        }
    }
}

fn verify(dir: &Path, json: bool) -> Result<()> {
    let entries = verify_dir(dir)?;
    let failed = entries.iter().filter(|e| !e.ok).count();
    if json {
        out!("{}", serde_json::to_string(&entries).expect("serializes"));
    } else {
        for e in &entries {
            out!("{} {} {:?} {}", if e.ok { "ok  " } else { "FAIL" }, e.path.display(), e.kind, e.detail);
        }
        out!("{} artifacts, {failed} failed", entries.len());
    }
    if failed > 0 {
        return Err(CliError::Verify(failed));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(dir) = &cli.verify {
        return verify(dir, cli.json);
    }
    let Some(command) = &cli.command else {
        return Err(CliError::Config("no subcommand given".into()));
    };
    if let Command::Verify { dir } = command {
        return verify(dir, cli.json);
    }
    let cfg = PipelineConfig::resolve(cli.config.as_deref(), &Overrides::from(&cli.overrides))?;
    let pass = passphrase_from_env();
    let pass = pass.as_deref();
    let json = cli.json;
    let open = |m: &ModelArg| open_model(&cfg, &m.model, m.key.as_deref(), pass);
    match command {
        Command::GenCorpus => emit(json, &stages::gen_corpus(&cfg)?),
        Command::Train { output } => emit(json, &stages::train(&cfg, output.as_deref())?),
        Command::Prune { input, output } => emit(json, &stages::prune(&cfg, input.as_deref(), output.as_deref())?),
        Command::Keygen { client, seeded, force } => emit(json, &stages::keygen(&cfg, client, pass, *seeded, *force)?),
        Command::Qaw { client, input, twin } => emit(json, &stages::qaw(&cfg, client, input.as_deref(), *twin)?),
        Command::Package { client, model } => emit(json, &stages::package(&cfg, client, model.as_deref())?),
        Command::Unlock { container, key } => emit(json, &stages::unlock(&cfg, container, key.as_deref(), pass)?),
        Command::Encode { model, input, output } => emit(json, &stages::encode(&cfg, &open(model)?, input, output)?),
        Command::Decode {
            model,
            input,
            output,
            reference,
        } => emit(json, &stages::decode(&open(model)?, input, output, reference.as_deref())?),
        Command::Extract { model, client } => emit(json, &stages::extract(&cfg, &open(model)?, client)?),
        Command::Trace { model } => emit(json, &stages::trace(&cfg, &open(model)?)?),
        Command::Eval {
            models,
            key,
            images,
            anchor,
            bd_method,
        } => {
            let method = match bd_method {
                Method::Cubic => BdMethod::Cubic,
                Method::Pchip => BdMethod::Pchip,
            };
            let r = stages::eval(&cfg, models, key.as_deref(), pass, images.as_deref(), anchor.as_deref().map(|a| (a, method)))?;
            emit(json, &r)
        }
        Command::Bench {
            model,
            container,
            images,
            repeat,
            cache_key,
        } => {
            let loaded = open(model)?;
            let dir = images.clone().unwrap_or_else(|| cfg.paths.test_dir());
            let (imgs, warnings) = load_images(&dir, "pass --images")?;
            let drm = match container {
                Some(c) => {
                    let sealed = artifacts::load_container(c)?;
                    let identity = match &model.key {
                        Some(k) => stages::load_identity(k, pass)?,
                        None => stages::find_identity(&cfg, &sealed.key_id, pass)?,
                    };
                    Some((sealed, identity))
                }
                None => None,
            };
            let rows = bench::bench(
                &loaded.engine,
                &imgs,
                &cfg.patch,
                *repeat,
                drm.as_ref().map(|(c, i)| DrmBench {
                    container: c,
                    identity: i,
                    cache_key: *cache_key,
                }),
            )?;
            let csv = cfg.paths.out.join("bench.csv");
            artifacts::write(&csv, bench::to_csv(&rows))?;
            #[derive(Serialize)]
            struct BenchReport {
                csv: PathBuf,
                rows: Vec<bench::BenchRow>,
                warnings: Vec<String>,
            }
            emit(json, &write_report(&cfg, "bench", BenchReport { csv, rows, warnings })?)
        }
        Command::Run { client, seeded_keys } => emit(json, &stages::run_pipeline(&cfg, client, *seeded_keys, pass)?),
        Command::Verify { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            let code = e.exit_code();
            if cli.json {
                out!(
                    "{}",
                    serde_json::json!({ "error": e.class(), "message": e.to_string(), "exit_code": code })
                );
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(code as u8)
        }
    }
}

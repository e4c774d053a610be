//! One function per pipeline stage. Each writes its artifacts plus a JSON
//! report named after the stage into the output directory.

use std::path::{Path, PathBuf};

use lic_core::codec::{evaluate, train_steps, LicModel, RdEval, RdReport};
use lic_core::engine::{decode_image, encode_image, IntModel, PatchConfig};
use lic_core::image::{load_dir, load_image, save_image, save_png, synthetic_corpus};
use lic_core::metrics::{bd_psnr, bd_rate, ms_ssim, msssim_db, psnr, BdMethod, RdCurve, RdPoint};
use lic_core::pruner::{compact, prune as run_prune, report_csv, PruneReport};
use lic_core::quantizer::{calibrate, qat_finetune, NoObserver, QuantContext, QuantizedModel, SizeReport};
use lic_core::watermark::{beta_trace_csv, chance_band, derive_watermark, qaw_finetune, KeyMatrix, ProviderKey};
use lic_core::Tensor;
use lic_drm::{package as drm_package, trace_leak, ClientIdentity, ClientPublic, Metadata, Registry, TraceMatch, Unlocker, WatermarkPolicy};
use rand::rngs::OsRng;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::artifacts::{self, load_checkpoint, load_int_model, load_quantized, LoadedModel};
use crate::config::PipelineConfig;
use crate::error::{io_err, CliError, Result};
use crate::layout::{check_client_id, Layout};

/// Writes `report` as `<out>/<stage>.json` and returns it.
pub fn write_report<T: Serialize>(cfg: &PipelineConfig, stage: &str, report: T) -> Result<T> {
    let text = serde_json::to_string_pretty(&report).expect("reports serialize");
    artifacts::write(&Layout(cfg).report(stage), text + "\n")?;
    Ok(report)
}

fn need(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::StageOrder(format!("{} does not exist; {hint}", path.display())))
    }
}

pub fn load_images(dir: &Path, hint: &str) -> Result<(Vec<Tensor>, Vec<String>)> {
    if !dir.is_dir() {
        return Err(CliError::StageOrder(format!("no image directory at {}; {hint}", dir.display())));
    }
    let (imgs, warnings) = load_dir(dir)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    Ok((imgs.into_iter().map(|(_, t)| t).collect(), warnings))
}

fn train_images(cfg: &PipelineConfig) -> Result<(Vec<Tensor>, Vec<String>)> {
    load_images(&cfg.paths.train_dir(), "run `lic gen-corpus` or point --corpus at a directory with train/ and test/")
}

fn test_images(cfg: &PipelineConfig) -> Result<(Vec<Tensor>, Vec<String>)> {
    load_images(&cfg.paths.test_dir(), "run `lic gen-corpus` or point --corpus at a directory with train/ and test/")
}

/// Per-purpose RNG: OS entropy, or a ChaCha20 stream derived from the
/// pipeline seed when reproducible keys are requested.
fn key_rng(cfg: &PipelineConfig, seeded: bool, label: &str) -> Box<dyn CryptoRngCore> {
    if !seeded {
        return Box::new(OsRng);
    }
    let mut h = Sha256::new();
    h.update(b"lic-cli seeded keys");
    h.update(cfg.seed.to_le_bytes());
    h.update(label.as_bytes());
    Box::new(ChaCha20Rng::from_seed(h.finalize().into()))
}

pub trait CryptoRngCore: RngCore + CryptoRng {}
impl<T: RngCore + CryptoRng> CryptoRngCore for T {}

#[derive(Clone, Debug, Serialize)]
pub struct CorpusReport {
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
    pub train: usize,
    pub test: usize,
    pub size: usize,
    pub seed: u64,
}

pub fn gen_corpus(cfg: &PipelineConfig) -> Result<CorpusReport> {
    let c = &cfg.corpus;
    for (dir, n, seed) in [
        (cfg.paths.train_dir(), c.train, cfg.corpus_seed()),
        (cfg.paths.test_dir(), c.test, cfg.test_corpus_seed()),
    ] {
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (i, img) in synthetic_corpus(n, c.size, seed).iter().enumerate() {
            save_png(&dir.join(format!("img_{i:04}.png")), img)?;
        }
    }
    write_report(
        cfg,
        "gen-corpus",
        CorpusReport {
            train_dir: cfg.paths.train_dir(),
            test_dir: cfg.paths.test_dir(),
            train: c.train,
            test: c.test,
            size: c.size,
            seed: cfg.seed,
        },
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub model: PathBuf,
    pub trace: PathBuf,
    pub steps: usize,
    pub params: usize,
    pub lambda: f64,
    /// Mean training loss over the last tenth of the run.
    pub final_loss: f64,
    /// Test set with rounded latents and the prior's estimated rate.
    pub test: RdEval,
    pub warnings: Vec<String>,
}

fn trace_csv(trace: &[RdReport]) -> String {
    let mut s = String::from("step,rate_bpp,distortion,loss\n");
    for (i, r) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{:.6},{:.6},{:.6}\n", r.rate, r.distortion, r.loss));
    }
    s
}

pub fn train(cfg: &PipelineConfig, output: Option<&Path>) -> Result<TrainReport> {
    let (data, mut warnings) = train_images(cfg)?;
    let (test, w2) = test_images(cfg)?;
    warnings.extend(w2);
    let mut model = LicModel::new(cfg.model.clone(), cfg.model_seed())?;
    let trace = train_steps(&mut model, &data, &cfg.train)?;
    let layout = Layout(cfg);
    let path = output.map_or_else(|| layout.model(), Path::to_path_buf);
    artifacts::write(&path, model.to_bytes())?;
    artifacts::write(&layout.train_trace(), trace_csv(&trace))?;
    let tail = &trace[trace.len() - (trace.len() / 10).max(1)..];
    write_report(
        cfg,
        "train",
        TrainReport {
            model: path,
            trace: layout.train_trace(),
            steps: trace.len(),
            params: model.param_count(),
            lambda: model.config.lambda,
            final_loss: tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64,
            test: evaluate(&model, &test)?,
            warnings,
        },
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct PruneStageReport {
    pub model: PathBuf,
    pub csv: PathBuf,
    pub params_before: usize,
    pub params_after: usize,
    pub param_reduction_pct: f64,
    pub macs_before: u64,
    pub macs_after: u64,
    pub iterations: Vec<PruneReport>,
}

pub fn prune(cfg: &PipelineConfig, input: Option<&Path>, output: Option<&Path>) -> Result<PruneStageReport> {
    let layout = Layout(cfg);
    let input = input.map_or_else(|| layout.model(), Path::to_path_buf);
    need(&input, "run `lic train` first")?;
    let mut model = load_checkpoint(&input)?;
    if model.pruned {
        return Err(CliError::StageOrder(format!("{} is already pruned", input.display())));
    }
    let (data, _) = train_images(cfg)?;
    let (test, _) = test_images(cfg)?;
    let rows = run_prune(&mut model, &cfg.prune, &data, &test)?;
    let dense = compact(&model)?;
    let path = output.map_or_else(|| layout.pruned(), Path::to_path_buf);
    artifacts::write(&path, dense.to_bytes())?;
    artifacts::write(&layout.prune_csv(), report_csv(&rows))?;
    let (first, last) = (&rows[0], &rows[rows.len() - 1]);
    write_report(
        cfg,
        "prune",
        PruneStageReport {
            model: path,
            csv: layout.prune_csv(),
            params_before: first.nonzero_params,
            params_after: last.nonzero_params,
            param_reduction_pct: 100.0 * (1.0 - last.nonzero_params as f64 / first.nonzero_params as f64),
            macs_before: first.macs,
            macs_after: last.macs,
            iterations: rows,
        },
    )
}

/// Watermark location implied by the configuration.
pub fn policy(cfg: &PipelineConfig) -> Result<WatermarkPolicy> {
    let probe = LicModel::new(cfg.model.clone(), 0)?;
    Ok(WatermarkPolicy {
        target_layer: cfg.qaw.target(&probe)?,
        bits: cfg.qaw.bits,
    })
}

fn load_registry(cfg: &PipelineConfig) -> Result<Registry> {
    let path = Layout(cfg).registry();
    need(&path, "register a client with `lic keygen --client <id>` first")?;
    let reg = Registry::load(&path)?;
    let want = policy(cfg)?;
    if reg.policy != want {
        return Err(CliError::Config(format!(
            "registry watermark policy {:?} differs from the configured {:?}",
            reg.policy, want
        )));
    }
    Ok(reg)
}

fn load_provider(cfg: &PipelineConfig) -> Result<ProviderKey> {
    let path = Layout(cfg).provider();
    need(&path, "run `lic keygen` first")?;
    Ok(ProviderKey::from_json(&std::fs::read_to_string(&path).map_err(io_err(&path))?)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct KeygenReport {
    pub client: String,
    /// Hex SHA-256 of the public key.
    pub client_id: String,
    pub public_key: PathBuf,
    pub private_key: PathBuf,
    pub encrypted: bool,
    pub registry: PathBuf,
    pub registered_clients: usize,
}

/// Creates a client key pair and registers it, creating the provider key and
/// registry on first use.
pub fn keygen(cfg: &PipelineConfig, client: &str, passphrase: Option<&str>, seeded: bool, force: bool) -> Result<KeygenReport> {
    check_client_id(client)?;
    let layout = Layout(cfg);
    let (pub_path, key_path) = (layout.public_key(client), layout.private_key(client));
    if key_path.exists() && !force {
        return Err(CliError::Config(format!(
            "{} already exists; pass --force to replace it",
            key_path.display()
        )));
    }
    let provider = if layout.provider().exists() {
        load_provider(cfg)?
    } else {
        let p = ProviderKey::generate(&mut key_rng(cfg, seeded, "provider"));
        artifacts::write(&layout.provider(), p.to_json() + "\n")?;
        p
    };
    let mut registry = if layout.registry().exists() {
        load_registry(cfg)?
    } else {
        Registry::new(policy(cfg)?)
    };
    let mut rng = key_rng(cfg, seeded, client);
    let identity = ClientIdentity::generate(client, &mut rng);
    let public = identity.public();
    artifacts::write(&key_path, identity.to_pem(passphrase, &mut rng)?)?;
    artifacts::write(&pub_path, public.to_pem())?;
    registry.register(&public, &provider);
    registry.save(&layout.registry())?;
    write_report(
        cfg,
        &format!("keygen-{client}"),
        KeygenReport {
            client: client.into(),
            client_id: hex::encode(public.key_id()),
            public_key: pub_path,
            private_key: key_path,
            encrypted: passphrase.is_some(),
            registry: layout.registry(),
            registered_clients: registry.clients.len(),
        },
    )
}

pub fn load_public(path: &Path) -> Result<ClientPublic> {
    Ok(ClientPublic::from_pem(&std::fs::read_to_string(path).map_err(io_err(path))?)?)
}

pub fn load_identity(path: &Path, passphrase: Option<&str>) -> Result<ClientIdentity> {
    Ok(ClientIdentity::from_pem(&std::fs::read_to_string(path).map_err(io_err(path))?, passphrase)?)
}

/// Finds the private key in the keys directory whose public half matches.
pub fn find_identity(cfg: &PipelineConfig, key_id: &[u8; 32], passphrase: Option<&str>) -> Result<ClientIdentity> {
    let dir = &cfg.paths.keys;
    if let Ok(entries) = std::fs::read_dir(dir) {
        let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        paths.sort();
        for p in paths.iter().filter(|p| p.extension().is_some_and(|e| e == "pub")) {
            if load_public(p).is_ok_and(|k| &k.key_id() == key_id) {
                return load_identity(&p.with_extension("key"), passphrase);
            }
        }
    }
    Err(CliError::Config(format!(
        "no key in {} matches container recipient {}; pass --key",
        dir.display(),
        hex::encode(key_id)
    )))
}

/// Loads a `LICQ` model or unlocks a `LICE` container in memory. Without
/// `key`, encrypted containers are matched against the keys directory.
pub fn open_model(cfg: &PipelineConfig, path: &Path, key: Option<&Path>, passphrase: Option<&str>) -> Result<LoadedModel> {
    let identity = match key {
        Some(k) => Some(load_identity(k, passphrase)?),
        None => match artifacts::Kind::sniff(&artifacts::read(path)?) {
            Some(artifacts::Kind::EncryptedContainer) => {
                let c = artifacts::load_container(path)?;
                Some(find_identity(cfg, &c.key_id, passphrase)?)
            }
            _ => None,
        },
    };
    load_int_model(path, identity.as_ref())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CodedEval {
    /// `8 · payload_bytes / pixels` over the whole set.
    pub bpp: f64,
    /// Mean per-image PSNR in dB.
    pub psnr: f64,
    /// Mean MS-SSIM, absent when images are too small for five scales.
    pub msssim: Option<f64>,
    pub payload_bytes: usize,
}

/// Codes every image to a real bitstream and back.
pub fn eval_coded(engine: &IntModel, images: &[Tensor], patch: &PatchConfig) -> Result<CodedEval> {
    if images.is_empty() {
        return Err(lic_core::Error::Empty("evaluation set").into());
    }
    let (mut bytes, mut pixels, mut db, mut ss) = (0usize, 0usize, 0.0, Some(0.0));
    for x in images {
        let bs = encode_image(engine, x, patch)?;
        let y = decode_image(engine, &bs)?;
        bytes += bs.payload_bytes();
        pixels += x.shape()[2] * x.shape()[3];
        db += psnr(x, &y)?;
        ss = match (ss, ms_ssim(x, &y)) {
            (Some(a), Ok(v)) => Some(a + v),
            _ => None,
        };
    }
    let n = images.len() as f64;
    Ok(CodedEval {
        bpp: 8.0 * bytes as f64 / pixels as f64,
        psnr: db / n,
        msssim: ss.map(|s| s / n),
        payload_bytes: bytes,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TwinReport {
    pub model: PathBuf,
    pub test: CodedEval,
    /// Twin PSNR minus watermarked PSNR.
    pub psnr_penalty_db: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct QawReport {
    pub client: String,
    pub model: PathBuf,
    pub beta_trace: PathBuf,
    pub target_layer: usize,
    pub bits: usize,
    pub steps: usize,
    pub c_ber: f64,
    pub final_beta: f64,
    pub size: SizeReport,
    pub test: CodedEval,
    pub twin: Option<TwinReport>,
}

pub fn qaw(cfg: &PipelineConfig, client: &str, input: Option<&Path>, twin: bool) -> Result<QawReport> {
    check_client_id(client)?;
    let layout = Layout(cfg);
    let input = input.map_or_else(|| layout.pruned(), Path::to_path_buf);
    need(&input, "run `lic prune` first")?;
    let model = load_checkpoint(&input)?;
    if !model.pruned {
        return Err(CliError::StageOrder(format!(
            "qaw requires a pruned checkpoint but {} is unpruned; run `lic prune` first",
            input.display()
        )));
    }
    let registry = load_registry(cfg)?;
    let record = registry
        .get(client)
        .ok_or_else(|| CliError::StageOrder(format!("client {client} is not registered; run `lic keygen --client {client}`")))?;
    let (data, _) = train_images(cfg)?;
    let (test, _) = test_images(cfg)?;
    let p = registry.policy;
    let qcfg = lic_core::watermark::QawConfig {
        target_layer: Some(p.target_layer),
        bits: p.bits,
        ..cfg.qaw.clone()
    };
    let key = KeyMatrix::for_model(record.key_seed, &model, p.target_layer, p.bits)?;
    let bits = derive_watermark(&record.public_key, &record.salt, p.bits)?;
    let stats = calibrate(&model, &data)?;
    let (mut wm, mut ctx) = (model.clone(), QuantContext::new(&model, &stats)?);
    let r = qaw_finetune(&mut wm, &mut ctx, &key, &bits, &data, &data, &cfg.qat, &qcfg)?;
    let path = layout.qaw_model(client);
    artifacts::write(&path, r.quantized.to_bytes())?;
    artifacts::write(&layout.beta_trace(client), beta_trace_csv(&r.beta_trace))?;
    let test_eval = eval_coded(&IntModel::load(r.quantized.clone())?, &test, &cfg.patch)?;
    let twin = if twin {
        let (mut tm, mut tctx) = (model.clone(), QuantContext::new(&model, &stats)?);
        qat_finetune(&mut tm, &mut tctx, &data, &cfg.qat, &mut NoObserver)?;
        let tq = QuantizedModel::export(&tm, &tctx, &data)?;
        artifacts::write(&layout.twin(), tq.to_bytes())?;
        let e = eval_coded(&IntModel::load(tq)?, &test, &cfg.patch)?;
        Some(TwinReport {
            model: layout.twin(),
            test: e,
            psnr_penalty_db: e.psnr - test_eval.psnr,
        })
    } else {
        None
    };
    write_report(
        cfg,
        &format!("qaw-{client}"),
        QawReport {
            client: client.into(),
            model: path,
            beta_trace: layout.beta_trace(client),
            target_layer: p.target_layer,
            bits: p.bits,
            steps: r.steps,
            c_ber: r.report.c_ber,
            final_beta: r.beta_trace.last().map_or(qcfg.beta, |b| b.beta),
            size: r.quantized.size_report(),
            test: test_eval,
            twin,
        },
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct PackageReport {
    pub client: String,
    pub container: PathBuf,
    pub client_id: String,
    pub model_hash: String,
    pub container_bytes: usize,
    pub c_ber: f64,
}

pub fn package(cfg: &PipelineConfig, client: &str, model: Option<&Path>) -> Result<PackageReport> {
    check_client_id(client)?;
    let layout = Layout(cfg);
    let model_path = model.map_or_else(|| layout.qaw_model(client), Path::to_path_buf);
    need(&model_path, &format!("run `lic qaw --client {client}` first"))?;
    let qm = load_quantized(&model_path)?;
    let pub_path = layout.public_key(client);
    need(&pub_path, &format!("run `lic keygen --client {client}` first"))?;
    let public = load_public(&pub_path)?;
    let provider = load_provider(cfg)?;
    let registry = load_registry(cfg)?;
    let c = drm_package(&qm, &public, &provider, &registry.policy, &mut OsRng)?;
    let bytes = c.to_bytes();
    let path = layout.container(client);
    artifacts::write(&path, &bytes)?;
    write_report(
        cfg,
        &format!("package-{client}"),
        PackageReport {
            client: client.into(),
            container: path,
            client_id: hex::encode(public.key_id()),
            model_hash: hex::encode(qm.hash()),
            container_bytes: bytes.len(),
            c_ber: 100.0,
        },
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct UnlockReport {
    pub container: PathBuf,
    pub metadata: Metadata,
    pub layers: usize,
    pub latent_channels: usize,
    pub verified: bool,
}

/// Authenticates and loads a container in memory; nothing is written but
/// the report.
pub fn unlock(cfg: &PipelineConfig, container: &Path, key: Option<&Path>, passphrase: Option<&str>) -> Result<UnlockReport> {
    need(container, "run `lic package` first")?;
    let c = artifacts::load_container(container)?;
    let identity = match key {
        Some(k) => load_identity(k, passphrase)?,
        None => find_identity(cfg, &c.key_id, passphrase)?,
    };
    let (metadata, engine) = Unlocker::new(&identity).unlock_and_load(&c)?;
    let stem = container.file_stem().and_then(|s| s.to_str()).unwrap_or("container");
    write_report(
        cfg,
        &format!("unlock-{stem}"),
        UnlockReport {
            container: container.to_path_buf(),
            metadata,
            layers: engine.quantized.layers.len(),
            latent_channels: engine.latent_channels(),
            verified: true,
        },
    )
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".report.json");
    PathBuf::from(s)
}

fn write_sidecar<T: Serialize>(path: &Path, report: T) -> Result<T> {
    artifacts::write(&sidecar(path), serde_json::to_string_pretty(&report).expect("reports serialize") + "\n")?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct EncodeReport {
    pub input: PathBuf,
    pub output: PathBuf,
    pub width: usize,
    pub height: usize,
    pub patches: usize,
    pub payload_bytes: usize,
    pub file_bytes: usize,
    pub bpp: f64,
}

pub fn encode(cfg: &PipelineConfig, model: &LoadedModel, input: &Path, output: &Path) -> Result<EncodeReport> {
    let img = load_image(input)?;
    let bs = encode_image(&model.engine, &img, &cfg.patch)?;
    let bytes = bs.to_bytes();
    artifacts::write(output, &bytes)?;
    write_sidecar(
        output,
        EncodeReport {
            input: input.into(),
            output: output.into(),
            width: bs.width,
            height: bs.height,
            patches: bs.grid.count(),
            payload_bytes: bs.payload_bytes(),
            file_bytes: bytes.len(),
            bpp: 8.0 * bs.payload_bytes() as f64 / (bs.width * bs.height) as f64,
        },
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct DecodeReport {
    pub input: PathBuf,
    pub output: PathBuf,
    pub width: usize,
    pub height: usize,
    pub psnr: Option<f64>,
    pub msssim: Option<f64>,
}

pub fn decode(model: &LoadedModel, input: &Path, output: &Path, reference: Option<&Path>) -> Result<DecodeReport> {
    let bs = artifacts::load_bitstream(input)?;
    let img = decode_image(&model.engine, &bs)?;
    save_image(output, &img)?;
    let (mut p, mut s) = (None, None);
    if let Some(r) = reference {
        let x = load_image(r)?;
        p = Some(psnr(&x, &img)?);
        s = ms_ssim(&x, &img).ok();
    }
    write_sidecar(
        output,
        DecodeReport {
            input: input.into(),
            output: output.into(),
            width: bs.width,
            height: bs.height,
            psnr: p,
            msssim: s,
        },
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct ExtractReport {
    pub client: String,
    pub target_layer: usize,
    pub bits: usize,
    pub ber: f64,
    pub c_ber: f64,
    pub exact: bool,
    pub chance_band: (f64, f64),
    pub extracted: String,
}

pub fn extract(cfg: &PipelineConfig, model: &LoadedModel, client: &str) -> Result<ExtractReport> {
    let registry = load_registry(cfg)?;
    let record = registry
        .get(client)
        .ok_or_else(|| CliError::Config(format!("client {client} is not in the registry")))?;
    let r = record.extract(&model.engine.quantized, &registry.policy)?;
    write_report(
        cfg,
        &format!("extract-{client}"),
        ExtractReport {
            client: client.into(),
            target_layer: registry.policy.target_layer,
            bits: registry.policy.bits,
            ber: r.ber,
            c_ber: r.c_ber,
            exact: r.is_exact(),
            chance_band: chance_band(registry.policy.bits),
            extracted: r.bits.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect(),
        },
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceReport {
    pub model_hash: String,
    pub chance_band: (f64, f64),
    pub matches: Vec<TraceMatch>,
    /// The top match when it is the only client outside the chance band.
    pub identified: Option<String>,
}

pub fn trace(cfg: &PipelineConfig, model: &LoadedModel) -> Result<TraceReport> {
    let registry = load_registry(cfg)?;
    let matches = trace_leak(&model.engine.quantized, &registry)?;
    let outside: Vec<&TraceMatch> = matches.iter().filter(|m| !m.in_chance_band).collect();
    let identified = match outside.as_slice() {
        [only] if only.c_ber > 50.0 => Some(only.client.clone()),
        _ => None,
    };
    write_report(
        cfg,
        "trace",
        TraceReport {
            model_hash: hex::encode(model.engine.hash),
            chance_band: chance_band(registry.policy.bits),
            matches,
            identified,
        },
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalRow {
    pub model: PathBuf,
    pub lambda: f64,
    /// `coded` for real bitstreams, `estimated` for float checkpoints.
    pub source: &'static str,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BdReport {
    pub anchor: PathBuf,
    pub method: BdMethod,
    pub bd_psnr_db: f64,
    pub bd_rate_pct: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub csv: PathBuf,
    pub rows: Vec<EvalRow>,
    /// Sorted by λ: strictly increasing rate and non-decreasing PSNR.
    pub monotone: bool,
    pub bd: Option<BdReport>,
}

pub fn eval_rows_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("model,lambda,source,bpp,psnr_db,msssim,msssim_db\n");
    for r in rows {
        let (ms, msdb) = r
            .msssim
            .map_or((String::new(), String::new()), |m| (format!("{m:.6}"), format!("{:.4}", msssim_db(m))));
        s.push_str(&format!(
            "{},{},{},{:.6},{:.4},{ms},{msdb}\n",
            r.model.display(),
            r.lambda,
            r.source,
            r.bpp,
            r.psnr
        ));
    }
    s
}

/// Reads `bpp` and `psnr_db` columns from an RD CSV.
pub fn read_curve(path: &Path) -> Result<RdCurve> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |d: String| CliError::Artifact {
        path: path.into(),
        detail: d,
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty CSV".into()))?.split(',').collect();
    let col = |n: &str| header.iter().position(|h| *h == n).ok_or_else(|| bad(format!("no {n} column")));
    let (ib, ip) = (col("bpp")?, col("psnr_db")?);
    let mut points = Vec::new();
    for l in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = l.split(',').collect();
        let num = |i: usize| f.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad(format!("bad row {l:?}")));
        points.push(RdPoint {
            bpp: num(ib)?,
            psnr: num(ip)?,
            msssim: 1.0,
        });
    }
    Ok(RdCurve::new(points)?)
}

fn monotone(rows: &[EvalRow]) -> bool {
    let mut r: Vec<&EvalRow> = rows.iter().collect();
    r.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    r.windows(2).all(|w| w[1].bpp > w[0].bpp && w[1].psnr >= w[0].psnr)
}

pub fn eval(
    cfg: &PipelineConfig,
    models: &[PathBuf],
    key: Option<&Path>,
    passphrase: Option<&str>,
    images: Option<&Path>,
    anchor: Option<(&Path, BdMethod)>,
) -> Result<EvalReport> {
    if models.is_empty() {
        return Err(CliError::Config("eval needs at least one model".into()));
    }
    let (test, _) = match images {
        Some(d) => load_images(d, "check --images")?,
        None => test_images(cfg)?,
    };
    let mut rows = Vec::new();
    for m in models {
        let bytes = artifacts::read(m)?;
        let row = if artifacts::Kind::sniff(&bytes) == Some(artifacts::Kind::FloatCheckpoint) {
            let model = load_checkpoint(m)?;
            let e = evaluate(&model, &test)?;
            let ss = test
                .iter()
                .map(|x| ms_ssim(x, &model.reconstruct(x)?.1))
                .collect::<lic_core::Result<Vec<f64>>>()
                .ok()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64);
            EvalRow {
                model: m.clone(),
                lambda: model.config.lambda,
                source: "estimated",
                bpp: e.report.rate,
                psnr: e.psnr,
                msssim: ss,
            }
        } else {
            let lm = open_model(cfg, m, key, passphrase)?;
            let e = eval_coded(&lm.engine, &test, &cfg.patch)?;
            EvalRow {
                model: m.clone(),
                lambda: lm.engine.quantized.config.lambda,
                source: "coded",
                bpp: e.bpp,
                psnr: e.psnr,
                msssim: e.msssim,
            }
        };
        rows.push(row);
    }
    let csv = cfg.paths.out.join("rd.csv");
    artifacts::write(&csv, eval_rows_csv(&rows))?;
    let bd = match anchor {
        Some((path, method)) => {
            let a = read_curve(path)?;
            let b = RdCurve::from_pairs(&rows.iter().map(|r| (r.bpp, r.psnr)).collect::<Vec<_>>())?;
            Some(BdReport {
                anchor: path.into(),
                method,
                bd_psnr_db: bd_psnr(&a, &b, method)?,
                bd_rate_pct: bd_rate(&a, &b, method)?,
            })
        }
        None => None,
    };
    write_report(
        cfg,
        "eval",
        EvalReport {
            csv,
            monotone: monotone(&rows),
            rows,
            bd,
        },
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineReport {
    pub corpus: CorpusReport,
    pub train: TrainReport,
    pub prune: PruneStageReport,
    pub keygen: KeygenReport,
    pub qaw: QawReport,
    pub package: PackageReport,
    pub unlock: UnlockReport,
    pub encode: EncodeReport,
    pub decode: DecodeReport,
    pub extract: ExtractReport,
}

/// gen-corpus → train → prune → keygen → qaw → package → unlock → encode →
/// decode → extract, all in `cfg.paths.out`.
pub fn run_pipeline(cfg: &PipelineConfig, client: &str, seeded_keys: bool, passphrase: Option<&str>) -> Result<PipelineReport> {
    let corpus = gen_corpus(cfg)?;
    let train = train(cfg, None)?;
    let prune = prune(cfg, None, None)?;
    let keygen = keygen(cfg, client, passphrase, seeded_keys, true)?;
    let qaw = qaw(cfg, client, None, false)?;
    let package = package(cfg, client, None)?;
    let layout = Layout(cfg);
    let container = layout.container(client);
    let unlock = unlock(cfg, &container, None, passphrase)?;
    let model = open_model(cfg, &container, None, passphrase)?;
    let image = cfg.paths.test_dir().join("img_0000.png");
    let coded = cfg.paths.out.join("img_0000.licb");
    let decoded = cfg.paths.out.join("img_0000_decoded.png");
    let encode = encode(cfg, &model, &image, &coded)?;
    let decode = decode(&model, &coded, &decoded, Some(&image))?;
    let extract = extract(cfg, &model, client)?;
    write_report(
        cfg,
        "pipeline",
        PipelineReport {
            corpus,
            train,
            prune,
            keygen,
            qaw,
            package,
            unlock,
            encode,
            decode,
            extract,
        },
    )
}

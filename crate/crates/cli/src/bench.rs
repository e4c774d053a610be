//! Throughput benchmark with a per-stage split, optionally including the
//! cost of unlocking the model from its encrypted container.
//!
//! Stages: `encode` (analysis transform), `ac` (range coding), `ad` (range
//! decoding), `decode` (synthesis transform and patch blending). Patches are
//! processed sequentially so the split is not blurred by the thread pool.

use std::time::Instant;

use lic_core::engine::{blend_patches, plan_grid, split_patches, IntModel, PatchConfig};
use lic_core::entropy::{decode_latent, encode_latent};
use lic_core::Tensor;
use lic_drm::{ClientIdentity, EncryptedContainer, Unlocker};
use serde::Serialize;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub mode: &'static str,
    pub repeat: usize,
    pub frames: usize,
    pub pixels: usize,
    pub payload_bytes: usize,
    pub encode_ms: f64,
    pub ac_ms: f64,
    pub ad_ms: f64,
    pub decode_ms: f64,
    pub unlock_ms: f64,
    pub total_ms: f64,
    pub fps: f64,
    /// FPS change against the DRM-off run of the same repeat, in percent.
    pub delta_fps_pct: Option<f64>,
}

pub struct DrmBench<'a> {
    pub container: &'a EncryptedContainer,
    pub identity: &'a ClientIdentity,
    pub cache_key: bool,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn run_frames(engine: &IntModel, images: &[Tensor], patch: &PatchConfig, row: &mut BenchRow) -> Result<()> {
    let table = &engine.quantized.cdf;
    for img in images {
        let (_, _, h, w) = img.dims4()?;
        let grid = plan_grid(engine.total_stride, h, w, patch)?;
        let mut decoded = Vec::with_capacity(grid.count());
        for p in split_patches(img, &grid)? {
            let t = Instant::now();
            let (latent, lh, lw) = engine.encode(&p)?;
            row.encode_ms += ms(t);
            let t = Instant::now();
            let bytes = encode_latent(&latent, lh * lw, table)?;
            row.ac_ms += ms(t);
            row.payload_bytes += bytes.len();
            let t = Instant::now();
            let back = decode_latent(&bytes, lh * lw, table)?;
            row.ad_ms += ms(t);
            let t = Instant::now();
            decoded.push(engine.decode(back, lh, lw)?);
            row.decode_ms += ms(t);
        }
        let t = Instant::now();
        blend_patches(&decoded, &grid, h, w)?;
        row.decode_ms += ms(t);
        row.frames += 1;
        row.pixels += h * w;
    }
    Ok(())
}

fn empty(mode: &'static str, repeat: usize) -> BenchRow {
    BenchRow {
        mode,
        repeat,
        frames: 0,
        pixels: 0,
        payload_bytes: 0,
        encode_ms: 0.0,
        ac_ms: 0.0,
        ad_ms: 0.0,
        decode_ms: 0.0,
        unlock_ms: 0.0,
        total_ms: 0.0,
        fps: 0.0,
        delta_fps_pct: None,
    }
}

/// One `drm-off` row per repeat, and a paired `drm-on` row when `drm` is set.
pub fn bench(
    engine: &IntModel,
    images: &[Tensor],
    patch: &PatchConfig,
    repeat: usize,
    drm: Option<DrmBench<'_>>,
) -> Result<Vec<BenchRow>> {
    if images.is_empty() {
        return Err(lic_core::Error::Empty("benchmark image set").into());
    }
    if repeat == 0 {
        return Err(CliError::Config("repeat must be positive".into()));
    }
    let mut unlocker = drm.as_ref().map(|d| {
        if d.cache_key {
            Unlocker::with_cache(d.identity)
        } else {
            Unlocker::new(d.identity)
        }
    });
    let mut rows = Vec::new();
    for r in 0..repeat {
        let mut off = empty("drm-off", r);
        let t = Instant::now();
        run_frames(engine, images, patch, &mut off)?;
        off.total_ms = ms(t);
        off.fps = off.frames as f64 / (off.total_ms / 1e3);
        if let (Some(d), Some(u)) = (&drm, unlocker.as_mut()) {
            let mut on = empty("drm-on", r);
            let t = Instant::now();
            let (_, unlocked) = u.unlock_and_load(d.container)?;
            on.unlock_ms = ms(t);
            if unlocked.hash != engine.hash {
                return Err(CliError::Config("container holds a different model than --model".into()));
            }
            run_frames(&unlocked, images, patch, &mut on)?;
            on.total_ms = ms(t);
            on.fps = on.frames as f64 / (on.total_ms / 1e3);
            on.delta_fps_pct = Some(100.0 * (on.fps - off.fps) / off.fps);
            rows.push(off);
            rows.push(on);
        } else {
            rows.push(off);
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(
        "mode,repeat,frames,pixels,payload_bytes,encode_ms,ac_ms,ad_ms,decode_ms,unlock_ms,total_ms,fps,delta_fps_pct\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{}\n",
            r.mode,
            r.repeat,
            r.frames,
            r.pixels,
            r.payload_bytes,
            r.encode_ms,
            r.ac_ms,
            r.ad_ms,
            r.decode_ms,
            r.unlock_ms,
            r.total_ms,
            r.fps,
            r.delta_fps_pct.map_or(String::new(), |d| format!("{d:.3}"))
        ));
    }
    s
}

//! Image to `LICB` bitstream and back using the integer engine.
//!
//! Images that fit in one patch are coded in one shot after edge-padding to a
//! multiple of the total stride. Larger images are split into square patches
//! that overlap by `overlap` pixels; the decoder cross-fades the overlaps
//! linearly.

use rayon::prelude::*;

use super::IntModel;
use crate::entropy::{decode_latent, encode_latent, LatentBitstream, PatchGrid};
use crate::error::{invalid, shape_err, Error, Result};
use crate::image::{crop, pad_edge, quantize_8bit};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub patch: usize,
    pub overlap: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig { patch: 256, overlap: 16 }
    }
}

impl PatchConfig {
    pub fn validate(&self, total_stride: usize) -> Result<()> {
        if self.patch == 0 || !self.patch.is_multiple_of(total_stride) {
            return Err(invalid(format!(
                "patch size {} must be a positive multiple of the total stride {total_stride}",
                self.patch
            )));
        }
        if self.overlap >= self.patch {
            return Err(invalid(format!("overlap {} must be smaller than the patch {}", self.overlap, self.patch)));
        }
        Ok(())
    }
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

fn tiles(len: usize, patch: usize, step: usize) -> usize {
    if len <= patch {
        1
    } else {
        (len - patch).div_ceil(step) + 1
    }
}

fn hex(h: &[u8; 32]) -> String {
    h.iter().map(|b| format!("{b:02x}")).collect()
}

/// Patch layout for an `h × w` image: one stride-aligned patch when it fits,
/// overlapping `cfg.patch` squares otherwise.
pub fn plan_grid(total_stride: usize, h: usize, w: usize, cfg: &PatchConfig) -> Result<PatchGrid> {
    cfg.validate(total_stride)?;
    if h == 0 || w == 0 {
        return Err(invalid("image is empty"));
    }
    if h <= cfg.patch && w <= cfg.patch {
        return Ok(PatchGrid {
            patch_h: round_up(h, total_stride),
            patch_w: round_up(w, total_stride),
            overlap: 0,
            rows: 1,
            cols: 1,
        });
    }
    let step = cfg.patch - cfg.overlap;
    Ok(PatchGrid {
        patch_h: cfg.patch,
        patch_w: cfg.patch,
        overlap: cfg.overlap,
        rows: tiles(h, cfg.patch, step),
        cols: tiles(w, cfg.patch, step),
    })
}

fn padded_size(g: &PatchGrid) -> (usize, usize) {
    (
        (g.rows - 1) * (g.patch_h - g.overlap) + g.patch_h,
        (g.cols - 1) * (g.patch_w - g.overlap) + g.patch_w,
    )
}

/// Edge-pads `img` to cover `grid` and cuts it into row-major patches.
pub fn split_patches(img: &Tensor, grid: &PatchGrid) -> Result<Vec<Tensor>> {
    let (ph, pw) = padded_size(grid);
    let padded = pad_edge(img, ph, pw)?;
    let (sh, sw) = (grid.patch_h - grid.overlap, grid.patch_w - grid.overlap);
    (0..grid.count())
        .map(|i| crop(&padded, (i / grid.cols) * sh, (i % grid.cols) * sw, grid.patch_h, grid.patch_w))
        .collect()
}

/// Cross-fades decoded patches back into an `h × w` image.
pub fn blend_patches(patches: &[Tensor], grid: &PatchGrid, h: usize, w: usize) -> Result<Tensor> {
    let g = grid;
    let (ph, pw) = padded_size(g);
    if patches.len() != g.count() || h > ph || w > pw {
        return Err(Error::Corrupt("patches do not cover the image".into()));
    }
    let (step_h, step_w) = (g.patch_h - g.overlap, g.patch_w - g.overlap);
    let mut acc = vec![0.0; 3 * ph * pw];
    let mut wsum = vec![0.0; ph * pw];
    let plane = g.patch_h * g.patch_w;
    for (i, p) in patches.iter().enumerate() {
        if p.shape() != [1, 3, g.patch_h, g.patch_w] {
            return Err(shape_err("blend_patches", format!("patch {i} has shape {:?}", p.shape())));
        }
        let (r, c) = (i / g.cols, i % g.cols);
        let (y0, x0) = (r * step_h, c * step_w);
        let d = p.data();
        for y in 0..g.patch_h {
            let wy = ramp(y, g.patch_h, g.overlap, r == 0, r + 1 == g.rows);
            for x in 0..g.patch_w {
                let wt = wy * ramp(x, g.patch_w, g.overlap, c == 0, c + 1 == g.cols);
                let gi = (y0 + y) * pw + x0 + x;
                wsum[gi] += wt;
                for ch in 0..3 {
                    acc[ch * ph * pw + gi] += wt * d[ch * plane + y * g.patch_w + x];
                }
            }
        }
    }
    for (i, v) in acc.iter_mut().enumerate() {
        *v /= wsum[i % (ph * pw)];
    }
    let full = Tensor::new(vec![1, 3, ph, pw], acc)?;
    Ok(quantize_8bit(&crop(&full, 0, 0, h, w)?))
}

pub fn encode_image(model: &IntModel, img: &Tensor, cfg: &PatchConfig) -> Result<LatentBitstream> {
    let (b, c, h, w) = img.dims4()?;
    if b != 1 || c != 3 || h == 0 || w == 0 {
        return Err(shape_err("encode_image", format!("expected one non-empty RGB image, got {:?}", img.shape())));
    }
    let grid = plan_grid(model.total_stride, h, w, cfg)?;
    let patches = split_patches(img, &grid)?;
    let table = &model.quantized.cdf;
    let coded: Vec<(Vec<u8>, usize, usize)> = patches
        .par_iter()
        .map(|p| {
            let (latent, lh, lw) = model.encode(p)?;
            Ok((encode_latent(&latent, lh * lw, table)?, lh, lw))
        })
        .collect::<Result<_>>()?;
    let (latent_h, latent_w) = (coded[0].1, coded[0].2);
    Ok(LatentBitstream {
        height: h,
        width: w,
        grid,
        latent_h,
        latent_w,
        channels: model.latent_channels(),
        model_hash: model.hash,
        payloads: coded.into_iter().map(|c| c.0).collect(),
    })
}

/// Linear ramp weight of local coordinate `t` along one axis.
fn ramp(t: usize, len: usize, overlap: usize, first: bool, last: bool) -> f64 {
    if overlap == 0 {
        return 1.0;
    }
    if !first && t < overlap {
        return (t as f64 + 0.5) / overlap as f64;
    }
    if !last && t >= len - overlap {
        return ((len - t) as f64 - 0.5) / overlap as f64;
    }
    1.0
}

pub fn decode_image(model: &IntModel, bs: &LatentBitstream) -> Result<Tensor> {
    if bs.model_hash != model.hash {
        return Err(Error::ModelMismatch {
            expected: hex(&bs.model_hash),
            found: hex(&model.hash),
        });
    }
    let g = bs.grid;
    let s = model.total_stride;
    if bs.channels != model.latent_channels()
        || bs.latent_h * s != g.patch_h
        || bs.latent_w * s != g.patch_w
        || bs.payloads.len() != g.count()
        || g.overlap >= g.patch_h.min(g.patch_w)
    {
        return Err(Error::Corrupt("bitstream geometry does not match the model".into()));
    }
    let (ph, pw) = padded_size(&g);
    if bs.height > ph || bs.width > pw {
        return Err(Error::Corrupt("image size exceeds the patch grid".into()));
    }
    let table = &model.quantized.cdf;
    let patches: Vec<Tensor> = bs
        .payloads
        .par_iter()
        .map(|bytes| {
            let latent = decode_latent(bytes, bs.latent_plane(), table)?;
            model.decode(latent, bs.latent_h, bs.latent_w)
        })
        .collect::<Result<_>>()?;
    blend_patches(&patches, &g, bs.height, bs.width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{LicConfig, LicModel};
    use crate::image::synthetic_corpus;
    use crate::quantizer::{calibrate, QuantContext, QuantizedModel};

    fn int_model(seed: u64) -> IntModel {
        let model = LicModel::new(
            LicConfig {
                stages: 2,
                channels: 6,
                ..LicConfig::default()
            },
            seed,
        )
        .unwrap();
        let imgs = synthetic_corpus(2, 16, 3);
        let ctx = QuantContext::new(&model, &calibrate(&model, &imgs).unwrap()).unwrap();
        IntModel::load(QuantizedModel::export(&model, &ctx, &imgs).unwrap()).unwrap()
    }

    #[test]
    fn ramps_sum_to_one_across_an_overlap() {
        let (len, ov) = (12, 4);
        for t in 0..ov {
            let a = ramp(len - ov + t, len, ov, true, false);
            let b = ramp(t, len, ov, false, true);
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_shot_round_trip_and_padding() {
        let m = int_model(1);
        let img = crop(&synthetic_corpus(1, 24, 9)[0], 0, 0, 21, 18).unwrap();
        let bs = encode_image(&m, &img, &PatchConfig::default()).unwrap();
        assert_eq!(bs.grid.count(), 1);
        assert_eq!((bs.grid.patch_h, bs.grid.patch_w), (24, 20));
        let parsed = LatentBitstream::from_bytes(&bs.to_bytes()).unwrap();
        let out = decode_image(&m, &parsed).unwrap();
        assert_eq!(out.shape(), &[1, 3, 21, 18]);
        // Decoding equals the engine run on the padded image.
        let padded = pad_edge(&img, 24, 20).unwrap();
        let (lat, lh, lw) = m.encode(&padded).unwrap();
        let direct = crop(&m.decode(lat, lh, lw).unwrap(), 0, 0, 21, 18).unwrap();
        assert_eq!(out, direct);
    }

    #[test]
    fn patched_decode_is_deterministic_and_sized() {
        let m = int_model(2);
        let img = synthetic_corpus(1, 40, 5).remove(0);
        let cfg = PatchConfig { patch: 16, overlap: 4 };
        let bs = encode_image(&m, &img, &cfg).unwrap();
        assert_eq!((bs.grid.rows, bs.grid.cols), (3, 3));
        let a = decode_image(&m, &bs).unwrap();
        let b = decode_image(&m, &bs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 3, 40, 40]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn wrong_model_is_rejected() {
        let (a, b) = (int_model(1), int_model(2));
        let img = synthetic_corpus(1, 16, 1).remove(0);
        let bs = encode_image(&a, &img, &PatchConfig::default()).unwrap();
        assert!(matches!(decode_image(&b, &bs), Err(Error::ModelMismatch { .. })));
        assert!(PatchConfig { patch: 18, overlap: 2 }.validate(4).is_err());
        assert!(PatchConfig { patch: 16, overlap: 16 }.validate(4).is_err());
    }
}

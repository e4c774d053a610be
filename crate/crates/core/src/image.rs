//! PNG/PPM I/O, seeded synthetic corpora and padding helpers.
//!
//! Images are `[1, 3, H, W]` tensors in `[0, 1]`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{format_err, invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Snaps values onto the 8-bit grid.
pub fn quantize_8bit(x: &Tensor) -> Tensor {
    x.map(|v| to_u8(v) as f64 / 255.0)
}

pub fn from_rgb8(h: usize, w: usize, rgb: &[u8]) -> Result<Tensor> {
    if rgb.len() != h * w * 3 {
        return Err(shape_err("image", format!("{} bytes for {h}x{w} RGB", rgb.len())));
    }
    Ok(Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        rgb[p * 3 + c] as f64 / 255.0
    }))
}

pub fn to_rgb8(x: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (b, c, h, w) = x.dims4()?;
    if b != 1 || c != 3 {
        return Err(shape_err("image", format!("expected one RGB image, got {:?}", x.shape())));
    }
    let d = x.data();
    let mut out = vec![0u8; h * w * 3];
    for ch in 0..3 {
        for p in 0..h * w {
            out[p * 3 + ch] = to_u8(d[ch * h * w + p]);
        }
    }
    Ok((h, w, out))
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let decoder = png::Decoder::new(File::open(path)?);
    let mut reader = decoder
        .read_info()
        .map_err(|e| format_err("PNG", format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| format_err("PNG", format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format_err("PNG", format!("{}: only 8-bit images are supported", path.display())));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => px.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => {
            return Err(format_err("PNG", format!("{}: palette images are not supported", path.display())))
        }
    };
    from_rgb8(h, w, &rgb)
}

pub fn save_png(path: &Path, x: &Tensor) -> Result<()> {
    let (h, w, rgb) = to_rgb8(x)?;
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| format_err("PNG", e.to_string()))?;
    writer.write_image_data(&rgb).map_err(|e| format_err("PNG", e.to_string()))?;
    Ok(())
}

/// Binary P6 PPM.
pub fn save_ppm(path: &Path, x: &Tensor) -> Result<()> {
    let (h, w, rgb) = to_rgb8(x)?;
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(&rgb)?;
    Ok(())
}

/// Loads by extension (`.png`).
pub fn load_image(path: &Path) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => load_png(path),
        _ => Err(invalid(format!("{}: unsupported image type", path.display()))),
    }
}

pub fn save_image(path: &Path, x: &Tensor) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ppm") => save_ppm(path, x),
        _ => save_png(path, x),
    }
}

/// Every readable PNG in `dir`, sorted by name; unreadable files become warnings.
pub fn load_dir(dir: &Path) -> Result<(Vec<(PathBuf, Tensor)>, Vec<String>)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let mut images = Vec::new();
    let mut warnings = Vec::new();
    for p in paths {
        match load_png(&p) {
            Ok(t) => images.push((p, t)),
            Err(e) => warnings.push(format!("skipping {}: {e}", p.display())),
        }
    }
    if images.is_empty() {
        return Err(Error::Empty("image directory"));
    }
    Ok((images, warnings))
}

/// Edge-replicating pad to `h × w` (bottom and right).
pub fn pad_edge(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, c, ih, iw) = x.dims4()?;
    if h < ih || w < iw {
        return Err(shape_err("pad", format!("cannot pad {ih}x{iw} down to {h}x{w}")));
    }
    let d = x.data();
    Ok(Tensor::from_fn(&[b, c, h, w], |i| {
        let (bc, p) = (i / (h * w), i % (h * w));
        let (y, xx) = ((p / w).min(ih - 1), (p % w).min(iw - 1));
        d[bc * ih * iw + y * iw + xx]
    }))
}

pub fn crop(x: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
    let (b, c, ih, iw) = x.dims4()?;
    if y0 + h > ih || x0 + w > iw {
        return Err(shape_err("crop", format!("{h}x{w} at ({y0},{x0}) exceeds {ih}x{iw}")));
    }
    let d = x.data();
    Ok(Tensor::from_fn(&[b, c, h, w], |i| {
        let (bc, p) = (i / (h * w), i % (h * w));
        d[bc * ih * iw + (y0 + p / w) * iw + x0 + p % w]
    }))
}

/// Value noise: bilinear interpolation of a random `cells × cells` lattice.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let fy = y as f64 / size as f64 * cells as f64;
            let fx = x as f64 / size as f64 * cells as f64;
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let (sy, sx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
            let at = |a: usize, b: usize| lattice[a * n + b];
            let top = at(iy, ix) * (1.0 - sx) + at(iy, ix + 1) * sx;
            let bot = at(iy + 1, ix) * (1.0 - sx) + at(iy + 1, ix + 1) * sx;
            out[y * size + x] = top * (1.0 - sy) + bot * sy;
        }
    }
    out
}

/// One synthetic image: a colour gradient, a few octaves of value noise and
/// flat shapes (discs and rectangles), quantized to 8 bits.
pub fn synthetic_image(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let c0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.9));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.9));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let octaves: Vec<(Vec<f64>, f64)> = (0..3)
        .map(|o| {
            let cells = 2usize << o;
            (value_noise(rng, size, cells), 0.12 / (1 << o) as f64)
        })
        .collect();
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.6..1.4));
    let mut planes = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let u = ((x as f64 / size as f64 - 0.5) * dx + (y as f64 / size as f64 - 0.5) * dy + 0.5).clamp(0.0, 1.0);
            let n: f64 = octaves.iter().map(|(v, a)| a * v[y * size + x]).sum();
            for c in 0..3 {
                planes[(c * size + y) * size + x] = c0[c] * (1.0 - u) + c1[c] * u + n * tint[c];
            }
        }
    }
    let shapes = rng.gen_range(2..6);
    for _ in 0..shapes {
        let col: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let (cy, cx) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
        let r = rng.gen_range(size as f64 * 0.08..size as f64 * 0.3);
        let disc = rng.gen_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (ddy, ddx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc {
                    ddy * ddy + ddx * ddx <= r * r
                } else {
                    ddy.abs() <= r && ddx.abs() <= r * 0.7
                };
                if inside {
                    for c in 0..3 {
                        planes[(c * size + y) * size + x] = col[c];
                    }
                }
            }
        }
    }
    let t = Tensor::new(vec![1, 3, size, size], planes.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
        .expect("finite synthetic image");
    quantize_8bit(&t)
}

pub fn synthetic_corpus(count: usize, size: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| synthetic_image(&mut rng, size)).collect()
}

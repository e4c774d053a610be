//! `LICB` latent bitstream.
//!
//! ```text
//! magic "LICB" | u16 version
//! u32 height, width                      original image size
//! u32 patch_h, patch_w, overlap          patch geometry in pixels
//! u32 rows, cols                         patch grid
//! u32 latent_h, latent_w, channels       per-patch latent shape
//! [32] model hash (SHA-256 of the LICQ bytes)
//! rows*cols times: u32 length | range-coded payload
//! ```
//! Little-endian throughout.

use crate::error::{format_err, Result};
use crate::format::{ByteReader, ByteWriter};

pub const BITSTREAM_MAGIC: &[u8; 4] = b"LICB";
pub const BITSTREAM_VERSION: u16 = 1;
const WHAT: &str = "LICB bitstream";
const MAX_DIM: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_h: usize,
    pub patch_w: usize,
    pub overlap: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentBitstream {
    pub height: usize,
    pub width: usize,
    pub grid: PatchGrid,
    pub latent_h: usize,
    pub latent_w: usize,
    pub channels: usize,
    pub model_hash: [u8; 32],
    pub payloads: Vec<Vec<u8>>,
}

impl LatentBitstream {
    pub fn latent_plane(&self) -> usize {
        self.latent_h * self.latent_w
    }

    pub fn payload_bytes(&self) -> usize {
        self.payloads.iter().map(Vec::len).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(BITSTREAM_MAGIC).u16(BITSTREAM_VERSION);
        let g = &self.grid;
        for v in [
            self.height,
            self.width,
            g.patch_h,
            g.patch_w,
            g.overlap,
            g.rows,
            g.cols,
            self.latent_h,
            self.latent_w,
            self.channels,
        ] {
            w.usize32(v);
        }
        w.bytes(&self.model_hash);
        for p in &self.payloads {
            w.usize32(p.len()).bytes(p);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(WHAT, bytes);
        r.magic(BITSTREAM_MAGIC)?;
        r.version(BITSTREAM_VERSION)?;
        let height = r.dim(MAX_DIM)?;
        let width = r.dim(MAX_DIM)?;
        let grid = PatchGrid {
            patch_h: r.dim(MAX_DIM)?,
            patch_w: r.dim(MAX_DIM)?,
            overlap: r.usize32()?,
            rows: r.dim(4096)?,
            cols: r.dim(4096)?,
        };
        if grid.overlap >= grid.patch_h.min(grid.patch_w) {
            return Err(format_err(WHAT, "overlap must be smaller than the patch"));
        }
        let latent_h = r.dim(MAX_DIM)?;
        let latent_w = r.dim(MAX_DIM)?;
        let channels = r.dim(1 << 16)?;
        let model_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let mut payloads = Vec::with_capacity(grid.count().min(r.remaining() / 4));
        for _ in 0..grid.count() {
            let n = r.usize32()?;
            payloads.push(r.take(n)?.to_vec());
        }
        r.finish()?;
        Ok(LatentBitstream {
            height,
            width,
            grid,
            latent_h,
            latent_w,
            channels,
            model_hash,
            payloads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn sample() -> LatentBitstream {
        LatentBitstream {
            height: 30,
            width: 20,
            grid: PatchGrid {
                patch_h: 32,
                patch_w: 32,
                overlap: 0,
                rows: 1,
                cols: 2,
            },
            latent_h: 8,
            latent_w: 8,
            channels: 4,
            model_hash: [7; 32],
            payloads: vec![vec![1, 2, 3], vec![]],
        }
    }

    #[test]
    fn round_trip_and_layout() {
        let b = sample();
        let bytes = b.to_bytes();
        assert_eq!(&bytes[..4], b"LICB");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &30u32.to_le_bytes());
        assert_eq!(bytes.len(), 6 + 40 + 32 + 4 + 3 + 4);
        assert_eq!(LatentBitstream::from_bytes(&bytes).unwrap(), b);
    }

    #[test]
    fn damage_is_reported() {
        let bytes = sample().to_bytes();
        assert!(LatentBitstream::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(
            LatentBitstream::from_bytes(&v),
            Err(Error::UnsupportedVersion { .. })
        ));
        let mut m = bytes;
        m[0] = b'X';
        assert!(LatentBitstream::from_bytes(&m).is_err());
    }
}

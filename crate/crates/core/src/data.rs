//! Class-conditional synthetic token grids with tunable spatial
//! locality, plus the binary dataset format.
//!
//! A grid is white noise convolved with a class-parameterized Gaussian
//! kernel (wrap-around, so statistics are stationary) and quantized by
//! equal-mass thresholds into V tokens.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::grid::GridPos;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset corrupt: {0}")]
    Corrupt(String),
    #[error("class id {class} out of range (num_classes {num_classes})")]
    ClassOutOfRange { class: usize, num_classes: usize },
}

/// A V-ary token assignment to every cell plus the class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub side: usize,
    /// Row-major tokens, each < V.
    pub tokens: Vec<u16>,
    pub class_id: u32,
}

impl TokenGrid {
    pub fn get(&self, p: GridPos) -> usize {
        self.tokens[p.row * self.side + p.col] as usize
    }

    pub fn set(&mut self, p: GridPos, token: usize) {
        self.tokens[p.row * self.side + p.col] = token as u16;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub side: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Gaussian blur radius of the latent field.
    pub smoothness: f64,
    /// Per-class log-anisotropy: the row sigma is smoothness·e^a and the
    /// column sigma smoothness·e^(−a).
    pub anisotropy: Vec<f64>,
    pub seed: u64,
}

impl DataConfig {
    pub fn sigmas(&self, class_id: usize) -> (f64, f64) {
        let a = self.anisotropy.get(class_id).copied().unwrap_or(0.0);
        (self.smoothness * a.exp(), self.smoothness * (-a).exp())
    }
}

/// 1D wrap-around Gaussian kernel, normalized.
fn gaussian_kernel(sigma: f64, side: usize) -> Vec<f64> {
    let mut k = vec![0.0; side];
    if sigma < 1e-6 {
        k[0] = 1.0;
        return k;
    }
    for (i, slot) in k.iter_mut().enumerate() {
        // Nearest wrap-around offset.
        let off = i.min(side - i) as f64;
        *slot = (-0.5 * (off / sigma).powi(2)).exp();
    }
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k
}

fn convolve_axis(field: &[f64], side: usize, kernel: &[f64], along_rows: bool) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let mut acc = 0.0;
            for (o, &kv) in kernel.iter().enumerate() {
                let (rr, cc) = if along_rows {
                    ((r + o) % side, c)
                } else {
                    (r, (c + o) % side)
                };
                acc += kv * field[rr * side + cc];
            }
            out[r * side + c] = acc;
        }
    }
    out
}

/// Generates one grid, deterministic per (cfg.seed, class_id, sample_seed).
pub fn gen_grid(cfg: &DataConfig, class_id: usize, sample_seed: u64) -> Result<TokenGrid, DataError> {
    if class_id >= cfg.num_classes {
        return Err(DataError::ClassOutOfRange { class: class_id, num_classes: cfg.num_classes });
    }
    let side = cfg.side;
    let n = side * side;
    let mix = cfg
        .seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add((class_id as u64).wrapping_mul(0xBF58476D1CE4E5B9))
        .wrapping_add(sample_seed.wrapping_mul(0x94D049BB133111EB));
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let noise: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();

    let (sig_row, sig_col) = cfg.sigmas(class_id);
    let k_row = gaussian_kernel(sig_row, side);
    let k_col = gaussian_kernel(sig_col, side);
    let field = convolve_axis(&convolve_axis(&noise, side, &k_row, true), side, &k_col, false);

    // Equal-mass quantization: rank within this grid decides the token.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[a].partial_cmp(&field[b]).unwrap().then(a.cmp(&b)));
    let mut tokens = vec![0u16; n];
    for (rank, &cell) in order.iter().enumerate() {
        tokens[cell] = ((rank * cfg.vocab_size) / n) as u16;
    }
    Ok(TokenGrid { side, tokens, class_id: class_id as u32 })
}

const DATASET_MAGIC: &[u8; 8] = b"LPDDATA\x01";

/// Writes a dataset: magic, header (side, V, num_classes, count as
/// little-endian u32), then per grid a u32 class id and side² u16 tokens.
pub fn dataset_write<W: Write>(
    w: &mut W,
    side: usize,
    vocab_size: usize,
    num_classes: usize,
    grids: &[TokenGrid],
) -> Result<(), DataError> {
    w.write_all(DATASET_MAGIC)?;
    for v in [side as u32, vocab_size as u32, num_classes as u32, grids.len() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for g in grids {
        if g.side != side {
            return Err(DataError::Corrupt(format!(
                "grid side {} does not match dataset side {side}",
                g.side
            )));
        }
        w.write_all(&g.class_id.to_le_bytes())?;
        for t in &g.tokens {
            w.write_all(&t.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Header describing a stored dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub side: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub count: usize,
}

/// Reads a dataset written by [`dataset_write`].
pub fn dataset_read<R: Read>(r: &mut R) -> Result<(DatasetHeader, Vec<TokenGrid>), DataError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| DataError::Corrupt("truncated magic".into()))?;
    if &magic != DATASET_MAGIC {
        return Err(DataError::Corrupt("bad magic".into()));
    }
    let mut buf4 = [0u8; 4];
    let mut read_u32 = |r: &mut R, what: &str| -> Result<u32, DataError> {
        r.read_exact(&mut buf4)
            .map_err(|_| DataError::Corrupt(format!("truncated {what}")))?;
        Ok(u32::from_le_bytes(buf4))
    };
    let side = read_u32(r, "side")? as usize;
    let vocab_size = read_u32(r, "vocab_size")? as usize;
    let num_classes = read_u32(r, "num_classes")? as usize;
    let count = read_u32(r, "count")? as usize;
    if side == 0 || side > 4096 {
        return Err(DataError::Corrupt(format!("implausible side {side}")));
    }
    let n = side * side;
    let mut grids = Vec::with_capacity(count);
    for i in 0..count {
        let mut class_buf = [0u8; 4];
        r.read_exact(&mut class_buf)
            .map_err(|_| DataError::Corrupt(format!("truncated at grid {i}")))?;
        let class_id = u32::from_le_bytes(class_buf);
        if (class_id as usize) >= num_classes {
            return Err(DataError::Corrupt(format!("grid {i} class {class_id} out of range")));
        }
        let mut tokens = vec![0u16; n];
        let mut buf2 = [0u8; 2];
        for t in tokens.iter_mut() {
            r.read_exact(&mut buf2)
                .map_err(|_| DataError::Corrupt(format!("truncated tokens at grid {i}")))?;
            *t = u16::from_le_bytes(buf2);
            if (*t as usize) >= vocab_size {
                return Err(DataError::Corrupt(format!("grid {i} token {t} out of range")));
            }
        }
        grids.push(TokenGrid { side, tokens, class_id });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(DataError::Corrupt("trailing bytes after grids".into()));
    }
    Ok((DatasetHeader { side, vocab_size, num_classes, count }, grids))
}

pub fn dataset_save(
    path: &std::path::Path,
    side: usize,
    vocab_size: usize,
    num_classes: usize,
    grids: &[TokenGrid],
) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    dataset_write(&mut f, side, vocab_size, num_classes, grids)
}

pub fn dataset_load(path: &std::path::Path) -> Result<(DatasetHeader, Vec<TokenGrid>), DataError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    dataset_read(&mut f)
}

//! A small decoder-only transformer over grid tokens: arbitrary-mask
//! attention, learned 2D positional embeddings, a shared query embedding,
//! KV cache, reverse-mode gradients, and a byte-exact checkpoint format.

mod autodiff;
mod forward;
mod optim;
mod sampling;

pub use autodiff::{loss_and_grads, train_forward, TrainItem, TrainTrace};
pub use forward::{
    forward_step, record_rows_are_distributions, AttentionRecord, ColMeta, KVCache, RecordedRow,
    StepAttention, TokenInput,
};
pub use optim::{adam_step, AdamParams, AdamState};
pub use sampling::{cfg_combine, sample_token};

use std::io::{Read, Write};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("embed_dim {embed_dim} not divisible by heads {heads}")]
    HeadSplit { embed_dim: usize, heads: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub side: usize,
    pub num_classes: usize,
    pub cond_dropout_rate: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim % self.heads != 0 {
            return Err(ModelError::HeadSplit {
                embed_dim: self.embed_dim,
                heads: self.heads,
            });
        }
        if self.vocab_size < 2 {
            return Err(ModelError::InvalidConfig("vocab_size must be at least 2".into()));
        }
        if self.num_classes < 1 {
            return Err(ModelError::InvalidConfig("num_classes must be at least 1".into()));
        }
        if self.layers == 0 || self.side == 0 || self.embed_dim == 0 {
            return Err(ModelError::InvalidConfig("zero-sized dimension".into()));
        }
        if !(0.0..1.0).contains(&self.cond_dropout_rate) {
            return Err(ModelError::InvalidConfig("cond_dropout_rate must be in [0,1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Index of the unconditional (null) class row in the class table.
    pub fn null_class(&self) -> usize {
        self.num_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LnParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1: LnParams,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2: LnParams,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All learnable tensors. The same shape is reused for gradients and
/// Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tok_emb: Array2<f64>,
    pub class_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub query_emb: Array1<f64>,
    pub layers: Vec<LayerParams>,
    pub ln_f: LnParams,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let ln = || LnParams { gamma: Array1::zeros(d), beta: Array1::zeros(d) };
        ModelParams {
            tok_emb: Array2::zeros((cfg.vocab_size, d)),
            class_emb: Array2::zeros((cfg.num_classes + 1, d)),
            pos_emb: Array2::zeros((cfg.side * cfg.side, d)),
            query_emb: Array1::zeros(d),
            layers: (0..cfg.layers)
                .map(|_| LayerParams {
                    ln1: ln(),
                    wq: Array2::zeros((d, d)),
                    bq: Array1::zeros(d),
                    wk: Array2::zeros((d, d)),
                    bk: Array1::zeros(d),
                    wv: Array2::zeros((d, d)),
                    bv: Array1::zeros(d),
                    wo: Array2::zeros((d, d)),
                    bo: Array1::zeros(d),
                    ln2: ln(),
                    w1: Array2::zeros((d, 4 * d)),
                    b1: Array1::zeros(4 * d),
                    w2: Array2::zeros((4 * d, d)),
                    b2: Array1::zeros(d),
                })
                .collect(),
            ln_f: ln(),
            out_w: Array2::zeros((d, cfg.vocab_size)),
            out_b: Array1::zeros(cfg.vocab_size),
        }
    }

    /// Named flat views over every tensor, in a fixed order shared by the
    /// optimizer, the checkpoint format, and the finite-difference checks.
    pub fn flat_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [f64])> {
        fn m(a: &mut Array2<f64>) -> (Vec<usize>, &mut [f64]) {
            (a.shape().to_vec(), a.as_slice_mut().expect("standard layout"))
        }
        fn v(a: &mut Array1<f64>) -> (Vec<usize>, &mut [f64]) {
            (a.shape().to_vec(), a.as_slice_mut().expect("standard layout"))
        }
        let mut out: Vec<(String, Vec<usize>, &mut [f64])> = Vec::new();
        fn push<'a>(
            out: &mut Vec<(String, Vec<usize>, &'a mut [f64])>,
            name: String,
            (shape, data): (Vec<usize>, &'a mut [f64]),
        ) {
            out.push((name, shape, data));
        }
        push(&mut out, "tok_emb".into(), m(&mut self.tok_emb));
        push(&mut out, "class_emb".into(), m(&mut self.class_emb));
        push(&mut out, "pos_emb".into(), m(&mut self.pos_emb));
        push(&mut out, "query_emb".into(), v(&mut self.query_emb));
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |n: &str| format!("layer{i}.{n}");
            push(&mut out, p("ln1.gamma"), v(&mut l.ln1.gamma));
            push(&mut out, p("ln1.beta"), v(&mut l.ln1.beta));
            push(&mut out, p("wq"), m(&mut l.wq));
            push(&mut out, p("bq"), v(&mut l.bq));
            push(&mut out, p("wk"), m(&mut l.wk));
            push(&mut out, p("bk"), v(&mut l.bk));
            push(&mut out, p("wv"), m(&mut l.wv));
            push(&mut out, p("bv"), v(&mut l.bv));
            push(&mut out, p("wo"), m(&mut l.wo));
            push(&mut out, p("bo"), v(&mut l.bo));
            push(&mut out, p("ln2.gamma"), v(&mut l.ln2.gamma));
            push(&mut out, p("ln2.beta"), v(&mut l.ln2.beta));
            push(&mut out, p("w1"), m(&mut l.w1));
            push(&mut out, p("b1"), v(&mut l.b1));
            push(&mut out, p("w2"), m(&mut l.w2));
            push(&mut out, p("b2"), v(&mut l.b2));
        }
        push(&mut out, "ln_f.gamma".into(), v(&mut self.ln_f.gamma));
        push(&mut out, "ln_f.beta".into(), v(&mut self.ln_f.beta));
        push(&mut out, "out_w".into(), m(&mut self.out_w));
        push(&mut out, "out_b".into(), v(&mut self.out_b));
        out
    }
}

/// Model configuration plus parameters; the unit that checkpoints store.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub seed: u64,
    pub train_step: u64,
}

/// Deterministic initialization: scaled normal for weight matrices and
/// embeddings, zeros for biases, ones for layer-norm gains.
pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelState, ModelError> {
    config.validate()?;
    let mut params = ModelParams::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).unwrap();
    for (name, _, data) in params.flat_mut() {
        if name.ends_with("gamma") {
            data.fill(1.0);
        } else if name.ends_with("beta")
            || name.starts_with("layer") && name.contains(".b")
            || name == "out_b"
        {
            data.fill(0.0);
        } else {
            for x in data.iter_mut() {
                *x = normal.sample(&mut rng);
            }
        }
    }
    Ok(ModelState { config: *config, params, seed, train_step: 0 })
}

const CKPT_MAGIC: &[u8; 8] = b"LPDCKPT\x01";

/// Writes the checkpoint: magic, config header, then named tensors as
/// little-endian f64, in `flat_mut` order.
pub fn write_checkpoint<W: Write>(w: &mut W, state: &ModelState) -> Result<(), ModelError> {
    w.write_all(CKPT_MAGIC)?;
    let c = &state.config;
    for v in [
        c.layers as u32,
        c.heads as u32,
        c.embed_dim as u32,
        c.vocab_size as u32,
        c.side as u32,
        c.num_classes as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&c.cond_dropout_rate.to_le_bytes())?;
    w.write_all(&state.seed.to_le_bytes())?;
    w.write_all(&state.train_step.to_le_bytes())?;

    let mut params = state.params.clone();
    let tensors = params.flat_mut();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[shape.len() as u8])?;
        for s in &shape {
            w.write_all(&(*s as u32).to_le_bytes())?;
        }
        for x in data.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_or_corrupt<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), ModelError> {
    r.read_exact(buf)
        .map_err(|_| ModelError::Corrupt(format!("truncated while reading {what}")))
}

/// Reads a checkpoint written by [`write_checkpoint`]; round-trips are
/// byte-exact.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ModelState, ModelError> {
    let mut magic = [0u8; 8];
    read_exact_or_corrupt(r, &mut magic, "magic")?;
    if &magic != CKPT_MAGIC {
        return Err(ModelError::Corrupt("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut R, what: &str| -> Result<u32, ModelError> {
        read_exact_or_corrupt(r, &mut u32buf, what)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let layers = read_u32(r, "layers")? as usize;
    let heads = read_u32(r, "heads")? as usize;
    let embed_dim = read_u32(r, "embed_dim")? as usize;
    let vocab_size = read_u32(r, "vocab_size")? as usize;
    let side = read_u32(r, "side")? as usize;
    let num_classes = read_u32(r, "num_classes")? as usize;
    let mut f64buf = [0u8; 8];
    read_exact_or_corrupt(r, &mut f64buf, "cond_dropout_rate")?;
    let cond_dropout_rate = f64::from_le_bytes(f64buf);
    read_exact_or_corrupt(r, &mut f64buf, "seed")?;
    let seed = u64::from_le_bytes(f64buf);
    read_exact_or_corrupt(r, &mut f64buf, "train_step")?;
    let train_step = u64::from_le_bytes(f64buf);

    let config = ModelConfig {
        layers,
        heads,
        embed_dim,
        vocab_size,
        side,
        num_classes,
        cond_dropout_rate,
    };
    config
        .validate()
        .map_err(|e| ModelError::Corrupt(format!("invalid header config: {e}")))?;

    let mut count_buf = [0u8; 4];
    read_exact_or_corrupt(r, &mut count_buf, "tensor count")?;
    let count = u32::from_le_bytes(count_buf) as usize;

    let mut params = ModelParams::zeros(&config);
    {
        let tensors = params.flat_mut();
        if count != tensors.len() {
            return Err(ModelError::Corrupt(format!(
                "tensor count {count} does not match config ({} expected)",
                tensors.len()
            )));
        }
        for (name, shape, data) in tensors {
            let mut len_buf = [0u8; 2];
            read_exact_or_corrupt(r, &mut len_buf, "tensor name length")?;
            let name_len = u16::from_le_bytes(len_buf) as usize;
            let mut name_buf = vec![0u8; name_len];
            read_exact_or_corrupt(r, &mut name_buf, "tensor name")?;
            let read_name = String::from_utf8(name_buf)
                .map_err(|_| ModelError::Corrupt("tensor name not utf-8".into()))?;
            if read_name != name {
                return Err(ModelError::Corrupt(format!(
                    "tensor order mismatch: expected '{name}', found '{read_name}'"
                )));
            }
            let mut ndim_buf = [0u8; 1];
            read_exact_or_corrupt(r, &mut ndim_buf, "tensor rank")?;
            if ndim_buf[0] as usize != shape.len() {
                return Err(ModelError::Corrupt(format!("rank mismatch for '{name}'")));
            }
            for expected in &shape {
                let mut dim_buf = [0u8; 4];
                read_exact_or_corrupt(r, &mut dim_buf, "tensor dim")?;
                if u32::from_le_bytes(dim_buf) as usize != *expected {
                    return Err(ModelError::Corrupt(format!("shape mismatch for '{name}'")));
                }
            }
            for x in data.iter_mut() {
                read_exact_or_corrupt(r, &mut f64buf, "tensor data")?;
                *x = f64::from_le_bytes(f64buf);
            }
        }
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(ModelError::Corrupt("trailing bytes after tensors".into()));
    }
    Ok(ModelState { config, params, seed, train_step })
}

pub fn save_checkpoint(path: &std::path::Path, state: &ModelState) -> Result<(), ModelError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, state)
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<ModelState, ModelError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}

#[cfg(test)]
pub(crate) fn test_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 4,
        embed_dim: 32,
        vocab_size: 8,
        side: 4,
        num_classes: 2,
        cond_dropout_rate: 0.1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = test_config();
        let a = init(&cfg, 7).unwrap();
        let b = init(&cfg, 7).unwrap();
        assert_eq!(a.params, b.params);
        let c = init(&cfg, 8).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn head_dim_and_divisibility() {
        let cfg = ModelConfig { embed_dim: 64, heads: 4, ..test_config() };
        assert_eq!(cfg.head_dim(), 16);
        let bad = ModelConfig { embed_dim: 30, heads: 4, ..test_config() };
        assert!(matches!(init(&bad, 0), Err(ModelError::HeadSplit { .. })));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let state = init(&test_config(), 3).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &state).unwrap();
        let loaded = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(state, loaded);
        let mut bytes2 = Vec::new();
        write_checkpoint(&mut bytes2, &loaded).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let state = init(&test_config(), 3).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &state).unwrap();

        let truncated = &bytes[..bytes.len() / 2];
        assert!(matches!(
            read_checkpoint(&mut &truncated[..]),
            Err(ModelError::Corrupt(_))
        ));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            read_checkpoint(&mut bad_magic.as_slice()),
            Err(ModelError::Corrupt(_))
        ));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            read_checkpoint(&mut trailing.as_slice()),
            Err(ModelError::Corrupt(_))
        ));
    }
}

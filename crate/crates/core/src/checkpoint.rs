//! Binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic        4 bytes  "PCRN"
//! version      u32      FORMAT_VERSION
//! config       u32 length + UTF-8 `key=value` lines (ModelConfig)
//! epoch        u32
//! rng          u8 flag; if 1: 32-byte ChaCha8 seed, u64 stream, u128 word position
//! tensors      u32 count, then per tensor: u32 rank, rank x u64 dims, f64 data (row-major)
//! state        u8 flag; if 1: per layer, per cell: h tensor then (LSTM) c tensor
//! ```
//!
//! Tensors appear in [`LMModel::tensors`] order.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::cells::CellState;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{LMModel, ModelConfig, ModelState};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"PCRN";
pub const FORMAT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: LMModel,
    pub epoch: u32,
    pub rng: Option<RngState>,
    pub state: Option<ModelState>,
}

impl Checkpoint {
    pub fn new(model: LMModel) -> Self {
        Checkpoint {
            model,
            epoch: 0,
            rng: None,
            state: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg = self.model.config.to_kv_text();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        match &self.rng {
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.seed);
                out.extend_from_slice(&r.stream.to_le_bytes());
                out.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => out.push(0),
        }
        let tensors = self.model.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            write_tensor(&mut out, &t.dims, t.data);
        }
        match &self.state {
            Some(state) => {
                out.push(1);
                for cell in state.layers.iter().flatten() {
                    write_tensor(&mut out, &[cell.h.rows(), cell.h.cols()], cell.h.as_slice());
                    if let Some(c) = &cell.c {
                        write_tensor(&mut out, &[c.rows(), c.cols()], c.as_slice());
                    }
                }
            }
            None => out.push(0),
        }
        out
    }

    /// Decodes a checkpoint, checking every tensor against the shapes implied
    /// by the stored configuration.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::decode(bytes, None)
    }

    /// Decodes a checkpoint that must fit `expected`; the first tensor whose
    /// shape differs is reported.
    pub fn from_bytes_expecting(bytes: &[u8], expected: &ModelConfig) -> Result<Self> {
        Self::decode(bytes, Some(expected))
    }

    fn decode(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic }.into());
        }
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                supported: FORMAT_VERSION,
            }
            .into());
        }
        let cfg_len = r.u32("config length")? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len, "config block")?)
            .map_err(|_| CheckpointError::Malformed("config block is not UTF-8".into()))?;
        let stored = ModelConfig::from_kv_text(cfg_text)
            .map_err(|e| CheckpointError::Malformed(format!("config block: {e}")))?;
        let epoch = r.u32("epoch")?;
        let rng = match r.u8("rng flag")? {
            0 => None,
            1 => Some(RngState {
                seed: r.take(32, "rng seed")?.try_into().expect("32 bytes"),
                stream: u64::from_le_bytes(r.take(8, "rng stream")?.try_into().expect("8 bytes")),
                word_pos: u128::from_le_bytes(
                    r.take(16, "rng position")?.try_into().expect("16 bytes"),
                ),
            }),
            f => return Err(CheckpointError::Malformed(format!("bad rng flag {f}")).into()),
        };

        let target = expected.unwrap_or(&stored).clone();
        let mut model = LMModel::zeros(target)?;
        let count = r.u32("tensor count")? as usize;
        let names: Vec<(String, Vec<usize>)> = model
            .tensors()
            .iter()
            .map(|t| (t.name.clone(), t.dims.clone()))
            .collect();
        let mut slots = model.tensors_mut();
        for (k, (name, dims)) in names.iter().enumerate() {
            if k >= count {
                return Err(CheckpointError::Dimension {
                    tensor: name.clone(),
                    expected: dims.clone(),
                    found: Vec::new(),
                }
                .into());
            }
            let found = r.dims(name)?;
            if &found != dims {
                return Err(CheckpointError::Dimension {
                    tensor: name.clone(),
                    expected: dims.clone(),
                    found,
                }
                .into());
            }
            r.f64s(slots[k], name)?;
        }
        if count != names.len() {
            return Err(CheckpointError::Malformed(format!(
                "{count} tensors stored, model has {}",
                names.len()
            ))
            .into());
        }
        drop(slots);

        let state = match r.u8("state flag")? {
            0 => None,
            1 => {
                let mut layers = Vec::with_capacity(model.layers.len());
                for (l, layer) in model.layers.iter().enumerate() {
                    let mut cells = Vec::with_capacity(layer.wide);
                    for (i, cell) in layer.cells.iter().enumerate() {
                        let h = r.matrix(&format!("state.layer{l}.cell{i}.h"), cell.hidden_dim)?;
                        let c = if cell.kind.is_lstm() {
                            Some(r.matrix(&format!("state.layer{l}.cell{i}.c"), cell.hidden_dim)?)
                        } else {
                            None
                        };
                        cells.push(CellState { h, c });
                    }
                    layers.push(cells);
                }
                Some(ModelState { layers })
            }
            f => return Err(CheckpointError::Malformed(format!("bad state flag {f}")).into()),
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            ))
            .into());
        }
        Ok(Checkpoint {
            model,
            epoch,
            rng,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(model: &LMModel, path: &Path) -> Result<()> {
    Checkpoint::new(model.clone()).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<LMModel> {
    Ok(Checkpoint::load(path)?.model)
}

fn write_tensor(out: &mut Vec<u8>, dims: &[usize], data: &[f64]) {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated {
                what: what.to_string(),
            }),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn dims(&mut self, name: &str) -> Result<Vec<usize>, CheckpointError> {
        let rank = self.u32(name)? as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed(format!(
                "tensor `{name}` has rank {rank}"
            )));
        }
        (0..rank)
            .map(|_| {
                Ok(u64::from_le_bytes(self.take(8, name)?.try_into().expect("8 bytes")) as usize)
            })
            .collect()
    }

    fn f64s(&mut self, dst: &mut [f64], name: &str) -> Result<(), CheckpointError> {
        let raw = self.take(dst.len() * 8, name)?;
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        Ok(())
    }

    fn matrix(&mut self, name: &str, cols: usize) -> Result<Matrix, CheckpointError> {
        let dims = self.dims(name)?;
        if dims.len() != 2 || dims[1] != cols {
            return Err(CheckpointError::Dimension {
                tensor: name.to_string(),
                expected: vec![dims.first().copied().unwrap_or(0), cols],
                found: dims,
            });
        }
        let mut m = Matrix::zeros(dims[0], cols);
        self.f64s(m.as_mut_slice(), name)?;
        Ok(m)
    }
}

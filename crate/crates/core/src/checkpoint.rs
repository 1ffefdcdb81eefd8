//! Binary checkpoint of generator, encoder and decoder parameters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MMDFORGE"  u32 version
//! u32 data_dim  u32 code_dim  u8 noise_family  u32 noise_dim
//! 3 × { u8 activation  u32 n_widths  n_widths × u32 }   generator, encoder, decoder
//! f64 parameters for each network in the same order, each layer as
//! weight (row-major, in × out) then bias
//! ```
//!
//! Optimizer state is not stored; a loaded bundle starts with fresh
//! accumulators at `learning_rate`.

use std::path::Path;

use crate::autodiff::Activation;
use crate::data::{NoiseFamily, NoiseSpec};
use crate::error::{Error, Result};
use crate::networks::{Dense, Mlp, MlpConfig, ModelBundle};
use crate::optim::OptimState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MMDFORGE";
pub const VERSION: u32 = 1;

pub fn encode(bundle: &ModelBundle) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(bundle.data_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(bundle.code_dim() as u32).to_le_bytes());
    out.push(bundle.noise.family.code());
    out.extend_from_slice(&(bundle.noise.dim as u32).to_le_bytes());
    let nets = [&bundle.generator, &bundle.encoder, &bundle.decoder];
    for net in nets {
        let cfg = net.config();
        out.push(cfg.activation.code());
        out.extend_from_slice(&(cfg.widths.len() as u32).to_le_bytes());
        for w in cfg.widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
    }
    for net in nets {
        for p in net.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode(bytes: &[u8], learning_rate: f64) -> Result<ModelBundle> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version as u32 != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let data_dim = r.u32()?;
    let code_dim = r.u32()?;
    let family = NoiseFamily::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint("unknown noise family".into()))?;
    let noise = NoiseSpec { family, dim: r.u32()? };
    let mut cfgs = Vec::with_capacity(3);
    for _ in 0..3 {
        let activation = Activation::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint("unknown activation".into()))?;
        let n = r.u32()?;
        if n < 2 || n > 1024 {
            return Err(Error::Checkpoint(format!("implausible layer count {n}")));
        }
        let widths = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        cfgs.push(MlpConfig::new(widths, activation));
    }
    let mut nets = Vec::with_capacity(3);
    for cfg in &cfgs {
        cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let layers = cfg
            .widths
            .windows(2)
            .map(|w| {
                Ok(Dense {
                    weight: Tensor::new(w[0], w[1], r.f64s(w[0] * w[1])?)?,
                    bias: Tensor::new(1, w[1], r.f64s(w[1])?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        nets.push(Mlp::from_layers(cfg.activation, layers)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let decoder = nets.pop().unwrap();
    let encoder = nets.pop().unwrap();
    let generator = nets.pop().unwrap();
    let bundle = ModelBundle {
        noise,
        generator,
        encoder,
        decoder,
        generator_opt: OptimState::new(learning_rate),
        critic_opt: OptimState::new(learning_rate),
    };
    let consistent = bundle.generator.input_dim() == bundle.noise.dim
        && bundle.data_dim() == data_dim
        && bundle.encoder.input_dim() == data_dim
        && bundle.code_dim() == code_dim
        && bundle.decoder.input_dim() == code_dim
        && bundle.decoder.output_dim() == data_dim;
    if !consistent {
        return Err(Error::Checkpoint("layer table disagrees with header dimensions".into()));
    }
    Ok(bundle)
}

pub fn save(path: &Path, bundle: &ModelBundle) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, encode(bundle))?;
    Ok(())
}

pub fn load(path: &Path, learning_rate: f64) -> Result<ModelBundle> {
    decode(&std::fs::read(path)?, learning_rate)
}

//! Checkpoint persistence.
//!
//! Binary layout, little-endian throughout:
//!
//! ```text
//! magic           5 bytes  "CMNT1"
//! enc_layers      u32      dec_layers u32, model_dim u32, heads u32, ff_dim u32
//! dropout         f64 bits as u64
//! src_vocab       u32      tgt_vocab u32, max_len u32
//! integrator      u32      constraint_encoder u32
//! param_count     u32
//! per parameter:
//!   name_len      u32, name bytes (utf-8)
//!   rank          u32, dims (u64 each)
//!   values        f64 each, row-major
//! ```
//!
//! Loading rebuilds the parameter skeleton from the header configuration and
//! requires the stored names/shapes to match it exactly, in order, so a
//! checkpoint round-trips bit-exactly or fails loudly.

use super::{ConstraintEncoderKind, IntegratorKind, Model, ModelConfig};
use crate::error::{Error, Result};
use std::path::Path;

pub const MAGIC: &[u8; 5] = b"CMNT1";

const MAX_NAME_LEN: usize = 256;
const MAX_RANK: usize = 2;

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let cfg = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [
        cfg.encoder_layers,
        cfg.decoder_layers,
        cfg.model_dim,
        cfg.heads,
        cfg.feed_forward_dim,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.dropout.to_bits().to_le_bytes());
    for v in [cfg.src_vocab, cfg.tgt_vocab, cfg.max_len] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.integrator.code().to_le_bytes());
    out.extend_from_slice(&cfg.constraint_encoder.code().to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, tensor) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
        for &dim in &tensor.shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in &tensor.values {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::parse("checkpoint", "truncated data"));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

pub fn from_bytes(data: &[u8]) -> Result<Model> {
    let mut r = Reader { data, pos: 0 };
    if r.take(5)? != MAGIC {
        return Err(Error::parse("checkpoint", "bad magic"));
    }
    let encoder_layers = r.u32()? as usize;
    let decoder_layers = r.u32()? as usize;
    let model_dim = r.u32()? as usize;
    let heads = r.u32()? as usize;
    let feed_forward_dim = r.u32()? as usize;
    let dropout = r.f64()?;
    let src_vocab = r.u32()? as usize;
    let tgt_vocab = r.u32()? as usize;
    let max_len = r.u32()? as usize;
    let integrator = IntegratorKind::from_code(r.u32()?)
        .ok_or_else(|| Error::parse("checkpoint", "unknown integrator code"))?;
    let constraint_encoder = ConstraintEncoderKind::from_code(r.u32()?)
        .ok_or_else(|| Error::parse("checkpoint", "unknown encoder code"))?;
    if !dropout.is_finite() {
        return Err(Error::parse("checkpoint", "non-finite dropout"));
    }
    let config = ModelConfig {
        encoder_layers,
        decoder_layers,
        model_dim,
        heads,
        feed_forward_dim,
        dropout,
        src_vocab,
        tgt_vocab,
        max_len,
        integrator,
        constraint_encoder,
    };
    // Guard against absurd headers before allocating the skeleton.
    let declared_scalars = (src_vocab + tgt_vocab)
        .saturating_mul(model_dim)
        .saturating_add(
            (encoder_layers + 3 * decoder_layers)
                .saturating_mul(model_dim.saturating_mul(model_dim).saturating_mul(8)),
        );
    if declared_scalars.saturating_mul(8) > data.len().saturating_mul(2).saturating_add(1 << 20) {
        return Err(Error::parse("checkpoint", "header larger than payload"));
    }
    config.validate().map_err(|e| match e {
        Error::Config(msg) => Error::parse("checkpoint", msg),
        other => other,
    })?;

    let mut model = Model::zeroed(config)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::parse(
            "checkpoint",
            format!(
                "parameter count {count} does not match configuration ({})",
                model.params.len()
            ),
        ));
    }
    for i in 0..count {
        let name_len = r.u32()? as usize;
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(Error::parse("checkpoint", "bad parameter name length"));
        }
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::parse("checkpoint", "parameter name not utf-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::parse("checkpoint", "bad parameter rank"));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let dim = r.u64()? as usize;
            len = len
                .checked_mul(dim)
                .ok_or_else(|| Error::parse("checkpoint", "dimension overflow"))?;
            shape.push(dim);
        }
        let expected = model.params.at(i);
        if model.params.name_at(i) != name || expected.shape != shape {
            return Err(Error::parse(
                "checkpoint",
                format!(
                    "parameter {i}: expected `{}` {:?}, found `{name}` {shape:?}",
                    model.params.name_at(i),
                    expected.shape
                ),
            ));
        }
        let tensor = model.params.at_mut(i);
        for j in 0..len {
            tensor.values[j] = r.f64()?;
        }
    }
    if r.pos != data.len() {
        return Err(Error::parse("checkpoint", "trailing bytes"));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let config = ModelConfig {
            encoder_layers: 1,
            decoder_layers: 1,
            model_dim: 8,
            heads: 2,
            feed_forward_dim: 16,
            dropout: 0.1,
            src_vocab: 11,
            tgt_vocab: 9,
            max_len: 16,
            integrator: IntegratorKind::Gate,
            constraint_encoder: ConstraintEncoderKind::Shallow,
        };
        let model = Model::init(config, 7).unwrap();
        let bytes = to_bytes(&model);
        let loaded = from_bytes(&bytes).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.params.len(), model.params.len());
        for i in 0..model.params.len() {
            let a = model.params.at(i);
            let b = loaded.params.at(i);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(to_bytes(&loaded), bytes);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(from_bytes(b"").is_err());
        assert!(from_bytes(b"CMNT2aaaaaaaaaaaaaaaa").is_err());
        let config = ModelConfig {
            encoder_layers: 1,
            decoder_layers: 1,
            model_dim: 4,
            heads: 2,
            feed_forward_dim: 8,
            dropout: 0.0,
            src_vocab: 6,
            tgt_vocab: 6,
            max_len: 8,
            integrator: IntegratorKind::None,
            constraint_encoder: ConstraintEncoderKind::None,
        };
        let model = Model::init(config, 3).unwrap();
        let bytes = to_bytes(&model);
        // Truncations and bit flips must error, never panic.
        for cut in [5, 9, 40, bytes.len() - 3] {
            assert!(from_bytes(&bytes[..cut]).is_err());
        }
        let mut flipped = bytes.clone();
        flipped[6] ^= 0xff; // encoder layer count
        assert!(from_bytes(&flipped).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(from_bytes(&trailing).is_err());
    }
}

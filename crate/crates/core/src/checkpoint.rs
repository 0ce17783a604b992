//! Binary checkpoint format.
//!
//! All multi-byte values are little-endian:
//!
//! ```text
//! "SATN"                      magic, 4 bytes
//! u32 version                 = 1
//! u32 h, c, v_buckets, t_max, f
//! u8  encoder kind            0 = mean-pool, 1 = mini-transformer
//! u32 vocabulary size, then per code: u16 byte length + UTF-8 bytes
//! f32 tensors, row-major      embedding, position, encoder layer tensors
//!                             in declaration order, attention, classifier, bias
//! u32 CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::corpus::LabelVocabulary;
use crate::encoder::{EncoderKind, EncoderParams};
use crate::head::HeadParams;
use crate::model::{Model, ModelDims};
use crate::tensor::Scalar;

pub const MAGIC: &[u8; 4] = b"SATN";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("checkpoint file is truncated")]
    TruncatedFile,
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

/// A trained model together with its label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dims: ModelDims,
    pub vocab: LabelVocabulary,
    pub model: Model<f32>,
}

impl Checkpoint {
    pub fn new(
        dims: ModelDims,
        vocab: LabelVocabulary,
        model: Model<f32>,
    ) -> Result<Self, CheckpointError> {
        let ckpt = Self { dims, vocab, model };
        ckpt.check_consistent()?;
        Ok(ckpt)
    }

    pub fn kind(&self) -> EncoderKind {
        self.model.kind()
    }

    fn check_consistent(&self) -> Result<(), CheckpointError> {
        self.model
            .validate()
            .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        let actual = self.model.dims();
        let f_ok = self.kind() == EncoderKind::MeanPool || actual.f == self.dims.f;
        if actual.h != self.dims.h
            || actual.c != self.dims.c
            || actual.v_buckets != self.dims.v_buckets
            || actual.t_max != self.dims.t_max
            || !f_ok
        {
            return Err(CheckpointError::Invalid(format!(
                "model dims {actual:?} disagree with header dims {:?}",
                self.dims
            )));
        }
        if self.vocab.len() != self.dims.c {
            return Err(CheckpointError::Invalid(format!(
                "{} vocabulary codes for {} labels",
                self.vocab.len(),
                self.dims.c
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        self.check_consistent()?;
        let d = self.dims;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            d.h as u32,
            d.c as u32,
            d.v_buckets as u32,
            d.t_max as u32,
            d.f as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.kind().code());
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for code in &self.vocab.codes {
            let len = u16::try_from(code.len())
                .map_err(|_| CheckpointError::Invalid(format!("label {code:?} too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(code.as_bytes());
        }
        for (_, tensor) in self.model.tensors() {
            for v in tensor {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let dims = ModelDims {
            h: r.u32()? as usize,
            c: r.u32()? as usize,
            v_buckets: r.u32()? as usize,
            t_max: r.u32()? as usize,
            f: r.u32()? as usize,
        };
        let kind_code = r.u8()?;
        let vocab_len = r.u32()? as usize;
        let mut codes = Vec::with_capacity(vocab_len.min(1 << 16));
        for _ in 0..vocab_len {
            let len = r.u16()? as usize;
            let raw = r.take(len)?;
            codes.push(
                String::from_utf8(raw.to_vec())
                    .map_err(|_| CheckpointError::Invalid("label is not UTF-8".into()))?,
            );
        }
        let kind = EncoderKind::from_code(kind_code);

        // Size the payload from the header first so that a short file reports
        // truncation rather than a checksum failure.
        let total = kind
            .and_then(|k| tensor_floats(k, dims))
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(r.pos + 4));
        if total.is_some_and(|n| bytes.len() < n) {
            return Err(CheckpointError::TruncatedFile);
        }
        let body_end = bytes
            .len()
            .checked_sub(4)
            .ok_or(CheckpointError::TruncatedFile)?;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(CheckpointError::ChecksumMismatch { stored, computed });
        }
        let kind = kind
            .ok_or_else(|| CheckpointError::Invalid(format!("unknown encoder kind {kind_code}")))?;
        if total != Some(bytes.len()) {
            return Err(CheckpointError::Invalid(
                "payload size disagrees with header".into(),
            ));
        }
        let mut model = Model {
            encoder: EncoderParams::<f32>::zeros(kind, dims.encoder()),
            head: HeadParams::zeros(dims.c, dims.h),
        };
        for (_, tensor) in model.tensors_mut() {
            for v in tensor.iter_mut() {
                *v = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
            }
        }
        Checkpoint::new(dims, LabelVocabulary::from_codes(codes), model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn save_checkpoint(
    checkpoint: &Checkpoint,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    checkpoint.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::load(path)
}

/// Total float count implied by a header, or `None` on overflow.
fn tensor_floats(kind: EncoderKind, d: ModelDims) -> Option<usize> {
    let embed = (d.v_buckets.checked_add(4)?).checked_mul(d.h)?;
    let pos = d.t_max.checked_mul(d.h)?;
    let hh = d.h.checked_mul(d.h)?;
    let layer = match kind {
        EncoderKind::MeanPool => hh.checked_add(d.h)?,
        EncoderKind::MiniTransformer => {
            let hf = d.h.checked_mul(d.f)?;
            hh.checked_mul(3)?
                .checked_add(hf.checked_mul(2)?)?
                .checked_add(d.f)?
                .checked_add(d.h)?
        }
    };
    let head = d.c.checked_mul(d.h)?.checked_mul(2)?.checked_add(d.c)?;
    embed
        .checked_add(pos)?
        .checked_add(layer)?
        .checked_add(head)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or(CheckpointError::TruncatedFile)?;
        let out = self
            .bytes
            .get(self.pos..end)
            .ok_or(CheckpointError::TruncatedFile)?;
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Bit-level equality of two f32 models, NaN payloads included.
pub fn bitwise_equal<T: Scalar>(a: &Model<T>, b: &Model<T>) -> bool {
    let (ta, tb) = (a.tensors(), b.tensors());
    ta.len() == tb.len()
        && ta.iter().zip(&tb).all(|((na, xa), (nb, xb))| {
            na == nb
                && xa.len() == xb.len()
                && xa
                    .iter()
                    .zip(xb.iter())
                    .all(|(x, y)| x.to_f64_lossless().to_bits() == y.to_f64_lossless().to_bits())
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(kind: EncoderKind) -> Checkpoint {
        let dims = ModelDims {
            h: 3,
            c: 2,
            v_buckets: 5,
            t_max: 4,
            f: 6,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = Model::init(kind, dims, 0.05, &mut rng);
        let vocab = LabelVocabulary::from_codes(vec!["G06N".into(), "B82Y".into()]);
        Checkpoint::new(dims, vocab, model).unwrap()
    }

    #[test]
    fn layout_header_is_pinned() {
        let bytes = sample(EncoderKind::MeanPool).to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SATN");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &6u32.to_le_bytes());
        assert_eq!(bytes[28], 0);
        assert_eq!(&bytes[29..33], &2u32.to_le_bytes());
        assert_eq!(&bytes[33..35], &4u16.to_le_bytes());
        assert_eq!(&bytes[35..39], b"G06N");
        // header + vocab + floats + crc
        let floats = (9 * 3) + (4 * 3) + (9 + 3) + (2 * 3 * 2 + 2);
        assert_eq!(bytes.len(), 45 + floats * 4 + 4);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in [EncoderKind::MeanPool, EncoderKind::MiniTransformer] {
            let ckpt = sample(kind);
            let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
            assert!(bitwise_equal(&ckpt.model, &back.model));
            assert_eq!(back.vocab.codes, ckpt.vocab.codes);
            assert_eq!(back.dims, ckpt.dims);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample(EncoderKind::MiniTransformer).to_bytes().unwrap();

        let mut flipped = bytes.clone();
        flipped[60] ^= 0x10;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped),
            Err(CheckpointError::ChecksumMismatch { .. })
        ));

        let truncated = &bytes[..bytes.len() / 2];
        assert!(matches!(
            Checkpoint::from_bytes(truncated),
            Err(CheckpointError::TruncatedFile)
        ));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&magic),
            Err(CheckpointError::BadMagic)
        ));

        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&version),
            Err(CheckpointError::UnsupportedVersion(2))
        ));

        assert!(matches!(
            Checkpoint::from_bytes(b"SA"),
            Err(CheckpointError::TruncatedFile)
        ));
    }
}

//! `.fstm` checkpoint format.
//!
//! ```text
//! "FSTM"  u32 version
//! section*          each: u64 byte length, payload
//!   config          6 × u64 dims, u8 activation
//!   tokenizer       u64 count, (u32 len, utf-8 bytes)*
//!   parameters      u64 count, (u32 ndim, ndim × u64 dims, f64 data)*
//!   stamps          u32 count, (u32 layer, u64 d_c, u64 d, u8 activation, K' data, V' data)*
//!   training        u64 epochs completed, f64 last loss
//! u64 FNV-1a checksum of every preceding byte
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use crate::error::{FastError, Result};
use crate::knowledge::Tokenizer;
use crate::model::{Activation, FairnessStamp, MicroTransformer, ModelConfig, Weights};
use crate::numerics::Tensor;
use crate::pretrain::TrainingState;

pub const MAGIC: &[u8; 4] = b"FSTM";
pub const FORMAT_VERSION: u32 = 1;

/// A model together with its vocabulary and training progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MicroTransformer,
    pub tokenizer: Tokenizer,
    pub training: TrainingState,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn section(&mut self, payload: Writer) {
        self.u64(payload.0.len() as u64);
        self.0.extend(payload.0);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn malformed(&self, reason: impl Into<String>) -> FastError {
        FastError::Malformed {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(self.malformed(format!("need {n} bytes, {} left", self.bytes.len())));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.malformed(format!("size {v} overflows")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.malformed("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn section(&mut self) -> Result<Reader<'a>> {
        let n = self.usize()?;
        Ok(Reader {
            bytes: self.take(n)?,
            path: self.path,
        })
    }
    fn finish(&self, what: &str) -> Result<()> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(self.malformed(format!("{} trailing bytes in {what} section", self.bytes.len())))
        }
    }
    fn activation(&mut self) -> Result<Activation> {
        let code = self.u8()?;
        Activation::from_code(code).ok_or_else(|| self.malformed(format!("unknown activation code {code}")))
    }
}

impl Checkpoint {
    pub fn new(model: MicroTransformer, tokenizer: Tokenizer) -> Self {
        Checkpoint {
            model,
            tokenizer,
            training: TrainingState {
                epochs_completed: 0,
                last_loss: f64::NAN,
            },
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);

        let c = self.model.config();
        let mut s = Writer::default();
        for v in [c.n_layers, c.d_model, c.n_heads, c.d_ffn, c.vocab_size, c.max_seq_len] {
            s.u64(v as u64);
        }
        s.u8(c.activation.code());
        w.section(s);

        let mut s = Writer::default();
        s.u64(self.tokenizer.len() as u64);
        for word in self.tokenizer.words() {
            s.u32(word.len() as u32);
            s.0.extend_from_slice(word.as_bytes());
        }
        w.section(s);

        let params = self.model.weights().iter();
        let mut s = Writer::default();
        s.u64(params.len() as u64);
        for t in params {
            s.u32(t.shape().len() as u32);
            for &d in t.shape() {
                s.u64(d as u64);
            }
            s.f64s(t.data());
        }
        w.section(s);

        let stamps: Vec<_> = self.model.stamps().collect();
        let mut s = Writer::default();
        s.u32(stamps.len() as u32);
        for (layer, st) in stamps {
            s.u32(layer as u32);
            s.u64(st.hidden() as u64);
            s.u64(st.d_model() as u64);
            s.u8(st.activation.code());
            s.f64s(st.keys.data());
            s.f64s(st.values.data());
        }
        w.section(s);

        let mut s = Writer::default();
        s.u64(self.training.epochs_completed as u64);
        s.f64s(&[self.training.last_loss]);
        w.section(s);

        let sum = fnv1a(&w.0);
        w.u64(sum);
        w.0
    }

    /// `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let pb = || path.to_path_buf();
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(FastError::BadMagic { path: pb() });
        }
        if bytes.len() < 8 {
            return Err(FastError::Malformed {
                path: pb(),
                reason: "missing format version".into(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(FastError::VersionMismatch {
                path: pb(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, stored) = if bytes.len() >= 16 {
            let (b, s) = bytes.split_at(bytes.len() - 8);
            (b, u64::from_le_bytes(s.try_into().expect("8 bytes")))
        } else {
            (bytes, 0)
        };
        let computed = fnv1a(body);
        if bytes.len() < 16 || stored != computed {
            return Err(FastError::Checksum {
                path: pb(),
                stored,
                computed,
            });
        }

        let mut r = Reader {
            bytes: &body[8..],
            path,
        };

        let mut s = r.section()?;
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = s.usize()?;
        }
        let config = ModelConfig {
            n_layers: dims[0],
            d_model: dims[1],
            n_heads: dims[2],
            d_ffn: dims[3],
            vocab_size: dims[4],
            max_seq_len: dims[5],
            activation: s.activation()?,
        };
        s.finish("config")?;
        config.validate()?;

        let mut s = r.section()?;
        let n = s.usize()?;
        let mut words = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = s.u32()? as usize;
            let raw = s.take(len)?;
            let word = std::str::from_utf8(raw).map_err(|e| s.malformed(format!("tokenizer: {e}")))?;
            words.push(word.to_string());
        }
        s.finish("tokenizer")?;
        let tokenizer = Tokenizer::from_words(words)?;
        if tokenizer.len() != config.vocab_size {
            return Err(r.malformed(format!(
                "tokenizer has {} words but vocab_size is {}",
                tokenizer.len(),
                config.vocab_size
            )));
        }

        let mut s = r.section()?;
        let n = s.usize()?;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let ndim = s.u32()? as usize;
            let shape = (0..ndim).map(|_| s.usize()).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| s.malformed("tensor size overflow"))?;
            tensors.push(Tensor::new(shape, s.f64s(len)?)?);
        }
        s.finish("parameters")?;
        let weights = Weights::from_tensors(&config, tensors)?;
        let mut model = MicroTransformer::from_weights(config, weights)?;

        let mut s = r.section()?;
        let n = s.u32()?;
        for _ in 0..n {
            let layer = s.u32()? as usize;
            let hidden = s.usize()?;
            let d = s.usize()?;
            let activation = s.activation()?;
            let len = hidden.checked_mul(d).ok_or_else(|| s.malformed("stamp size overflow"))?;
            let keys = Tensor::new(vec![hidden, d], s.f64s(len)?)?;
            let values = Tensor::new(vec![hidden, d], s.f64s(len)?)?;
            model.attach_stamp(layer, FairnessStamp::from_parts(keys, values, activation)?)?;
        }
        s.finish("stamps")?;

        let mut s = r.section()?;
        let training = TrainingState {
            epochs_completed: s.usize()?,
            last_loss: s.f64s(1)?[0],
        };
        s.finish("training")?;
        r.finish("checkpoint")?;

        Ok(Checkpoint {
            model,
            tokenizer,
            training,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| FastError::io(dir, e))?;
    }
    fs::write(path, ckpt.to_bytes()).map_err(|e| FastError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| FastError::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

/// Stored checksum of a checkpoint file (its last eight bytes), after validation.
pub fn checkpoint_checksum(path: &Path) -> Result<u64> {
    let bytes = fs::read(path).map_err(|e| FastError::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)?;
    Ok(u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::MASK_ID;

    fn sample() -> Checkpoint {
        let tok = Tokenizer::build(["man is good at math", "woman is good at art"]);
        let config = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ffn: 12,
            vocab_size: tok.len(),
            max_seq_len: 8,
            activation: Activation::Gelu,
        };
        let mut model = MicroTransformer::new(config, 5).unwrap();
        model.weights_mut().head = Tensor::full(&[8, 8], 0.1);
        let mut ck = Checkpoint::new(model, tok);
        ck.training = TrainingState {
            epochs_completed: 3,
            last_loss: 0.75,
        };
        ck
    }

    fn stamped() -> Checkpoint {
        let mut ck = sample();
        let mut st = FairnessStamp::new(5, 8, Activation::Relu, 2);
        st.values = st.keys.map(|v| v * 3.0);
        ck.model.attach_stamp(1, st).unwrap();
        ck
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fstm");
        let ck = sample();
        save_checkpoint(&ck, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.model.weights(), ck.model.weights());
        assert_eq!(loaded.tokenizer, ck.tokenizer);
        assert_eq!(loaded.training, ck.training);
        assert_eq!(loaded.to_bytes(), fs::read(&path).unwrap());
    }

    #[test]
    fn stamp_survives_round_trip() {
        let ck = stamped();
        let prompt = [ck.tokenizer.id("man").unwrap(), 4, 5, MASK_ID];
        let before = ck.model.forward_mlm(&prompt).unwrap();
        let loaded = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(loaded.model.stamp(1), ck.model.stamp(1));
        assert!(loaded.model.stamp(0).is_none());
        assert_eq!(loaded.model.forward_mlm(&prompt).unwrap(), before);
    }

    #[test]
    fn truncation_is_checksum_error() {
        let bytes = stamped().to_bytes();
        for cut in [9, 15, 40, bytes.len() / 2, bytes.len() - 1] {
            let r = Checkpoint::from_bytes(&bytes[..cut], Path::new("t"));
            assert!(matches!(r, Err(FastError::Checksum { .. })), "cut {cut}: {r:?}");
        }
    }

    #[test]
    fn bit_flip_is_checksum_error() {
        let mut bytes = sample().to_bytes();
        let i = bytes.len() / 3;
        bytes[i] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("t")),
            Err(FastError::Checksum { .. })
        ));
    }

    #[test]
    fn distinct_header_errors() {
        let mut bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(b"NOPE", Path::new("t")),
            Err(FastError::BadMagic { .. })
        ));
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("t")),
            Err(FastError::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn load_does_not_modify_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fstm");
        save_checkpoint(&stamped(), &path).unwrap();
        let before = fs::read(&path).unwrap();
        load_checkpoint(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), before);
        assert_eq!(checkpoint_checksum(&path).unwrap(), fnv1a(&before[..before.len() - 8]));
    }
}

//! Versioned binary container for model weights.
//!
//! Layout (all integers little-endian, reals IEEE-754 `f64`):
//!
//! ```text
//! magic      4 bytes  "DFTK"
//! version    u32
//! kind       u8       1 = denoiser, 2 = scorer
//! body_len   u64
//! body       body_len bytes (kind-specific, see below)
//! crc32      u32      CRC-32 of every preceding byte
//! ```
//!
//! Denoiser body: architecture (8 × u32), vocabulary (u32 word count, then
//! u32-length-prefixed UTF-8 words, then u32 rare-range length), training
//! step (u64), provenance (u8 tag; tag 1 adds a u32-length-prefixed base
//! image hash and a u64 step count), network parameters (u64 count + values),
//! embedding table (u64 rows, u64 dim, u64 count + values).

use std::fs;
use std::path::Path;

use crate::denoiser::{ArchConfig, Denoiser};
use crate::error::{Error, Result};
use crate::text_cond::{EmbeddingTable, Vocabulary};

pub const MAGIC: &[u8; 4] = b"DFTK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PayloadKind {
    Denoiser = 1,
    Scorer = 2,
}

#[derive(Debug, Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    pub fn f64s(&mut self, values: &[f64]) {
        self.u64(values.len() as u64);
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity("unexpected end of checkpoint body".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Integrity("length overflows usize".into()))
    }
    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Integrity("invalid UTF-8 string".into()))
    }
    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Integrity(format!("{} trailing bytes in body", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Frame a body with header and checksum.
pub(crate) fn encode_container(kind: PayloadKind, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 21);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Validate framing and return the body.
pub(crate) fn decode_container(bytes: &[u8], kind: PayloadKind) -> Result<&[u8]> {
    const HEADER: usize = 4 + 4 + 1 + 8;
    if bytes.len() < HEADER + 4 {
        return Err(Error::Integrity(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Integrity("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let body_len = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes"));
    let expected = (HEADER as u64).checked_add(body_len).and_then(|v| v.checked_add(4));
    if expected != Some(bytes.len() as u64) {
        return Err(Error::Integrity(format!(
            "length mismatch: header announces {body_len} body bytes, file has {}",
            bytes.len()
        )));
    }
    let split = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[split..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..split]) != stored {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    if bytes[8] != kind as u8 {
        return Err(Error::Integrity(format!("payload kind {} where {} was expected", bytes[8], kind as u8)));
    }
    Ok(&bytes[HEADER..split])
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Pretrain,
    Finetune { base_image_hash: String, steps: u64 },
}

/// Everything needed to resume sampling or training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub denoiser: Denoiser,
    pub embeddings: EmbeddingTable,
    pub vocab: Vocabulary,
    pub step: u64,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        let a = self.denoiser.arch();
        for v in [
            a.resolution,
            a.patch,
            a.widths[0],
            a.widths[1],
            a.blocks,
            a.time_dim,
            a.embed_dim,
            a.cond_dim,
        ] {
            w.u32(v as u32);
        }
        w.u32(self.vocab.word_count() as u32);
        for word in self.vocab.words() {
            w.str(word);
        }
        w.u32(self.vocab.rare_range().len() as u32);
        w.u64(self.step);
        match &self.provenance {
            Provenance::Pretrain => w.u8(0),
            Provenance::Finetune { base_image_hash, steps } => {
                w.u8(1);
                w.str(base_image_hash);
                w.u64(*steps);
            }
        }
        w.f64s(self.denoiser.params());
        w.u64(self.embeddings.rows() as u64);
        w.u64(self.embeddings.dim() as u64);
        w.f64s(self.embeddings.as_slice());
        encode_container(PayloadKind::Denoiser, &w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = decode_container(bytes, PayloadKind::Denoiser)?;
        let mut r = Reader::new(body);
        let mut dims = [0usize; 8];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let arch = ArchConfig {
            resolution: dims[0],
            patch: dims[1],
            widths: [dims[2], dims[3]],
            blocks: dims[4],
            time_dim: dims[5],
            embed_dim: dims[6],
            cond_dim: dims[7],
        };
        let n_words = r.u32()? as usize;
        let words = (0..n_words).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let vocab = Vocabulary::new(words, r.u32()?);
        let step = r.u64()?;
        let provenance = match r.u8()? {
            0 => Provenance::Pretrain,
            1 => Provenance::Finetune {
                base_image_hash: r.str()?,
                steps: r.u64()?,
            },
            tag => return Err(Error::Integrity(format!("unknown provenance tag {tag}"))),
        };
        let params = r.f64s()?;
        let rows = r.usize()?;
        let dim = r.usize()?;
        let table = r.f64s()?;
        r.finish()?;
        Ok(Checkpoint {
            denoiser: Denoiser::from_params(arch, params)?,
            embeddings: EmbeddingTable::from_vec(rows, dim, table)?,
            vocab,
            step,
            provenance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

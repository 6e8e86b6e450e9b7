use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::write_atomic;

pub const MAGIC: &[u8; 4] = b"TLGE";
pub const FORMAT_VERSION: u16 = 1;

/// Token-level encoder states for the facts of one image.
///
/// `mask` is `n_facts × n_tokens` (fact-major) and `data` is
/// `n_facts × n_tokens × dim` (fact-major, then token-major). Every fact has at
/// least one unmasked token and all values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock<T> {
    image_id: String,
    n_facts: usize,
    n_tokens: usize,
    dim: usize,
    mask: Vec<u8>,
    data: Vec<T>,
}

impl<T: Scalar> EmbeddingBlock<T> {
    pub fn new(
        image_id: impl Into<String>,
        n_facts: usize,
        n_tokens: usize,
        dim: usize,
        mask: Vec<u8>,
        data: Vec<T>,
    ) -> Result<Self> {
        let block = EmbeddingBlock {
            image_id: image_id.into(),
            n_facts,
            n_tokens,
            dim,
            mask,
            data,
        };
        block.validate()?;
        Ok(block)
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("n_facts", self.n_facts),
            ("n_tokens", self.n_tokens),
            ("dim", self.dim),
        ] {
            if v == 0 {
                return Err(Error::Shape {
                    what,
                    expected: 1,
                    actual: 0,
                });
            }
        }
        let cells = self.n_facts * self.n_tokens;
        if self.mask.len() != cells {
            return Err(Error::Shape {
                what: "mask",
                expected: cells,
                actual: self.mask.len(),
            });
        }
        if self.data.len() != cells * self.dim {
            return Err(Error::Shape {
                what: "data",
                expected: cells * self.dim,
                actual: self.data.len(),
            });
        }
        for fact in 0..self.n_facts {
            let row = &self.mask[fact * self.n_tokens..(fact + 1) * self.n_tokens];
            if let Some(token) = row.iter().position(|&m| m > 1) {
                return Err(Error::InvalidMaskValue {
                    fact,
                    token,
                    value: row[token],
                });
            }
            if row.iter().all(|&m| m == 0) {
                return Err(Error::EmptyMaskRow { fact });
            }
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            let token_pos = pos / self.dim;
            return Err(Error::NonFiniteData {
                fact: token_pos / self.n_tokens,
                token: token_pos % self.n_tokens,
                component: pos % self.dim,
            });
        }
        Ok(())
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }
    pub fn n_facts(&self) -> usize {
        self.n_facts
    }
    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn mask(&self) -> &[u8] {
        &self.mask
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn is_unmasked(&self, fact: usize, token: usize) -> bool {
        self.mask[fact * self.n_tokens + token] == 1
    }

    pub fn mask_row(&self, fact: usize) -> &[u8] {
        &self.mask[fact * self.n_tokens..(fact + 1) * self.n_tokens]
    }

    /// Hidden state of `token` within `fact`.
    pub fn token(&self, fact: usize, token: usize) -> &[T] {
        let start = (fact * self.n_tokens + token) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Mutable access to raw values; callers must keep them finite.
    pub fn token_mut(&mut self, fact: usize, token: usize) -> &mut [T] {
        let start = (fact * self.n_tokens + token) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    pub fn with_image_id(mut self, image_id: impl Into<String>) -> Self {
        self.image_id = image_id.into();
        self
    }

    /// Reorders facts so that fact `i` of the result is fact `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.n_facts {
            return Err(Error::Shape {
                what: "permutation",
                expected: self.n_facts,
                actual: order.len(),
            });
        }
        let mut seen = vec![false; self.n_facts];
        for &o in order {
            if o >= self.n_facts || std::mem::replace(&mut seen[o], true) {
                return Err(Error::Shape {
                    what: "permutation",
                    expected: self.n_facts,
                    actual: o,
                });
            }
        }
        let row = self.n_tokens * self.dim;
        let mut mask = Vec::with_capacity(self.mask.len());
        let mut data = Vec::with_capacity(self.data.len());
        for &o in order {
            mask.extend_from_slice(self.mask_row(o));
            data.extend_from_slice(&self.data[o * row..(o + 1) * row]);
        }
        Ok(EmbeddingBlock { mask, data, ..self.clone() })
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingBlock<U> {
        EmbeddingBlock {
            image_id: self.image_id.clone(),
            n_facts: self.n_facts,
            n_tokens: self.n_tokens,
            dim: self.dim,
            mask: self.mask.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Fixed-size prefix of a `.tlge` file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockHeader {
    pub image_id: String,
    pub n_facts: usize,
    pub n_tokens: usize,
    pub dim: usize,
}

/// Serializes a block in the little-endian `.tlge` layout.
pub fn encode_embeddings<T: Scalar>(block: &EmbeddingBlock<T>) -> Result<Vec<u8>> {
    block.validate()?;
    let id = block.image_id.as_bytes();
    let id_len = u16::try_from(id.len()).map_err(|_| Error::Shape {
        what: "image_id bytes",
        expected: u16::MAX as usize,
        actual: id.len(),
    })?;
    let dims = [block.n_facts, block.n_tokens, block.dim].map(|v| {
        u32::try_from(v).map_err(|_| Error::Shape {
            what: "block dimension",
            expected: u32::MAX as usize,
            actual: v,
        })
    });
    let mut out = Vec::with_capacity(4 + 2 + 2 + id.len() + 12 + block.mask.len() + 4 * block.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    for d in dims {
        out.extend_from_slice(&d?.to_le_bytes());
    }
    out.extend_from_slice(&block.mask);
    for v in &block.data {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

fn decode_header(cur: &mut Cursor<'_>) -> Result<BlockHeader> {
    let magic = cur.take(4).map_err(|_| Error::BadMagic {
        found: cur.bytes[..cur.bytes.len().min(4)].to_vec(),
    })?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic.to_vec(),
        });
    }
    let version = cur.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let id_len = cur.u16()? as usize;
    let image_id = std::str::from_utf8(cur.take(id_len)?)
        .map_err(|_| Error::InvalidUtf8)?
        .to_string();
    Ok(BlockHeader {
        image_id,
        n_facts: cur.u32()?,
        n_tokens: cur.u32()?,
        dim: cur.u32()?,
    })
}

/// Parses a `.tlge` byte buffer, promoting stored binary32 values to `T`.
pub fn decode_embeddings<T: Scalar>(bytes: &[u8]) -> Result<EmbeddingBlock<T>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let h = decode_header(&mut cur)?;
    let cells = h
        .n_facts
        .checked_mul(h.n_tokens)
        .ok_or(Error::Truncated { expected: usize::MAX, actual: bytes.len() })?;
    let floats = cells
        .checked_mul(h.dim)
        .ok_or(Error::Truncated { expected: usize::MAX, actual: bytes.len() })?;
    let need = cur.pos + cells + floats * 4;
    if bytes.len() < need {
        return Err(Error::Truncated {
            expected: need,
            actual: bytes.len(),
        });
    }
    if bytes.len() > need {
        return Err(Error::TrailingBytes {
            extra: bytes.len() - need,
        });
    }
    let mask = cur.take(cells)?.to_vec();
    let data = cur
        .take(floats * 4)?
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    EmbeddingBlock::new(h.image_id, h.n_facts, h.n_tokens, h.dim, mask, data)
}

pub fn load_embeddings<T: Scalar>(path: impl AsRef<Path>) -> Result<EmbeddingBlock<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

/// Reads only the header of a `.tlge` file.
pub fn read_embedding_header(path: impl AsRef<Path>) -> Result<BlockHeader> {
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = vec![0u8; 8];
    let n = read_up_to(&mut f, &mut buf).map_err(|e| Error::io(path, e))?;
    buf.truncate(n);
    if n == 8 {
        let id_len = u16::from_le_bytes([buf[6], buf[7]]) as usize;
        let mut rest = vec![0u8; id_len + 12];
        let m = read_up_to(&mut f, &mut rest).map_err(|e| Error::io(path, e))?;
        buf.extend_from_slice(&rest[..m]);
    }
    decode_header(&mut Cursor { bytes: &buf, pos: 0 })
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

/// Validates and writes a block; nothing is written if validation fails.
pub fn save_embeddings<T: Scalar>(block: &EmbeddingBlock<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_embeddings(block)?;
    write_atomic(path.as_ref(), &bytes)
}

//! Serialized client/server payload formats.
//!
//! All client-to-server and checkpoint traffic passes through these
//! little-endian, versioned byte formats. Keeping the channel byte-typed
//! makes the privacy boundary auditable: the only things that can cross are
//! adapter matrices, embedding batches with labels, and scalars.
//!
//! Layouts (all integers little-endian):
//!   adapter set:     magic u32, version u16, count u16,
//!                    then per matrix: rows u32, cols u32, rows*cols f64
//!   embedding batch: magic u32, version u16, count u32, dim u32,
//!                    count u32 labels, count*dim f64
//!   checkpoint:      magic u32, version u16,
//!                    image adapter set, text adapter set (nested blobs)

use crate::encoders::AdapterSet;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const WIRE_VERSION: u16 = 1;
const MAGIC_ADAPTERS: u32 = 0x4144_5031; // "ADP1"
const MAGIC_EMBEDDINGS: u32 = 0x454D_4231; // "EMB1"
const MAGIC_CHECKPOINT: u32 = 0x434B_5031; // "CKP1"

/// A batch of uploaded image embeddings with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub dim: usize,
    /// Class label per embedding.
    pub labels: Vec<usize>,
    /// Row-major `labels.len() x dim` embedding data.
    pub data: Vec<f64>,
}

impl EmbeddingBatch {
    pub fn new(dim: usize) -> EmbeddingBatch {
        EmbeddingBatch {
            dim,
            labels: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, embedding: &[f64], label: usize) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::shape(
                "embedding batch push",
                format!("dim {}", self.dim),
                format!("dim {}", embedding.len()),
            ));
        }
        self.labels.push(label);
        self.data.extend_from_slice(embedding);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Reader<'a> {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Wire(format!(
                "truncated payload reading {what}: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(8 * n, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Wire(format!(
                "{} trailing bytes after {what}",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn check_header(r: &mut Reader, magic: u32, what: &str) -> Result<()> {
    let got = r.u32("magic")?;
    if got != magic {
        return Err(Error::Wire(format!(
            "{what}: bad magic {got:#010x}, expected {magic:#010x}"
        )));
    }
    let version = r.u16("version")?;
    if version != WIRE_VERSION {
        return Err(Error::Wire(format!(
            "{what}: unsupported version {version}, expected {WIRE_VERSION}"
        )));
    }
    Ok(())
}

fn encode_adapters_into(out: &mut Vec<u8>, set: &AdapterSet) {
    out.extend_from_slice(&MAGIC_ADAPTERS.to_le_bytes());
    out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.matrices.len() as u16).to_le_bytes());
    for m in &set.matrices {
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn decode_adapters_from(r: &mut Reader) -> Result<AdapterSet> {
    check_header(r, MAGIC_ADAPTERS, "adapter set")?;
    let count = r.u16("matrix count")? as usize;
    let mut matrices = Vec::with_capacity(count);
    for i in 0..count {
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let data = r.f64s(rows * cols, "matrix data")?;
        matrices.push(
            Matrix::from_vec(rows, cols, data)
                .map_err(|e| Error::Wire(format!("matrix {i}: {e}")))?,
        );
    }
    Ok(AdapterSet { matrices })
}

/// Serialize an adapter set (the client upload / broadcast unit).
pub fn encode_adapter_set(set: &AdapterSet) -> Vec<u8> {
    let mut out = Vec::new();
    encode_adapters_into(&mut out, set);
    out
}

pub fn decode_adapter_set(bytes: &[u8]) -> Result<AdapterSet> {
    let mut r = Reader::new(bytes);
    let set = decode_adapters_from(&mut r)?;
    r.finish("adapter set")?;
    Ok(set)
}

/// Serialize an embedding batch (embeddings plus labels, nothing else).
pub fn encode_embedding_batch(batch: &EmbeddingBatch) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC_EMBEDDINGS.to_le_bytes());
    out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    out.extend_from_slice(&(batch.labels.len() as u32).to_le_bytes());
    out.extend_from_slice(&(batch.dim as u32).to_le_bytes());
    for &l in &batch.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for v in &batch.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_embedding_batch(bytes: &[u8]) -> Result<EmbeddingBatch> {
    let mut r = Reader::new(bytes);
    check_header(&mut r, MAGIC_EMBEDDINGS, "embedding batch")?;
    let count = r.u32("count")? as usize;
    let dim = r.u32("dim")? as usize;
    let labels: Result<Vec<usize>> = (0..count)
        .map(|_| r.u32("label").map(|l| l as usize))
        .collect();
    let labels = labels?;
    let data = r.f64s(count * dim, "embedding data")?;
    r.finish("embedding batch")?;
    Ok(EmbeddingBatch { dim, labels, data })
}

/// Serialize the final model checkpoint: global image adapters plus the
/// text encoder's adapters.
pub fn encode_checkpoint(image: &AdapterSet, text: &AdapterSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC_CHECKPOINT.to_le_bytes());
    out.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    encode_adapters_into(&mut out, image);
    encode_adapters_into(&mut out, text);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(AdapterSet, AdapterSet)> {
    let mut r = Reader::new(bytes);
    check_header(&mut r, MAGIC_CHECKPOINT, "checkpoint")?;
    let image = decode_adapters_from(&mut r)?;
    let text = decode_adapters_from(&mut r)?;
    r.finish("checkpoint")?;
    Ok((image, text))
}

/// Channel audit: every uploaded label must belong to the allowed (base)
/// class set, and every embedding must have the broadcast embedding
/// dimension. Raw feature vectors cannot be represented on this channel at
/// all; this guards the label side.
pub fn audit_embedding_batch(
    batch: &EmbeddingBatch,
    allowed_labels: &[usize],
    expected_dim: usize,
) -> Result<()> {
    if batch.dim != expected_dim {
        return Err(Error::Wire(format!(
            "audit: embedding dim {} does not match broadcast dim {expected_dim}",
            batch.dim
        )));
    }
    for &l in &batch.labels {
        if !allowed_labels.contains(&l) {
            return Err(Error::Wire(format!(
                "audit: uploaded label {l} outside the allowed class set"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, tag};
    use rand::Rng;

    fn random_set(seed: u64, shapes: &[(usize, usize)]) -> AdapterSet {
        let mut rng = stream(seed, &[tag("wire_test")]);
        AdapterSet {
            matrices: shapes
                .iter()
                .map(|&(r, c)| {
                    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen::<f64>()).collect()).unwrap()
                })
                .collect(),
        }
    }

    #[test]
    fn adapter_set_round_trips_bit_exactly() {
        let set = random_set(1, &[(4, 16), (16, 4), (2, 8)]);
        let bytes = encode_adapter_set(&set);
        let back = decode_adapter_set(&bytes).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn embedding_batch_round_trips() {
        let mut batch = EmbeddingBatch::new(5);
        batch.push(&[1.0, -2.0, 0.5, 0.25, -0.125], 3).unwrap();
        batch.push(&[0.0, 1.0, 2.0, 3.0, 4.0], 7).unwrap();
        let back = decode_embedding_batch(&encode_embedding_batch(&batch)).unwrap();
        assert_eq!(batch, back);
    }

    #[test]
    fn checkpoint_round_trips() {
        let image = random_set(2, &[(4, 16), (16, 4)]);
        let text = random_set(3, &[(2, 16), (16, 2)]);
        let bytes = encode_checkpoint(&image, &text);
        let (i2, t2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(image, i2);
        assert_eq!(text, t2);
    }

    #[test]
    fn corrupt_payloads_are_rejected() {
        let set = random_set(4, &[(3, 3)]);
        let bytes = encode_adapter_set(&set);
        // Truncation.
        assert!(decode_adapter_set(&bytes[..bytes.len() - 1]).is_err());
        // Bad magic.
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(decode_adapter_set(&bad).is_err());
        // Bad version.
        let mut bad = bytes.clone();
        bad[4] = 99;
        assert!(decode_adapter_set(&bad).is_err());
        // Trailing garbage.
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(decode_adapter_set(&bad).is_err());
        // Wrong payload type.
        let emb = encode_embedding_batch(&EmbeddingBatch::new(4));
        assert!(decode_adapter_set(&emb).is_err());
    }

    #[test]
    fn audit_rejects_foreign_labels_and_dims() {
        let mut batch = EmbeddingBatch::new(3);
        batch.push(&[1.0, 0.0, 0.0], 2).unwrap();
        assert!(audit_embedding_batch(&batch, &[0, 1, 2], 3).is_ok());
        assert!(audit_embedding_batch(&batch, &[0, 1], 3).is_err());
        assert!(audit_embedding_batch(&batch, &[0, 1, 2], 4).is_err());
    }

    #[test]
    fn empty_adapter_set_and_batch_round_trip() {
        let set = AdapterSet {
            matrices: Vec::new(),
        };
        assert_eq!(decode_adapter_set(&encode_adapter_set(&set)).unwrap(), set);
        let batch = EmbeddingBatch::new(8);
        assert_eq!(
            decode_embedding_batch(&encode_embedding_batch(&batch)).unwrap(),
            batch
        );
    }
}

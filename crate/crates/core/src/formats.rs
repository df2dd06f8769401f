//! Binary embedding and checkpoint files, plus a CSV form of the embedding.
//!
//! Embedding file: `"LEMB"`, version, `m`, `h` (0 for the full table), then
//! little-endian `f32` values (the table, or `A` followed by `B`).
//!
//! Checkpoint file: `"LMDL"`, version, then until end of file one block per
//! parameter: name length, name bytes, rank, dims, `f32` data. All integers
//! are little-endian `u32`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::embedding::{CompressedEmbedding, FullEmbedding, LabelEmbedding};
use crate::error::{Error, Result};
use crate::model::DualHeadModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"LEMB";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LMDL";
pub const VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("{} truncated at byte {}", self.what, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("{} size overflow", self.what)))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(Error::Format(format!("{}: unsupported version {v}", self.what)));
        }
        Ok(())
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s<T: Scalar>(buf: &mut Vec<u8>, data: &[T]) {
    for v in data {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

pub fn encode_embedding<T: Scalar>(emb: &LabelEmbedding<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(EMBEDDING_MAGIC);
    put_u32(&mut buf, VERSION as usize);
    put_u32(&mut buf, emb.labels());
    put_u32(&mut buf, emb.compressed_dim());
    for p in emb.params() {
        put_f32s(&mut buf, p.data());
    }
    buf
}

/// Parses an embedding file. The result is not trainable; call
/// [`LabelEmbedding::set_trainable`] to resume training it.
pub fn decode_embedding(bytes: &[u8]) -> Result<LabelEmbedding<f32>> {
    let mut r = Reader { bytes, pos: 0, what: "embedding file" };
    r.header(EMBEDDING_MAGIC)?;
    let m = r.u32()? as usize;
    let h = r.u32()? as usize;
    if m == 0 {
        return Err(Error::Format("embedding file declares zero labels".into()));
    }
    let emb = if h == 0 {
        let table = Tensor::new([m, m], r.f32s(m * m)?)?;
        LabelEmbedding::Full(FullEmbedding::from_table(table)?)
    } else {
        let a = Tensor::new([m, h], r.f32s(m * h)?)?;
        let b = Tensor::new([h, m], r.f32s(h * m)?)?;
        LabelEmbedding::Compressed(CompressedEmbedding::from_factors(a, b)?)
    };
    if !r.at_end() {
        return Err(Error::Format(format!("embedding file has {} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(emb)
}

pub fn save_embedding<T: Scalar>(path: &Path, emb: &LabelEmbedding<T>) -> Result<()> {
    fs::write(path, encode_embedding(emb)).map_err(|e| Error::io(path, e))
}

pub fn load_embedding(path: &Path) -> Result<LabelEmbedding<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embedding(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn encode_checkpoint<T: Scalar>(model: &DualHeadModel<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, VERSION as usize);
    for (name, p) in model.names().iter().zip(model.params()) {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, p.shape().len());
        for &d in p.shape() {
            put_u32(&mut buf, d);
        }
        put_f32s(&mut buf, p.data());
    }
    buf
}

/// Named parameter blocks in file order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0, what: "checkpoint file" };
    r.header(CHECKPOINT_MAGIC)?;
    let mut out = Vec::new();
    while !r.at_end() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("checkpoint parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("parameter {name} is too large")))?;
        let data = r.f32s(n)?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &DualHeadModel<T>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

/// Overwrites every parameter of `model` from a checkpoint. Names and shapes
/// must match exactly, otherwise a dimension error is returned and the model
/// is left untouched.
pub fn load_checkpoint_into<T: Scalar>(path: &Path, model: &mut DualHeadModel<T>) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let blocks = decode_checkpoint(&bytes)?;
    let mut staged = model.clone();
    for (name, t) in &blocks {
        staged.set_param(name, t.cast())?;
    }
    if blocks.len() != model.names().len() {
        return Err(Error::Dimension(format!(
            "checkpoint holds {} parameters, {} model has {}",
            blocks.len(),
            model.kind(),
            model.names().len()
        )));
    }
    *model = staged;
    Ok(())
}

/// Text form of an embedding: a `# lemb m=<m> h=<h>` line, then one
/// comma-separated line per matrix row (the table, or `A` then `B`).
/// Values use the shortest representation that parses back to the same
/// `f32`.
pub fn embedding_to_csv(emb: &LabelEmbedding<f32>) -> String {
    let mut s = format!("# lemb m={} h={}\n", emb.labels(), emb.compressed_dim());
    for p in emb.params() {
        for i in 0..p.rows() {
            let row: Vec<String> = p.row(i).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
    }
    s
}

pub fn embedding_from_csv(text: &str) -> Result<LabelEmbedding<f32>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Format("empty embedding CSV".into()))?;
    let parse_field = |key: &str| -> Result<usize> {
        header
            .split_whitespace()
            .find_map(|tok| tok.strip_prefix(key))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("embedding CSV header {header:?} lacks {key}")))
    };
    if !header.starts_with("# lemb") {
        return Err(Error::Format(format!("embedding CSV header {header:?} is not '# lemb ...'")));
    }
    let m = parse_field("m=")?;
    let h = parse_field("h=")?;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("embedding CSV row {}: {e}", i + 1)))?;
        rows.push(row);
    }
    let block = |rows: &[Vec<f32>], r: usize, c: usize| -> Result<Tensor<f32>> {
        if rows.len() != r || rows.iter().any(|row| row.len() != c) {
            return Err(Error::Format(format!("embedding CSV block is not {r}×{c}")));
        }
        Tensor::new([r, c], rows.concat())
    };
    if h == 0 {
        Ok(FullEmbedding::from_table(block(&rows, m, m)?)?.into())
    } else {
        if rows.len() != m + h {
            return Err(Error::Format(format!("embedding CSV needs {} rows, found {}", m + h, rows.len())));
        }
        let a = block(&rows[..m], m, h)?;
        let b = block(&rows[m..], h, m)?;
        Ok(CompressedEmbedding::from_factors(a, b)?.into())
    }
}

//! Binary containers (TEN1 tensors, EMB1 embeddings, MBK1 memory banks) and
//! detection JSONL. All integers and floats are little-endian; payloads are
//! stored as `f32`. Decoding errors report the byte offset where the input
//! stopped making sense.

use std::io::BufRead;

use crate::error::{Error, Result};
use crate::geom::{BBox, Detection};
use crate::membank::{MemEntry, MemoryBank};
use crate::tensor::Tensor;

pub const TEN1_MAGIC: &[u8; 4] = b"TEN1";
pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const MBK1_MAGIC: &[u8; 4] = b"MBK1";

/// Cursor over an in-memory buffer that tracks its offset for error reports.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::malformed(
                self.offset(),
                format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::malformed(0, format!("expected magic {:?}", String::from_utf8_lossy(magic))));
        }
        Ok(())
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f64> {
        let at = self.offset();
        let v = f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::malformed(at, format!("non-finite {what}")));
        }
        Ok(f64::from(v))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        if (self.buf.len() - self.pos) / 4 < n {
            return Err(Error::malformed(self.offset(), format!("truncated {what}: need {n} f32 values")));
        }
        (0..n).map(|_| self.f32(what)).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::malformed(self.offset(), "trailing bytes"));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32(out: &mut Vec<u8>, v: f64, what: &str) -> Result<()> {
    let x = v as f32;
    if !x.is_finite() {
        return Err(Error::invalid(format!("{what} {v} is not representable as f32")));
    }
    out.extend_from_slice(&x.to_le_bytes());
    Ok(())
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(TEN1_MAGIC);
    put_u32(&mut out, t.rank(), "rank")?;
    for &d in t.dims() {
        put_u32(&mut out, d, "dim")?;
    }
    for &v in t.data() {
        put_f32(&mut out, v, "tensor value")?;
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    r.magic(TEN1_MAGIC)?;
    let rank_at = r.offset();
    let rank = r.u32("rank")? as usize;
    if rank == 0 {
        return Err(Error::malformed(rank_at, "rank must be positive"));
    }
    let mut dims = Vec::with_capacity(rank.min(16));
    let mut count: usize = 1;
    for _ in 0..rank {
        let at = r.offset();
        let d = r.u32("dim")? as usize;
        count = count
            .checked_mul(d)
            .filter(|_| d > 0)
            .ok_or_else(|| Error::malformed(at, format!("invalid dim {d}")))?;
        dims.push(d);
    }
    let data = r.f32s(count, "tensor payload")?;
    r.finish()?;
    Tensor::new(dims, data)
}

pub fn encode_embeddings(embs: &[Vec<f64>]) -> Result<Vec<u8>> {
    let dim = embs.first().map_or(0, Vec::len);
    if embs.iter().any(|e| e.len() != dim) {
        return Err(Error::shape("embeddings have differing dims"));
    }
    let mut out = Vec::with_capacity(12 + 4 * dim * embs.len());
    out.extend_from_slice(EMB1_MAGIC);
    put_u32(&mut out, embs.len(), "count")?;
    put_u32(&mut out, dim, "dim")?;
    for v in embs.iter().flatten() {
        put_f32(&mut out, *v, "embedding value")?;
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let mut r = Reader::new(bytes);
    r.magic(EMB1_MAGIC)?;
    let count = r.u32("count")? as usize;
    let dim_at = r.offset();
    let dim = r.u32("dim")? as usize;
    if dim == 0 && count > 0 {
        return Err(Error::malformed(dim_at, "zero embedding dim"));
    }
    let total = count
        .checked_mul(dim)
        .ok_or_else(|| Error::malformed(dim_at, "count x dim overflows"))?;
    let flat = r.f32s(total, "embedding payload")?;
    r.finish()?;
    Ok(flat.chunks(dim.max(1)).map(<[f64]>::to_vec).collect())
}

pub fn encode_bank(bank: &MemoryBank) -> Result<Vec<u8>> {
    let dim = bank.feature_dim().unwrap_or(0);
    let mut out = Vec::new();
    out.extend_from_slice(MBK1_MAGIC);
    put_u32(&mut out, bank.len(), "entry count")?;
    put_u32(&mut out, dim, "dim")?;
    for e in bank.entries() {
        put_f32(&mut out, e.confidence(), "confidence")?;
        out.extend_from_slice(&e.epoch.to_le_bytes());
        for v in e.bbox.to_array() {
            put_f32(&mut out, v, "box coordinate")?;
        }
        let id = e.image_id.as_bytes();
        let n = u16::try_from(id.len()).map_err(|_| Error::invalid("image id longer than 65535 bytes"))?;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(id);
        for &v in &e.feature {
            put_f32(&mut out, v, "feature value")?;
        }
    }
    Ok(out)
}

/// Decodes a bank file, keeping its entry order. The bank's capacity comes
/// from the caller; entries beyond it are evicted as in a normal update.
pub fn decode_bank(bytes: &[u8], capacity: usize) -> Result<MemoryBank> {
    let mut r = Reader::new(bytes);
    r.magic(MBK1_MAGIC)?;
    let count = r.u32("entry count")? as usize;
    let dim = r.u32("dim")? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let at = r.offset();
        let conf = r.f32("confidence")?;
        let epoch = r.u32("epoch")?;
        let box_at = r.offset();
        let c = r.f32s(4, "box")?;
        let bbox = BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| Error::malformed(box_at, e.to_string()))?;
        let n = r.u16("image id length")? as usize;
        let id_at = r.offset();
        let id = std::str::from_utf8(r.take(n, "image id")?)
            .map_err(|_| Error::malformed(id_at, "image id is not UTF-8"))?
            .to_owned();
        let feature = r.f32s(dim, "feature")?;
        entries.push(MemEntry::new(feature, conf, bbox, id, epoch).map_err(|e| Error::malformed(at, e.to_string()))?);
    }
    r.finish()?;
    MemoryBank::from_entries(capacity, entries)
}

/// Parses detections JSONL; blank lines are skipped.
pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let det = serde_json::from_str(trimmed).map_err(|e| {
                let lead = (line.len() - line.trim_start().len()) as u64;
                let col = e.column().saturating_sub(1) as u64;
                Error::malformed(offset + lead + col, format!("bad detection: {e}"))
            })?;
            out.push(det);
        }
        offset += line.len() as u64;
    }
    Ok(out)
}

pub fn read_detections(reader: impl BufRead) -> Result<Vec<Detection>> {
    let mut text = String::new();
    for line in reader.lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_detections(&text)
}

pub fn format_detections(dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        out.push_str(&serde_json::to_string(d).expect("detections serialize"));
        out.push('\n');
    }
    out
}

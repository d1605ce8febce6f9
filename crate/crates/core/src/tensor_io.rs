//! Binary container for matrices and built indexes.
//!
//! Every block starts with the 8-byte magic `FLSHHD01`, a `u32` dtype code
//! (0 = f32, 1 = packed integers), a `u32` rank and `rank` little-endian `u64`
//! dims. A plain tensor file is one block whose payload must end exactly at
//! end of file.
//!
//! An index file is one f32 block of rank 4 with dims `[c, d, b, v]`, whose
//! payload is `C` (`c·d` f32), then `C2T` (`c·b` u32, pads `0xFFFFFFFF`), then
//! the build metadata (`seed` u64, `iterations` u32, trace length u32, trace
//! f64s). It may be followed by one quantized block of rank 2 with dims
//! `[c, d]`, whose payload is `bits` u32, `group_size` u32, the group scales
//! (f32) and the packed codes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::clustering::{BuildMeta, ClusteredIndex};
use crate::error::{Error, Result};
use crate::matrix::{HiddenBatch, Matrix};
use crate::quant::{packed_len, QuantizedCentroids};

pub const MAGIC: [u8; 8] = *b"FLSHHD01";
pub const DTYPE_F32: u32 = 0;
pub const DTYPE_PACKED: u32 = 1;

const CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorHeader {
    pub dtype: u32,
    pub dims: Vec<u64>,
}

impl TensorHeader {
    pub fn encoded_len(&self) -> usize {
        16 + 8 * self.dims.len()
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.dtype.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
    }

    fn element_count(&self) -> Result<usize> {
        self.dims
            .iter()
            .try_fold(1usize, |acc, &d| {
                usize::try_from(d).ok().and_then(|d| acc.checked_mul(d))
            })
            .ok_or_else(|| Error::DimMismatch(format!("dims {:?} overflow", self.dims)))
    }
}

/// Sequential reader that knows how many bytes are left in its source.
struct Source<R> {
    inner: R,
    remaining: u64,
}

impl<R: Read> Source<R> {
    fn new(inner: R, len: u64) -> Self {
        Self {
            inner,
            remaining: len,
        }
    }

    fn need(&self, bytes: u64) -> Result<()> {
        if bytes > self.remaining {
            return Err(Error::TruncatedPayload {
                expected: bytes,
                actual: self.remaining,
            });
        }
        Ok(())
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.need(buf.len() as u64)?;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::TruncatedPayload {
                    expected: buf.len() as u64,
                    actual: 0,
                }
            } else {
                Error::io("<stream>", e)
            }
        })?;
        self.remaining -= buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn header(&mut self) -> Result<TensorHeader> {
        let mut magic = [0u8; 8];
        self.fill(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let dtype = self.u32()?;
        let rank = self.u32()?;
        self.need(8 * rank as u64)?;
        let dims = (0..rank).map(|_| self.u64()).collect::<Result<Vec<_>>>()?;
        Ok(TensorHeader { dtype, dims })
    }

    /// Reads `n` little-endian words of `W` bytes each, in bounded chunks.
    fn words<const W: usize, T>(
        &mut self,
        n: usize,
        conv: impl Fn([u8; W]) -> T,
    ) -> Result<Vec<T>> {
        let total = (n as u64).saturating_mul(W as u64);
        self.need(total)?;
        let mut out = Vec::with_capacity(n);
        let mut buf = vec![0u8; CHUNK * W];
        let mut left = n;
        while left > 0 {
            let take = left.min(CHUNK);
            let bytes = &mut buf[..take * W];
            self.fill(bytes)?;
            out.extend(
                bytes
                    .chunks_exact(W)
                    .map(|w| conv(w.try_into().expect("chunk width"))),
            );
            left -= take;
        }
        Ok(out)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        self.words(n, f32::from_le_bytes)
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        self.words(n, u32::from_le_bytes)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        self.words(n, f64::from_le_bytes)
    }

    fn finish(&self) -> Result<()> {
        if self.remaining > 0 {
            return Err(Error::TrailingBytes {
                extra: self.remaining,
            });
        }
        Ok(())
    }
}

fn checked_matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Matrix> {
    let m = Matrix::new(rows, cols, data)?;
    if let Some(row) = m.first_non_finite_row() {
        return Err(Error::NonFiniteValue { row });
    }
    Ok(m)
}

fn read_matrix<R: Read>(src: &mut Source<R>, expected_rank: u32) -> Result<Matrix> {
    let header = src.header()?;
    if header.dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(header.dtype));
    }
    if header.dims.len() != expected_rank as usize {
        return Err(Error::DimMismatch(format!(
            "file has rank {}, expected {expected_rank}",
            header.dims.len()
        )));
    }
    let (rows, cols) = match header.dims[..] {
        [n] => (1, n),
        [r, c] => (r, c),
        _ => {
            return Err(Error::DimMismatch(format!(
                "rank {expected_rank} tensors are not matrices"
            )))
        }
    };
    let n = header.element_count()?;
    let payload = (n as u64).saturating_mul(4);
    if payload > src.remaining {
        return Err(Error::TruncatedPayload {
            expected: payload,
            actual: src.remaining,
        });
    }
    let data = src.f32s(n)?;
    src.finish()?;
    checked_matrix(rows as usize, cols as usize, data)
}

/// Decodes a tensor file held in memory.
pub fn decode_matrix(bytes: &[u8], expected_rank: u32) -> Result<Matrix> {
    read_matrix(&mut Source::new(bytes, bytes.len() as u64), expected_rank)
}

/// Encodes a matrix as a rank-2 tensor file.
pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let header = TensorHeader {
        dtype: DTYPE_F32,
        dims: vec![m.rows() as u64, m.cols() as u64],
    };
    let mut out = Vec::with_capacity(header.encoded_len() + 4 * m.as_slice().len());
    header.write_to(&mut out);
    put_f32s(&mut out, m.as_slice());
    out
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn open(path: &Path) -> Result<(BufReader<File>, u64)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    Ok((BufReader::with_capacity(CHUNK * 4, file), len))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Loads a tensor file of the given rank. Rank 1 yields a `1 × n` matrix.
pub fn load_matrix(path: impl AsRef<Path>, expected_rank: u32) -> Result<Matrix> {
    let path = path.as_ref();
    let (reader, len) = open(path)?;
    with_path(
        path,
        read_matrix(&mut Source::new(reader, len), expected_rank),
    )
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Matrix> {
    load_matrix(path, 2)
}

pub fn load_hidden(path: impl AsRef<Path>) -> Result<HiddenBatch> {
    load_matrix(path, 2).map(HiddenBatch::new)
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let file = File::create(&tmp).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let written = w
        .write_all(bytes)
        .and_then(|_| w.flush())
        .and_then(|_| w.get_ref().sync_all());
    if let Err(e) = written {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn save_matrix(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_matrix(m))
}

pub fn encode_index(index: &ClusteredIndex, quantized: Option<&QuantizedCentroids>) -> Vec<u8> {
    let (c, d, b) = (index.clusters(), index.dim(), index.cluster_size());
    let header = TensorHeader {
        dtype: DTYPE_F32,
        dims: vec![c as u64, d as u64, b as u64, index.vocab() as u64],
    };
    let mut out = Vec::with_capacity(header.encoded_len() + 4 * (c * d + c * b) + 16);
    header.write_to(&mut out);
    put_f32s(&mut out, index.centroids().as_slice());
    for t in index.c2t() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    let meta = &index.meta;
    out.extend_from_slice(&meta.seed.to_le_bytes());
    out.extend_from_slice(&meta.iterations.to_le_bytes());
    out.extend_from_slice(&(meta.objective_trace.len() as u32).to_le_bytes());
    for x in &meta.objective_trace {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(q) = quantized {
        TensorHeader {
            dtype: DTYPE_PACKED,
            dims: vec![q.rows() as u64, q.cols() as u64],
        }
        .write_to(&mut out);
        out.extend_from_slice(&(q.bits() as u32).to_le_bytes());
        out.extend_from_slice(&(q.group_size() as u32).to_le_bytes());
        put_f32s(&mut out, q.scales());
        out.extend_from_slice(q.packed());
    }
    out
}

fn read_index<R: Read>(
    src: &mut Source<R>,
) -> Result<(ClusteredIndex, Option<QuantizedCentroids>)> {
    let header = src.header()?;
    if header.dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(header.dtype));
    }
    let [c, d, b, v] = header.dims[..] else {
        return Err(Error::DimMismatch(format!(
            "index header has rank {}, expected 4",
            header.dims.len()
        )));
    };
    let dim =
        |x: u64| usize::try_from(x).map_err(|_| Error::DimMismatch(format!("dim {x} too large")));
    let (c, d, b, v) = (dim(c)?, dim(d)?, dim(b)?, dim(v)?);
    let cd = c
        .checked_mul(d)
        .ok_or_else(|| Error::DimMismatch("c·d overflows".into()))?;
    let cb = c
        .checked_mul(b)
        .ok_or_else(|| Error::DimMismatch("c·b overflows".into()))?;
    let centroids = checked_matrix(c, d, src.f32s(cd)?)?;
    let c2t = src.u32s(cb)?;
    let seed = src.u64()?;
    let iterations = src.u32()?;
    let trace_len = src.u32()? as usize;
    let objective_trace = src.f64s(trace_len)?;
    let meta = BuildMeta {
        seed,
        iterations,
        objective_trace,
    };
    let index = ClusteredIndex::from_parts(v, centroids, c2t, b, meta)?;

    let quantized = if src.remaining > 0 {
        let qh = src.header()?;
        if qh.dtype != DTYPE_PACKED {
            return Err(Error::UnsupportedDtype(qh.dtype));
        }
        if qh.dims[..] != [c as u64, d as u64] {
            return Err(Error::DimMismatch(format!(
                "quantized block dims {:?} do not match index {c}×{d}",
                qh.dims
            )));
        }
        let bits = src.u32()?;
        let group_size = src.u32()? as usize;
        let bits = u8::try_from(bits).map_err(|_| Error::InvalidGroup(format!("bits {bits}")))?;
        if group_size == 0 || d % group_size != 0 {
            return Err(Error::InvalidGroup(format!(
                "group size {group_size} for d={d}"
            )));
        }
        let scales = src.f32s(cd / group_size)?;
        let n = packed_len(cd, bits.min(8));
        src.need(n as u64)?;
        let mut packed = vec![0u8; n];
        src.fill(&mut packed)?;
        Some(QuantizedCentroids::from_parts(
            bits, group_size, c, d, scales, packed,
        )?)
    } else {
        None
    };
    src.finish()?;
    Ok((index, quantized))
}

pub fn decode_index(bytes: &[u8]) -> Result<(ClusteredIndex, Option<QuantizedCentroids>)> {
    read_index(&mut Source::new(bytes, bytes.len() as u64))
}

pub fn save_index(index: &ClusteredIndex, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_index(index, None))
}

pub fn save_index_with_quantized(
    index: &ClusteredIndex,
    quantized: &QuantizedCentroids,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_atomic(path.as_ref(), &encode_index(index, Some(quantized)))
}

/// Loads an index, ignoring any quantized block.
pub fn load_index(path: impl AsRef<Path>) -> Result<ClusteredIndex> {
    load_index_with_quantized(path).map(|(index, _)| index)
}

pub fn load_index_with_quantized(
    path: impl AsRef<Path>,
) -> Result<(ClusteredIndex, Option<QuantizedCentroids>)> {
    let path = path.as_ref();
    let (reader, len) = open(path)?;
    with_path(path, read_index(&mut Source::new(reader, len)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_bytes(dtype: u32, dims: &[u64]) -> Vec<u8> {
        let mut out = Vec::new();
        TensorHeader {
            dtype,
            dims: dims.to_vec(),
        }
        .write_to(&mut out);
        out
    }

    #[test]
    fn identity_payload_loads() {
        let mut bytes = header_bytes(0, &[2, 3]);
        put_f32s(&mut bytes, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let m = decode_matrix(&bytes, 2).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 3));
        assert_eq!(m.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(m.row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn truncated_and_trailing_payloads_are_rejected() {
        let m = Matrix::new(2, 3, (0..6).map(|i| i as f32).collect()).unwrap();
        let bytes = encode_matrix(&m);
        assert!(matches!(
            decode_matrix(&bytes[..bytes.len() - 4], 2),
            Err(Error::TruncatedPayload {
                expected: 24,
                actual: 20
            })
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            decode_matrix(&long, 2),
            Err(Error::TrailingBytes { extra: 1 })
        ));
    }

    #[test]
    fn header_errors() {
        let mut bytes = encode_matrix(&Matrix::new(1, 1, vec![1.0]).unwrap());
        assert!(matches!(
            decode_matrix(&bytes, 1),
            Err(Error::DimMismatch(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode_matrix(&bytes, 2),
            Err(Error::BadMagic { .. })
        ));
        let mut packed = header_bytes(7, &[1, 1]);
        put_f32s(&mut packed, &[0.0]);
        assert!(matches!(
            decode_matrix(&packed, 2),
            Err(Error::UnsupportedDtype(7))
        ));
    }

    #[test]
    fn non_finite_reports_row() {
        let mut bytes = header_bytes(0, &[3, 2]);
        put_f32s(&mut bytes, &[0.0, 0.0, 1.0, 1.0, 2.0, f32::NAN]);
        assert!(matches!(
            decode_matrix(&bytes, 2),
            Err(Error::NonFiniteValue { row: 2 })
        ));
    }

    #[test]
    fn rank_one_is_a_single_row() {
        let mut bytes = header_bytes(0, &[3]);
        put_f32s(&mut bytes, &[1.0, 2.0, 3.0]);
        let m = decode_matrix(&bytes, 1).unwrap();
        assert_eq!((m.rows(), m.cols()), (1, 3));
    }

    #[test]
    fn huge_dims_do_not_overflow() {
        let bytes = header_bytes(0, &[u64::MAX, 4]);
        assert!(decode_matrix(&bytes, 2).is_err());
        let bytes = header_bytes(0, &[1 << 40, 1 << 40]);
        assert!(decode_matrix(&bytes, 2).is_err());
    }
}

//! Symmetric per-group round-to-nearest quantization of the stage-1 weights.
//!
//! Each run of `group_size` consecutive weights within a row shares one scale
//! `max|w| / (2^(bits-1) - 1)`. Codes are stored two per byte for int4 (low
//! nibble first) and one per byte for int8. Logits are computed directly on
//! the codes, one integer-weighted dot and one scale multiply per group.

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCentroids {
    bits: u8,
    group_size: usize,
    rows: usize,
    cols: usize,
    scales: Vec<f32>,
    packed: Vec<u8>,
}

/// Quantizes the centroid matrix `C`.
pub fn quantize_centroids(
    centroids: &Matrix,
    bits: u8,
    group_size: usize,
) -> Result<QuantizedCentroids> {
    quantize_matrix(centroids, bits, group_size)
}

/// Quantizes any row-major matrix under the same scheme (used to build the
/// fully quantized dense head for comparison).
pub fn quantize_matrix(m: &Matrix, bits: u8, group_size: usize) -> Result<QuantizedCentroids> {
    check_scheme(bits, group_size, m.cols())?;
    let qmax = qmax(bits);
    let mut scales = Vec::with_capacity(m.rows() * m.cols() / group_size);
    let mut codes: Vec<i8> = Vec::with_capacity(m.rows() * m.cols());
    for group in m.as_slice().chunks_exact(group_size) {
        let amax = group.iter().fold(0.0f32, |a, &w| a.max(w.abs()));
        if amax == 0.0 {
            scales.push(1.0);
            codes.extend(std::iter::repeat_n(0, group_size));
            continue;
        }
        // multiply by the exact reciprocal qmax/amax rather than dividing by the rounded scale
        let inv = qmax / amax;
        scales.push(amax / qmax);
        codes.extend(
            group
                .iter()
                .map(|&w| (w * inv).round().clamp(-qmax, qmax) as i8),
        );
    }
    Ok(QuantizedCentroids {
        bits,
        group_size,
        rows: m.rows(),
        cols: m.cols(),
        scales,
        packed: pack(&codes, bits),
    })
}

/// Stage-1 logits from quantized centroids.
pub fn centroid_logits_quant(qc: &QuantizedCentroids, h: &[f32]) -> Result<Vec<f32>> {
    qc.logits(h)
}

/// Rejects bit widths other than 4 and 8 and groups that do not tile a row.
pub fn check_scheme(bits: u8, group_size: usize, cols: usize) -> Result<()> {
    if bits != 4 && bits != 8 {
        return Err(Error::InvalidGroup(format!(
            "bits must be 4 or 8, got {bits}"
        )));
    }
    if group_size == 0 || !cols.is_multiple_of(group_size) {
        return Err(Error::InvalidGroup(format!(
            "group size {group_size} does not divide row length {cols}"
        )));
    }
    Ok(())
}

fn qmax(bits: u8) -> f32 {
    ((1i32 << (bits - 1)) - 1) as f32
}

fn pack(codes: &[i8], bits: u8) -> Vec<u8> {
    match bits {
        8 => codes.iter().map(|&q| q as u8).collect(),
        _ => codes
            .chunks(2)
            .map(|pair| {
                let lo = pair[0] as u8 & 0x0f;
                let hi = pair.get(1).map_or(0, |&q| q as u8 & 0x0f);
                lo | (hi << 4)
            })
            .collect(),
    }
}

#[inline]
fn sign_extend4(nibble: u8) -> i8 {
    ((nibble << 4) as i8) >> 4
}

impl QuantizedCentroids {
    pub fn from_parts(
        bits: u8,
        group_size: usize,
        rows: usize,
        cols: usize,
        scales: Vec<f32>,
        packed: Vec<u8>,
    ) -> Result<Self> {
        check_scheme(bits, group_size, cols)?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::DimMismatch("quantized shape overflows".into()))?;
        if scales.len() != n / group_size {
            return Err(Error::DimMismatch(format!(
                "{} scales for {} groups",
                scales.len(),
                n / group_size
            )));
        }
        if let Some(g) = scales.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidGroup(format!(
                "scale of group {g} is not positive"
            )));
        }
        if packed.len() != packed_len(n, bits) {
            return Err(Error::DimMismatch(format!(
                "packed payload has {} bytes, expected {}",
                packed.len(),
                packed_len(n, bits)
            )));
        }
        Ok(Self {
            bits,
            group_size,
            rows,
            cols,
            scales,
            packed,
        })
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    /// Signed code of flat element `i`.
    pub fn code(&self, i: usize) -> i8 {
        match self.bits {
            8 => self.packed[i] as i8,
            _ => {
                let byte = self.packed[i / 2];
                sign_extend4(if i.is_multiple_of(2) {
                    byte & 0x0f
                } else {
                    byte >> 4
                })
            }
        }
    }

    pub fn codes(&self) -> Vec<i8> {
        (0..self.rows * self.cols).map(|i| self.code(i)).collect()
    }

    pub fn dequantize(&self) -> Matrix {
        let data = (0..self.rows * self.cols)
            .map(|i| self.code(i) as f32 * self.scales[i / self.group_size])
            .collect();
        Matrix::new(self.rows, self.cols, data).expect("shape checked at construction")
    }

    /// Writes row `r`'s codes (as `f32`) into `buf`.
    fn unpack_row(&self, r: usize, buf: &mut [f32]) {
        let start = r * self.cols;
        match self.bits {
            8 => {
                for (dst, &b) in buf.iter_mut().zip(&self.packed[start..start + self.cols]) {
                    *dst = b as i8 as f32;
                }
            }
            _ if start.is_multiple_of(2) && self.cols.is_multiple_of(2) => {
                let bytes = &self.packed[start / 2..(start + self.cols) / 2];
                for (pair, &b) in buf.chunks_exact_mut(2).zip(bytes) {
                    pair[0] = sign_extend4(b & 0x0f) as f32;
                    pair[1] = sign_extend4(b >> 4) as f32;
                }
            }
            _ => {
                for (j, dst) in buf.iter_mut().enumerate() {
                    *dst = self.code(start + j) as f32;
                }
            }
        }
    }

    /// `out[r] = Σ_g scale_g · (codes_g · h_g)`.
    pub fn logits_into(&self, h: &[f32], out: &mut [f32]) {
        debug_assert_eq!(h.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        let groups_per_row = self.cols / self.group_size;
        let mut buf = vec![0.0f32; self.cols];
        for (r, o) in out.iter_mut().enumerate() {
            self.unpack_row(r, &mut buf);
            let scales = &self.scales[r * groups_per_row..(r + 1) * groups_per_row];
            *o = buf
                .chunks_exact(self.group_size)
                .zip(h.chunks_exact(self.group_size))
                .zip(scales)
                .map(|((q, x), &s)| s * dot(q, x))
                .sum();
        }
    }

    pub fn logits(&self, h: &[f32]) -> Result<Vec<f32>> {
        if h.len() != self.cols {
            return Err(Error::DimMismatch(format!(
                "hidden state has length {}, expected {}",
                h.len(),
                self.cols
            )));
        }
        let mut out = vec![0.0; self.rows];
        self.logits_into(h, &mut out);
        Ok(out)
    }

    /// Worst-case logit error per row: `Σ_g (scale_g / 2) · ‖h_g‖₁`.
    pub fn logit_error_bound(&self, h: &[f32]) -> Vec<f64> {
        let groups_per_row = self.cols / self.group_size;
        let h_l1: Vec<f64> = h
            .chunks_exact(self.group_size)
            .map(|g| g.iter().map(|&x| x.abs() as f64).sum())
            .collect();
        (0..self.rows)
            .map(|r| {
                self.scales[r * groups_per_row..(r + 1) * groups_per_row]
                    .iter()
                    .zip(&h_l1)
                    .map(|(&s, l1)| s as f64 / 2.0 * l1)
                    .sum()
            })
            .collect()
    }
}

pub(crate) fn packed_len(elements: usize, bits: u8) -> usize {
    (elements * bits as usize).div_ceil(8)
}

//! Dense row-major `f32` arrays and the numeric kernels the rest of the crate
//! builds on.
//!
//! Storage is `f32`; reductions (dot products, norms, softmax denominators)
//! accumulate in `f64` in a fixed sequential order so every kernel is
//! bit-reproducible.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dims("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis (1 for a scalar).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::dims("dims2", &self.shape, &[0, 0])),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::dims("dims3", &self.shape, &[0, 0, 0])),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::dims("dims4", &self.shape, &[0, 0, 0, 0])),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Contiguous block addressed by a prefix of leading indices.
    ///
    /// Panics if the prefix is longer than the rank or any index is out of
    /// range; callers validate extents up front.
    pub fn block(&self, prefix: &[usize]) -> &[f32] {
        let (start, len) = self.block_range(prefix);
        &self.data[start..start + len]
    }

    pub fn block_mut(&mut self, prefix: &[usize]) -> &mut [f32] {
        let (start, len) = self.block_range(prefix);
        &mut self.data[start..start + len]
    }

    fn block_range(&self, prefix: &[usize]) -> (usize, usize) {
        assert!(prefix.len() <= self.shape.len(), "block prefix too long");
        let len: usize = self.shape[prefix.len()..].iter().product();
        let mut start = 0;
        for (axis, &i) in prefix.iter().enumerate() {
            assert!(i < self.shape[axis], "block index out of range");
            start = start * self.shape[axis] + i;
        }
        (start * len, len)
    }

    /// Copies the block at `prefix` into a standalone tensor.
    pub fn sub(&self, prefix: &[usize]) -> Tensor {
        Tensor {
            shape: self.shape[prefix.len()..].to_vec(),
            data: self.block(prefix).to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(Error::config("cannot stack zero tensors"));
        };
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::dims("stack", &first.shape, &p.shape));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes the self-describing dump: one JSON header line, then the
    /// little-endian `f32` payload.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = DumpHeader {
            shape: self.shape.clone(),
            dtype: "f32".into(),
            order: "row-major".into(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Tensor> {
        let mut r = BufReader::new(r);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::TensorFormat("missing header line".into()));
        }
        let header: DumpHeader = serde_json::from_slice(&line[..line.len() - 1])?;
        if header.dtype != "f32" || header.order != "row-major" {
            return Err(Error::TensorFormat(format!(
                "unsupported dtype/order {}/{}",
                header.dtype, header.order
            )));
        }
        let n: usize = header.shape.iter().product();
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != n * 4 {
            return Err(Error::TensorFormat(format!(
                "payload has {} bytes, header implies {}",
                payload.len(),
                n * 4
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(header.shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.data.len() * 4);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = File::create(path)?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        Tensor::read_from(File::open(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    shape: Vec<usize>,
    dtype: String,
    order: String,
}

#[inline]
pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += *x as f64 * *y as f64;
    }
    acc
}

#[inline]
pub(crate) fn norm_f64(a: &[f32]) -> f64 {
    dot_f64(a, a).sqrt()
}

/// Row-major product of an `m×k` slice with a `k×n` slice.
pub(crate) fn matmul_raw(a: &[f32], m: usize, k: usize, b: &[f32], n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let row = &a[i * k..(i + 1) * k];
        for (kk, &x) in row.iter().enumerate() {
            let x = x as f64;
            let brow = &b[kk * n..(kk + 1) * n];
            for (s, &y) in acc.iter_mut().zip(brow) {
                *s += x * y as f64;
            }
        }
        for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dims("matmul", a.shape(), b.shape()));
    }
    let out = Tensor::new(vec![m, n], matmul_raw(a.data(), m, k, b.data(), n))?;
    if !out.all_finite() {
        return Err(Error::NonFinite("matmul"));
    }
    Ok(out)
}

/// Applies a `d×n` matrix to every `d`-vector along the last axis of `x`.
pub fn project_last(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (d, n) = w.dims2()?;
    if x.last_dim() != d {
        return Err(Error::dims("project_last", x.shape(), w.shape()));
    }
    let rows = x.len() / d.max(1);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = n;
    Tensor::new(shape, matmul_raw(x.data(), rows, d, w.data(), n))
}

/// In-place softmax of one row. `-inf` entries become exactly zero.
pub(crate) fn softmax_row(row: &mut [f32], row_index: usize) -> Result<()> {
    let mut max = f32::NEG_INFINITY;
    for &v in row.iter() {
        if v.is_nan() || v == f32::INFINITY {
            return Err(Error::NonFinite("softmax_rows input"));
        }
        if v > max {
            max = v;
        }
    }
    if max == f32::NEG_INFINITY {
        return Err(Error::DegenerateRow { row: row_index });
    }
    let max = max as f64;
    let mut exps = Vec::with_capacity(row.len());
    let mut denom = 0.0f64;
    for &v in row.iter() {
        let e = if v == f32::NEG_INFINITY {
            0.0
        } else {
            (v as f64 - max).exp()
        };
        denom += e;
        exps.push(e);
    }
    for (o, e) in row.iter_mut().zip(exps) {
        *o = (e / denom) as f32;
    }
    Ok(())
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    let mut out = x.clone();
    if n == 0 {
        return Ok(out);
    }
    for i in 0..m {
        softmax_row(&mut out.data_mut()[i * n..(i + 1) * n], i)?;
    }
    Ok(out)
}

/// Cosine similarity, clamped to `[-1, 1]`.
///
/// Undefined (error) when either vector has zero norm.
pub fn cosine_sim(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dims("cosine_sim", &[a.len()], &[b.len()]));
    }
    let na = norm_f64(a);
    let nb = norm_f64(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok(cosine_with_norms(a, na, b, nb))
}

#[inline]
pub(crate) fn cosine_with_norms(a: &[f32], na: f64, b: &[f32], nb: f64) -> f64 {
    (dot_f64(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

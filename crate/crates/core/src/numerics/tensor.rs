use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
///
/// Sequences are stored as `[T, B, D]` so that the `B x D` slab for one frame
/// is contiguous; matrices are `[rows, cols]` and vectors `[len]`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "Tensor::from_vec",
                format!("{expected} values for shape {shape:?}"),
                data.len(),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Matrix given as a list of rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], limit: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Glorot-uniform matrix: U(-a, a) with a = sqrt(6 / (rows + cols)).
    pub fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Tensor::uniform(&[rows, cols], limit, rng)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all but the last axis.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::dim(
                op,
                format!("{shape:?}"),
                format!("{:?}", self.shape),
            ));
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "Tensor::reshape",
                format!("{} elements", self.data.len()),
                format!("{shape:?}"),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "add_assign",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a `[cols]` vector to every row of a `[rows, cols]` matrix.
    pub fn add_row_vector(&self, bias: &Tensor) -> Result<Tensor> {
        let cols = self.cols();
        if bias.len() != cols {
            return Err(Error::dim("add_row_vector", cols, bias.len()));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Sum over rows, yielding a `[cols]` vector.
    pub fn sum_rows(&self) -> Tensor {
        let cols = self.cols();
        let mut out = vec![0.0; cols];
        for row in self.data.chunks(cols.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor {
            shape: vec![cols],
            data: out,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// The `[B, D]` slab of frame `t` of a `[T, B, D]` sequence.
    pub fn frame(&self, t: usize) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::dim("frame", "rank-3 sequence", format!("{:?}", self.shape)));
        }
        if t >= self.shape[0] {
            return Err(Error::OutOfRange {
                what: "frame",
                index: t,
                limit: self.shape[0],
            });
        }
        let width = self.shape[1] * self.shape[2];
        Ok(Tensor {
            shape: vec![self.shape[1], self.shape[2]],
            data: self.data[t * width..(t + 1) * width].to_vec(),
        })
    }

    pub(crate) fn frame_slice(&self, t: usize) -> &[f64] {
        let width = self.shape[1] * self.shape[2];
        &self.data[t * width..(t + 1) * width]
    }

    pub(crate) fn frame_slice_mut(&mut self, t: usize) -> &mut [f64] {
        let width = self.shape[1] * self.shape[2];
        &mut self.data[t * width..(t + 1) * width]
    }

    /// Stacks `T` equally shaped `[B, D]` frames into a `[T, B, D]` sequence.
    pub fn stack_frames(frames: &[Tensor]) -> Result<Tensor> {
        let first = frames
            .first()
            .ok_or_else(|| Error::dim("stack_frames", "at least one frame", 0))?;
        let shape = first.shape.clone();
        if shape.len() != 2 {
            return Err(Error::dim("stack_frames", "rank-2 frames", format!("{shape:?}")));
        }
        let mut data = Vec::with_capacity(frames.len() * first.len());
        for f in frames {
            if f.shape != shape {
                return Err(Error::dim(
                    "stack_frames",
                    format!("{shape:?}"),
                    format!("{:?}", f.shape),
                ));
            }
            data.extend_from_slice(&f.data);
        }
        Ok(Tensor {
            shape: vec![frames.len(), shape[0], shape[1]],
            data,
        })
    }

    /// First `len` frames of a `[T, B, D]` sequence.
    pub fn truncate_frames(&self, len: usize) -> Result<Tensor> {
        if self.rank() != 3 || len == 0 || len > self.shape[0] {
            return Err(Error::dim(
                "truncate_frames",
                format!("1..={} frames", self.shape.first().copied().unwrap_or(0)),
                len,
            ));
        }
        let width = self.shape[1] * self.shape[2];
        Ok(Tensor {
            shape: vec![len, self.shape[1], self.shape[2]],
            data: self.data[..len * width].to_vec(),
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dim("transpose", "matrix", format!("{:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }
}

/// `a[B x M] · w[M x N]`.
pub fn matmul(a: &Tensor, w: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || w.rank() != 2 || a.shape[1] != w.shape[0] {
        return Err(Error::dim(
            "matmul",
            format!("[B, M] x [M, N], left {:?}", a.shape),
            format!("{:?}", w.shape),
        ));
    }
    let (b, m, n) = (a.shape[0], a.shape[1], w.shape[1]);
    let mut out = vec![0.0; b * n];
    for i in 0..b {
        let row = &mut out[i * n..(i + 1) * n];
        for k in 0..m {
            let aik = a.data[i * m + k];
            if aik == 0.0 {
                continue;
            }
            let wk = &w.data[k * n..(k + 1) * n];
            for (o, &wkj) in row.iter_mut().zip(wk) {
                *o += aik * wkj;
            }
        }
    }
    Ok(Tensor {
        shape: vec![b, n],
        data: out,
    })
}

/// `aᵀ · g` for `a[B x M]`, `g[B x N]`; the weight gradient of [`matmul`].
pub fn matmul_tn(a: &Tensor, g: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || g.rank() != 2 || a.shape[0] != g.shape[0] {
        return Err(Error::dim(
            "matmul_tn",
            format!("[B, M]ᵀ x [B, N], left {:?}", a.shape),
            format!("{:?}", g.shape),
        ));
    }
    let (b, m, n) = (a.shape[0], a.shape[1], g.shape[1]);
    let mut out = vec![0.0; m * n];
    for r in 0..b {
        let grow = &g.data[r * n..(r + 1) * n];
        for k in 0..m {
            let ark = a.data[r * m + k];
            if ark == 0.0 {
                continue;
            }
            for (o, &gv) in out[k * n..(k + 1) * n].iter_mut().zip(grow) {
                *o += ark * gv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `g · wᵀ` for `g[B x N]`, `w[M x N]`; the input gradient of [`matmul`].
pub fn matmul_nt(g: &Tensor, w: &Tensor) -> Result<Tensor> {
    if g.rank() != 2 || w.rank() != 2 || g.shape[1] != w.shape[1] {
        return Err(Error::dim(
            "matmul_nt",
            format!("[B, N] x [M, N]ᵀ, left {:?}", g.shape),
            format!("{:?}", w.shape),
        ));
    }
    let (b, n, m) = (g.shape[0], g.shape[1], w.shape[0]);
    let mut out = vec![0.0; b * m];
    for i in 0..b {
        let grow = &g.data[i * n..(i + 1) * n];
        for k in 0..m {
            let wrow = &w.data[k * n..(k + 1) * n];
            out[i * m + k] = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
        }
    }
    Ok(Tensor {
        shape: vec![b, m],
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Tensor, w: &Tensor) -> Vec<f64> {
        let (b, m, n) = (a.shape()[0], a.shape()[1], w.shape()[1]);
        let mut out = vec![0.0; b * n];
        for i in 0..b {
            for j in 0..n {
                for k in 0..m {
                    out[i * n + j] += a.data()[i * m + k] * w.data()[k * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        assert_eq!(matmul(&a, &Tensor::identity(4)).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(&[&[1.0, 2.0]]);
        let w = Tensor::from_rows(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&a, &w).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::uniform(&[3, 4], 2.0, &mut rng);
        let w = Tensor::uniform(&[4, 2], 2.0, &mut rng);
        let got = matmul(&a, &w).unwrap();
        for (g, e) in got.data().iter().zip(naive(&a, &w)) {
            assert!((g - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::uniform(&[5, 3], 1.0, &mut rng);
        let g = Tensor::uniform(&[5, 4], 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let tn = matmul_tn(&a, &g).unwrap();
        let tn_ref = matmul(&a.transpose().unwrap(), &g).unwrap();
        assert!(tn.sub(&tn_ref).unwrap().max_abs() < 1e-12);
        let nt = matmul_nt(&g, &w).unwrap();
        let nt_ref = matmul(&g, &w.transpose().unwrap()).unwrap();
        assert!(nt.sub(&nt_ref).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &w), Err(Error::Dimension { .. })));
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn frames_round_trip_through_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq = Tensor::uniform(&[4, 2, 3], 1.0, &mut rng);
        let frames: Vec<_> = (0..4).map(|t| seq.frame(t).unwrap()).collect();
        assert_eq!(Tensor::stack_frames(&frames).unwrap(), seq);
        assert!(seq.frame(4).is_err());
    }
}

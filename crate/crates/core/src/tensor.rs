//! Dense row-major `f64` tensors and the raw numeric kernels that the
//! differentiation graph is built on.
//!
//! Image tensors use the `N×H×W×C` layout and convolution kernels
//! `kh×kw×C×C'`. Every kernel here is a pure function of its inputs with
//! a fixed loop order, so results are bit-reproducible.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::Argument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if m == 0 || n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Argument("ragged or empty rows".into()));
        }
        Self::new(vec![m, n], rows.concat())
    }

    /// Standard normal draws scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        let mut off = 0;
        for (i, (&x, &d)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(x < d, "index {i} out of range");
            off = off * d + x;
        }
        self.data[off]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Row `i` of a tensor viewed as `shape[0] × rest`.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn transpose2d(&self) -> Result<Self> {
        let [m, n] = self.shape[..] else {
            return Err(Error::dim("transpose", &self.shape, &[0, 0]));
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (&[m, k], &[k2, n]) = (&self.shape[..], &other.shape[..]) else {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        };
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Numpy-style broadcast of two shapes, aligned at the trailing axis.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i < r - a.len() { 1 } else { a[i - (r - a.len())] };
        let db = if i < r - b.len() { 1 } else { b[i - (r - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Calls `f(big, small)` for every linear index of `big` together with the
/// linear index of `small` it maps to under broadcasting.
fn for_each_broadcast(big: &[usize], small: &[usize], mut f: impl FnMut(usize, usize)) {
    let r = big.len();
    let pad = r - small.len();
    let mut strides = vec![0usize; r];
    let mut acc = 1;
    for d in (0..r).rev() {
        let sd = if d < pad { 1 } else { small[d - pad] };
        strides[d] = if sd == 1 { 0 } else { acc };
        acc *= sd;
    }
    let total: usize = big.iter().product();
    let mut idx = vec![0usize; r];
    let mut soff = 0usize;
    for lin in 0..total {
        f(lin, soff);
        for d in (0..r).rev() {
            idx[d] += 1;
            soff += strides[d];
            if idx[d] < big[d] {
                break;
            }
            soff -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

fn broadcastable(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len()
        && broadcast_shape(small, big).is_some_and(|s| s.as_slice() == big)
}

impl Tensor {
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Self> {
        if !broadcastable(&self.shape, target) {
            return Err(Error::dim("broadcast_to", &self.shape, target));
        }
        let n: usize = target.iter().product();
        let mut out = vec![0.0; n];
        for_each_broadcast(target, &self.shape, |b, s| out[b] = self.data[s]);
        Ok(Self::from_parts(target.to_vec(), out))
    }

    /// Sums over the axes that `target` broadcasts along; inverse of
    /// [`Tensor::broadcast_to`].
    pub fn sum_to(&self, target: &[usize]) -> Result<Self> {
        if !broadcastable(target, &self.shape) {
            return Err(Error::dim("sum_to", &self.shape, target));
        }
        let n: usize = target.iter().product();
        let mut out = vec![0.0; n];
        for_each_broadcast(&self.shape, target, |b, s| out[s] += self.data[b]);
        Ok(Self::from_parts(target.to_vec(), out))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Same,
    Valid,
}

/// Explicit zero padding on each spatial border.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pads {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    /// `Same` follows the usual convention: output extent `ceil(in/stride)`,
    /// with any odd padding going to the bottom/right border.
    pub fn resolve(self, h: usize, w: usize, kh: usize, kw: usize, stride: usize) -> Pads {
        match self {
            Padding::Valid => Pads {
                top: 0,
                bottom: 0,
                left: 0,
                right: 0,
            },
            Padding::Same => {
                let total = |n: usize, k: usize| {
                    let out = n.div_ceil(stride);
                    ((out - 1) * stride + k).saturating_sub(n)
                };
                let th = total(h, kh);
                let tw = total(w, kw);
                Pads {
                    top: th / 2,
                    bottom: th - th / 2,
                    left: tw / 2,
                    right: tw - tw / 2,
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub co: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pads: Pads,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pads: Pads) -> Result<Self> {
        let (&[n, h, w, c], &[kh, kw, kc, co]) = (input, kernel) else {
            return Err(Error::dim("conv2d", input, kernel));
        };
        if c != kc || stride == 0 {
            return Err(Error::dim("conv2d", input, kernel));
        }
        let ph = h + pads.top + pads.bottom;
        let pw = w + pads.left + pads.right;
        if kh > ph || kw > pw {
            return Err(Error::dim("conv2d", input, kernel));
        }
        Ok(Self {
            n,
            h,
            w,
            c,
            kh,
            kw,
            co,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
            stride,
            pads,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.oh, self.ow, self.co]
    }

    /// Visits every (output pixel, kernel tap, input pixel) triple that
    /// lands inside the unpadded input.
    #[inline]
    fn taps(&self, mut f: impl FnMut(usize, usize, usize)) {
        for n in 0..self.n {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let out = ((n * self.oh + oy) * self.ow + ox) * self.co;
                    for i in 0..self.kh {
                        let iy = (oy * self.stride + i) as isize - self.pads.top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for j in 0..self.kw {
                            let ix = (ox * self.stride + j) as isize - self.pads.left as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let inp = ((n * self.h + iy as usize) * self.w + ix as usize) * self.c;
                            let k = (i * self.kw + j) * self.c * self.co;
                            f(out, inp, k);
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `y[n,oy,ox,o] = Σ x[n,oy·s+i−top,ox·s+j−left,c]·k[i,j,c,o]`.
pub fn conv2d(x: &Tensor, k: &Tensor, stride: usize, pads: Pads) -> Result<Tensor> {
    let geo = ConvGeom::new(&x.shape, &k.shape, stride, pads)?;
    Ok(conv2d_geom(&geo, x, k))
}

pub(crate) fn conv2d_geom(geo: &ConvGeom, x: &Tensor, k: &Tensor) -> Tensor {
    let mut y = vec![0.0; geo.n * geo.oh * geo.ow * geo.co];
    let (c, co) = (geo.c, geo.co);
    geo.taps(|out, inp, kof| {
        let yrow = &mut y[out..out + co];
        for ci in 0..c {
            let xv = x.data[inp + ci];
            if xv == 0.0 {
                continue;
            }
            let krow = &k.data[kof + ci * co..kof + (ci + 1) * co];
            for (yv, &kv) in yrow.iter_mut().zip(krow) {
                *yv += xv * kv;
            }
        }
    });
    Tensor::from_parts(geo.output_shape(), y)
}

/// Gradient of `<conv2d(x,k), g>` with respect to `x`.
pub(crate) fn conv2d_input_grad(geo: &ConvGeom, g: &Tensor, k: &Tensor) -> Tensor {
    let mut dx = vec![0.0; geo.n * geo.h * geo.w * geo.c];
    let (c, co) = (geo.c, geo.co);
    geo.taps(|out, inp, kof| {
        let grow = &g.data[out..out + co];
        for ci in 0..c {
            let krow = &k.data[kof + ci * co..kof + (ci + 1) * co];
            let s: f64 = grow.iter().zip(krow).map(|(a, b)| a * b).sum();
            dx[inp + ci] += s;
        }
    });
    Tensor::from_parts(vec![geo.n, geo.h, geo.w, geo.c], dx)
}

/// Gradient of `<conv2d(x,k), g>` with respect to `k`.
pub(crate) fn conv2d_kernel_grad(geo: &ConvGeom, x: &Tensor, g: &Tensor) -> Tensor {
    let mut dk = vec![0.0; geo.kh * geo.kw * geo.c * geo.co];
    let (c, co) = (geo.c, geo.co);
    geo.taps(|out, inp, kof| {
        let grow = &g.data[out..out + co];
        for ci in 0..c {
            let xv = x.data[inp + ci];
            if xv == 0.0 {
                continue;
            }
            let drow = &mut dk[kof + ci * co..kof + (ci + 1) * co];
            for (d, &gv) in drow.iter_mut().zip(grow) {
                *d += xv * gv;
            }
        }
    });
    Tensor::from_parts(vec![geo.kh, geo.kw, geo.c, geo.co], dk)
}

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let &[n, h, w, c] = x.shape() else {
        return Err(Error::dim("upsample_nearest", x.shape(), &[0, 0, 0, 0]));
    };
    if factor < 1 {
        return Err(Error::Argument("upsample factor must be >= 1".into()));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; n * oh * ow * c];
    for b in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((b * h + y / factor) * w + xx / factor) * c;
                let dst = ((b * oh + y) * ow + xx) * c;
                out[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, oh, ow, c], out))
}

/// Sums non-overlapping `factor×factor` windows; adjoint of
/// [`upsample_nearest`].
pub fn sum_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    let &[n, h, w, c] = x.shape() else {
        return Err(Error::dim("sum_pool", x.shape(), &[0, 0, 0, 0]));
    };
    if factor < 1 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Argument(format!(
            "sum_pool factor {factor} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; n * oh * ow * c];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let src = ((b * h + y) * w + xx) * c;
                let dst = ((b * oh + y / factor) * ow + xx / factor) * c;
                for ch in 0..c {
                    out[dst + ch] += x.data[src + ch];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, oh, ow, c], out))
}

pub fn gather_rows(table: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let rows = table.shape[0];
    if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
        return Err(Error::Argument(format!(
            "row index {bad} out of range for table with {rows} rows"
        )));
    }
    if idx.is_empty() {
        return Err(Error::Argument("gather_rows with no indices".into()));
    }
    let w = table.data.len() / rows;
    let mut out = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        out.extend_from_slice(&table.data[i * w..(i + 1) * w]);
    }
    let mut shape = table.shape.clone();
    shape[0] = idx.len();
    Ok(Tensor::from_parts(shape, out))
}

pub fn scatter_add_rows(src: &Tensor, idx: &[usize], rows: usize) -> Result<Tensor> {
    if src.shape.first() != Some(&idx.len()) {
        return Err(Error::dim("scatter_add_rows", &src.shape, &[idx.len()]));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
        return Err(Error::Argument(format!("row index {bad} out of range")));
    }
    let w = src.data.len() / idx.len();
    let mut out = vec![0.0; rows * w];
    for (r, &i) in idx.iter().enumerate() {
        for (o, &s) in out[i * w..(i + 1) * w]
            .iter_mut()
            .zip(&src.data[r * w..(r + 1) * w])
        {
            *o += s;
        }
    }
    let mut shape = src.shape.clone();
    shape[0] = rows;
    Ok(Tensor::from_parts(shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(&[i, p]) * b.get(&[p, j]);
                }
                out.data[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        let r = Tensor::from_rows(&[vec![1.0, 2.0]])
            .unwrap()
            .matmul(&Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap())
            .unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::uniform(vec![5, 4], -2.0, 2.0, &mut rng);
        let b = Tensor::uniform(vec![4, 3], -2.0, 2.0, &mut rng);
        let fast = a.matmul(&b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let err = a.matmul(&Tensor::zeros(vec![2, 3])).unwrap_err();
        assert_eq!(err, Error::dim("matmul", &[2, 3], &[2, 3]));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn broadcast_and_sum_to_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let small = Tensor::uniform(vec![1, 3], -1.0, 1.0, &mut rng);
        let big = Tensor::uniform(vec![4, 2, 3], -1.0, 1.0, &mut rng);
        let lhs: f64 = small
            .broadcast_to(big.shape())
            .unwrap()
            .data()
            .iter()
            .zip(big.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = big
            .sum_to(small.shape())
            .unwrap()
            .data()
            .iter()
            .zip(small.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(small.broadcast_to(&[4, 2, 2]).is_err());
    }

    #[test]
    fn same_padding_for_strided_kernels() {
        let p = Padding::Same.resolve(16, 16, 4, 4, 2);
        assert_eq!((p.top, p.bottom), (1, 1));
        let p = Padding::Same.resolve(8, 8, 3, 3, 1);
        assert_eq!((p.left, p.right), (1, 1));
    }

    #[test]
    fn sum_pool_rejects_indivisible() {
        assert!(sum_pool(&Tensor::zeros(vec![1, 3, 3, 1]), 2).is_err());
    }
}

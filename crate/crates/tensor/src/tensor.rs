//! Dense row-major `f32` tensors and the raw kernels the graph ops are built from.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// A contiguous, row-major `f32` tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Self {
        let shape = shape.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    /// Gaussian samples with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f32, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { shape, data }
    }

    /// Gaussian samples truncated to two standard deviations by resampling.
    pub fn trunc_normal<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f32, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f32 = StandardNormal.sample(rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        Self { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, bound: f32, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// In-place `self += other` for equal shapes.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn sum(&self) -> f32 {
        // Pairwise-ish accumulation in f64 keeps large reductions stable.
        self.data.iter().map(|&x| x as f64).sum::<f64>() as f32
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Axis permutation producing a new contiguous tensor.
    pub fn permute(&self, axes: &[usize]) -> Tensor {
        assert_eq!(axes.len(), self.rank(), "permute rank mismatch");
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = vec![0.0f32; self.data.len()];
        strided_copy(&self.data, &shape, &src_strides, &mut out);
        Tensor { shape, data: out }
    }

    /// Sum-reduce to `target` shape under numpy broadcasting rules.
    pub fn sum_to_shape(&self, target: &[usize]) -> Tensor {
        if self.shape == target {
            return self.clone();
        }
        let bstrides = broadcast_strides(target, &self.shape);
        let mut out = vec![0.0f32; target.iter().product()];
        for_each_index(&self.shape, |flat, idx| {
            let off: usize = idx.iter().zip(&bstrides).map(|(i, s)| i * s).sum();
            out[off] += self.data[flat];
        });
        Tensor { shape: target.to_vec(), data: out }
    }

    /// Materialise a broadcast of `self` to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let bstrides = broadcast_strides(&self.shape, shape);
        let mut out = vec![0.0f32; shape.iter().product()];
        strided_copy(&self.data, shape, &bstrides, &mut out);
        Tensor { shape: shape.to_vec(), data: out }
    }
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides for reading a tensor of shape `small` as if broadcast to `big`
/// (size-1 and missing leading axes get stride 0).
pub fn broadcast_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    assert!(small.len() <= big.len(), "cannot broadcast {small:?} to {big:?}");
    let s = strides(small);
    let lead = big.len() - small.len();
    (0..big.len())
        .map(|i| {
            if i < lead {
                0
            } else {
                let j = i - lead;
                if small[j] == big[i] {
                    s[j]
                } else {
                    assert_eq!(small[j], 1, "cannot broadcast {small:?} to {big:?}");
                    0
                }
            }
        })
        .collect()
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
            }
        })
        .collect()
}

/// Copy `src` read through `src_strides` into contiguous `out` of `shape`.
pub(crate) fn strided_copy(src: &[f32], shape: &[usize], src_strides: &[usize], out: &mut [f32]) {
    if shape.is_empty() {
        out[0] = src[0];
        return;
    }
    let nd = shape.len();
    let inner = shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    if inner == 0 {
        return;
    }
    let outer: usize = shape[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd - 1];
    let mut base = 0usize;
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        if inner_stride == 1 {
            dst.copy_from_slice(&src[base..base + inner]);
        } else {
            for (k, d) in dst.iter_mut().enumerate() {
                *d = src[base + k * inner_stride];
            }
        }
        // odometer over the outer axes
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            base -= src_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Visit every multi-index of `shape` in row-major order.
pub(crate) fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    for flat in 0..n {
        f(flat, &idx);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
///
/// `a` is `m×k` (or `k×m` when `trans_a`), `b` is `k×n` (or `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if m * k * n <= SMALL_GEMM {
        small_gemm(m, k, n, alpha, a, trans_a, b, trans_b, beta, c);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds were checked above and the strides describe dense
    // row-major (or transposed) matrices inside those bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const SMALL_GEMM: usize = 1 << 18;

/// A strided matrix view: `data[off + i * rs + j * cs]` for `i < rows`, `j < cols`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    fn check(&self, rows: usize, cols: usize, len: usize) {
        if rows > 0 && cols > 0 {
            assert!(self.off + (rows - 1) * self.rs + (cols - 1) * self.cs < len, "strided view out of bounds");
        }
    }
}

/// `c = alpha * a * b + beta * c` over strided views (`a` is `m×k`, `b` is `k×n`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], va: View, b: &[f32], vb: View, beta: f32, c: &mut [f32], vc: View) {
    va.check(m, k, a.len());
    vb.check(k, n, b.len());
    vc.check(m, n, c.len());
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every addressed element was bounds-checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(va.off),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.off),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.off),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

/// Kernel for the many tiny products inside windowed attention, where the
/// packing overhead of a blocked gemm dominates. Operands are brought into
/// `A[m,k] · B[k,n]` form and each output row is accumulated in registers.
#[allow(clippy::too_many_arguments)]
fn small_gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    let at;
    let a = if trans_a {
        at = transpose(a, k, m);
        &at[..]
    } else {
        &a[..m * k]
    };
    let bt;
    let b = if trans_b {
        bt = transpose(b, n, k);
        &bt[..]
    } else {
        &b[..k * n]
    };
    let c = &mut c[..m * n];
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { gemm_rows_avx2(m, k, n, alpha, a, b, beta, c) };
            return;
        }
    }
    gemm_rows(m, k, n, alpha, a, b, beta, c);
}

fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for (cidx, &v) in x[r * cols..(r + 1) * cols].iter().enumerate() {
            t[cidx * rows + r] = v;
        }
    }
    t
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_rows_avx2(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    gemm_rows(m, k, n, alpha, a, b, beta, c)
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_rows(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    match n {
        8 => rows_fixed::<8>(m, k, alpha, a, b, beta, c),
        16 => rows_fixed::<16>(m, k, alpha, a, b, beta, c),
        24 => rows_fixed::<24>(m, k, alpha, a, b, beta, c),
        32 => rows_fixed::<32>(m, k, alpha, a, b, beta, c),
        48 => rows_fixed::<48>(m, k, alpha, a, b, beta, c),
        64 => rows_fixed::<64>(m, k, alpha, a, b, beta, c),
        _ => rows_any(m, k, n, alpha, a, b, beta, c),
    }
}

#[inline(always)]
fn rows_fixed<const N: usize>(m: usize, k: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    for i in 0..m {
        let mut acc = [0.0f32; N];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow: &[f32; N] = b[p * N..(p + 1) * N].try_into().unwrap();
            for j in 0..N {
                acc[j] += av * brow[j];
            }
        }
        let crow: &mut [f32; N] = (&mut c[i * N..(i + 1) * N]).try_into().unwrap();
        if beta == 0.0 {
            for j in 0..N {
                crow[j] = alpha * acc[j];
            }
        } else {
            for j in 0..N {
                crow[j] = alpha * acc[j] + beta * crow[j];
            }
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn rows_any(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        if beta == 0.0 {
            crow.fill(0.0);
        } else if beta != 1.0 {
            crow.iter_mut().for_each(|x| *x *= beta);
        }
        for p in 0..k {
            let av = alpha * a[i * k + p];
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

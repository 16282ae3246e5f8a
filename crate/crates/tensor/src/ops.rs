//! Differentiable ops on [`Var`].

use std::sync::Arc;

use crate::graph::{BackCtx, Var};
use crate::tensor::{broadcast_shape, gemm, strides, Tensor};

fn binary_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    if b.numel() == 1 && a.shape() == shape.as_slice() {
        let s = b.data()[0];
        return a.map(|x| f(x, s));
    }
    let ab = a.broadcast_to(&shape);
    let bb = b.broadcast_to(&shape);
    ab.zip_map(&bb, f)
}

impl<'g> Var<'g> {
    pub fn add(&self, other: &Var<'g>) -> Var<'g> {
        let out = binary_broadcast(&self.value, &other.value, |a, b| a + b);
        self.g.op(&[self, other], out, |c: &BackCtx| {
            vec![
                c.needs[0].then(|| c.grad.sum_to_shape(c.inputs[0].shape())),
                c.needs[1].then(|| c.grad.sum_to_shape(c.inputs[1].shape())),
            ]
        })
    }

    pub fn sub(&self, other: &Var<'g>) -> Var<'g> {
        let out = binary_broadcast(&self.value, &other.value, |a, b| a - b);
        self.g.op(&[self, other], out, |c: &BackCtx| {
            vec![
                c.needs[0].then(|| c.grad.sum_to_shape(c.inputs[0].shape())),
                c.needs[1].then(|| {
                    let mut g = c.grad.sum_to_shape(c.inputs[1].shape());
                    g.scale(-1.0);
                    g
                }),
            ]
        })
    }

    pub fn mul(&self, other: &Var<'g>) -> Var<'g> {
        let out = binary_broadcast(&self.value, &other.value, |a, b| a * b);
        self.g.op(&[self, other], out, |c: &BackCtx| {
            let (a, b) = (&c.inputs[0], &c.inputs[1]);
            vec![
                c.needs[0].then(|| binary_broadcast(c.grad, b, |g, y| g * y).sum_to_shape(a.shape())),
                c.needs[1].then(|| binary_broadcast(c.grad, a, |g, x| g * x).sum_to_shape(b.shape())),
            ]
        })
    }

    pub fn scale(&self, s: f32) -> Var<'g> {
        let out = self.value.map(|x| x * s);
        self.g.op(&[self], out, move |c: &BackCtx| vec![Some(c.grad.map(|g| g * s))])
    }

    pub fn add_scalar(&self, s: f32) -> Var<'g> {
        let out = self.value.map(|x| x + s);
        self.g.op(&[self], out, |c: &BackCtx| vec![Some(c.grad.clone())])
    }

    pub fn neg(&self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn sigmoid(&self) -> Var<'g> {
        let out = self.value.map(sigmoid);
        self.g.op(&[self], out, |c: &BackCtx| vec![Some(c.grad.zip_map(c.out, |g, y| g * y * (1.0 - y)))])
    }

    pub fn relu(&self) -> Var<'g> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f32) -> Var<'g> {
        let out = self.value.map(|x| if x > 0.0 { x } else { slope * x });
        self.g.op(&[self], out, move |c: &BackCtx| {
            vec![Some(c.grad.zip_map(&c.inputs[0], |g, x| if x > 0.0 { g } else { slope * g }))]
        })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'g> {
        let out = Tensor::new(self.shape().to_vec(), map_simd(self.value.data(), None, |x, _| gelu(x)));
        self.g.op(&[self], out, |c: &BackCtx| {
            let d = map_simd(c.inputs[0].data(), Some(c.grad.data()), |x, g| g * gelu_grad(x));
            vec![Some(Tensor::new(c.grad.shape().to_vec(), d))]
        })
    }

    pub fn sum_all(&self) -> Var<'g> {
        let out = Tensor::scalar(self.value.sum());
        self.g.op(&[self], out, |c: &BackCtx| vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.item()))])
    }

    pub fn mean_all(&self) -> Var<'g> {
        let n = self.value.numel().max(1) as f32;
        self.sum_all().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'g> {
        let out = (*self.value).clone().reshape(shape.to_vec());
        self.g.op(&[self], out, |c: &BackCtx| vec![Some(c.grad.clone().reshape(c.inputs[0].shape().to_vec()))])
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'g> {
        let out = self.value.permute(axes);
        let mut inv = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        self.g.op(&[self], out, move |c: &BackCtx| vec![Some(c.grad.permute(&inv))])
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let shape = self.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let src = self.value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        self.g.op(&[self], Tensor::new(oshape, data), move |c: &BackCtx| {
            let mut g = vec![0.0f32; outer * n * inner];
            let gd = c.grad.data();
            for o in 0..outer {
                let base = (o * n + start) * inner;
                g[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(shape.clone(), g))]
        })
    }

    /// Cyclic shift along each listed axis (positive moves elements to higher indices).
    pub fn roll(&self, shifts: &[(usize, isize)]) -> Var<'g> {
        let out = roll_tensor(&self.value, shifts);
        let back: Vec<(usize, isize)> = shifts.iter().map(|&(a, s)| (a, -s)).collect();
        self.g.op(&[self], out, move |c: &BackCtx| vec![Some(roll_tensor(c.grad, &back))])
    }

    /// Rows `index[i]` of a 2-D tensor.
    pub fn index_rows(&self, index: Arc<Vec<usize>>) -> Var<'g> {
        let shape = self.shape();
        assert_eq!(shape.len(), 2);
        let w = shape[1];
        let src = self.value.data();
        let mut data = Vec::with_capacity(index.len() * w);
        for &r in index.iter() {
            data.extend_from_slice(&src[r * w..(r + 1) * w]);
        }
        let out = Tensor::new([index.len(), w], data);
        self.g.op(&[self], out, move |c: &BackCtx| {
            let mut g = Tensor::zeros(c.inputs[0].shape());
            let gd = c.grad.data();
            let gm = g.data_mut();
            for (i, &r) in index.iter().enumerate() {
                for k in 0..w {
                    gm[r * w + k] += gd[i * w + k];
                }
            }
            vec![Some(g)]
        })
    }

    /// Plain 2-D product `self [m,k] · other [k,n]`.
    pub fn matmul(&self, other: &Var<'g>) -> Var<'g> {
        let (a, b) = (self.shape(), other.shape());
        assert!(a.len() == 2 && b.len() == 2 && a[1] == b[0], "matmul shapes {a:?} x {b:?}");
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value.data(), false, other.value.data(), false, 0.0, &mut out);
        self.g.op(&[self, other], Tensor::new([m, n], out), move |c: &BackCtx| {
            let g = c.grad.data();
            let da = c.needs[0].then(|| {
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, 1.0, g, false, c.inputs[1].data(), true, 0.0, &mut d);
                Tensor::new([m, k], d)
            });
            let db = c.needs[1].then(|| {
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, 1.0, c.inputs[0].data(), true, g, false, 0.0, &mut d);
                Tensor::new([k, n], d)
            });
            vec![da, db]
        })
    }

    /// Affine map over the last axis: `self [..., in] · weight [in, out] + bias [out]`.
    pub fn linear(&self, weight: &Var<'g>, bias: Option<&Var<'g>>) -> Var<'g> {
        let xs = self.shape().to_vec();
        let ws = weight.shape();
        assert_eq!(ws.len(), 2);
        let (kin, nout) = (ws[0], ws[1]);
        assert_eq!(*xs.last().expect("linear on scalar"), kin, "linear input width mismatch");
        let m = self.value.numel() / kin;
        let mut out = vec![0.0; m * nout];
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[nout]);
            for row in out.chunks_mut(nout) {
                row.copy_from_slice(b.value.data());
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(m, kin, nout, 1.0, self.value.data(), false, weight.value.data(), false, beta, &mut out);
        let mut oshape = xs.clone();
        *oshape.last_mut().unwrap() = nout;
        let out = Tensor::new(oshape, out);
        let back = move |c: &BackCtx| {
            let g = c.grad.data();
            let dx = c.needs[0].then(|| {
                let mut d = vec![0.0; m * kin];
                gemm(m, nout, kin, 1.0, g, false, c.inputs[1].data(), true, 0.0, &mut d);
                Tensor::new(xs.clone(), d)
            });
            let dw = c.needs[1].then(|| {
                let mut d = vec![0.0; kin * nout];
                gemm(kin, m, nout, 1.0, c.inputs[0].data(), true, g, false, 0.0, &mut d);
                Tensor::new([kin, nout], d)
            });
            let mut grads = vec![dx, dw];
            if c.needs.len() == 3 {
                grads.push(c.needs[2].then(|| {
                    let mut d = vec![0.0f32; nout];
                    for row in g.chunks(nout) {
                        for (a, b) in d.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    Tensor::new([nout], d)
                }));
            }
            grads
        };
        match bias {
            Some(b) => self.g.op(&[self, weight, b], out, back),
            None => self.g.op(&[self, weight], out, back),
        }
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&self, gamma: &Var<'g>, beta: &Var<'g>, eps: f32) -> Var<'g> {
        let shape = self.shape().to_vec();
        let c = *shape.last().unwrap();
        assert_eq!(gamma.shape(), &[c]);
        assert_eq!(beta.shape(), &[c]);
        let rows = self.value.numel() / c;
        let x = self.value.data();
        let (gm, bt) = (gamma.value.data(), beta.value.data());
        let mut xhat = vec![0.0f32; rows * c];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; rows * c];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for k in 0..c {
                let h = ((row[k] as f64 - mean) * rs) as f32;
                xhat[r * c + k] = h;
                out[r * c + k] = h * gm[k] + bt[k];
            }
        }
        self.g.op(&[self, gamma, beta], Tensor::new(shape.clone(), out), move |ctx: &BackCtx| {
            let g = ctx.grad.data();
            let gm = ctx.inputs[1].data();
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            let mut dx = vec![0.0f32; rows * c];
            for r in 0..rows {
                let gr = &g[r * c..(r + 1) * c];
                let hr = &xhat[r * c..(r + 1) * c];
                let mut s1 = 0.0f64;
                let mut s2 = 0.0f64;
                for k in 0..c {
                    dgamma[k] += gr[k] * hr[k];
                    dbeta[k] += gr[k];
                    let dh = (gr[k] * gm[k]) as f64;
                    s1 += dh;
                    s2 += dh * hr[k] as f64;
                }
                let (m1, m2) = (s1 / c as f64, s2 / c as f64);
                for k in 0..c {
                    let dh = (gr[k] * gm[k]) as f64;
                    dx[r * c + k] = (rstd[r] as f64 * (dh - m1 - hr[k] as f64 * m2)) as f32;
                }
            }
            vec![
                ctx.needs[0].then(|| Tensor::new(shape.clone(), dx)),
                ctx.needs[1].then(|| Tensor::new([c], dgamma)),
                ctx.needs[2].then(|| Tensor::new([c], dbeta)),
            ]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'g> {
        let c = *self.shape().last().unwrap();
        let mut out = (*self.value).clone();
        softmax_rows(out.data_mut(), c);
        self.g.op(&[self], out, move |ctx: &BackCtx| {
            let mut dx = ctx.grad.clone();
            for (dr, yr) in dx.data_mut().chunks_mut(c).zip(ctx.out.data().chunks(c)) {
                let dot: f32 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for (d, y) in dr.iter_mut().zip(yr) {
                    *d = y * (*d - dot);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Concatenate along `axis`.
    pub fn concat(parts: &[&Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty());
        let g = parts[0].g;
        let base = parts[0].shape().to_vec();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let sizes: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = p.shape();
                assert_eq!(s.len(), base.len());
                assert!(s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]), "concat shape mismatch");
                s[axis]
            })
            .collect();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &n) in parts.iter().zip(&sizes) {
                data.extend_from_slice(&p.value.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        g.op(parts, Tensor::new(shape, data), move |c: &BackCtx| {
            let gd = c.grad.data();
            let mut offs = 0;
            let mut grads = Vec::with_capacity(sizes.len());
            for (i, &n) in sizes.iter().enumerate() {
                if !c.needs[i] {
                    grads.push(None);
                    offs += n;
                    continue;
                }
                let mut d = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let start = (o * total + offs) * inner;
                    d.extend_from_slice(&gd[start..start + n * inner]);
                }
                grads.push(Some(Tensor::new(c.inputs[i].shape().to_vec(), d)));
                offs += n;
            }
            grads
        })
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[inline(always)]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

#[inline(always)]
fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = fast_tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `tanh` through [`fast_exp`]; absolute error below 1e-6.
#[inline(always)]
fn fast_tanh(u: f32) -> f32 {
    let t = fast_exp(-2.0 * u.abs());
    ((1.0 - t) / (1.0 + t)).copysign(u)
}

/// Element-wise `f(x, y)` with `y` defaulting to 0, compiled for AVX2 when
/// the CPU has it.
fn map_simd(x: &[f32], y: Option<&[f32]>, f: impl Fn(f32, f32) -> f32 + Copy) -> Vec<f32> {
    #[inline(always)]
    fn run(x: &[f32], y: Option<&[f32]>, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
        match y {
            Some(y) => x.iter().zip(y).map(|(&a, &b)| f(a, b)).collect(),
            None => x.iter().map(|&a| f(a, 0.0)).collect(),
        }
    }
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx2,fma")]
        unsafe fn run_avx2(x: &[f32], y: Option<&[f32]>, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
            run(x, y, f)
        }
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            return unsafe { run_avx2(x, y, f) };
        }
    }
    run(x, y, f)
}

/// Softmax of every `width`-long row of `data`.
pub(crate) fn softmax_rows(data: &mut [f32], width: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { softmax_rows_avx2(data, width) };
            return;
        }
    }
    data.chunks_mut(width).for_each(softmax_row);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn softmax_rows_avx2(data: &mut [f32], width: usize) {
    data.chunks_mut(width).for_each(softmax_row);
}

#[inline(always)]
pub(crate) fn softmax_row(row: &mut [f32]) {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    for v in row.iter_mut() {
        *v = fast_exp(*v - m);
    }
    let s: f32 = row.iter().sum();
    let inv = 1.0 / s;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// `exp` for arguments `<= 0`, accurate to a few ulps; written branch-free so
/// softmax rows vectorise.
#[inline(always)]
pub(crate) fn fast_exp(x: f32) -> f32 {
    const SHIFTER: f32 = 12_582_912.0; // 1.5 * 2^23: adding it rounds to an integer
    // below e^-80 the result is flushed to zero: near-denormal outputs would
    // slow every later product they enter
    let arg = x;
    let live = x >= -80.0;
    let x = x.max(-80.0);
    let t = x * std::f32::consts::LOG2_E + SHIFTER;
    let n = t - SHIFTER;
    let ni = t.to_bits().wrapping_sub(SHIFTER.to_bits());
    // e^r with |r| <= ln2/2, degree-6 Taylor
    let r = (x * std::f32::consts::LOG2_E - n) * std::f32::consts::LN_2;
    let p = 1.0 + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let y = f32::from_bits(ni.wrapping_add(127) << 23) * p;
    if live {
        y
    } else if arg.is_nan() {
        arg
    } else {
        0.0
    }
}

pub(crate) fn roll_tensor(t: &Tensor, shifts: &[(usize, isize)]) -> Tensor {
    let shape = t.shape().to_vec();
    let st = strides(&shape);
    // Source offset per output index along each axis, precomputed.
    let maps: Vec<Vec<usize>> = (0..shape.len())
        .map(|ax| {
            let n = shape[ax] as isize;
            let s = shifts.iter().filter(|(a, _)| *a == ax).map(|(_, s)| *s).sum::<isize>();
            (0..n).map(|o| (((o - s) % n + n) % n) as usize * st[ax]).collect()
        })
        .collect();
    let nd = shape.len();
    let inner = shape[nd - 1];
    let outer: usize = shape[..nd - 1].iter().product();
    let src = t.data();
    let mut out = vec![0.0f32; t.numel()];
    let mut idx = vec![0usize; nd - 1];
    for o in 0..outer {
        let base: usize = idx.iter().enumerate().map(|(ax, &i)| maps[ax][i]).sum();
        let dst = &mut out[o * inner..(o + 1) * inner];
        for (k, d) in dst.iter_mut().enumerate() {
            *d = src[base + maps[nd - 1][k]];
        }
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(shape, out)
}

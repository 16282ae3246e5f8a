//! Fused network kernels: multi-head attention, 3-D convolution, separable
//! linear upsampling.

use std::sync::Arc;

use crate::graph::{BackCtx, Var};
use crate::ops::softmax_rows;
use crate::tensor::{gemm, gemm_view, Tensor, View};

/// Scaled dot-product attention over `[B, H, T, d]` tensors.
///
/// `bias` (`[H, Tq, Tk]`) is a learned additive term shared across the batch;
/// `mask` (`[B, Tq, Tk]`) is a constant additive term shared across heads.
pub fn attention<'g>(
    q: &Var<'g>,
    k: &Var<'g>,
    v: &Var<'g>,
    bias: Option<&Var<'g>>,
    mask: Option<Arc<Tensor>>,
    scale: f32,
) -> Var<'g> {
    let qs = q.shape().to_vec();
    let ks = k.shape().to_vec();
    assert_eq!(qs.len(), 4, "attention expects [B,H,T,d]");
    let (b, h, tq, d) = (qs[0], qs[1], qs[2], qs[3]);
    let tk = ks[2];
    assert_eq!(ks, vec![b, h, tk, d], "key shape");
    assert_eq!(v.shape(), &[b, h, tk, d], "value shape");
    if let Some(bias) = bias {
        assert_eq!(bias.shape(), &[h, tq, tk], "bias shape");
    }
    if let Some(m) = &mask {
        assert_eq!(m.shape(), &[b, tq, tk], "mask shape");
    }
    let (qd, kd, vd) = (q.value().data(), k.value().data(), v.value().data());
    let mut probs = vec![0.0f32; b * h * tq * tk];
    let mut out = vec![0.0f32; b * h * tq * d];
    for bi in 0..b {
        for hi in 0..h {
            let bh = bi * h + hi;
            let p = &mut probs[bh * tq * tk..(bh + 1) * tq * tk];
            gemm(tq, d, tk, scale, &qd[bh * tq * d..], false, &kd[bh * tk * d..], true, 0.0, p);
            if let Some(bias) = bias {
                let bd = &bias.value().data()[hi * tq * tk..(hi + 1) * tq * tk];
                p.iter_mut().zip(bd).for_each(|(x, y)| *x += y);
            }
            if let Some(m) = &mask {
                let md = &m.data()[bi * tq * tk..(bi + 1) * tq * tk];
                p.iter_mut().zip(md).for_each(|(x, y)| *x += y);
            }
            softmax_rows(p, tk);
            gemm(tq, tk, d, 1.0, p, false, &vd[bh * tk * d..], false, 0.0, &mut out[bh * tq * d..(bh + 1) * tq * d]);
        }
    }
    let out = Tensor::new(qs.clone(), out);
    let has_bias = bias.is_some();
    let back = move |c: &BackCtx| {
        let go = c.grad.data();
        let (qd, kd, vd) = (c.inputs[0].data(), c.inputs[1].data(), c.inputs[2].data());
        let mut dq = vec![0.0f32; b * h * tq * d];
        let mut dk = vec![0.0f32; b * h * tk * d];
        let mut dv = vec![0.0f32; b * h * tk * d];
        let mut dbias = if has_bias { vec![0.0f32; h * tq * tk] } else { vec![] };
        let mut ds = vec![0.0f32; tq * tk];
        for bh in 0..b * h {
            let hi = bh % h;
            let p = &probs[bh * tq * tk..(bh + 1) * tq * tk];
            let gob = &go[bh * tq * d..(bh + 1) * tq * d];
            gemm(tk, tq, d, 1.0, p, true, gob, false, 0.0, &mut dv[bh * tk * d..(bh + 1) * tk * d]);
            gemm(tq, d, tk, 1.0, gob, false, &vd[bh * tk * d..], true, 0.0, &mut ds);
            for (dr, pr) in ds.chunks_mut(tk).zip(p.chunks(tk)) {
                let dot: f32 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                dr.iter_mut().zip(pr).for_each(|(x, y)| *x = y * (*x - dot));
            }
            if has_bias {
                dbias[hi * tq * tk..(hi + 1) * tq * tk].iter_mut().zip(&ds).for_each(|(a, b)| *a += b);
            }
            gemm(tq, tk, d, scale, &ds, false, &kd[bh * tk * d..], false, 0.0, &mut dq[bh * tq * d..(bh + 1) * tq * d]);
            gemm(tk, tq, d, scale, &ds, true, &qd[bh * tq * d..], false, 0.0, &mut dk[bh * tk * d..(bh + 1) * tk * d]);
        }
        let mut grads = vec![
            c.needs[0].then(|| Tensor::new(c.inputs[0].shape().to_vec(), dq)),
            c.needs[1].then(|| Tensor::new(c.inputs[1].shape().to_vec(), dk)),
            c.needs[2].then(|| Tensor::new(c.inputs[2].shape().to_vec(), dv)),
        ];
        if has_bias {
            grads.push(c.needs[3].then(|| Tensor::new([h, tq, tk], dbias)));
        }
        grads
    };
    let g = q.graph();
    match bias {
        Some(bv) => g.op(&[q, k, v, bv], out, back),
        None => g.op(&[q, k, v], out, back),
    }
}

/// Geometry of a cubic-kernel 3-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dSpec {
    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

fn im2col(x: &[f32], c: usize, dims: [usize; 3], out: [usize; 3], spec: Conv3dSpec) -> Vec<f32> {
    let k = spec.kernel;
    let npos = out[0] * out[1] * out[2];
    let mut cols = vec![0.0f32; c * k * k * k * npos];
    let [nx, ny, nz] = dims;
    let pad = spec.padding as isize;
    for ci in 0..c {
        let xc = &x[ci * nx * ny * nz..(ci + 1) * nx * ny * nz];
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let row = ((ci * k + kx) * k + ky) * k + kz;
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    let mut p = 0;
                    for ox in 0..out[0] {
                        let ix = (ox * spec.stride + kx) as isize - pad;
                        if ix < 0 || ix >= nx as isize {
                            p += out[1] * out[2];
                            continue;
                        }
                        for oy in 0..out[1] {
                            let iy = (oy * spec.stride + ky) as isize - pad;
                            if iy < 0 || iy >= ny as isize {
                                p += out[2];
                                continue;
                            }
                            let base = (ix as usize * ny + iy as usize) * nz;
                            for oz in 0..out[2] {
                                let iz = (oz * spec.stride + kz) as isize - pad;
                                if iz >= 0 && iz < nz as isize {
                                    dst[p] = xc[base + iz as usize];
                                }
                                p += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], c: usize, dims: [usize; 3], out: [usize; 3], spec: Conv3dSpec) -> Vec<f32> {
    let k = spec.kernel;
    let npos = out[0] * out[1] * out[2];
    let [nx, ny, nz] = dims;
    let mut x = vec![0.0f32; c * nx * ny * nz];
    let pad = spec.padding as isize;
    for ci in 0..c {
        let xc = &mut x[ci * nx * ny * nz..(ci + 1) * nx * ny * nz];
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let row = ((ci * k + kx) * k + ky) * k + kz;
                    let src = &cols[row * npos..(row + 1) * npos];
                    let mut p = 0;
                    for ox in 0..out[0] {
                        let ix = (ox * spec.stride + kx) as isize - pad;
                        if ix < 0 || ix >= nx as isize {
                            p += out[1] * out[2];
                            continue;
                        }
                        for oy in 0..out[1] {
                            let iy = (oy * spec.stride + ky) as isize - pad;
                            if iy < 0 || iy >= ny as isize {
                                p += out[2];
                                continue;
                            }
                            let base = (ix as usize * ny + iy as usize) * nz;
                            for oz in 0..out[2] {
                                let iz = (oz * spec.stride + kz) as isize - pad;
                                if iz >= 0 && iz < nz as isize {
                                    xc[base + iz as usize] += src[p];
                                }
                                p += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// 3-D convolution of a single `[Cin, X, Y, Z]` volume with weights
/// `[Cout, Cin, k, k, k]` and bias `[Cout]`.
pub fn conv3d<'g>(x: &Var<'g>, weight: &Var<'g>, bias: Option<&Var<'g>>, spec: Conv3dSpec) -> Var<'g> {
    if spec.stride == 1 {
        return conv3d_unit_stride(x, weight, bias, spec);
    }
    let xs = x.shape().to_vec();
    let ws = weight.shape().to_vec();
    assert_eq!(xs.len(), 4, "conv3d input must be [C,X,Y,Z]");
    let (cin, cout, k) = (xs[0], ws[0], spec.kernel);
    assert_eq!(ws, vec![cout, cin, k, k, k], "conv3d weight shape");
    let dims = [xs[1], xs[2], xs[3]];
    let out = [spec.out_len(dims[0]), spec.out_len(dims[1]), spec.out_len(dims[2])];
    let npos = out[0] * out[1] * out[2];
    let kk = cin * k * k * k;
    let cols = im2col(x.value().data(), cin, dims, out, spec);
    let mut y = vec![0.0f32; cout * npos];
    if let Some(b) = bias {
        for (co, row) in y.chunks_mut(npos).enumerate() {
            row.fill(b.value().data()[co]);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    gemm(cout, kk, npos, 1.0, weight.value().data(), false, &cols, false, beta, &mut y);
    let y = Tensor::new([cout, out[0], out[1], out[2]], y);
    let back = move |c: &BackCtx| {
        let g = c.grad.data();
        let dx = c.needs[0].then(|| {
            let mut dcols = vec![0.0f32; kk * npos];
            gemm(kk, cout, npos, 1.0, c.inputs[1].data(), true, g, false, 0.0, &mut dcols);
            Tensor::new(c.inputs[0].shape().to_vec(), col2im(&dcols, cin, dims, out, spec))
        });
        let dw = c.needs[1].then(|| {
            let mut d = vec![0.0f32; cout * kk];
            gemm(cout, npos, kk, 1.0, g, false, &cols, true, 0.0, &mut d);
            Tensor::new(c.inputs[1].shape().to_vec(), d)
        });
        let mut grads = vec![dx, dw];
        if c.needs.len() == 3 {
            grads.push(c.needs[2].then(|| Tensor::new([cout], g.chunks(npos).map(|r| r.iter().sum()).collect())));
        }
        grads
    };
    let gr = x.graph();
    match bias {
        Some(b) => gr.op(&[x, weight, b], y, back),
        None => gr.op(&[x, weight], y, back),
    }
}

/// Stride-1 convolution without im2col: the input is padded once and each
/// kernel tap is one product against a shifted view of the flattened padded
/// grid. Outputs are computed at every padded-grid position up to the last
/// valid one and then cropped.
fn conv3d_unit_stride<'g>(x: &Var<'g>, weight: &Var<'g>, bias: Option<&Var<'g>>, spec: Conv3dSpec) -> Var<'g> {
    let xs = x.shape().to_vec();
    let ws = weight.shape().to_vec();
    assert_eq!(xs.len(), 4, "conv3d input must be [C,X,Y,Z]");
    let (cin, cout, k, p) = (xs[0], ws[0], spec.kernel, spec.padding);
    assert_eq!(ws, vec![cout, cin, k, k, k], "conv3d weight shape");
    let dims = [xs[1], xs[2], xs[3]];
    let np = [dims[0] + 2 * p, dims[1] + 2 * p, dims[2] + 2 * p];
    assert!(np.iter().all(|&n| n >= k), "kernel larger than padded input");
    let out = [np[0] - k + 1, np[1] - k + 1, np[2] - k + 1];
    let plen = np[0] * np[1] * np[2];
    let q = ((out[0] - 1) * np[1] + out[1] - 1) * np[2] + out[2];
    let k3 = k * k * k;
    let taps: Vec<(usize, usize)> =
        (0..k3).map(|t| (t, ((t / (k * k)) * np[1] + (t / k) % k) * np[2] + t % k)).collect();

    let mut xpad = vec![0.0f32; cin * plen];
    let src = x.value().data();
    for ci in 0..cin {
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                let s = ((ci * dims[0] + i) * dims[1] + j) * dims[2];
                let d = ci * plen + ((i + p) * np[1] + j + p) * np[2] + p;
                xpad[d..d + dims[2]].copy_from_slice(&src[s..s + dims[2]]);
            }
        }
    }
    let wd = weight.value().data();
    let mut ypad = vec![0.0f32; cout * q];
    for &(t, off) in &taps {
        let va = View { off: t, rs: cin * k3, cs: k3 };
        let vb = View { off, rs: plen, cs: 1 };
        gemm_view(cout, cin, q, 1.0, wd, va, &xpad, vb, 1.0, &mut ypad, View { off: 0, rs: q, cs: 1 });
    }
    let npos = out[0] * out[1] * out[2];
    let mut y = vec![0.0f32; cout * npos];
    let bd = bias.map(|b| b.value().data().to_vec());
    for co in 0..cout {
        let b0 = bd.as_ref().map_or(0.0, |b| b[co]);
        for i in 0..out[0] {
            for j in 0..out[1] {
                let s = co * q + (i * np[1] + j) * np[2];
                let d = ((co * out[0] + i) * out[1] + j) * out[2];
                for l in 0..out[2] {
                    y[d + l] = ypad[s + l] + b0;
                }
            }
        }
    }
    let y = Tensor::new([cout, out[0], out[1], out[2]], y);
    let back = move |c: &BackCtx| {
        let g = c.grad.data();
        let mut gpad = vec![0.0f32; cout * q];
        for co in 0..cout {
            for i in 0..out[0] {
                for j in 0..out[1] {
                    let d = co * q + (i * np[1] + j) * np[2];
                    let s = ((co * out[0] + i) * out[1] + j) * out[2];
                    gpad[d..d + out[2]].copy_from_slice(&g[s..s + out[2]]);
                }
            }
        }
        let gview = View { off: 0, rs: q, cs: 1 };
        let dx = c.needs[0].then(|| {
            let wd = c.inputs[1].data();
            let mut dpad = vec![0.0f32; cin * plen];
            for &(t, off) in &taps {
                let va = View { off: t, rs: k3, cs: cin * k3 };
                gemm_view(cin, cout, q, 1.0, wd, va, &gpad, gview, 1.0, &mut dpad, View { off, rs: plen, cs: 1 });
            }
            let mut dx = vec![0.0f32; cin * dims[0] * dims[1] * dims[2]];
            for ci in 0..cin {
                for i in 0..dims[0] {
                    for j in 0..dims[1] {
                        let d = ((ci * dims[0] + i) * dims[1] + j) * dims[2];
                        let s = ci * plen + ((i + p) * np[1] + j + p) * np[2] + p;
                        dx[d..d + dims[2]].copy_from_slice(&dpad[s..s + dims[2]]);
                    }
                }
            }
            Tensor::new(c.inputs[0].shape().to_vec(), dx)
        });
        let dw = c.needs[1].then(|| {
            let mut d = vec![0.0f32; cout * cin * k3];
            for &(t, off) in &taps {
                let vb = View { off, rs: 1, cs: plen };
                gemm_view(cout, q, cin, 1.0, &gpad, gview, &xpad, vb, 0.0, &mut d, View { off: t, rs: cin * k3, cs: k3 });
            }
            Tensor::new(c.inputs[1].shape().to_vec(), d)
        });
        let mut grads = vec![dx, dw];
        if c.needs.len() == 3 {
            grads.push(c.needs[2].then(|| Tensor::new([cout], g.chunks(npos).map(|r| r.iter().sum()).collect())));
        }
        grads
    };
    let gr = x.graph();
    match bias {
        Some(b) => gr.op(&[x, weight, b], y, back),
        None => gr.op(&[x, weight], y, back),
    }
}

/// Interpolation taps for linear upsampling by `factor` with half-pixel
/// centres (`align_corners = false`): `(i0, i1, w0, w1)` per output index.
fn linear_taps(n: usize, out_n: usize) -> Vec<(usize, usize, f32, f32)> {
    let ratio = n as f64 / out_n as f64;
    (0..out_n)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let w1 = (src - i0 as f64) as f32;
            let w1 = if i1 == i0 { 0.0 } else { w1 };
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

/// Linear resize of one axis to `out_n` samples.
pub fn resize_axis<'g>(x: &Var<'g>, axis: usize, out_n: usize) -> Var<'g> {
    let shape = x.shape().to_vec();
    let n = shape[axis];
    if n == out_n {
        return x.clone();
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let taps = linear_taps(n, out_n);
    let src = x.value().data();
    let mut out = vec![0.0f32; outer * out_n * inner];
    for o in 0..outer {
        for (j, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let dst = &mut out[(o * out_n + j) * inner..(o * out_n + j + 1) * inner];
            let a = &src[(o * n + i0) * inner..(o * n + i0 + 1) * inner];
            let b = &src[(o * n + i1) * inner..(o * n + i1 + 1) * inner];
            for ((d, &av), &bv) in dst.iter_mut().zip(a).zip(b) {
                *d = w0 * av + w1 * bv;
            }
        }
    }
    let mut oshape = shape.clone();
    oshape[axis] = out_n;
    x.graph().op(&[x], Tensor::new(oshape, out), move |c: &BackCtx| {
        let g = c.grad.data();
        let mut dx = vec![0.0f32; outer * n * inner];
        for o in 0..outer {
            for (j, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
                let gs = &g[(o * out_n + j) * inner..(o * out_n + j + 1) * inner];
                for (t, &gv) in gs.iter().enumerate() {
                    dx[(o * n + i0) * inner + t] += w0 * gv;
                    dx[(o * n + i1) * inner + t] += w1 * gv;
                }
            }
        }
        vec![Some(Tensor::new(shape.clone(), dx))]
    })
}

/// Trilinear resize of the three trailing axes of a `[C, X, Y, Z]` tensor.
pub fn resize_trilinear<'g>(x: &Var<'g>, out: [usize; 3]) -> Var<'g> {
    let y = resize_axis(x, 1, out[0]);
    let y = resize_axis(&y, 2, out[1]);
    resize_axis(&y, 3, out[2])
}

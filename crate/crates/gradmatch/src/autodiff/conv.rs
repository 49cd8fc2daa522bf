//! Direct 2-D cross-correlation kernels and their two adjoints.
//!
//! `forward`, `grad_input` and `grad_kernel` are the three bilinear maps of
//! the convolution trilinear form; each one's derivatives are expressible in
//! terms of the other two, which is what makes conv double-backward work at
//! the graph level without any per-op Hessian rules.
//!
//! Kernel layout is `(out, in, kh, kw)` and gradients preserve it.

/// `floor((size + 2*pad - k) / stride) + 1`
pub fn out_dim(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn gemm_nn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c += av * bv;
            }
        }
    }
}

/// out[m,n] += a[k,m]^T * b[k,n]
fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut out[i * n..(i + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow.iter()).map(|(&x, &y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// Scatter one image into column form: cols[(c*kh+u)*kw+v, i*wo+j] = x[c, i*s-p+u, j*s-p+v].
fn im2col(
    x: &[f64],
    cols: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let spatial = ho * wo;
    cols.fill(0.0);
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let row = &mut cols[((c * kh + u) * kw + v) * spatial..][..spatial];
                for i in 0..ho {
                    let yy = (i * stride + u) as isize - pad as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let src = &plane[yy as usize * w..(yy as usize + 1) * w];
                    let dst = &mut row[i * wo..(i + 1) * wo];
                    for j in 0..wo {
                        let xx = (j * stride + v) as isize - pad as isize;
                        if xx >= 0 && xx < w as isize {
                            dst[j] = src[xx as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: accumulate column form back into image layout.
fn col2im_acc(
    cols: &[f64],
    x: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let spatial = ho * wo;
    for c in 0..cin {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for u in 0..kh {
            for v in 0..kw {
                let row = &cols[((c * kh + u) * kw + v) * spatial..][..spatial];
                for i in 0..ho {
                    let yy = (i * stride + u) as isize - pad as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[yy as usize * w..(yy as usize + 1) * w];
                    let src = &row[i * wo..(i + 1) * wo];
                    for j in 0..wo {
                        let xx = (j * stride + v) as isize - pad as isize;
                        if xx >= 0 && xx < w as isize {
                            dst[xx as usize] += src[j];
                        }
                    }
                }
            }
        }
    }
}

/// y[n,o,i,j] = sum_{c,u,v} x[n,c,i*s-p+u,j*s-p+v] * w[o,c,u,v]
#[allow(clippy::too_many_arguments)]
pub fn forward(
    x: &[f64],
    w: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    wdt: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = out_dim(h, kh, stride, pad);
    let wo = out_dim(wdt, kw, stride, pad);
    let ckk = cin * kh * kw;
    let spatial = ho * wo;
    let mut y = vec![0.0; n * cout * spatial];
    let mut cols = vec![0.0; ckk * spatial];
    for img in 0..n {
        im2col(
            &x[img * cin * h * wdt..(img + 1) * cin * h * wdt],
            &mut cols,
            cin,
            h,
            wdt,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        );
        gemm_nn_acc(
            w,
            &cols,
            &mut y[img * cout * spatial..(img + 1) * cout * spatial],
            cout,
            ckk,
            spatial,
        );
    }
    y
}

/// Gradient w.r.t. the input image: adjoint of `forward` in its first slot.
#[allow(clippy::too_many_arguments)]
pub fn grad_input(
    gy: &[f64],
    w: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    wdt: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = out_dim(h, kh, stride, pad);
    let wo = out_dim(wdt, kw, stride, pad);
    let ckk = cin * kh * kw;
    let spatial = ho * wo;
    let mut gx = vec![0.0; n * cin * h * wdt];
    let mut gcols = vec![0.0; ckk * spatial];
    for img in 0..n {
        gcols.fill(0.0);
        gemm_tn_acc(
            w,
            &gy[img * cout * spatial..(img + 1) * cout * spatial],
            &mut gcols,
            ckk,
            cout,
            spatial,
        );
        col2im_acc(
            &gcols,
            &mut gx[img * cin * h * wdt..(img + 1) * cin * h * wdt],
            cin,
            h,
            wdt,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        );
    }
    gx
}

/// Gradient w.r.t. the kernel: adjoint of `forward` in its second slot.
#[allow(clippy::too_many_arguments)]
pub fn grad_kernel(
    x: &[f64],
    gy: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    wdt: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = out_dim(h, kh, stride, pad);
    let wo = out_dim(wdt, kw, stride, pad);
    let ckk = cin * kh * kw;
    let spatial = ho * wo;
    let mut gw = vec![0.0; cout * ckk];
    let mut cols = vec![0.0; ckk * spatial];
    for img in 0..n {
        im2col(
            &x[img * cin * h * wdt..(img + 1) * cin * h * wdt],
            &mut cols,
            cin,
            h,
            wdt,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        );
        gemm_nt_acc(
            &gy[img * cout * spatial..(img + 1) * cout * spatial],
            &cols,
            &mut gw,
            cout,
            spatial,
            ckk,
        );
    }
    gw
}

/// Non-overlapping k x k mean pooling; trailing rows/cols that do not fill a
/// window are dropped.
pub fn avg_pool(x: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let ho = h / k;
    let wo = w / k;
    let inv = 1.0 / (k * k) as f64;
    let mut y = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut y[plane * ho * wo..(plane + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let mut s = 0.0;
                for u in 0..k {
                    let row = &src[(i * k + u) * w + j * k..][..k];
                    s += row.iter().sum::<f64>();
                }
                dst[i * wo + j] = s * inv;
            }
        }
    }
    y
}

/// Adjoint of `avg_pool`: spread g/k^2 uniformly over each window.
pub fn avg_unpool(g: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let ho = h / k;
    let wo = w / k;
    let inv = 1.0 / (k * k) as f64;
    let mut y = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let src = &g[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut y[plane * h * w..(plane + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let gv = src[i * wo + j] * inv;
                for u in 0..k {
                    let row = &mut dst[(i * k + u) * w + j * k..][..k];
                    for cell in row {
                        *cell = gv;
                    }
                }
            }
        }
    }
    y
}

/// out[m,n] = a[m,k] * b[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_nn_acc(a, b, &mut out, m, k, n);
    out
}

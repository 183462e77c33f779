//! Dense f64 kernels behind the tape primitives. Loop orders are fixed, so
//! every kernel is bit-deterministic regardless of input values.

/// c[m,n] += a[m,k] * b[k,n]
pub fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T  (dot products of rows)
pub fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            crow[j] += acc;
        }
    }
}

/// c[m,n] += a[k,m]^T * b[k,n]
pub fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    pub fn cols(&self) -> usize {
        self.batch * self.h * self.w
    }
}

/// Unfolds zero-padded stride-1 patches into a `[patch, batch*h*w]` matrix.
pub fn im2col(x: &[f64], d: &ConvDims) -> Vec<f64> {
    let (h, w) = (d.h as isize, d.w as isize);
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let ncols = d.cols();
    let mut cols = vec![0.0; d.patch() * ncols];
    for ci in 0..d.c_in {
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let row = (ci * d.kh + kh) * d.kw + kw;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let dy = kh as isize - ph;
                let dx = kw as isize - pw;
                for b in 0..d.batch {
                    let src = &x[(b * d.c_in + ci) * (d.h * d.w)..];
                    let out = &mut dst[b * d.h * d.w..(b + 1) * d.h * d.w];
                    for oy in 0..h {
                        let iy = oy + dy;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for ox in 0..w {
                            let ix = ox + dx;
                            if ix >= 0 && ix < w {
                                out[(oy * w + ox) as usize] = src[(iy * w + ix) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of a `[patch, batch*h*w]` gradient back onto the input image.
pub fn col2im_add(dcols: &[f64], dx: &mut [f64], d: &ConvDims) {
    let (h, w) = (d.h as isize, d.w as isize);
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let ncols = d.cols();
    for ci in 0..d.c_in {
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let row = (ci * d.kh + kh) * d.kw + kw;
                let src = &dcols[row * ncols..(row + 1) * ncols];
                let dy = kh as isize - ph;
                let dx_off = kw as isize - pw;
                for b in 0..d.batch {
                    let dst = &mut dx[(b * d.c_in + ci) * (d.h * d.w)..][..d.h * d.w];
                    let g = &src[b * d.h * d.w..(b + 1) * d.h * d.w];
                    for oy in 0..h {
                        let iy = oy + dy;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for ox in 0..w {
                            let ix = ox + dx_off;
                            if ix >= 0 && ix < w {
                                dst[(iy * w + ix) as usize] += g[(oy * w + ox) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward conv: `out[b,co,y,x]`, kernel `[co, ci, kh, kw]`, stride 1, zero pad.
pub fn conv2d_forward(x: &[f64], kernel: &[f64], d: &ConvDims) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(x, d);
    let ncols = d.cols();
    let mut out_mat = vec![0.0; d.c_out * ncols];
    matmul_nn(kernel, &cols, &mut out_mat, d.c_out, d.patch(), ncols);
    // out_mat is [c_out, batch*h*w]; interleave to [batch, c_out, h, w].
    let hw = d.h * d.w;
    let mut out = vec![0.0; d.batch * d.c_out * hw];
    for co in 0..d.c_out {
        let src = &out_mat[co * ncols..(co + 1) * ncols];
        for b in 0..d.batch {
            out[(b * d.c_out + co) * hw..(b * d.c_out + co + 1) * hw]
                .copy_from_slice(&src[b * hw..(b + 1) * hw]);
        }
    }
    (out, cols)
}

/// Backward conv given the saved im2col buffer. Accumulates into dx and dk.
pub fn conv2d_backward(
    dout: &[f64],
    kernel: &[f64],
    cols: &[f64],
    d: &ConvDims,
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
) {
    let ncols = d.cols();
    let hw = d.h * d.w;
    // [batch, c_out, h, w] -> [c_out, batch*h*w]
    let mut dout_mat = vec![0.0; d.c_out * ncols];
    for co in 0..d.c_out {
        let dst = &mut dout_mat[co * ncols..(co + 1) * ncols];
        for b in 0..d.batch {
            dst[b * hw..(b + 1) * hw]
                .copy_from_slice(&dout[(b * d.c_out + co) * hw..(b * d.c_out + co + 1) * hw]);
        }
    }
    if let Some(dk) = dk {
        matmul_nt(&dout_mat, cols, dk, d.c_out, ncols, d.patch());
    }
    if let Some(dx) = dx {
        let mut dcols = vec![0.0; d.patch() * ncols];
        matmul_tn(kernel, &dout_mat, &mut dcols, d.patch(), d.c_out, ncols);
        col2im_add(&dcols, dx, d);
    }
}

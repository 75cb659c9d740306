//! Dense `f64` tensors and the raw kernels behind the autodiff graph.
//!
//! Matrix products go through `matrixmultiply::dgemm` (single threaded,
//! deterministic); parallelism happens one level up, across batch samples,
//! with outputs written to disjoint slices and gradient reductions summed in
//! fixed chunk order. See [`crate::par`].

use crate::par;

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Reinterpret the buffer under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        assert_eq!(self.numel(), shape.iter().product::<usize>());
        Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c[m,n] = a[m,k] · b[k,n]`, with optional transposes applied to the
/// logical operands (strides are swapped, no data is moved).
pub fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (m, k) = if trans_a { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (kb, n) = if trans_b { (b_cols, b_rows) } else { (b_rows, b_cols) };
    assert_eq!(k, kb, "gemm inner dimension mismatch");
    assert_eq!(c.len(), m * n);
    assert_eq!(a.len(), a_rows * a_cols);
    assert_eq!(b.len(), b_rows * b_cols);
    let (rsa, csa) = if trans_a {
        (1isize, a_cols as isize)
    } else {
        (a_cols as isize, 1isize)
    };
    let (rsb, csb) = if trans_b {
        (1isize, b_cols as isize)
    } else {
        (b_cols as isize, 1isize)
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Convolution geometry. Square kernels, symmetric padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvConf {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvConf {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

/// Unfold one sample `[c,h,w]` into `[c*k*k, oh*ow]` patch columns.
pub fn im2col(x: &[f64], conf: &ConvConf, cols: &mut [f64]) {
    let (oh, ow) = (conf.out_h(), conf.out_w());
    let (k, s, p) = (conf.kernel, conf.stride, conf.pad);
    assert_eq!(x.len(), conf.in_ch * conf.in_h * conf.in_w);
    assert_eq!(cols.len(), conf.col_rows() * oh * ow);
    let mut r = 0;
    for ci in 0..conf.in_ch {
        let xc = &x[ci * conf.in_h * conf.in_w..(ci + 1) * conf.in_h * conf.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[r * oh * ow..(r + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= conf.in_h as isize {
                        row[oy * ow..(oy + 1) * ow].fill(0.0);
                        continue;
                    }
                    let base = iy as usize * conf.in_w;
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - p as isize;
                        row[oy * ow + ox] = if ix < 0 || ix >= conf.in_w as isize {
                            0.0
                        } else {
                            xc[base + ix as usize]
                        };
                    }
                }
                r += 1;
            }
        }
    }
}

/// Fold patch-column gradients back onto the input image (accumulating).
pub fn col2im(cols: &[f64], conf: &ConvConf, dx: &mut [f64]) {
    let (oh, ow) = (conf.out_h(), conf.out_w());
    let (k, s, p) = (conf.kernel, conf.stride, conf.pad);
    assert_eq!(dx.len(), conf.in_ch * conf.in_h * conf.in_w);
    let mut r = 0;
    for ci in 0..conf.in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[r * oh * ow..(r + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= conf.in_h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix < 0 || ix >= conf.in_w as isize {
                            continue;
                        }
                        dx[(ci * conf.in_h + iy as usize) * conf.in_w + ix as usize] +=
                            row[oy * ow + ox];
                    }
                }
                r += 1;
            }
        }
    }
}

/// Batched conv forward: x `[n,c,h,w]`, w `[oc, c*k*k]`, bias `[oc]` optional.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, conf: &ConvConf) -> Tensor {
    let n = x.shape()[0];
    let (oh, ow) = (conf.out_h(), conf.out_w());
    let x_stride = conf.in_ch * conf.in_h * conf.in_w;
    let y_stride = conf.out_ch * oh * ow;
    let mut y = Tensor::zeros(&[n, conf.out_ch, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    par::for_each_chunk_mut(y.data_mut(), y_stride, |i, yi| {
        let mut cols = vec![0.0; conf.col_rows() * oh * ow];
        im2col(&xd[i * x_stride..(i + 1) * x_stride], conf, &mut cols);
        gemm(
            wd,
            conf.out_ch,
            conf.col_rows(),
            false,
            &cols,
            conf.col_rows(),
            oh * ow,
            false,
            0.0,
            yi,
        );
        if let Some(b) = bias {
            for oc in 0..conf.out_ch {
                let bv = b.data()[oc];
                for v in &mut yi[oc * oh * ow..(oc + 1) * oh * ow] {
                    *v += bv;
                }
            }
        }
    });
    y
}

/// Gradients of the batched conv. Returns `(dx, dw, db)`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    conf: &ConvConf,
    want_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let n = x.shape()[0];
    let (oh, ow) = (conf.out_h(), conf.out_w());
    let x_stride = conf.in_ch * conf.in_h * conf.in_w;
    let y_stride = conf.out_ch * oh * ow;
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();

    // dW: per-sample outer products, partial-summed in fixed chunks.
    let chunk = 8usize;
    let n_chunks = n.div_ceil(chunk);
    let partials = par::map_indexed(n_chunks, |c| {
        let lo = c * chunk;
        let hi = (lo + chunk).min(n);
        let mut dw = vec![0.0; conf.out_ch * conf.col_rows()];
        let mut cols = vec![0.0; conf.col_rows() * oh * ow];
        for i in lo..hi {
            im2col(&xd[i * x_stride..(i + 1) * x_stride], conf, &mut cols);
            gemm(
                &dyd[i * y_stride..(i + 1) * y_stride],
                conf.out_ch,
                oh * ow,
                false,
                &cols,
                conf.col_rows(),
                oh * ow,
                true,
                1.0,
                &mut dw,
            );
        }
        dw
    });
    let mut dw = Tensor::zeros(&[conf.out_ch, conf.col_rows()]);
    for p in &partials {
        for (acc, v) in dw.data_mut().iter_mut().zip(p) {
            *acc += v;
        }
    }

    // db: fixed-order sum over samples and pixels.
    let mut db = Tensor::zeros(&[conf.out_ch]);
    for oc in 0..conf.out_ch {
        db.data_mut()[oc] = par::chunked_sum(n, 8, |i| {
            let base = i * y_stride + oc * oh * ow;
            dyd[base..base + oh * ow].iter().sum()
        });
    }

    let dx = if want_dx {
        let mut dx = Tensor::zeros(x.shape());
        par::for_each_chunk_mut(dx.data_mut(), x_stride, |i, dxi| {
            let mut dcols = vec![0.0; conf.col_rows() * oh * ow];
            gemm(
                wd,
                conf.out_ch,
                conf.col_rows(),
                true,
                &dyd[i * y_stride..(i + 1) * y_stride],
                conf.out_ch,
                oh * ow,
                false,
                0.0,
                &mut dcols,
            );
            col2im(&dcols, conf, dxi);
        });
        Some(dx)
    } else {
        None
    };

    (dx, dw, db)
}

/// Nearest-neighbour 2x upsample of `[n,c,h,w]`.
pub fn upsample2x_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = nchw(x);
    let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let xd = x.data();
    par::for_each_chunk_mut(y.data_mut(), c * 4 * h * w, |i, yi| {
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let v = xd[((i * c + ci) * h + iy) * w + ix];
                    let base = (ci * 2 * h + 2 * iy) * 2 * w + 2 * ix;
                    yi[base] = v;
                    yi[base + 1] = v;
                    yi[base + 2 * w] = v;
                    yi[base + 2 * w + 1] = v;
                }
            }
        }
    });
    y
}

/// Backward of [`upsample2x_forward`]: each input cell collects its 2x2 block.
pub fn upsample2x_backward(dy: &Tensor) -> Tensor {
    let (n, c, h2, w2) = nchw(dy);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let dyd = dy.data();
    par::for_each_chunk_mut(dx.data_mut(), c * h * w, |i, dxi| {
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let base = ((i * c + ci) * h2 + 2 * iy) * w2 + 2 * ix;
                    dxi[(ci * h + iy) * w + ix] =
                        dyd[base] + dyd[base + 1] + dyd[base + w2] + dyd[base + w2 + 1];
                }
            }
        }
    });
    dx
}

/// Bilinear resize of `[n,c,h,w]` to `out_h` x `out_w` (align-corners=false).
pub fn bilinear_resize_forward(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, c, h, w) = nchw(x);
    if out_h == h && out_w == w {
        return x.clone();
    }
    let taps_y = bilinear_taps(h, out_h);
    let taps_x = bilinear_taps(w, out_w);
    let mut y = Tensor::zeros(&[n, c, out_h, out_w]);
    let xd = x.data();
    par::for_each_chunk_mut(y.data_mut(), c * out_h * out_w, |i, yi| {
        for ci in 0..c {
            let xc = &xd[(i * c + ci) * h * w..(i * c + ci + 1) * h * w];
            for (oy, &(y0, y1, wy)) in taps_y.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in taps_x.iter().enumerate() {
                    let v = (1.0 - wy) * ((1.0 - wx) * xc[y0 * w + x0] + wx * xc[y0 * w + x1])
                        + wy * ((1.0 - wx) * xc[y1 * w + x0] + wx * xc[y1 * w + x1]);
                    yi[(ci * out_h + oy) * out_w + ox] = v;
                }
            }
        }
    });
    y
}

/// Backward of [`bilinear_resize_forward`].
pub fn bilinear_resize_backward(dy: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (n, c, oh, ow) = nchw(dy);
    if oh == in_h && ow == in_w {
        return dy.clone();
    }
    let taps_y = bilinear_taps(in_h, oh);
    let taps_x = bilinear_taps(in_w, ow);
    let mut dx = Tensor::zeros(&[n, c, in_h, in_w]);
    let dyd = dy.data();
    par::for_each_chunk_mut(dx.data_mut(), c * in_h * in_w, |i, dxi| {
        for ci in 0..c {
            let dc = &mut dxi[ci * in_h * in_w..(ci + 1) * in_h * in_w];
            for (oy, &(y0, y1, wy)) in taps_y.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in taps_x.iter().enumerate() {
                    let g = dyd[((i * c + ci) * oh + oy) * ow + ox];
                    dc[y0 * in_w + x0] += (1.0 - wy) * (1.0 - wx) * g;
                    dc[y0 * in_w + x1] += (1.0 - wy) * wx * g;
                    dc[y1 * in_w + x0] += wy * (1.0 - wx) * g;
                    dc[y1 * in_w + x1] += wy * wx * g;
                }
            }
        }
    });
    dx
}

fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, in_len as f64 - 1.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn nchw(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected NCHW tensor, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = vec![0.0; 4];
        gemm(&a, 2, 3, false, &b, 3, 2, false, 0.0, &mut c);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);

        // aT . bT : (3x2)^T . (2x3)^T
        let mut ct = vec![0.0; 4];
        gemm(&b, 3, 2, true, &a, 2, 3, true, 0.0, &mut ct);
        assert_eq!(ct, vec![58.0, 139.0, 64.0, 154.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 conv with unit weight passes the image through.
        let conf = ConvConf {
            in_ch: 1,
            out_ch: 1,
            kernel: 1,
            stride: 1,
            pad: 0,
            in_h: 4,
            in_w: 4,
        };
        let x = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|v| v as f64).collect());
        let w = Tensor::from_vec(&[1, 1], vec![1.0]);
        let y = conv2d_forward(&x, &w, None, &conf);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_backward_matches_finite_difference() {
        let conf = ConvConf {
            in_ch: 2,
            out_ch: 3,
            kernel: 3,
            stride: 2,
            pad: 1,
            in_h: 5,
            in_w: 5,
        };
        let mut rng = crate::rng::rng_for(1, crate::rng::Stream::Eval);
        let x = Tensor::from_vec(&[2, 2, 5, 5], crate::rng::normal_vec(&mut rng, 100));
        let w = Tensor::from_vec(
            &[3, conf.col_rows()],
            crate::rng::normal_vec(&mut rng, 3 * conf.col_rows()),
        );
        let b = Tensor::from_vec(&[3], crate::rng::normal_vec(&mut rng, 3));
        // loss = sum(y^2)/2 so dy = y.
        let y = conv2d_forward(&x, &w, Some(&b), &conf);
        let (dx, dw, db) = conv2d_backward(&x, &w, &y, &conf, true);
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| {
            conv2d_forward(x, w, Some(b), &conf)
                .data()
                .iter()
                .map(|v| v * v / 2.0)
                .sum::<f64>()
        };
        let eps = 1e-5;
        for (idx, g) in [(7usize, &dx.as_ref().unwrap()), (93, &dx.as_ref().unwrap())] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * eps);
            assert!((fd - g.data()[idx]).abs() / fd.abs().max(1.0) < 1e-6);
        }
        for idx in [0usize, 17, 40] {
            let mut wp = w.clone();
            wp.data_mut()[idx] += eps;
            let mut wm = w.clone();
            wm.data_mut()[idx] -= eps;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * eps);
            assert!((fd - dw.data()[idx]).abs() / fd.abs().max(1.0) < 1e-6);
        }
        let mut bp = b.clone();
        bp.data_mut()[1] += eps;
        let mut bm = b.clone();
        bm.data_mut()[1] -= eps;
        let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * eps);
        assert!((fd - db.data()[1]).abs() / fd.abs().max(1.0) < 1e-6);
    }

    #[test]
    fn upsample_roundtrip_shapes() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = upsample2x_forward(&x);
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[5], 1.0);
        let dx = upsample2x_backward(&y);
        assert_eq!(dx.data(), &[4.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|v| v as f64).collect());
        let y = bilinear_resize_forward(&x, 3, 3);
        assert_eq!(x, y);
    }
}

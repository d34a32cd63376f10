//! Convolution kernels: im2col followed by a dense matrix product.

use crate::exec::Exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_px(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `ox` with `0 ≤ ox + off < w`, as a half-open range
/// clipped to `0..ow`.
fn valid_range(off: isize, ow: usize, w: isize) -> (usize, usize) {
    let lo = (-off).clamp(0, ow as isize) as usize;
    let hi = (w - off).clamp(lo as isize, ow as isize) as usize;
    (lo, hi)
}

/// Unfolds one image `[C, H, W]` into `[C·kh·kw, oh·ow]`.
fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (h, w, opx) = (g.h as isize, g.w as isize, g.out_px());
    let pad = g.pad as isize;
    for c in 0..g.in_ch {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * opx..(row + 1) * opx];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= h {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_range(kj as isize - pad, g.ow, w);
                        out_row[..lo].iter_mut().for_each(|v| *v = 0.0);
                        out_row[hi..].iter_mut().for_each(|v| *v = 0.0);
                        let off = kj as isize - pad;
                        out_row[lo..hi].copy_from_slice(&src[(lo as isize + off) as usize..(hi as isize + off) as usize]);
                        continue;
                    }
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *v = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Folds `[C·kh·kw, oh·ow]` back onto `[C, H, W]`, accumulating overlaps.
fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (h, w, opx) = (g.h as isize, g.w as isize, g.out_px());
    let pad = g.pad as isize;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * opx..(row + 1) * opx];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_range(kj as isize - pad, g.ow, w);
                        let off = kj as isize - pad;
                        let d = &mut dst[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        d.iter_mut().zip(&src[oy * g.ow + lo..oy * g.ow + hi]).for_each(|(a, b)| *a += b);
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n] (+ c when accumulate)`, with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds of all three operands are checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(exec: Exec, g: &ConvGeom, x: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let (patch, opx) = (g.patch(), g.out_px());
    let in_len = g.in_ch * g.h * g.w;
    let out_len = g.out_ch * opx;
    let mut out = vec![0.0; g.batch * out_len];
    exec.for_each_chunk(&mut out, out_len, |b, y| {
        let mut cols = vec![0.0; patch * opx];
        im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
        for (k, row) in y.chunks_mut(opx).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[k]);
        }
        gemm(g.out_ch, patch, opx, w, patch, 1, &cols, opx, 1, y, true);
    });
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

/// Gradients of a convolution. Per-image weight gradients are computed
/// independently and summed in image order.
pub(crate) fn conv2d_backward(
    exec: Exec,
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads {
    let (patch, opx) = (g.patch(), g.out_px());
    let in_len = g.in_ch * g.h * g.w;
    let out_len = g.out_ch * opx;
    let per_image = exec.map(g.batch, |b| {
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        let dw = need_dw.then(|| {
            let mut cols = vec![0.0; patch * opx];
            im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
            let mut dw = vec![0.0; g.out_ch * patch];
            // dW[K×P] = dY[K×O] · colsᵀ[O×P]
            gemm(g.out_ch, opx, patch, dyb, opx, 1, &cols, 1, opx, &mut dw, false);
            dw
        });
        let dx = need_dx.then(|| {
            let mut dcols = vec![0.0; patch * opx];
            // dcols[P×O] = Wᵀ[P×K] · dY[K×O]
            gemm(patch, g.out_ch, opx, w, 1, patch, dyb, opx, 1, &mut dcols, false);
            let mut dx = vec![0.0; in_len];
            col2im(g, &dcols, &mut dx);
            dx
        });
        (dx, dw)
    });

    let mut dx_all = need_dx.then(|| Vec::with_capacity(g.batch * in_len));
    let mut dw_all = need_dw.then(|| vec![0.0; g.out_ch * patch]);
    let mut db_all = need_dw.then(|| vec![0.0; g.out_ch]);
    for (b, (dx, dw)) in per_image.into_iter().enumerate() {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            all.iter_mut().zip(&dw).for_each(|(a, v)| *a += v);
        }
        if let Some(db) = db_all.as_mut() {
            let dyb = &dy[b * out_len..(b + 1) * out_len];
            for (k, row) in dyb.chunks(opx).enumerate() {
                db[k] += row.iter().sum::<f64>();
            }
        }
    }
    ConvGrads { dx: dx_all, dw: dw_all, db: db_all }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_round_trip_counts_overlaps() {
        let g = ConvGeom { batch: 1, in_ch: 1, out_ch: 1, h: 3, w: 3, kh: 3, kw: 3, pad: 1, stride: 1, oh: 3, ow: 3 };
        let x = vec![1.0; 9];
        let mut cols = vec![0.0; 81];
        im2col(&g, &x, &mut cols);
        let mut back = vec![0.0; 9];
        col2im(&g, &cols, &mut back);
        // corners are covered by 4 windows, edges by 6, center by 9
        assert_eq!(back, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }
}

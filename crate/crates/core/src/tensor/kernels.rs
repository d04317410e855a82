//! Raw forward/backward kernels over flat buffers. Shapes are validated by
//! the tape before these are called.

use super::gemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let in_len = g.c * g.h * g.w;
    let mut out = vec![0.0; g.n * g.f * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.patch() * plane]
    };
    for s in 0..g.n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let src: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut cols);
            &cols
        };
        let os = &mut out[s * g.f * plane..(s + 1) * g.f * plane];
        gemm(g.f, g.patch(), plane, 1.0, w, false, src, false, 0.0, os);
    }
    out
}

/// Accumulates into `dx` and/or `dw` when provided.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let plane = g.out_h() * g.out_w();
    let in_len = g.c * g.h * g.w;
    let patch = g.patch();
    let mut cols = vec![0.0; patch * plane];
    for s in 0..g.n {
        let ds = &dout[s * g.f * plane..(s + 1) * g.f * plane];
        if let Some(dw) = dw.as_deref_mut() {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let src: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut cols);
                &cols
            };
            gemm(g.f, plane, patch, 1.0, ds, false, src, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                gemm(patch, g.f, plane, 1.0, w, true, ds, false, 1.0, dxs);
            } else {
                gemm(patch, g.f, plane, 1.0, w, true, ds, false, 0.0, &mut cols);
                col2im_add(g, &cols, dxs);
            }
        }
    }
}

/// 3×3 box sum / 9 with zero padding, stride 1. Self-adjoint, so it also
/// serves as its own backward pass.
pub(crate) fn avg_pool3(planes: usize, h: usize, w: usize, x: &[f64], out: &mut [f64]) {
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let y0 = y.saturating_sub(1);
            let y1 = (y + 1).min(h - 1);
            for xx in 0..w {
                let x0 = xx.saturating_sub(1);
                let x1 = (xx + 1).min(w - 1);
                let mut acc = 0.0;
                for yy in y0..=y1 {
                    for v in &xp[yy * w + x0..=yy * w + x1] {
                        acc += v;
                    }
                }
                op[y * w + xx] += acc / 9.0;
            }
        }
    }
}

/// Per-channel mean and biased variance over batch and spatial positions.
pub(crate) fn channel_moments(n: usize, c: usize, spatial: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = (n * spatial) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            mean[ch] += x[base..base + spatial].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            var[ch] += x[base..base + spatial]
                .iter()
                .map(|v| (v - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

pub(crate) fn for_each_channel(n: usize, c: usize, spatial: usize, mut f: impl FnMut(usize, std::ops::Range<usize>)) {
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            f(ch, base..base + spatial);
        }
    }
}

//! Raw loops shared by forward and backward passes. All image-like buffers
//! are channel-major `[C, H, W]`; kernels are `[C_out, C_in, KH, KW]`.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims3 {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_out: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn conv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.pad;
        let wp = w + 2 * self.pad;
        if hp < self.kh || wp < self.kw || self.stride == 0 {
            return None;
        }
        Some((
            (hp - self.kh) / self.stride + 1,
            (wp - self.kw) / self.stride + 1,
        ))
    }

    /// Output extent of the transposed convolution over an `h x w` input.
    pub fn transpose_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ho = (h - 1) * self.stride + self.kh;
        let wo = (w - 1) * self.stride + self.kw;
        if ho <= 2 * self.pad || wo <= 2 * self.pad {
            return None;
        }
        Some((ho - 2 * self.pad, wo - 2 * self.pad))
    }
}

/// Output positions `o` in `0..out_len` with `o * stride + offset` inside `0..in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, offset: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let start = if offset >= 0 {
        0
    } else {
        ((-offset) + s - 1) / s
    };
    let span = in_len as isize - offset;
    let end = if span <= 0 { 0 } else { (span + s - 1) / s };
    let end = (end as usize).min(out_len);
    let start = start as usize;
    (start, end.max(start))
}

/// Cross-correlation `out[o,y,x] = sum_{i,ky,kx} x[i, y*s+ky-p, x*s+kx-p] * k[o,i,ky,kx]`.
pub fn conv_forward(x: &[f64], xd: Dims3, k: &[f64], g: ConvGeom, od: Dims3) -> Vec<f64> {
    let mut out = vec![0.0; od.len()];
    let s = g.stride;
    for o in 0..g.c_out {
        for i in 0..g.c_in {
            for ky in 0..g.kh {
                let (y0, y1) = valid_range(od.h, xd.h, ky as isize - g.pad as isize, s);
                for kx in 0..g.kw {
                    let kv = k[((o * g.c_in + i) * g.kh + ky) * g.kw + kx];
                    let off = kx as isize - g.pad as isize;
                    let (x0, x1) = valid_range(od.w, xd.w, off, s);
                    for oy in y0..y1 {
                        let iy = oy * s + ky - g.pad;
                        let xrow = &x[(i * xd.h + iy) * xd.w..(i * xd.h + iy + 1) * xd.w];
                        let orow = &mut out[(o * od.h + oy) * od.w..(o * od.h + oy + 1) * od.w];
                        for ox in x0..x1 {
                            let ix = (ox * s) as isize + off;
                            orow[ox] += kv * xrow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv_forward`] with respect to its input: scatters `gout`
/// back through the kernel into an `xd`-shaped buffer.
pub fn conv_backward_input(gout: &[f64], od: Dims3, k: &[f64], g: ConvGeom, xd: Dims3) -> Vec<f64> {
    let mut gx = vec![0.0; xd.len()];
    let s = g.stride;
    for o in 0..g.c_out {
        for i in 0..g.c_in {
            for ky in 0..g.kh {
                let (y0, y1) = valid_range(od.h, xd.h, ky as isize - g.pad as isize, s);
                for kx in 0..g.kw {
                    let kv = k[((o * g.c_in + i) * g.kh + ky) * g.kw + kx];
                    let off = kx as isize - g.pad as isize;
                    let (x0, x1) = valid_range(od.w, xd.w, off, s);
                    for oy in y0..y1 {
                        let iy = oy * s + ky - g.pad;
                        let grow = &gout[(o * od.h + oy) * od.w..(o * od.h + oy + 1) * od.w];
                        let xrow = &mut gx[(i * xd.h + iy) * xd.w..(i * xd.h + iy + 1) * xd.w];
                        for ox in x0..x1 {
                            let ix = (ox * s) as isize + off;
                            xrow[ix as usize] += kv * grow[ox];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradient of [`conv_forward`] with respect to the kernel.
pub fn conv_backward_kernel(
    x: &[f64],
    xd: Dims3,
    gout: &[f64],
    od: Dims3,
    g: ConvGeom,
) -> Vec<f64> {
    let mut gk = vec![0.0; g.c_out * g.c_in * g.kh * g.kw];
    let s = g.stride;
    for o in 0..g.c_out {
        for i in 0..g.c_in {
            for ky in 0..g.kh {
                let (y0, y1) = valid_range(od.h, xd.h, ky as isize - g.pad as isize, s);
                for kx in 0..g.kw {
                    let off = kx as isize - g.pad as isize;
                    let (x0, x1) = valid_range(od.w, xd.w, off, s);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * s + ky - g.pad;
                        let grow = &gout[(o * od.h + oy) * od.w..(o * od.h + oy + 1) * od.w];
                        let xrow = &x[(i * xd.h + iy) * xd.w..(i * xd.h + iy + 1) * xd.w];
                        for ox in x0..x1 {
                            let ix = (ox * s) as isize + off;
                            acc += grow[ox] * xrow[ix as usize];
                        }
                    }
                    gk[((o * g.c_in + i) * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    }
    gk
}

pub fn add_channel_bias(out: &mut [f64], od: Dims3, bias: &[f64]) {
    let plane = od.h * od.w;
    for (c, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

pub fn channel_sums(g: &[f64], od: Dims3) -> Vec<f64> {
    g.chunks(od.h * od.w).map(|c| c.iter().sum()).collect()
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Separable "valid" filtering of every channel with the 1-D window `win`
/// along both spatial axes.
pub fn blur_valid(x: &[f64], d: Dims3, win: &[f64]) -> (Vec<f64>, Dims3) {
    let n = win.len();
    let wo = d.w + 1 - n;
    let ho = d.h + 1 - n;
    let mut tmp = vec![0.0; d.c * d.h * wo];
    for row in 0..d.c * d.h {
        let src = &x[row * d.w..(row + 1) * d.w];
        let dst = &mut tmp[row * wo..(row + 1) * wo];
        for (ox, o) in dst.iter_mut().enumerate() {
            *o = win.iter().zip(&src[ox..ox + n]).map(|(g, v)| g * v).sum();
        }
    }
    let od = Dims3 {
        c: d.c,
        h: ho,
        w: wo,
    };
    let mut out = vec![0.0; od.len()];
    for c in 0..d.c {
        for oy in 0..ho {
            let orow = &mut out[(c * ho + oy) * wo..(c * ho + oy + 1) * wo];
            for (t, g) in win.iter().enumerate() {
                let trow = &tmp[(c * d.h + oy + t) * wo..(c * d.h + oy + t + 1) * wo];
                for (o, v) in orow.iter_mut().zip(trow) {
                    *o += g * v;
                }
            }
        }
    }
    (out, od)
}

pub fn blur_valid_adjoint(gout: &[f64], d: Dims3, win: &[f64]) -> Vec<f64> {
    let n = win.len();
    let wo = d.w + 1 - n;
    let ho = d.h + 1 - n;
    let mut gtmp = vec![0.0; d.c * d.h * wo];
    for c in 0..d.c {
        for oy in 0..ho {
            let grow = &gout[(c * ho + oy) * wo..(c * ho + oy + 1) * wo];
            for (t, g) in win.iter().enumerate() {
                let trow = &mut gtmp[(c * d.h + oy + t) * wo..(c * d.h + oy + t + 1) * wo];
                for (tv, gv) in trow.iter_mut().zip(grow) {
                    *tv += g * gv;
                }
            }
        }
    }
    let mut gx = vec![0.0; d.len()];
    for row in 0..d.c * d.h {
        let src = &gtmp[row * wo..(row + 1) * wo];
        let dst = &mut gx[row * d.w..(row + 1) * d.w];
        for (ox, gv) in src.iter().enumerate() {
            for (t, g) in win.iter().enumerate() {
                dst[ox + t] += g * gv;
            }
        }
    }
    gx
}

pub fn avg_pool2(x: &[f64], d: Dims3) -> (Vec<f64>, Dims3) {
    let od = Dims3 {
        c: d.c,
        h: d.h / 2,
        w: d.w / 2,
    };
    let mut out = vec![0.0; od.len()];
    for c in 0..d.c {
        for y in 0..od.h {
            for xx in 0..od.w {
                let base = (c * d.h + 2 * y) * d.w + 2 * xx;
                out[(c * od.h + y) * od.w + xx] =
                    0.25 * (x[base] + x[base + 1] + x[base + d.w] + x[base + d.w + 1]);
            }
        }
    }
    (out, od)
}

pub fn avg_pool2_adjoint(gout: &[f64], d: Dims3) -> Vec<f64> {
    let od = Dims3 {
        c: d.c,
        h: d.h / 2,
        w: d.w / 2,
    };
    let mut gx = vec![0.0; d.len()];
    for c in 0..d.c {
        for y in 0..od.h {
            for xx in 0..od.w {
                let g = 0.25 * gout[(c * od.h + y) * od.w + xx];
                let base = (c * d.h + 2 * y) * d.w + 2 * xx;
                gx[base] += g;
                gx[base + 1] += g;
                gx[base + d.w] += g;
                gx[base + d.w + 1] += g;
            }
        }
    }
    gx
}

/// Normalized Gaussian window of odd length `size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let t = i as f64 - half;
            (-(t * t) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_covers_in_bounds_positions() {
        for out_len in 1..6 {
            for in_len in 1..8 {
                for offset in -3isize..3 {
                    for stride in 1..4 {
                        let (a, b) = valid_range(out_len, in_len, offset, stride);
                        for o in 0..out_len {
                            let idx = (o * stride) as isize + offset;
                            let inside = idx >= 0 && (idx as usize) < in_len;
                            assert_eq!(
                                inside,
                                o >= a && o < b,
                                "{out_len} {in_len} {offset} {stride} {o}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gaussian_window_sums_to_one() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(w[0], w[10]);
    }
}

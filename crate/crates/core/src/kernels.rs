//! Raw NCHW kernels used by the autodiff graph.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn valid(&self) -> bool {
        self.k >= 1
            && self.stride >= 1
            && self.h + 2 * self.pad >= self.k
            && self.w + 2 * self.pad >= self.k
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    for c in 0..g.c_in {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    for c in 0..g.c_in {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x`: `[n, c_in, h, w]`, `weight`: `[c_out, c_in, k, k]`; returns `[n, c_out, ho, wo]`.
pub fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    n: usize,
    c_out: usize,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let rows = g.col_rows();
    let in_len = g.c_in * g.h * g.w;
    let mut out = vec![T::zero(); n * c_out * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    for i in 0..n {
        let xi = &x[i * in_len..(i + 1) * in_len];
        let src: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(g, xi, &mut cols);
            &cols
        };
        let oi = &mut out[i * c_out * plane..(i + 1) * c_out * plane];
        if let Some(b) = bias {
            for (o, row) in oi.chunks_mut(plane).enumerate() {
                row.fill(b[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            c_out,
            rows,
            plane,
            T::one(),
            weight,
            rows,
            1,
            src,
            plane,
            1,
            beta,
            oi,
            plane,
            1,
        );
    }
    out
}

/// Accumulates weight/bias/input gradients of a convolution.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    n: usize,
    c_out: usize,
    x: &[T],
    weight: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let rows = g.col_rows();
    let in_len = g.c_in * g.h * g.w;

    if let Some(db) = db {
        for i in 0..n {
            let di = &dout[i * c_out * plane..(i + 1) * c_out * plane];
            for (o, row) in di.chunks(plane).enumerate() {
                db[o] += row.iter().copied().sum::<T>();
            }
        }
    }

    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * plane]
    };
    if let Some(dw) = dw {
        for i in 0..n {
            let xi = &x[i * in_len..(i + 1) * in_len];
            let src: &[T] = if g.is_pointwise() {
                xi
            } else {
                im2col(g, xi, &mut cols);
                &cols
            };
            let di = &dout[i * c_out * plane..(i + 1) * c_out * plane];
            // dW[o, r] += sum_p dout[o, p] * cols[r, p]
            T::gemm(
                c_out,
                plane,
                rows,
                T::one(),
                di,
                plane,
                1,
                src,
                1,
                plane,
                T::one(),
                dw,
                rows,
                1,
            );
        }
    }

    if let Some(dx) = dx {
        for i in 0..n {
            let di = &dout[i * c_out * plane..(i + 1) * c_out * plane];
            let dxi = &mut dx[i * in_len..(i + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(
                    rows,
                    c_out,
                    plane,
                    T::one(),
                    weight,
                    1,
                    rows,
                    di,
                    plane,
                    1,
                    T::one(),
                    dxi,
                    plane,
                    1,
                );
            } else {
                T::gemm(
                    rows,
                    c_out,
                    plane,
                    T::one(),
                    weight,
                    1,
                    rows,
                    di,
                    plane,
                    1,
                    T::zero(),
                    &mut cols,
                    plane,
                    1,
                );
                col2im_add(g, &cols, dxi);
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling of `[planes, h, w]`.
pub fn upsample2x<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(dout: &[T], planes: usize, h: usize, w: usize, dx: &mut [T]) {
    let (h2, w2) = (2 * h, 2 * w);
    for p in 0..planes {
        let src = &dout[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
}

/// 2x2/stride-2 max pooling; returns values and flat argmax indices into `x`.
pub fn maxpool2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut idx = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..ho {
            for xx in 0..wo {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

/// Per-sample group normalisation statistics and normalised values.
///
/// Returns `(xhat, rstd)` with one `rstd` per `(sample, group)`.
pub fn group_norm_stats<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    plane: usize,
    groups: usize,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let per_group = (c / groups) * plane;
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(n * groups);
    for (block, out) in x.chunks(per_group).zip(xhat.chunks_mut(per_group)) {
        let cnt = T::of(per_group as f64);
        let mean = block.iter().copied().sum::<T>() / cnt;
        let var = block.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cnt;
        let r = T::one() / (var + eps).sqrt();
        for (o, &v) in out.iter_mut().zip(block) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

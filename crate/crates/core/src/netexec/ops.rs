//! Numerical kernels. Each output element is accumulated in a fixed order
//! that does not depend on its position or on the tensor extent, which is
//! what makes tiled inference reproduce whole-volume results bit for bit.

use super::tensor::Tensor;
use super::Real;
use crate::par;

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;

/// `acc[i] += w * src[i]`.
#[inline]
fn axpy<T: Real>(acc: &mut [T], w: T, src: &[T]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a += w * s;
    }
}

/// Dot product with eight interleaved partial sums, reduced in a fixed order.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    let mut s = T::zero();
    for l in lanes {
        s += l;
    }
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// Row offsets `(dst_range, src_range)` for a tap shifted by `d - 1` along x.
#[inline]
fn x_ranges(nx: usize, dx: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    match dx {
        0 => (1..nx, 0..nx - 1),
        1 => (0..nx, 0..nx),
        _ => (0..nx - 1, 1..nx),
    }
}

#[inline]
fn shifted(i: usize, d: usize, n: usize) -> Option<usize> {
    // i + d - 1 within [0, n)
    let j = i + d;
    (j >= 1 && j <= n).then(|| j - 1)
}

/// 3³ cross-correlation with zero "same" padding.
///
/// `w` is laid out `(c_out, c_in, dz, dy, dx)`.
pub fn conv3_forward<T: Real>(x: &Tensor<T>, w: &[T], b: &[T], c_out: usize) -> Tensor<T> {
    let [nx, ny, nz] = x.dims;
    let (cin, plane) = (x.c, x.plane());
    let mut out = Tensor::zeros(x.n, c_out, x.dims);
    par::for_each_chunk(&mut out.data, plane, |idx, o| {
        let (n, co) = (idx / c_out, idx % c_out);
        o.fill(b[co]);
        for z in 0..nz {
            for y in 0..ny {
                let orow = &mut o[(z * ny + y) * nx..][..nx];
                for ci in 0..cin {
                    let xin = x.channel(n, ci);
                    let wk = &w[(co * cin + ci) * 27..][..27];
                    for dz in 0..3 {
                        let Some(zz) = shifted(z, dz, nz) else { continue };
                        for dy in 0..3 {
                            let Some(yy) = shifted(y, dy, ny) else { continue };
                            let irow = &xin[(zz * ny + yy) * nx..][..nx];
                            for dx in 0..3 {
                                let (dr, sr) = x_ranges(nx, dx);
                                axpy(&mut orow[dr], wk[(dz * 3 + dy) * 3 + dx], &irow[sr]);
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient of [`conv3_forward`] with respect to its input.
pub fn conv3_backward_input<T: Real>(g: &Tensor<T>, w: &[T], c_in: usize) -> Tensor<T> {
    let [nx, ny, nz] = g.dims;
    let (cout, plane) = (g.c, g.plane());
    let mut out = Tensor::zeros(g.n, c_in, g.dims);
    par::for_each_chunk(&mut out.data, plane, |idx, o| {
        let (n, ci) = (idx / c_in, idx % c_in);
        for z in 0..nz {
            for y in 0..ny {
                let orow = &mut o[(z * ny + y) * nx..][..nx];
                for co in 0..cout {
                    let gin = g.channel(n, co);
                    let wk = &w[(co * c_in + ci) * 27..][..27];
                    for dz in 0..3 {
                        // the output at z - (dz - 1) read this voxel through tap dz
                        let Some(zz) = shifted(z, 2 - dz, nz) else { continue };
                        for dy in 0..3 {
                            let Some(yy) = shifted(y, 2 - dy, ny) else { continue };
                            let grow = &gin[(zz * ny + yy) * nx..][..nx];
                            for dx in 0..3 {
                                let (dr, sr) = x_ranges(nx, 2 - dx);
                                axpy(&mut orow[dr], wk[(dz * 3 + dy) * 3 + dx], &grow[sr]);
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Kernel and bias gradients of [`conv3_forward`].
pub fn conv3_backward_params<T: Real>(x: &Tensor<T>, g: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let [nx, ny, nz] = x.dims;
    let (cin, cout) = (x.c, g.c);
    let mut gw = vec![T::zero(); cout * cin * 27];
    par::for_each_chunk(&mut gw, cin * 27, |co, gwc| {
        let mut acc = vec![T::zero(); 27 * nx];
        for ci in 0..cin {
            acc.fill(T::zero());
            for n in 0..x.n {
                let xin = x.channel(n, ci);
                let gout = g.channel(n, co);
                for z in 0..nz {
                    for y in 0..ny {
                        let grow = &gout[(z * ny + y) * nx..][..nx];
                        for dz in 0..3 {
                            let Some(zz) = shifted(z, dz, nz) else { continue };
                            for dy in 0..3 {
                                let Some(yy) = shifted(y, dy, ny) else { continue };
                                let irow = &xin[(zz * ny + yy) * nx..][..nx];
                                for dx in 0..3 {
                                    let k = (dz * 3 + dy) * 3 + dx;
                                    let (dr, sr) = x_ranges(nx, dx);
                                    let a = &mut acc[k * nx..(k + 1) * nx];
                                    for ((av, &gv), &iv) in a[dr.clone()].iter_mut().zip(&grow[dr]).zip(&irow[sr]) {
                                        *av += gv * iv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for k in 0..27 {
                let mut s = T::zero();
                for &v in &acc[k * nx..(k + 1) * nx] {
                    s += v;
                }
                gwc[ci * 27 + k] = s;
            }
        }
    });
    (gw, bias_grad(g))
}

fn bias_grad<T: Real>(g: &Tensor<T>) -> Vec<T> {
    (0..g.c)
        .map(|co| {
            let mut s = T::zero();
            for n in 0..g.n {
                for &v in g.channel(n, co) {
                    s += v;
                }
            }
            s
        })
        .collect()
}

/// 1³ convolution; `w` is `(c_out, c_in)`.
pub fn conv1_forward<T: Real>(x: &Tensor<T>, w: &[T], b: &[T], c_out: usize) -> Tensor<T> {
    let cin = x.c;
    let mut out = Tensor::zeros(x.n, c_out, x.dims);
    par::for_each_chunk(&mut out.data, x.plane(), |idx, o| {
        let (n, co) = (idx / c_out, idx % c_out);
        o.fill(b[co]);
        for ci in 0..cin {
            axpy(o, w[co * cin + ci], x.channel(n, ci));
        }
    });
    out
}

pub fn conv1_backward_input<T: Real>(g: &Tensor<T>, w: &[T], c_in: usize) -> Tensor<T> {
    let cout = g.c;
    let mut out = Tensor::zeros(g.n, c_in, g.dims);
    par::for_each_chunk(&mut out.data, g.plane(), |idx, o| {
        let (n, ci) = (idx / c_in, idx % c_in);
        for co in 0..cout {
            axpy(o, w[co * c_in + ci], g.channel(n, co));
        }
    });
    out
}

pub fn conv1_backward_params<T: Real>(x: &Tensor<T>, g: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (cin, cout) = (x.c, g.c);
    let mut gw = vec![T::zero(); cout * cin];
    par::for_each_chunk(&mut gw, cin, |co, row| {
        for (ci, slot) in row.iter_mut().enumerate() {
            let mut s = T::zero();
            for n in 0..x.n {
                s += dot(g.channel(n, co), x.channel(n, ci));
            }
            *slot = s;
        }
    });
    (gw, bias_grad(g))
}

/// In-place ReLU.
pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in x.data.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_inplace<T: Real>(g: &mut Tensor<T>, relu_out: &Tensor<T>) {
    for (gv, &r) in g.data.iter_mut().zip(&relu_out.data) {
        if r <= T::zero() {
            *gv = T::zero();
        }
    }
}

/// 2³ max pooling with stride 2. Returns the pooled tensor and, per output
/// voxel, the winning offset `dz*4 + dy*2 + dx` within its window. Ties go
/// to the lowest linear input index.
pub fn pool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let [nx, ny, _] = x.dims;
    let od = x.dims.map(|d| d / 2);
    let mut out = Tensor::zeros(x.n, x.c, od);
    let mut arg = vec![0u8; out.data.len()];
    let op = out.plane();
    for n in 0..x.n {
        for c in 0..x.c {
            let src = x.channel(n, c);
            let base = (n * x.c + c) * op;
            for z in 0..od[2] {
                for y in 0..od[1] {
                    for xo in 0..od[0] {
                        let mut best = T::neg_infinity();
                        let mut best_k = 0u8;
                        for k in 0..8u8 {
                            let (dz, dy, dx) = ((k >> 2) as usize, ((k >> 1) & 1) as usize, (k & 1) as usize);
                            let v = src[((2 * z + dz) * ny + 2 * y + dy) * nx + 2 * xo + dx];
                            if v > best || k == 0 {
                                best = v;
                                best_k = k;
                            }
                        }
                        let o = base + (z * od[1] + y) * od[0] + xo;
                        out.data[o] = best;
                        arg[o] = best_k;
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn pool2_backward<T: Real>(g: &Tensor<T>, arg: &[u8], in_dims: [usize; 3]) -> Tensor<T> {
    let [nx, ny, _] = in_dims;
    let od = g.dims;
    let mut out = Tensor::zeros(g.n, g.c, in_dims);
    let gp = g.plane();
    for n in 0..g.n {
        for c in 0..g.c {
            let base = (n * g.c + c) * gp;
            let dst = out.channel_mut(n, c);
            for z in 0..od[2] {
                for y in 0..od[1] {
                    for xo in 0..od[0] {
                        let o = base + (z * od[1] + y) * od[0] + xo;
                        let k = arg[o];
                        let (dz, dy, dx) = ((k >> 2) as usize, ((k >> 1) & 1) as usize, (k & 1) as usize);
                        dst[((2 * z + dz) * ny + 2 * y + dy) * nx + 2 * xo + dx] = g.data[o];
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour ×2 repetition along every axis.
pub fn repeat2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [nx, ny, nz] = x.dims;
    let od = [2 * nx, 2 * ny, 2 * nz];
    let mut out = Tensor::zeros(x.n, x.c, od);
    for n in 0..x.n {
        for c in 0..x.c {
            let src = x.channel(n, c);
            let dst = out.channel_mut(n, c);
            for z in 0..od[2] {
                for y in 0..od[1] {
                    let srow = &src[((z / 2) * ny + y / 2) * nx..][..nx];
                    let drow = &mut dst[(z * od[1] + y) * od[0]..][..od[0]];
                    for (xo, d) in drow.iter_mut().enumerate() {
                        *d = srow[xo / 2];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`repeat2`]: sums each 2³ block, children in linear order.
pub fn repeat2_backward<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let od = g.dims.map(|d| d / 2);
    let [gx, gy, _] = g.dims;
    let mut out = Tensor::zeros(g.n, g.c, od);
    for n in 0..g.n {
        for c in 0..g.c {
            let src = g.channel(n, c);
            let dst = out.channel_mut(n, c);
            for z in 0..od[2] {
                for y in 0..od[1] {
                    for x in 0..od[0] {
                        let mut s = T::zero();
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    s += src[((2 * z + dz) * gy + 2 * y + dy) * gx + 2 * x + dx];
                                }
                            }
                        }
                        dst[(z * od[1] + y) * od[0] + x] = s;
                    }
                }
            }
        }
    }
    out
}

/// Per-channel batch statistics over batch and space: `(mean, biased var)`.
pub fn channel_stats<T: Real>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let count = (x.n * x.plane()) as f64;
    let mut means = Vec::with_capacity(x.c);
    let mut vars = Vec::with_capacity(x.c);
    for c in 0..x.c {
        let mut s = 0.0f64;
        for n in 0..x.n {
            for &v in x.channel(n, c) {
                s += v.f64();
            }
        }
        let mean = s / count;
        let mut q = 0.0f64;
        for n in 0..x.n {
            for &v in x.channel(n, c) {
                let d = v.f64() - mean;
                q += d * d;
            }
        }
        means.push(mean);
        vars.push(q / count);
    }
    (means, vars)
}

/// `y = gamma * (x - mean) * inv_std + beta`, per channel, in place.
pub fn affine_normalize_inplace<T: Real>(x: &mut Tensor<T>, mean: &[f64], inv_std: &[f64], gamma: &[T], beta: &[T]) {
    let c_total = x.c;
    for n in 0..x.n {
        for c in 0..c_total {
            let (m, s) = (T::of(mean[c]), T::of(inv_std[c]));
            let (g, b) = (gamma[c], beta[c]);
            for v in x.channel_mut(n, c) {
                *v = g * ((*v - m) * s) + b;
            }
        }
    }
}

/// Backward of batch normalization.
///
/// `x` is the normalization input; with `batch_mode` the statistics are
/// treated as functions of the batch, otherwise as constants.
/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Real>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[T],
    batch_mode: bool,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let count = (x.n * x.plane()) as f64;
    let mut dx = Tensor::zeros(x.n, x.c, x.dims);
    let mut dgamma = Vec::with_capacity(x.c);
    let mut dbeta = Vec::with_capacity(x.c);
    for c in 0..x.c {
        let (m, s) = (mean[c], inv_std[c]);
        let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
        for n in 0..x.n {
            for (&gv, &xv) in g.channel(n, c).iter().zip(x.channel(n, c)) {
                let xhat = (xv.f64() - m) * s;
                sum_g += gv.f64();
                sum_gx += gv.f64() * xhat;
            }
        }
        dgamma.push(T::of(sum_gx));
        dbeta.push(T::of(sum_g));
        let gam = gamma[c].f64();
        for n in 0..x.n {
            let (gs, xs) = (g.channel(n, c), x.channel(n, c));
            let out: Vec<T> = if batch_mode {
                gs.iter()
                    .zip(xs)
                    .map(|(&gv, &xv)| {
                        let xhat = (xv.f64() - m) * s;
                        T::of(gam * s / count * (count * gv.f64() - sum_g - xhat * sum_gx))
                    })
                    .collect()
            } else {
                gs.iter().map(|&gv| T::of(gam * s * gv.f64())).collect()
            };
            dx.channel_mut(n, c).copy_from_slice(&out);
        }
    }
    (dx, dgamma, dbeta)
}

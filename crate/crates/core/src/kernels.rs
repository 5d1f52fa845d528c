//! Raw numeric kernels behind the autodiff operations.
//!
//! Shape checking happens at the graph layer; kernels assume valid inputs.
//! Every kernel is deterministic: parallel loops only split disjoint output
//! slices and each slice is reduced in a fixed sequential order.

use rayon::prelude::*;

use crate::scalar::{fl, Scalar};
use crate::tensor::Tensor;

/// Boundary handling for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Reflection without edge repeat: -1 maps to 1, n maps to n-2.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * n - 2 - i;
        }
    }
    i as usize
}

// ---------------------------------------------------------------------------
// 2D convolution (cross-correlation), same-size output
// ---------------------------------------------------------------------------

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    pad: PadMode,
) -> Tensor<T> {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let x = input.data();
    let k = kernel.data();
    let b = bias.data();

    let mut out = Tensor::zeros(&[cout, h, w]);
    out.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(co, plane)| {
            plane.iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..cin {
                let xin = &x[ci * h * w..(ci + 1) * h * w];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let wgt = k[((co * cin + ci) * kh + dy) * kw + dx];
                        if wgt == T::zero() {
                            continue;
                        }
                        match pad {
                            PadMode::Zero => {
                                let oy = dy as isize - ph as isize;
                                let ox = dx as isize - pw as isize;
                                let y0 = 0.max(-oy) as usize;
                                let y1 = h.min((h as isize - oy) as usize);
                                let x0 = 0.max(-ox) as usize;
                                let x1 = w.min((w as isize - ox) as usize);
                                for y in y0..y1 {
                                    let src = ((y as isize + oy) as usize) * w;
                                    let dst = y * w;
                                    for xx in x0..x1 {
                                        plane[dst + xx] +=
                                            wgt * xin[src + (xx as isize + ox) as usize];
                                    }
                                }
                            }
                            PadMode::Reflect => {
                                for y in 0..h {
                                    let sy = reflect(y as isize + dy as isize - ph as isize, h);
                                    let dst = y * w;
                                    for xx in 0..w {
                                        let sx =
                                            reflect(xx as isize + dx as isize - pw as isize, w);
                                        plane[dst + xx] += wgt * xin[sy * w + sx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    pad: PadMode,
) -> ConvGrads<T> {
    let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();

    let mut grad_bias = Tensor::zeros(&[cout]);
    for co in 0..cout {
        grad_bias.data_mut()[co] = g[co * h * w..(co + 1) * h * w].iter().copied().sum();
    }

    let mut grad_kernel = Tensor::zeros(kernel.shape());
    grad_kernel
        .data_mut()
        .par_chunks_mut(cin * kh * kw)
        .enumerate()
        .for_each(|(co, kslice)| {
            let gp = &g[co * h * w..(co + 1) * h * w];
            for ci in 0..cin {
                let xin = &x[ci * h * w..(ci + 1) * h * w];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let oy = dy as isize - ph as isize;
                        let ox = dx as isize - pw as isize;
                        let mut acc = T::zero();
                        match pad {
                            PadMode::Zero => {
                                let y0 = 0.max(-oy) as usize;
                                let y1 = h.min((h as isize - oy) as usize);
                                let x0 = 0.max(-ox) as usize;
                                let x1 = w.min((w as isize - ox) as usize);
                                for y in y0..y1 {
                                    let src = ((y as isize + oy) as usize) * w;
                                    let dst = y * w;
                                    for xx in x0..x1 {
                                        acc += gp[dst + xx] * xin[src + (xx as isize + ox) as usize];
                                    }
                                }
                            }
                            PadMode::Reflect => {
                                for y in 0..h {
                                    let sy = reflect(y as isize + oy, h);
                                    for xx in 0..w {
                                        let sx = reflect(xx as isize + ox, w);
                                        acc += gp[y * w + xx] * xin[sy * w + sx];
                                    }
                                }
                            }
                        }
                        kslice[(ci * kh + dy) * kw + dx] = acc;
                    }
                }
            }
        });

    let mut grad_input = Tensor::zeros(input.shape());
    match pad {
        PadMode::Zero => {
            // Gather form: every input element sums the output gradients it fed.
            grad_input
                .data_mut()
                .par_chunks_mut(h * w)
                .enumerate()
                .for_each(|(ci, gplane)| {
                    for co in 0..cout {
                        let gp = &g[co * h * w..(co + 1) * h * w];
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let wgt = k[((co * cin + ci) * kh + dy) * kw + dx];
                                if wgt == T::zero() {
                                    continue;
                                }
                                let oy = dy as isize - ph as isize;
                                let ox = dx as isize - pw as isize;
                                // source y = out y + oy  =>  out y = sy - oy
                                let sy0 = 0.max(oy) as usize;
                                let sy1 = h.min((h as isize + oy) as usize);
                                let sx0 = 0.max(ox) as usize;
                                let sx1 = w.min((w as isize + ox) as usize);
                                for sy in sy0..sy1 {
                                    let orow = ((sy as isize - oy) as usize) * w;
                                    let srow = sy * w;
                                    for sx in sx0..sx1 {
                                        gplane[srow + sx] +=
                                            wgt * gp[orow + (sx as isize - ox) as usize];
                                    }
                                }
                            }
                        }
                    }
                });
        }
        PadMode::Reflect => {
            let gi = grad_input.data_mut();
            for co in 0..cout {
                let gp = &g[co * h * w..(co + 1) * h * w];
                for ci in 0..cin {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let wgt = k[((co * cin + ci) * kh + dy) * kw + dx];
                            if wgt == T::zero() {
                                continue;
                            }
                            for y in 0..h {
                                let sy = reflect(y as isize + dy as isize - ph as isize, h);
                                for xx in 0..w {
                                    let sx = reflect(xx as isize + dx as isize - pw as isize, w);
                                    gi[(ci * h + sy) * w + sx] += wgt * gp[y * w + xx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    }
}

// ---------------------------------------------------------------------------
// 3D convolution, same-size output
// ---------------------------------------------------------------------------

pub fn conv3d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    pad: PadMode,
) -> Tensor<T> {
    let (cin, d, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (cout, kd, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[2],
        kernel.shape()[3],
        kernel.shape()[4],
    );
    let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
    let x = input.data();
    let k = kernel.data();
    let b = bias.data();
    let vol = d * h * w;

    let mut out = Tensor::zeros(&[cout, d, h, w]);
    out.data_mut()
        .par_chunks_mut(vol)
        .enumerate()
        .for_each(|(co, block)| {
            block.iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..cin {
                let xin = &x[ci * vol..(ci + 1) * vol];
                for dz in 0..kd {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let wgt = k[(((co * cin + ci) * kd + dz) * kh + dy) * kw + dx];
                            if wgt == T::zero() {
                                continue;
                            }
                            let oz = dz as isize - pd as isize;
                            let oy = dy as isize - ph as isize;
                            let ox = dx as isize - pw as isize;
                            match pad {
                                PadMode::Zero => {
                                    let z0 = 0.max(-oz) as usize;
                                    let z1 = d.min((d as isize - oz) as usize);
                                    let y0 = 0.max(-oy) as usize;
                                    let y1 = h.min((h as isize - oy) as usize);
                                    let x0 = 0.max(-ox) as usize;
                                    let x1 = w.min((w as isize - ox) as usize);
                                    for z in z0..z1 {
                                        let szo = ((z as isize + oz) as usize) * h;
                                        for y in y0..y1 {
                                            let src = (szo + (y as isize + oy) as usize) * w;
                                            let dst = (z * h + y) * w;
                                            for xx in x0..x1 {
                                                block[dst + xx] +=
                                                    wgt * xin[src + (xx as isize + ox) as usize];
                                            }
                                        }
                                    }
                                }
                                PadMode::Reflect => {
                                    for z in 0..d {
                                        let sz = reflect(z as isize + oz, d);
                                        for y in 0..h {
                                            let sy = reflect(y as isize + oy, h);
                                            let dst = (z * h + y) * w;
                                            for xx in 0..w {
                                                let sx = reflect(xx as isize + ox, w);
                                                block[dst + xx] +=
                                                    wgt * xin[(sz * h + sy) * w + sx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    pad: PadMode,
) -> ConvGrads<T> {
    let (cin, d, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (cout, kd, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[2],
        kernel.shape()[3],
        kernel.shape()[4],
    );
    let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
    let vol = d * h * w;
    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();

    let mut grad_bias = Tensor::zeros(&[cout]);
    for co in 0..cout {
        grad_bias.data_mut()[co] = g[co * vol..(co + 1) * vol].iter().copied().sum();
    }

    let mut grad_kernel = Tensor::zeros(kernel.shape());
    grad_kernel
        .data_mut()
        .par_chunks_mut(cin * kd * kh * kw)
        .enumerate()
        .for_each(|(co, kslice)| {
            let gp = &g[co * vol..(co + 1) * vol];
            for ci in 0..cin {
                let xin = &x[ci * vol..(ci + 1) * vol];
                for dz in 0..kd {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let oz = dz as isize - pd as isize;
                            let oy = dy as isize - ph as isize;
                            let ox = dx as isize - pw as isize;
                            let mut acc = T::zero();
                            match pad {
                                PadMode::Zero => {
                                    let z0 = 0.max(-oz) as usize;
                                    let z1 = d.min((d as isize - oz) as usize);
                                    let y0 = 0.max(-oy) as usize;
                                    let y1 = h.min((h as isize - oy) as usize);
                                    let x0 = 0.max(-ox) as usize;
                                    let x1 = w.min((w as isize - ox) as usize);
                                    for z in z0..z1 {
                                        let szo = ((z as isize + oz) as usize) * h;
                                        for y in y0..y1 {
                                            let src = (szo + (y as isize + oy) as usize) * w;
                                            let dst = (z * h + y) * w;
                                            for xx in x0..x1 {
                                                acc += gp[dst + xx]
                                                    * xin[src + (xx as isize + ox) as usize];
                                            }
                                        }
                                    }
                                }
                                PadMode::Reflect => {
                                    for z in 0..d {
                                        let sz = reflect(z as isize + oz, d);
                                        for y in 0..h {
                                            let sy = reflect(y as isize + oy, h);
                                            for xx in 0..w {
                                                let sx = reflect(xx as isize + ox, w);
                                                acc += gp[(z * h + y) * w + xx]
                                                    * xin[(sz * h + sy) * w + sx];
                                            }
                                        }
                                    }
                                }
                            }
                            kslice[((ci * kd + dz) * kh + dy) * kw + dx] = acc;
                        }
                    }
                }
            }
        });

    let mut grad_input = Tensor::zeros(input.shape());
    match pad {
        PadMode::Zero => {
            grad_input
                .data_mut()
                .par_chunks_mut(vol)
                .enumerate()
                .for_each(|(ci, gblock)| {
                    for co in 0..cout {
                        let gp = &g[co * vol..(co + 1) * vol];
                        for dz in 0..kd {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let wgt =
                                        k[(((co * cin + ci) * kd + dz) * kh + dy) * kw + dx];
                                    if wgt == T::zero() {
                                        continue;
                                    }
                                    let oz = dz as isize - pd as isize;
                                    let oy = dy as isize - ph as isize;
                                    let ox = dx as isize - pw as isize;
                                    let z0 = 0.max(oz) as usize;
                                    let z1 = d.min((d as isize + oz) as usize);
                                    let y0 = 0.max(oy) as usize;
                                    let y1 = h.min((h as isize + oy) as usize);
                                    let x0 = 0.max(ox) as usize;
                                    let x1 = w.min((w as isize + ox) as usize);
                                    for sz in z0..z1 {
                                        let ozr = ((sz as isize - oz) as usize) * h;
                                        for sy in y0..y1 {
                                            let orow = (ozr + (sy as isize - oy) as usize) * w;
                                            let srow = (sz * h + sy) * w;
                                            for sx in x0..x1 {
                                                gblock[srow + sx] += wgt
                                                    * gp[orow + (sx as isize - ox) as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
        }
        PadMode::Reflect => {
            let gi = grad_input.data_mut();
            for co in 0..cout {
                let gp = &g[co * vol..(co + 1) * vol];
                for ci in 0..cin {
                    for dz in 0..kd {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let wgt = k[(((co * cin + ci) * kd + dz) * kh + dy) * kw + dx];
                                if wgt == T::zero() {
                                    continue;
                                }
                                for z in 0..d {
                                    let sz = reflect(z as isize + dz as isize - pd as isize, d);
                                    for y in 0..h {
                                        let sy =
                                            reflect(y as isize + dy as isize - ph as isize, h);
                                        for xx in 0..w {
                                            let sx = reflect(
                                                xx as isize + dx as isize - pw as isize,
                                                w,
                                            );
                                            gi[((ci * d + sz) * h + sy) * w + sx] +=
                                                wgt * gp[(z * h + y) * w + xx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    }
}

// ---------------------------------------------------------------------------
// Patch unfold / fold (one 3x3 patch per pixel, reflect padding)
// ---------------------------------------------------------------------------

/// Extracts one p*p patch per pixel from [C,H,W] features into [H*W, C*p*p].
/// Patch centers are row-major; out-of-image taps reflect.
pub fn unfold_forward<T: Scalar>(features: &Tensor<T>, p: usize) -> Tensor<T> {
    let (c, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let half = (p - 1) / 2;
    let x = features.data();
    let dim = c * p * p;
    let mut out = Tensor::zeros(&[h * w, dim]);
    out.data_mut()
        .par_chunks_mut(dim)
        .enumerate()
        .for_each(|(n, patch)| {
            let (y, xx) = (n / w, n % w);
            let mut t = 0;
            for ci in 0..c {
                for dy in 0..p {
                    let sy = reflect(y as isize + dy as isize - half as isize, h);
                    for dx in 0..p {
                        let sx = reflect(xx as isize + dx as isize - half as isize, w);
                        patch[t] = x[(ci * h + sy) * w + sx];
                        t += 1;
                    }
                }
            }
        });
    out
}

pub fn unfold_backward<T: Scalar>(
    grad_patches: &Tensor<T>,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
) -> Tensor<T> {
    let half = (p - 1) / 2;
    let g = grad_patches.data();
    let dim = c * p * p;
    let mut grad = Tensor::zeros(&[c, h, w]);
    let gd = grad.data_mut();
    for n in 0..h * w {
        let (y, xx) = (n / w, n % w);
        let patch = &g[n * dim..(n + 1) * dim];
        let mut t = 0;
        for ci in 0..c {
            for dy in 0..p {
                let sy = reflect(y as isize + dy as isize - half as isize, h);
                for dx in 0..p {
                    let sx = reflect(xx as isize + dx as isize - half as isize, w);
                    gd[(ci * h + sy) * w + sx] += patch[t];
                    t += 1;
                }
            }
        }
    }
    grad
}

/// How many patches touch each pixel when folding p*p patches centered on
/// every pixel: p*p in the interior, fewer near edges (out-of-image targets
/// are dropped rather than reflected).
pub fn fold_coverage(h: usize, w: usize, p: usize) -> Vec<u32> {
    let half = (p - 1) as isize / 2;
    let mut count = vec![0u32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -half..=half {
                for dx in -half..=half {
                    let (ty, tx) = (y + dy, x + dx);
                    if ty >= 0 && ty < h as isize && tx >= 0 && tx < w as isize {
                        count[(ty * w as isize + tx) as usize] += 1;
                    }
                }
            }
        }
    }
    count
}

/// Folds [H*W, C*p*p] patches back to [C,H,W], averaging overlapping
/// contributions per pixel.
pub fn fold_mean_forward<T: Scalar>(
    patches: &Tensor<T>,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
) -> Tensor<T> {
    let half = (p - 1) / 2;
    let dim = c * p * p;
    let g = patches.data();
    let count = fold_coverage(h, w, p);
    let mut out = Tensor::zeros(&[c, h, w]);
    let od = out.data_mut();
    for n in 0..h * w {
        let (y, xx) = (n / w, n % w);
        let patch = &g[n * dim..(n + 1) * dim];
        let mut t = 0;
        for ci in 0..c {
            for dy in 0..p {
                let ty = y as isize + dy as isize - half as isize;
                for dx in 0..p {
                    let tx = xx as isize + dx as isize - half as isize;
                    if ty >= 0 && (ty as usize) < h && tx >= 0 && (tx as usize) < w {
                        od[(ci * h + ty as usize) * w + tx as usize] += patch[t];
                    }
                    t += 1;
                }
            }
        }
    }
    for ci in 0..c {
        for n in 0..h * w {
            od[ci * h * w + n] /= fl::<T>(count[n] as f64);
        }
    }
    out
}

pub fn fold_mean_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
) -> Tensor<T> {
    let half = (p - 1) / 2;
    let dim = c * p * p;
    let g = grad_out.data();
    let count = fold_coverage(h, w, p);
    let mut grad = Tensor::zeros(&[h * w, dim]);
    grad.data_mut()
        .par_chunks_mut(dim)
        .enumerate()
        .for_each(|(n, patch)| {
            let (y, xx) = (n / w, n % w);
            let mut t = 0;
            for ci in 0..c {
                for dy in 0..p {
                    let ty = y as isize + dy as isize - half as isize;
                    for dx in 0..p {
                        let tx = xx as isize + dx as isize - half as isize;
                        if ty >= 0 && (ty as usize) < h && tx >= 0 && (tx as usize) < w {
                            let pos = ty as usize * w + tx as usize;
                            patch[t] = g[(ci * h * w) + pos] / fl::<T>(count[pos] as f64);
                        }
                        t += 1;
                    }
                }
            }
        });
    grad
}

// ---------------------------------------------------------------------------
// Relevance: normalized inner products between query and key patches
// ---------------------------------------------------------------------------

/// Norm threshold below which a patch is treated as the zero direction.
pub const NORM_FLOOR: f64 = 1e-12;

fn normalized_rows<T: Scalar>(m: &Tensor<T>) -> Vec<T> {
    let (n, d) = (m.shape()[0], m.shape()[1]);
    let x = m.data();
    let floor = fl::<T>(NORM_FLOOR);
    let mut out = vec![T::zero(); n * d];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm >= floor {
            for j in 0..d {
                out[i * d + j] = row[j] / norm;
            }
        }
        // below the floor the row stays zero: relevance 0 for all pairings
    }
    out
}

/// r[i][j] = <q_i/|q_i|, k_j/|k_j|>; near-zero-norm patches yield 0 rows/cols.
pub fn relevance_forward<T: Scalar>(q_patches: &Tensor<T>, k_patches: &Tensor<T>) -> Tensor<T> {
    let (nq, d) = (q_patches.shape()[0], q_patches.shape()[1]);
    let nk = k_patches.shape()[0];
    let qn = normalized_rows(q_patches);
    let kn = normalized_rows(k_patches);
    let mut r = Tensor::zeros(&[nq, nk]);
    r.data_mut()
        .par_chunks_mut(nk)
        .enumerate()
        .for_each(|(i, row)| {
            let qi = &qn[i * d..(i + 1) * d];
            for (j, slot) in row.iter_mut().enumerate() {
                let kj = &kn[j * d..(j + 1) * d];
                let mut acc = T::zero();
                for t in 0..d {
                    acc += qi[t] * kj[t];
                }
                *slot = acc;
            }
        });
    r
}

/// Gradients of the normalized inner products. Rows of `grad_r` are scanned
/// for nonzero entries, so sparse upstream gradients (the usual case: one
/// argmax entry per row) cost O(Nq*Nk) scan plus O(nnz*D) work.
pub fn relevance_backward<T: Scalar>(
    q_patches: &Tensor<T>,
    k_patches: &Tensor<T>,
    r: &Tensor<T>,
    grad_r: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (nq, d) = (q_patches.shape()[0], q_patches.shape()[1]);
    let nk = k_patches.shape()[0];
    let floor = fl::<T>(NORM_FLOOR);
    let q = q_patches.data();
    let k = k_patches.data();
    let qn = normalized_rows(q_patches);
    let kn = normalized_rows(k_patches);
    let rv = r.data();
    let g = grad_r.data();

    let mut qnorm = vec![T::zero(); nq];
    for i in 0..nq {
        qnorm[i] = q[i * d..(i + 1) * d].iter().map(|&v| v * v).sum::<T>().sqrt();
    }
    let mut knorm = vec![T::zero(); nk];
    for j in 0..nk {
        knorm[j] = k[j * d..(j + 1) * d].iter().map(|&v| v * v).sum::<T>().sqrt();
    }

    let mut grad_q = Tensor::zeros(q_patches.shape());
    let mut grad_k = Tensor::zeros(k_patches.shape());
    let gq = grad_q.data_mut();
    let gk = grad_k.data_mut();
    for i in 0..nq {
        let row = &g[i * nk..(i + 1) * nk];
        let qi = &qn[i * d..(i + 1) * d];
        for (j, &gij) in row.iter().enumerate() {
            if gij == T::zero() {
                continue;
            }
            let kj = &kn[j * d..(j + 1) * d];
            let rij = rv[i * nk + j];
            if qnorm[i] >= floor {
                let s = gij / qnorm[i];
                for t in 0..d {
                    gq[i * d + t] += s * (kj[t] - rij * qi[t]);
                }
            }
            if knorm[j] >= floor {
                let s = gij / knorm[j];
                for t in 0..d {
                    gk[j * d + t] += s * (qi[t] - rij * kj[t]);
                }
            }
        }
    }
    (grad_q, grad_k)
}

// ---------------------------------------------------------------------------
// Row max / argmax and row gather
// ---------------------------------------------------------------------------

/// Per-row argmax with ties broken by the smallest column index.
pub fn row_argmax<T: Scalar>(matrix: &Tensor<T>) -> Vec<usize> {
    let (n, m) = (matrix.shape()[0], matrix.shape()[1]);
    let x = matrix.data();
    (0..n)
        .map(|i| {
            let row = &x[i * m..(i + 1) * m];
            let mut best = 0;
            for j in 1..m {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Per-row maximum taken literally at the argmax entry, so the returned
/// values equal r[i][argmax_i] bitwise.
pub fn row_max_values<T: Scalar>(matrix: &Tensor<T>, argmax: &[usize]) -> Tensor<T> {
    let m = matrix.shape()[1];
    let x = matrix.data();
    let data = argmax.iter().enumerate().map(|(i, &j)| x[i * m + j]).collect();
    Tensor::new(&[argmax.len()], data).expect("row max shape")
}

/// out[i] = src[indices[i]] (row select).
pub fn gather_rows<T: Scalar>(src: &Tensor<T>, indices: &[usize]) -> Tensor<T> {
    let d = src.shape()[1];
    let x = src.data();
    let mut out = Tensor::zeros(&[indices.len(), d]);
    let od = out.data_mut();
    for (i, &j) in indices.iter().enumerate() {
        od[i * d..(i + 1) * d].copy_from_slice(&x[j * d..(j + 1) * d]);
    }
    out
}

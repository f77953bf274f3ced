//! 3x3x3 same-padded convolution and 2x2x2 max pooling kernels.
//!
//! Convolutions are lowered to a matrix product via im2col in `f64`, so every
//! output voxel is accumulated in double precision before being stored as `f32`.

use crate::parallel::{self, Exec};

/// Geometry of a (possibly batched) `[N, C, D, H, W]` volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct VolumeDims {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl VolumeDims {
    pub fn from_shape(shape: &[usize]) -> Option<Self> {
        match *shape {
            [c, d, h, w] => Some(VolumeDims { n: 1, c, d, h, w }),
            [n, c, d, h, w] => Some(VolumeDims { n, c, d, h, w }),
            _ => None,
        }
    }

    pub fn voxels(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn item_len(&self) -> usize {
        self.c * self.voxels()
    }
}

pub(crate) const TAPS: usize = 27;

fn im2col(input: &[f32], dims: VolumeDims, cols: &mut [f64]) {
    let VolumeDims { c, d, h, w, .. } = dims;
    let p = dims.voxels();
    debug_assert_eq!(cols.len(), c * TAPS * p);
    for ci in 0..c {
        let chan = &input[ci * p..(ci + 1) * p];
        for kd in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let row = ci * TAPS + kd * 9 + kh * 3 + kw;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for z in 0..d {
                        let sz = z as isize + kd as isize - 1;
                        for y in 0..h {
                            let sy = y as isize + kh as isize - 1;
                            let out = &mut dst[(z * h + y) * w..(z * h + y + 1) * w];
                            if sz < 0 || sz >= d as isize || sy < 0 || sy >= h as isize {
                                out.fill(0.0);
                                continue;
                            }
                            let src = &chan[(sz as usize * h + sy as usize) * w..][..w];
                            for (x, o) in out.iter_mut().enumerate() {
                                let sx = x as isize + kw as isize - 1;
                                *o = if sx < 0 || sx >= w as isize {
                                    0.0
                                } else {
                                    src[sx as usize] as f64
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], dims: VolumeDims, grad_input: &mut [f64]) {
    let VolumeDims { c, d, h, w, .. } = dims;
    let p = dims.voxels();
    for ci in 0..c {
        let chan = &mut grad_input[ci * p..(ci + 1) * p];
        for kd in 0..3 {
            for kh in 0..3 {
                for kw in 0..3 {
                    let row = ci * TAPS + kd * 9 + kh * 3 + kw;
                    let src = &cols[row * p..(row + 1) * p];
                    for z in 0..d {
                        let sz = z as isize + kd as isize - 1;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + kh as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let dst = &mut chan[(sz as usize * h + sy as usize) * w..][..w];
                            let g = &src[(z * h + y) * w..][..w];
                            for x in 0..w {
                                let sx = x as isize + kw as isize - 1;
                                if sx >= 0 && sx < w as isize {
                                    dst[sx as usize] += g[x];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] = a[m x k] * b[k x n] (+ c if accumulate)`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    // SAFETY: strides describe views inside the provided slices; callers size
    // every buffer as m*k, k*n and m*n respectively.
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
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv3d_forward(
    input: &[f32],
    dims: VolumeDims,
    kernels: &[f32],
    bias: &[f32],
    c_out: usize,
) -> Vec<f32> {
    let p = dims.voxels();
    let kdim = dims.c * TAPS;
    let k64: Vec<f64> = kernels.iter().map(|&v| v as f64).collect();
    let items = parallel::map_range(Exec::Parallel, dims.n, |n| {
        let x = &input[n * dims.item_len()..(n + 1) * dims.item_len()];
        let mut cols = vec![0.0f64; kdim * p];
        im2col(x, dims, &mut cols);
        let mut out = vec![0.0f64; c_out * p];
        gemm(
            c_out,
            kdim,
            p,
            &k64,
            (kdim, 1),
            &cols,
            (p, 1),
            &mut out,
            false,
        );
        out.chunks(p)
            .zip(bias)
            .flat_map(|(row, &b)| row.iter().map(move |&v| (v + b as f64) as f32))
            .collect::<Vec<f32>>()
    });
    items.concat()
}

pub(crate) struct ConvGrads {
    pub input: Vec<f32>,
    pub kernels: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn conv3d_backward(
    input: &[f32],
    dims: VolumeDims,
    kernels: &[f32],
    c_out: usize,
    grad_out: &[f32],
) -> ConvGrads {
    let p = dims.voxels();
    let kdim = dims.c * TAPS;
    let k64: Vec<f64> = kernels.iter().map(|&v| v as f64).collect();
    let per_item = parallel::map_range(Exec::Parallel, dims.n, |n| {
        let x = &input[n * dims.item_len()..(n + 1) * dims.item_len()];
        let g: Vec<f64> = grad_out[n * c_out * p..(n + 1) * c_out * p]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let mut cols = vec![0.0f64; kdim * p];
        im2col(x, dims, &mut cols);

        let mut dk = vec![0.0f64; c_out * kdim];
        gemm(c_out, p, kdim, &g, (p, 1), &cols, (1, p), &mut dk, false);

        // reuse the im2col buffer for the column gradient
        gemm(
            kdim,
            c_out,
            p,
            &k64,
            (1, kdim),
            &g,
            (p, 1),
            &mut cols,
            false,
        );
        let mut dx = vec![0.0f64; dims.item_len()];
        col2im(&cols, dims, &mut dx);

        let db: Vec<f64> = g.chunks(p).map(|row| row.iter().sum()).collect();
        (dx, dk, db)
    });

    let mut dk = vec![0.0f64; c_out * kdim];
    let mut db = vec![0.0f64; c_out];
    let mut dx = Vec::with_capacity(input.len());
    for (x, k, b) in per_item {
        dx.extend(x.into_iter().map(|v| v as f32));
        dk.iter_mut().zip(k).for_each(|(a, v)| *a += v);
        db.iter_mut().zip(b).for_each(|(a, v)| *a += v);
    }
    ConvGrads {
        input: dx,
        kernels: dk.into_iter().map(|v| v as f32).collect(),
        bias: db.into_iter().map(|v| v as f32).collect(),
    }
}

/// Returns pooled values and, for every output voxel, the flat input index of
/// the first maximum of its 2x2x2 block in row-major order.
pub(crate) fn maxpool3d_forward(input: &[f32], dims: VolumeDims) -> (Vec<f32>, Vec<u32>) {
    let (od, oh, ow) = (dims.d / 2, dims.h / 2, dims.w / 2);
    let planes = dims.n * dims.c;
    let mut values = Vec::with_capacity(planes * od * oh * ow);
    let mut argmax = Vec::with_capacity(values.capacity());
    for plane in 0..planes {
        let base = plane * dims.voxels();
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = base
                                    + ((2 * z + dz) * dims.h + (2 * y + dy)) * dims.w
                                    + (2 * x + dx);
                                let v = input[idx];
                                if best_idx == usize::MAX || v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    values.push(best);
                    argmax.push(best_idx as u32);
                }
            }
        }
    }
    (values, argmax)
}

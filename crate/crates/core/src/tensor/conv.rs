//! Convolution kernels: im2col + gemm per sample, parallelized over the
//! batch. Chunking per sample keeps results bit-identical regardless of
//! thread count.

use rayon::prelude::*;

use super::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dDims {
    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

/// Safe gemm wrapper: `c[m,n] = alpha * a[m,k] * b[k,n] + beta * c`, all
/// row-major unless `a_t`/`b_t` request a transposed view.
fn gemm<E: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: &[E],
    a_t: bool,
    b: &[E],
    b_t: bool,
    beta: E,
    c: &mut [E],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        E::gemm(
            m,
            k,
            n,
            alpha,
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

/// Unfolds one sample `[C,H,W]` into a `[C*kh*kw, oh*ow]` patch matrix.
fn im2col<E: Scalar>(d: &Conv2dDims, input: &[E], col: &mut [E]) {
    debug_assert_eq!(input.len(), d.c_in * d.h * d.w);
    debug_assert_eq!(col.len(), d.col_rows() * d.out_plane());
    let pad = d.pad as isize;
    for ci in 0..d.c_in {
        let in_chan = &input[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let col_row = &mut col[row * d.out_plane()..(row + 1) * d.out_plane()];
                for oy in 0..d.oh {
                    let iy = oy as isize + ky as isize - pad;
                    let dst = &mut col_row[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(E::zero());
                        continue;
                    }
                    let src_row = &in_chan[iy as usize * d.w..(iy as usize + 1) * d.w];
                    // valid ox range: 0 <= ox + kx - pad < w
                    let shift = kx as isize - pad;
                    let ox_lo = (-shift).max(0) as usize;
                    let ox_hi = ((d.w as isize - shift).min(d.ow as isize)).max(0) as usize;
                    dst[..ox_lo].fill(E::zero());
                    dst[ox_hi..].fill(E::zero());
                    if ox_lo < ox_hi {
                        let src_lo = (ox_lo as isize + shift) as usize;
                        dst[ox_lo..ox_hi]
                            .copy_from_slice(&src_row[src_lo..src_lo + (ox_hi - ox_lo)]);
                    }
                }
            }
        }
    }
}

/// Scatter-adds a `[C*kh*kw, oh*ow]` patch matrix back into `[C,H,W]`.
fn col2im<E: Scalar>(d: &Conv2dDims, col: &[E], input_grad: &mut [E]) {
    let pad = d.pad as isize;
    for ci in 0..d.c_in {
        let in_chan = &mut input_grad[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let col_row = &col[row * d.out_plane()..(row + 1) * d.out_plane()];
                for oy in 0..d.oh {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &col_row[oy * d.ow..(oy + 1) * d.ow];
                    let shift = kx as isize - pad;
                    let ox_lo = (-shift).max(0) as usize;
                    let ox_hi = ((d.w as isize - shift).min(d.ow as isize)).max(0) as usize;
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let dst_lo = (ox_lo as isize + shift) as usize;
                    let dst_row =
                        &mut in_chan[iy as usize * d.w + dst_lo..iy as usize * d.w + dst_lo + (ox_hi - ox_lo)];
                    for (dv, sv) in dst_row.iter_mut().zip(&src[ox_lo..ox_hi]) {
                        *dv += *sv;
                    }
                }
            }
        }
    }
}

/// Stride-1 conv2d forward. `weight` is `[c_out, c_in, kh, kw]`.
pub(crate) fn conv2d_forward<E: Scalar>(
    d: &Conv2dDims,
    input: &[E],
    weight: &[E],
    bias: Option<&[E]>,
    output: &mut [E],
) {
    let in_sz = d.c_in * d.h * d.w;
    let out_sz = d.c_out * d.out_plane();
    output
        .par_chunks_mut(out_sz)
        .zip(input.par_chunks(in_sz))
        .for_each(|(out_s, in_s)| {
            let mut col = vec![E::zero(); d.col_rows() * d.out_plane()];
            im2col(d, in_s, &mut col);
            gemm(
                d.c_out,
                d.col_rows(),
                d.out_plane(),
                E::one(),
                weight,
                false,
                &col,
                false,
                E::zero(),
                out_s,
            );
            if let Some(b) = bias {
                for co in 0..d.c_out {
                    let bv = b[co];
                    for v in &mut out_s[co * d.out_plane()..(co + 1) * d.out_plane()] {
                        *v += bv;
                    }
                }
            }
        });
}

pub(crate) struct Conv2dGrads<E> {
    pub input: Option<Vec<E>>,
    pub weight: Option<Vec<E>>,
    pub bias: Option<Vec<E>>,
}

/// Conv2d vector-Jacobian products. Each requested gradient is computed
/// per-sample and reduced in batch order.
pub(crate) fn conv2d_backward<E: Scalar>(
    d: &Conv2dDims,
    input: &[E],
    weight: &[E],
    grad_out: &[E],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> Conv2dGrads<E> {
    let in_sz = d.c_in * d.h * d.w;
    let out_sz = d.c_out * d.out_plane();
    let rows = d.col_rows();

    let grad_input = if need_input {
        let mut gi = vec![E::zero(); input.len()];
        gi.par_chunks_mut(in_sz)
            .zip(grad_out.par_chunks(out_sz))
            .for_each(|(gi_s, go_s)| {
                let mut dcol = vec![E::zero(); rows * d.out_plane()];
                // dcol = W^T * dout
                gemm(
                    rows,
                    d.c_out,
                    d.out_plane(),
                    E::one(),
                    weight,
                    true,
                    go_s,
                    false,
                    E::zero(),
                    &mut dcol,
                );
                col2im(d, &dcol, gi_s);
            });
        Some(gi)
    } else {
        None
    };

    let grad_weight = if need_weight {
        let partials: Vec<Vec<E>> = input
            .par_chunks(in_sz)
            .zip(grad_out.par_chunks(out_sz))
            .map(|(in_s, go_s)| {
                let mut col = vec![E::zero(); rows * d.out_plane()];
                im2col(d, in_s, &mut col);
                let mut gw = vec![E::zero(); d.c_out * rows];
                // dW = dout * col^T
                gemm(
                    d.c_out,
                    d.out_plane(),
                    rows,
                    E::one(),
                    go_s,
                    false,
                    &col,
                    true,
                    E::zero(),
                    &mut gw,
                );
                gw
            })
            .collect();
        let mut gw = vec![E::zero(); d.c_out * rows];
        for p in &partials {
            for (a, b) in gw.iter_mut().zip(p) {
                *a += *b;
            }
        }
        Some(gw)
    } else {
        None
    };

    let grad_bias = if need_bias {
        let mut gb = vec![E::zero(); d.c_out];
        for go_s in grad_out.chunks(out_sz) {
            for co in 0..d.c_out {
                let mut acc = E::zero();
                for &v in &go_s[co * d.out_plane()..(co + 1) * d.out_plane()] {
                    acc += v;
                }
                gb[co] += acc;
            }
        }
        Some(gb)
    } else {
        None
    };

    Conv2dGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    }
}

/// Transposed-conv dims; stride is fixed at 2 so `oh = (h-1)*2 + kh`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvT2dDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) const CONV_T_STRIDE: usize = 2;

impl ConvT2dDims {
    fn col_rows(&self) -> usize {
        self.c_out * self.kh * self.kw
    }
    fn in_plane(&self) -> usize {
        self.h * self.w
    }
}

/// Scatter for transposed conv: col `[c_out*kh*kw, h*w]` into `[c_out, oh, ow]`.
fn scatter_t<E: Scalar>(d: &ConvT2dDims, col: &[E], out: &mut [E]) {
    for co in 0..d.c_out {
        let out_chan = &mut out[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (co * d.kh + ky) * d.kw + kx;
                let col_row = &col[row * d.in_plane()..(row + 1) * d.in_plane()];
                for iy in 0..d.h {
                    let oy = iy * CONV_T_STRIDE + ky;
                    let out_row = &mut out_chan[oy * d.ow..(oy + 1) * d.ow];
                    let src = &col_row[iy * d.w..(iy + 1) * d.w];
                    for (ix, &v) in src.iter().enumerate() {
                        out_row[ix * CONV_T_STRIDE + kx] += v;
                    }
                }
            }
        }
    }
}

/// Gather for transposed conv backward: inverse indexing of [`scatter_t`].
fn gather_t<E: Scalar>(d: &ConvT2dDims, grad_out: &[E], col: &mut [E]) {
    for co in 0..d.c_out {
        let go_chan = &grad_out[co * d.oh * d.ow..(co + 1) * d.oh * d.ow];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (co * d.kh + ky) * d.kw + kx;
                let col_row = &mut col[row * d.in_plane()..(row + 1) * d.in_plane()];
                for iy in 0..d.h {
                    let oy = iy * CONV_T_STRIDE + ky;
                    let go_row = &go_chan[oy * d.ow..(oy + 1) * d.ow];
                    let dst = &mut col_row[iy * d.w..(iy + 1) * d.w];
                    for (ix, v) in dst.iter_mut().enumerate() {
                        *v = go_row[ix * CONV_T_STRIDE + kx];
                    }
                }
            }
        }
    }
}

/// Transposed conv2d forward, stride 2. `weight` is `[c_in, c_out, kh, kw]`.
pub(crate) fn conv_t2d_forward<E: Scalar>(
    d: &ConvT2dDims,
    input: &[E],
    weight: &[E],
    bias: Option<&[E]>,
    output: &mut [E],
) {
    let in_sz = d.c_in * d.in_plane();
    let out_sz = d.c_out * d.oh * d.ow;
    output
        .par_chunks_mut(out_sz)
        .zip(input.par_chunks(in_sz))
        .for_each(|(out_s, in_s)| {
            let mut col = vec![E::zero(); d.col_rows() * d.in_plane()];
            // col = W^T * in, with W viewed as [c_in, c_out*kh*kw]
            gemm(
                d.col_rows(),
                d.c_in,
                d.in_plane(),
                E::one(),
                weight,
                true,
                in_s,
                false,
                E::zero(),
                &mut col,
            );
            out_s.fill(E::zero());
            scatter_t(d, &col, out_s);
            if let Some(b) = bias {
                for co in 0..d.c_out {
                    let bv = b[co];
                    for v in &mut out_s[co * d.oh * d.ow..(co + 1) * d.oh * d.ow] {
                        *v += bv;
                    }
                }
            }
        });
}

pub(crate) fn conv_t2d_backward<E: Scalar>(
    d: &ConvT2dDims,
    input: &[E],
    weight: &[E],
    grad_out: &[E],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> Conv2dGrads<E> {
    let in_sz = d.c_in * d.in_plane();
    let out_sz = d.c_out * d.oh * d.ow;
    let rows = d.col_rows();

    let grad_input = if need_input {
        let mut gi = vec![E::zero(); input.len()];
        gi.par_chunks_mut(in_sz)
            .zip(grad_out.par_chunks(out_sz))
            .for_each(|(gi_s, go_s)| {
                let mut dcol = vec![E::zero(); rows * d.in_plane()];
                gather_t(d, go_s, &mut dcol);
                // din = W * dcol
                gemm(
                    d.c_in,
                    rows,
                    d.in_plane(),
                    E::one(),
                    weight,
                    false,
                    &dcol,
                    false,
                    E::zero(),
                    gi_s,
                );
            });
        Some(gi)
    } else {
        None
    };

    let grad_weight = if need_weight {
        let partials: Vec<Vec<E>> = input
            .par_chunks(in_sz)
            .zip(grad_out.par_chunks(out_sz))
            .map(|(in_s, go_s)| {
                let mut dcol = vec![E::zero(); rows * d.in_plane()];
                gather_t(d, go_s, &mut dcol);
                let mut gw = vec![E::zero(); d.c_in * rows];
                // dW = in * dcol^T
                gemm(
                    d.c_in,
                    d.in_plane(),
                    rows,
                    E::one(),
                    in_s,
                    false,
                    &dcol,
                    true,
                    E::zero(),
                    &mut gw,
                );
                gw
            })
            .collect();
        let mut gw = vec![E::zero(); d.c_in * rows];
        for p in &partials {
            for (a, b) in gw.iter_mut().zip(p) {
                *a += *b;
            }
        }
        Some(gw)
    } else {
        None
    };

    let grad_bias = if need_bias {
        let mut gb = vec![E::zero(); d.c_out];
        for go_s in grad_out.chunks(out_sz) {
            for co in 0..d.c_out {
                let mut acc = E::zero();
                for &v in &go_s[co * d.oh * d.ow..(co + 1) * d.oh * d.ow] {
                    acc += v;
                }
                gb[co] += acc;
            }
        }
        Some(gb)
    } else {
        None
    };

    Conv2dGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    }
}

//! Forward/backward kernels for the heavier ops (convolution, group norm,
//! attention-style batched products).

use crate::scalar::{matmul_into, MatRef};
use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize, groups: usize) -> Self {
        let (n, cin, h, wd) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("conv2d input must be 4-D, got {x:?}"),
        };
        let (cout, cpg, kh, kw) = match *w {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => panic!("conv2d weight must be 4-D, got {w:?}"),
        };
        assert!(stride >= 1 && groups >= 1);
        assert_eq!(cin % groups, 0, "input channels not divisible by groups");
        assert_eq!(cout % groups, 0, "output channels not divisible by groups");
        assert_eq!(cpg, cin / groups, "weight in-channels {cpg} vs input {cin}/{groups}");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "kernel larger than padded input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        Self { n, cin, h, w: wd, cout, kh, kw, stride, pad, groups, oh, ow }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kj - pad`
/// falls inside `[0, w)`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let off = kj as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let hi_excl = (g.w as isize - off + s - 1).div_euclid(s).max(0) as usize;
    (lo.min(g.ow), hi_excl.min(g.ow).max(lo.min(g.ow)))
}

/// Unfold one sample into rows of a column matrix with leading dimension
/// `ld`, starting at column `off`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T], ld: usize, off: usize) {
    let n_out = g.out_hw();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ld + off..row * ld + off + n_out];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let start = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (v, ix) in line[lo..hi].iter_mut().zip((start..).step_by(g.stride)) {
                                *v = src[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T], ld: usize, off: usize) {
    let n_out = g.out_hw();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld + off..row * ld + off + n_out];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + kj - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (&v, ix) in line.iter().zip((start..).step_by(g.stride)) {
                        dst[ix] = dst[ix] + v;
                    }
                }
            }
        }
    }
}

/// `[N, C, P]` to `[C, N * P]`.
fn to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            out[ch * n * p + i * p..ch * n * p + (i + 1) * p].copy_from_slice(&x[(i * c + ch) * p..(i * c + ch + 1) * p]);
        }
    }
    out
}

fn from_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            out[(i * c + ch) * p..(i * c + ch + 1) * p].copy_from_slice(&x[ch * n * p + i * p..ch * n * p + (i + 1) * p]);
        }
    }
    out
}

/// Column matrix `[cin * kh * kw, N * oh * ow]` for the whole batch.
fn batch_cols<T: Scalar>(x: &Tensor<T>, g: &ConvGeom) -> Vec<T> {
    let n_out = g.out_hw();
    if g.is_pointwise() {
        return to_channel_major(x.data(), g.n, g.cin, n_out);
    }
    let ld = g.n * n_out;
    let in_plane = g.cin * g.h * g.w;
    let mut cols = vec![T::zero(); g.col_rows() * ld];
    for i in 0..g.n {
        im2col(&x.data()[i * in_plane..(i + 1) * in_plane], g, &mut cols, ld, i * n_out);
    }
    cols
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let n_out = g.out_hw();
    let ld = g.n * n_out;
    let k_rows = g.col_rows() / g.groups;
    let co_g = g.cout / g.groups;
    let cols = batch_cols(x, g);
    let mut out = vec![T::zero(); g.cout * ld];
    for grp in 0..g.groups {
        let wg = &w.data()[grp * co_g * k_rows..(grp + 1) * co_g * k_rows];
        matmul_into(
            MatRef::new(wg, co_g, k_rows),
            MatRef::new(&cols[grp * k_rows * ld..(grp + 1) * k_rows * ld], k_rows, ld),
            T::zero(),
            &mut out[grp * co_g * ld..(grp + 1) * co_g * ld],
        );
    }
    if let Some(b) = b {
        for (co, &bv) in b.data().iter().enumerate() {
            for v in &mut out[co * ld..(co + 1) * ld] {
                *v = *v + bv;
            }
        }
    }
    Tensor::from_vec(vec![g.n, g.cout, g.oh, g.ow], from_channel_major(&out, g.n, g.cout, n_out))
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_dx, need_dw, need_db) = need;
    let n_out = g.out_hw();
    let ld = g.n * n_out;
    let in_plane = g.cin * g.h * g.w;
    let k_rows = g.col_rows() / g.groups;
    let co_g = g.cout / g.groups;
    let gy_cm = to_channel_major(gy.data(), g.n, g.cout, n_out);

    let dw = need_dw.then(|| {
        let cols = batch_cols(x, g);
        let mut dw = vec![T::zero(); w.numel()];
        for grp in 0..g.groups {
            matmul_into(
                MatRef::new(&gy_cm[grp * co_g * ld..(grp + 1) * co_g * ld], co_g, ld),
                MatRef::t(&cols[grp * k_rows * ld..(grp + 1) * k_rows * ld], k_rows, ld),
                T::zero(),
                &mut dw[grp * co_g * k_rows..(grp + 1) * co_g * k_rows],
            );
        }
        Tensor::from_vec(w.shape().to_vec(), dw)
    });

    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); g.col_rows() * ld];
        for grp in 0..g.groups {
            let wg = &w.data()[grp * co_g * k_rows..(grp + 1) * co_g * k_rows];
            matmul_into(
                MatRef::t(wg, co_g, k_rows),
                MatRef::new(&gy_cm[grp * co_g * ld..(grp + 1) * co_g * ld], co_g, ld),
                T::zero(),
                &mut dcols[grp * k_rows * ld..(grp + 1) * k_rows * ld],
            );
        }
        let dx = if g.is_pointwise() {
            from_channel_major(&dcols, g.n, g.cin, n_out)
        } else {
            let mut dx = vec![T::zero(); g.n * in_plane];
            for i in 0..g.n {
                col2im_add(&dcols, g, &mut dx[i * in_plane..(i + 1) * in_plane], ld, i * n_out);
            }
            dx
        };
        Tensor::from_vec(x.shape().to_vec(), dx)
    });

    let db = need_db.then(|| {
        let db = (0..g.cout).map(|co| gy_cm[co * ld..(co + 1) * ld].iter().copied().sum()).collect();
        Tensor::from_vec(vec![g.cout], db)
    });

    ConvGrads { dx, dw, db }
}

/// Per-(sample, group) mean and reciprocal std.
pub(crate) fn group_stats<T: Scalar>(x: &Tensor<T>, groups: usize, eps: f64) -> Vec<(T, T)> {
    let (n, c, h, w) = x.dims4();
    assert_eq!(c % groups, 0, "channels {c} not divisible by {groups} groups");
    let len = c / groups * h * w;
    let mut stats = Vec::with_capacity(n * groups);
    for chunk in x.data().chunks(len) {
        let m = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / len as f64;
        let var = chunk.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / len as f64;
        stats.push((T::of(m), T::of(1.0 / (var + eps).sqrt())));
    }
    stats
}

pub(crate) fn group_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> Tensor<T> {
    let (_, c, h, w) = x.dims4();
    let stats = group_stats(x, groups, eps);
    let cpg = c / groups;
    let hw = h * w;
    let mut out = x.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let ch = (idx / hw) % c;
        let (m, r) = stats[idx / (cpg * hw)];
        *v = (*v - m) * r * gamma.data()[ch] + beta.data()[ch];
    }
    out
}

pub(crate) fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    gy: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (_, c, h, w) = x.dims4();
    let stats = group_stats(x, groups, eps);
    let cpg = c / groups;
    let hw = h * w;
    let len = cpg * hw;
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (gi, &(m, r)) in stats.iter().enumerate() {
        let base = gi * len;
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for j in 0..len {
            let ch = (base + j) / hw % c;
            let xhat = (x.data()[base + j] - m) * r;
            let g = gy.data()[base + j];
            dgamma[ch] = dgamma[ch] + g * xhat;
            dbeta[ch] = dbeta[ch] + g;
            let gx = g * gamma.data()[ch];
            sum_g = sum_g + gx;
            sum_gx = sum_gx + gx * xhat;
        }
        let nf = T::of(len as f64);
        for j in 0..len {
            let ch = (base + j) / hw % c;
            let xhat = (x.data()[base + j] - m) * r;
            let gx = gy.data()[base + j] * gamma.data()[ch];
            dx[base + j] = r * (gx - sum_g / nf - xhat * sum_gx / nf);
        }
    }
    (
        Tensor::from_vec(x.shape().to_vec(), dx),
        Tensor::from_vec(vec![c], dgamma),
        Tensor::from_vec(vec![c], dbeta),
    )
}

/// Batched `[b, m, k] x [b, k, n]`, each operand optionally stored transposed
/// in its last two axes.
pub(crate) fn bmm<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Tensor<T> {
    let (ba, ar, ac) = dims3(a);
    let (bb, br, bc) = dims3(b);
    assert_eq!(ba, bb, "bmm batch mismatch");
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "bmm inner mismatch");
    let mut out = vec![T::zero(); ba * m * n];
    for i in 0..ba {
        let ad = &a.data()[i * ar * ac..(i + 1) * ar * ac];
        let bd = &b.data()[i * br * bc..(i + 1) * br * bc];
        let am = if ta { MatRef::t(ad, ar, ac) } else { MatRef::new(ad, ar, ac) };
        let bm = if tb { MatRef::t(bd, br, bc) } else { MatRef::new(bd, br, bc) };
        matmul_into(am, bm, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
    }
    Tensor::from_vec(vec![ba, m, n], out)
}

pub(crate) fn dims3<T: Scalar>(t: &Tensor<T>) -> (usize, usize, usize) {
    match *t.shape() {
        [b, m, n] => (b, m, n),
        [m, n] => (1, m, n),
        _ => panic!("expected a 2-D or 3-D tensor, got {:?}", t.shape()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeom) -> Vec<f64> {
        let cpg = g.cin / g.groups;
        let opg = g.cout / g.groups;
        let mut out = vec![0.0; g.n * g.cout * g.oh * g.ow];
        for n in 0..g.n {
            for co in 0..g.cout {
                let grp = co / opg;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut s = 0.0;
                        for ci in 0..cpg {
                            let c = grp * cpg + ci;
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    s += x.data()[((n * g.cin + c) * g.h + iy as usize) * g.w + ix as usize]
                                        * w.data()[((co * cpg + ci) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                        out[((n * g.cout + co) * g.oh + oy) * g.ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn conv_matches_direct_loops(
            n in 1usize..3, groups in 1usize..3, cpg in 1usize..3, opg in 1usize..3,
            h in 3usize..7, w in 3usize..7, k in prop_oneof![Just(1usize), Just(3)],
            stride in 1usize..3, pad in 0usize..2, seed in 0u64..1000,
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn(vec![n, groups * cpg, h, w], &mut rng);
            let wt = Tensor::<f64>::randn(vec![groups * opg, cpg, k, k], &mut rng);
            let g = ConvGeom::new(x.shape(), wt.shape(), stride, pad, groups);
            let fast = conv2d_forward(&x, &wt, None, &g);
            let slow = naive_conv(&x, &wt, &g);
            for (a, b) in fast.data().iter().zip(&slow) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let x = Tensor::from_vec(vec![1, 2, 1, 2], vec![1.0f64, 3.0, 10.0, 30.0]);
        let y = group_norm_forward(&x, &Tensor::full(vec![2], 1.0), &Tensor::zeros(vec![2]), 2, 0.0);
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[3] - 1.0).abs() < 1e-12);
    }
}

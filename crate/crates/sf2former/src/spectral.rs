//! Complex grids, 1D/2D discrete Fourier transforms, and the learnable
//! global-filter operation with its gradient path.
//!
//! Conventions: the forward transform is unnormalized, the inverse carries
//! the full `1/(H*W)` factor, and filtering returns the real part of the
//! inverse transform. Power-of-two lengths run the iterative radix-2 kernel;
//! anything else (the full-scale 14x14 token grid in particular) goes through
//! Bluestein's chirp-z reduction onto a padded radix-2 transform.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Per-channel complex spectrum over an `[H, W, D]` token grid, stored as
/// separate real/imaginary buffers with channel-fastest layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid<T> {
    h: usize,
    w: usize,
    d: usize,
    pub re: Vec<T>,
    pub im: Vec<T>,
}

impl<T: Scalar> ComplexGrid<T> {
    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        ComplexGrid {
            h,
            w,
            d,
            re: vec![T::zero(); h * w * d],
            im: vec![T::zero(); h * w * d],
        }
    }

    pub fn new(h: usize, w: usize, d: usize, re: Vec<T>, im: Vec<T>) -> Result<Self> {
        if re.len() != h * w * d || im.len() != re.len() {
            return Err(Error::shape(format!(
                "complex grid [{h}, {w}, {d}] needs {} values, got re {} / im {}",
                h * w * d,
                re.len(),
                im.len()
            )));
        }
        Ok(ComplexGrid { h, w, d, re, im })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    fn at(&self, i: usize, j: usize, ch: usize) -> usize {
        (i * self.w + j) * self.d + ch
    }
}

/// Unnormalized per-channel 2D DFT of a real `[H, W, D]` grid.
pub fn fft2<T: Scalar>(x: &[T], h: usize, w: usize, d: usize) -> ComplexGrid<T> {
    assert_eq!(x.len(), h * w * d, "fft2: grid length mismatch");
    let mut out = ComplexGrid::zeros(h, w, d);
    let mut pre = vec![T::zero(); h * w];
    let mut pim = vec![T::zero(); h * w];
    for ch in 0..d {
        for idx in 0..h * w {
            pre[idx] = x[idx * d + ch];
            pim[idx] = T::zero();
        }
        fft2_plane(&mut pre, &mut pim, h, w, false);
        for idx in 0..h * w {
            out.re[idx * d + ch] = pre[idx];
            out.im[idx * d + ch] = pim[idx];
        }
    }
    out
}

/// Inverse per-channel 2D DFT scaled by `1/(H*W)`; returns the real part.
pub fn ifft2<T: Scalar>(spectrum: &ComplexGrid<T>) -> Vec<T> {
    let full = ifft2_complex(spectrum);
    full.re
}

/// Inverse per-channel 2D DFT scaled by `1/(H*W)`, keeping the imaginary part.
pub fn ifft2_complex<T: Scalar>(spectrum: &ComplexGrid<T>) -> ComplexGrid<T> {
    let (h, w, d) = spectrum.dims();
    let scale = T::one() / T::from_f64((h * w) as f64);
    let mut out = ComplexGrid::zeros(h, w, d);
    let mut pre = vec![T::zero(); h * w];
    let mut pim = vec![T::zero(); h * w];
    for ch in 0..d {
        for idx in 0..h * w {
            pre[idx] = spectrum.re[idx * d + ch];
            pim[idx] = spectrum.im[idx * d + ch];
        }
        fft2_plane(&mut pre, &mut pim, h, w, true);
        for idx in 0..h * w {
            out.re[idx * d + ch] = pre[idx] * scale;
            out.im[idx * d + ch] = pim[idx] * scale;
        }
    }
    out
}

/// `real(ifft2(fft2(x) . K))` — the filter layer as a pure function.
pub fn global_filter<T: Scalar>(x: &[T], h: usize, w: usize, d: usize, k: &ComplexGrid<T>) -> Result<Vec<T>> {
    if k.dims() != (h, w, d) {
        return Err(Error::shape(format!(
            "global_filter: grid [{h}, {w}, {d}] vs filter {:?}",
            k.dims()
        )));
    }
    Ok(filter_real_grid(x, h, w, d, &k.re, &k.im))
}

/// Filter forward on raw buffers (graph-op entry point).
pub(crate) fn filter_real_grid<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    d: usize,
    k_re: &[T],
    k_im: &[T],
) -> Vec<T> {
    let scale = T::one() / T::from_f64((h * w) as f64);
    let mut out = vec![T::zero(); h * w * d];
    let mut pre = vec![T::zero(); h * w];
    let mut pim = vec![T::zero(); h * w];
    for ch in 0..d {
        for idx in 0..h * w {
            pre[idx] = x[idx * d + ch];
            pim[idx] = T::zero();
        }
        fft2_plane(&mut pre, &mut pim, h, w, false);
        for idx in 0..h * w {
            let (kr, ki) = (k_re[idx * d + ch], k_im[idx * d + ch]);
            let (xr, xi) = (pre[idx], pim[idx]);
            pre[idx] = xr * kr - xi * ki;
            pim[idx] = xr * ki + xi * kr;
        }
        fft2_plane(&mut pre, &mut pim, h, w, true);
        for idx in 0..h * w {
            out[idx * d + ch] = pre[idx] * scale;
        }
    }
    out
}

pub(crate) struct FilterGrads<T> {
    pub dx: Vec<T>,
    pub dk_re: Vec<T>,
    pub dk_im: Vec<T>,
}

/// Gradients of the filter layer given the upstream gradient `g`:
/// with `G = fft2(g)` and `X = fft2(x)`,
/// `dx = real(ifft2(G . conj(K)))` and `dK = conj(X) . G / (H*W)`.
pub(crate) fn filter_backward<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    d: usize,
    k_re: &[T],
    k_im: &[T],
    g: &[T],
) -> FilterGrads<T> {
    let n = h * w;
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut dx = vec![T::zero(); n * d];
    let mut dk_re = vec![T::zero(); n * d];
    let mut dk_im = vec![T::zero(); n * d];
    let mut gre = vec![T::zero(); n];
    let mut gim = vec![T::zero(); n];
    let mut xre = vec![T::zero(); n];
    let mut xim = vec![T::zero(); n];
    for ch in 0..d {
        for idx in 0..n {
            gre[idx] = g[idx * d + ch];
            gim[idx] = T::zero();
            xre[idx] = x[idx * d + ch];
            xim[idx] = T::zero();
        }
        fft2_plane(&mut gre, &mut gim, h, w, false);
        fft2_plane(&mut xre, &mut xim, h, w, false);
        for idx in 0..n {
            let (gr, gi) = (gre[idx], gim[idx]);
            let (xr, xi) = (xre[idx], xim[idx]);
            // dK = conj(X) * G / n
            dk_re[idx * d + ch] = (xr * gr + xi * gi) * inv_n;
            dk_im[idx * d + ch] = (xr * gi - xi * gr) * inv_n;
            // overwrite the G plane with G * conj(K) for the dx pass
            let (kr, ki) = (k_re[idx * d + ch], k_im[idx * d + ch]);
            gre[idx] = gr * kr + gi * ki;
            gim[idx] = gi * kr - gr * ki;
        }
        fft2_plane(&mut gre, &mut gim, h, w, true);
        for idx in 0..n {
            dx[idx * d + ch] = gre[idx] * inv_n;
        }
    }
    FilterGrads { dx, dk_re, dk_im }
}

/// `K'(u,v) = (K(u,v) + conj(K(-u mod H, -v mod W)))/2`. Filtering with `K'`
/// equals filtering with `K` once the real part is taken.
pub fn hermitian_symmetrize<T: Scalar>(k: &ComplexGrid<T>) -> ComplexGrid<T> {
    let (h, w, d) = k.dims();
    let half = T::from_f64(0.5);
    let mut out = ComplexGrid::zeros(h, w, d);
    for i in 0..h {
        for j in 0..w {
            let mi = (h - i) % h;
            let mj = (w - j) % w;
            for ch in 0..d {
                let a = k.at(i, j, ch);
                let b = k.at(mi, mj, ch);
                out.re[a] = (k.re[a] + k.re[b]) * half;
                out.im[a] = (k.im[a] - k.im[b]) * half;
            }
        }
    }
    out
}

fn fft2_plane<T: Scalar>(re: &mut [T], im: &mut [T], h: usize, w: usize, inverse: bool) {
    for r in 0..h {
        fft1d(&mut re[r * w..(r + 1) * w], &mut im[r * w..(r + 1) * w], inverse);
    }
    let mut cre = vec![T::zero(); h];
    let mut cim = vec![T::zero(); h];
    for c in 0..w {
        for r in 0..h {
            cre[r] = re[r * w + c];
            cim[r] = im[r * w + c];
        }
        fft1d(&mut cre, &mut cim, inverse);
        for r in 0..h {
            re[r * w + c] = cre[r];
            im[r * w + c] = cim[r];
        }
    }
}

/// Unnormalized 1D DFT (forward) or unnormalized inverse (conjugate kernel).
fn fft1d<T: Scalar>(re: &mut [T], im: &mut [T], inverse: bool) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(re, im, inverse);
    } else {
        bluestein(re, im, inverse);
    }
}

fn radix2<T: Scalar>(re: &mut [T], im: &mut [T], inverse: bool) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = sign * 2.0 * std::f64::consts::PI / len as f64;
        let twiddle: Vec<(T, T)> = (0..half)
            .map(|k| {
                let a = step * k as f64;
                (T::from_f64(a.cos()), T::from_f64(a.sin()))
            })
            .collect();
        let mut i = 0;
        while i < n {
            for k in 0..half {
                let (wr, wi) = twiddle[k];
                let (ur, ui) = (re[i + k], im[i + k]);
                let (xr, xi) = (re[i + k + half], im[i + k + half]);
                let vr = xr * wr - xi * wi;
                let vi = xr * wi + xi * wr;
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + half] = ur - vr;
                im[i + k + half] = ui - vi;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// Chirp-z reduction of an arbitrary-length DFT onto a padded radix-2 one.
fn bluestein<T: Scalar>(re: &mut [T], im: &mut [T], inverse: bool) {
    if inverse {
        // conj -> forward -> conj gives the unnormalized inverse
        for v in im.iter_mut() {
            *v = -*v;
        }
        bluestein(re, im, false);
        for v in im.iter_mut() {
            *v = -*v;
        }
        return;
    }
    let n = re.len();
    let m = (2 * n - 1).next_power_of_two();
    // chirp[k] = exp(-i pi k^2 / n), with k^2 reduced mod 2n
    let chirp: Vec<(T, T)> = (0..n)
        .map(|k| {
            let q = (k * k) % (2 * n);
            let a = -std::f64::consts::PI * q as f64 / n as f64;
            (T::from_f64(a.cos()), T::from_f64(a.sin()))
        })
        .collect();
    let mut are = vec![T::zero(); m];
    let mut aim = vec![T::zero(); m];
    for k in 0..n {
        let (cr, ci) = chirp[k];
        are[k] = re[k] * cr - im[k] * ci;
        aim[k] = re[k] * ci + im[k] * cr;
    }
    let mut bre = vec![T::zero(); m];
    let mut bim = vec![T::zero(); m];
    bre[0] = chirp[0].0;
    bim[0] = -chirp[0].1;
    for k in 1..n {
        let (cr, ci) = chirp[k];
        bre[k] = cr;
        bim[k] = -ci;
        bre[m - k] = cr;
        bim[m - k] = -ci;
    }
    radix2(&mut are, &mut aim, false);
    radix2(&mut bre, &mut bim, false);
    for k in 0..m {
        let (ar, ai) = (are[k], aim[k]);
        let (br, bi) = (bre[k], bim[k]);
        are[k] = ar * br - ai * bi;
        aim[k] = ar * bi + ai * br;
    }
    radix2(&mut are, &mut aim, true);
    let scale = T::one() / T::from_f64(m as f64);
    for k in 0..n {
        let (cr, ci) = chirp[k];
        let (vr, vi) = (are[k] * scale, aim[k] * scale);
        re[k] = vr * cr - vi * ci;
        im[k] = vr * ci + vi * cr;
    }
}

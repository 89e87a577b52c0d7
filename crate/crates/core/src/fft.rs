//! 2-D real and complex discrete Fourier transforms over single planes.
//!
//! Conventions: forward transforms are unnormalized (`e^{-iθ}`), the inverse real
//! transform carries the `1/(h·w)` factor. Arbitrary sizes are supported; rustfft
//! picks mixed-radix, Rader or Bluestein plans as needed.
//!
//! The inverse real transform treats its half-spectrum input as
//!
//! `x[m,n] = 1/(hw) Σ_{k, l < w/2+1} ω_l Re(X[k,l] e^{iθ})`
//!
//! with `ω_l = 1` for the DC column (and the Nyquist column when `w` is even) and
//! `ω_l = 2` otherwise. This is the usual c2r behaviour (imaginary parts of the
//! DC/Nyquist bins are dropped along the last axis) and makes the adjoints below
//! exact for spectra that are not Hermitian-consistent.

use rustfft::num_complex::Complex;

use crate::tensor::Real;

/// Number of retained columns in a half spectrum.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Column weight `ω_l` of the inverse real transform.
pub fn column_weight(l: usize, w: usize) -> f64 {
    if l == 0 || (w % 2 == 0 && l == w / 2) {
        1.0
    } else {
        2.0
    }
}

fn transform_columns<T: Real>(
    buf: &mut [Complex<T>],
    h: usize,
    cols: usize,
    inverse: bool,
) {
    if h <= 1 {
        return;
    }
    let fft = T::fft_plan(h, inverse);
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for l in 0..cols {
        for k in 0..h {
            col[k] = buf[k * cols + l];
        }
        fft.process(&mut col);
        for k in 0..h {
            buf[k * cols + l] = col[k];
        }
    }
}

/// Half-spectrum forward transform of a real `h×w` plane; returns `(re, im)` of shape `h×(w/2+1)`.
pub fn rfft2<T: Real>(x: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    debug_assert_eq!(x.len(), h * w);
    let wf = half_width(w);
    let row_fft = T::fft_plan(w, false);
    let mut spec = vec![Complex::new(T::zero(), T::zero()); h * wf];
    let mut row = vec![Complex::new(T::zero(), T::zero()); w];
    for m in 0..h {
        for n in 0..w {
            row[n] = Complex::new(x[m * w + n], T::zero());
        }
        row_fft.process(&mut row);
        spec[m * wf..(m + 1) * wf].copy_from_slice(&row[..wf]);
    }
    transform_columns(&mut spec, h, wf, false);
    spec.into_iter().map(|z| (z.re, z.im)).unzip()
}

/// Inverse of [`rfft2`] under the weighting convention in the module docs.
pub fn irfft2<T: Real>(re: &[T], im: &[T], h: usize, w: usize) -> Vec<T> {
    let wf = half_width(w);
    debug_assert_eq!(re.len(), h * wf);
    let mut spec: Vec<Complex<T>> = re
        .iter()
        .zip(im)
        .map(|(&a, &b)| Complex::new(a, b))
        .collect();
    transform_columns(&mut spec, h, wf, true);

    let row_fft = T::fft_plan(w, true);
    let scale = T::c(1.0 / (h * w) as f64);
    let mut out = vec![T::zero(); h * w];
    let mut row = vec![Complex::new(T::zero(), T::zero()); w];
    for m in 0..h {
        let z = &spec[m * wf..(m + 1) * wf];
        for v in row.iter_mut() {
            *v = Complex::new(T::zero(), T::zero());
        }
        row[0] = Complex::new(z[0].re, T::zero());
        for l in 1..wf {
            if w % 2 == 0 && l == w / 2 {
                row[l] = Complex::new(z[l].re, T::zero());
            } else {
                row[l] = z[l];
                row[w - l] = z[l].conj();
            }
        }
        row_fft.process(&mut row);
        for n in 0..w {
            out[m * w + n] = row[n].re * scale;
        }
    }
    out
}

/// Full unnormalized forward transform of a real plane.
pub fn fft2<T: Real>(x: &[T], h: usize, w: usize) -> Vec<Complex<T>> {
    let mut buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
    let row_fft = T::fft_plan(w, false);
    for m in 0..h {
        row_fft.process(&mut buf[m * w..(m + 1) * w]);
    }
    transform_columns(&mut buf, h, w, false);
    buf
}

/// Real part of the full unnormalized inverse transform (`Σ_k X[k] e^{+iθ}`).
pub fn ifft2_real<T: Real>(spec: &[Complex<T>], h: usize, w: usize) -> Vec<T> {
    let mut buf = spec.to_vec();
    let row_fft = T::fft_plan(w, true);
    for m in 0..h {
        row_fft.process(&mut buf[m * w..(m + 1) * w]);
    }
    transform_columns(&mut buf, h, w, true);
    buf.into_iter().map(|z| z.re).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_dft(x: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
        let mut out = vec![(0.0, 0.0); h * w];
        for k in 0..h {
            for l in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for m in 0..h {
                    for n in 0..w {
                        let th = 2.0
                            * std::f64::consts::PI
                            * ((k * m) as f64 / h as f64 + (l * n) as f64 / w as f64);
                        re += x[m * w + n] * th.cos();
                        im -= x[m * w + n] * th.sin();
                    }
                }
                out[k * w + l] = (re, im);
            }
        }
        out
    }

    #[test]
    fn rfft2_matches_dense_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(h, w) in &[(4usize, 4usize), (3, 5), (8, 6), (1, 7)] {
            let x: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>() - 0.5).collect();
            let dense = dense_dft(&x, h, w);
            let (re, im) = rfft2(&x, h, w);
            let wf = half_width(w);
            for k in 0..h {
                for l in 0..wf {
                    assert!((re[k * wf + l] - dense[k * w + l].0).abs() < 1e-10);
                    assert!((im[k * wf + l] - dense[k * w + l].1).abs() < 1e-10);
                }
            }
            let full = fft2(&x, h, w);
            for (z, d) in full.iter().zip(&dense) {
                assert!((z.re - d.0).abs() < 1e-10 && (z.im - d.1).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn real_round_trip_odd_and_even() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(h, w) in &[(8usize, 8usize), (5, 7), (6, 3), (2, 2)] {
            let x: Vec<f32> = (0..h * w).map(|_| rng.random::<f32>()).collect();
            let (re, im) = rfft2(&x, h, w);
            let y = irfft2(&re, &im, h, w);
            for (a, b) in x.iter().zip(&y) {
                assert!((a - b).abs() < 1e-5, "{h}x{w}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn full_inverse_recovers_scaled_input() {
        let x = [1.0f64, -2.0, 0.5, 3.0, 0.25, -1.0];
        let spec = fft2(&x, 2, 3);
        let back = ifft2_real(&spec, 2, 3);
        for (a, b) in x.iter().zip(&back) {
            assert!((a * 6.0 - b).abs() < 1e-12);
        }
    }
}

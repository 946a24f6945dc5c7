//! Radix-2 FFT and the circular convolution/correlation built on it.
//!
//! Forward transform is unscaled, `X[k] = sum_n x[n] exp(-2*pi*i*k*n/N)`;
//! the inverse carries the `1/N` factor.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// In-place transform of a power-of-two length buffer.
pub fn fft_in_place(buf: &mut [Complex64], inverse: bool) -> Result<()> {
    let n = buf.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::FftLength(n));
    }
    if n == 1 {
        return Ok(());
    }

    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }

    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = sign * 2.0 * PI / len as f64;
        // twiddles are evaluated directly rather than by recurrence to keep round-off flat in n
        let twiddles: Vec<Complex64> = (0..half)
            .map(|k| Complex64::from_polar(1.0, step * k as f64))
            .collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * twiddles[k];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }

    if inverse {
        let scale = 1.0 / n as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
    Ok(())
}

pub fn fft(input: &[Complex64], inverse: bool) -> Result<Vec<Complex64>> {
    let mut buf = input.to_vec();
    fft_in_place(&mut buf, inverse)?;
    Ok(buf)
}

fn real_spectrum(x: &[f64]) -> Result<Vec<Complex64>> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf, false)?;
    Ok(buf)
}

/// Largest imaginary magnitude tolerated when returning to the real domain.
pub const IMAG_TOLERANCE: f64 = 1e-9;

fn to_real(buf: Vec<Complex64>) -> Vec<f64> {
    debug_assert!(
        buf.iter()
            .all(|c| c.im.abs() < IMAG_TOLERANCE * (1.0 + c.re.abs())),
        "imaginary residue above tolerance"
    );
    buf.into_iter().map(|c| c.re).collect()
}

/// `out[k] = sum_i a[i] * b[(k - i) mod m]`, evaluated in the frequency domain.
pub fn circular_convolve(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "circular_convolve",
            format!("{} vs {}", a.len(), b.len()),
        ));
    }
    let fa = real_spectrum(a)?;
    let fb = real_spectrum(b)?;
    let mut prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    fft_in_place(&mut prod, true)?;
    Ok(to_real(prod))
}

/// `out[i] = sum_k g[k] * b[(k - i) mod m]`, the adjoint of convolution with `b`.
pub fn circular_correlate(g: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if g.len() != b.len() {
        return Err(Error::shape(
            "circular_correlate",
            format!("{} vs {}", g.len(), b.len()),
        ));
    }
    let fg = real_spectrum(g)?;
    let fb = real_spectrum(b)?;
    let mut prod: Vec<Complex64> = fg.iter().zip(&fb).map(|(x, y)| x * y.conj()).collect();
    fft_in_place(&mut prod, true)?;
    Ok(to_real(prod))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(j, v)| {
                        v * Complex64::from_polar(1.0, -2.0 * PI * (k * j) as f64 / n as f64)
                    })
                    .sum()
            })
            .collect()
    }

    fn random_complex(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    fn naive_circular(a: &[f64], b: &[f64]) -> Vec<f64> {
        let m = a.len();
        (0..m)
            .map(|k| (0..m).map(|i| a[i] * b[(k + m - i) % m]).sum())
            .collect()
    }

    #[test]
    fn delta_transforms_to_ones() {
        let x = [1.0, 0.0, 0.0, 0.0].map(|v| Complex64::new(v, 0.0));
        let y = fft(&x, false).unwrap();
        for c in y {
            assert!((c - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn matches_direct_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_complex(&mut rng, 8);
        let fast = fft(&x, false).unwrap();
        let slow = naive_dft(&x);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn round_trip_all_power_of_two_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut n = 2;
        while n <= 1024 {
            let x = random_complex(&mut rng, n);
            let back = fft(&fft(&x, false).unwrap(), true).unwrap();
            let err = x
                .iter()
                .zip(&back)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "n={n} err={err}");
            n *= 2;
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(matches!(
            fft(&[Complex64::default(); 6], false),
            Err(Error::FftLength(6))
        ));
        assert!(fft(&[], false).is_err());
        assert_eq!(
            fft(&[Complex64::new(2.0, 1.0)], true).unwrap()[0],
            Complex64::new(2.0, 1.0)
        );
    }

    #[test]
    fn convolution_and_correlation_match_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for m in [1usize, 2, 4, 8, 16, 32, 64] {
            let a: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = circular_convolve(&a, &b).unwrap();
            for (x, y) in fast.iter().zip(naive_circular(&a, &b)) {
                assert!((x - y).abs() < 1e-12);
            }
            let corr = circular_correlate(&a, &b).unwrap();
            for (i, c) in corr.iter().enumerate() {
                let direct: f64 = (0..m).map(|k| a[k] * b[(k + m - i) % m]).sum();
                assert!((c - direct).abs() < 1e-12);
            }
        }
    }
}

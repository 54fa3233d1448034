//! Radix-2 decimation-in-time DFT.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Forward DFT, `A_k = sum_n W_N^{kn} a_n` with `W_N = exp(-i 2 pi / N)`.
///
/// Computed recursively on the even and odd subsequences, O(N log N).
pub fn dft(input: &[Complex64]) -> Result<Vec<Complex64>> {
    check_len(input.len())?;
    Ok(radix2(input))
}

/// Forward DFT of a real frame.
pub fn dft_real(input: &[f64]) -> Result<Vec<Complex64>> {
    let buf: Vec<Complex64> = input.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    dft(&buf)
}

/// Inverse DFT, `a_n = (1/N) sum_k W_N^{-kn} A_k`.
pub fn idft(input: &[Complex64]) -> Result<Vec<Complex64>> {
    check_len(input.len())?;
    let conj: Vec<Complex64> = input.iter().map(|c| c.conj()).collect();
    let n = input.len() as f64;
    Ok(radix2(&conj).into_iter().map(|c| c.conj() / n).collect())
}

fn check_len(len: usize) -> Result<()> {
    if len == 0 || !len.is_power_of_two() {
        return Err(Error::NotPowerOfTwo { len });
    }
    Ok(())
}

fn radix2(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    if n == 1 {
        return vec![x[0]];
    }
    let even: Vec<Complex64> = x.iter().step_by(2).copied().collect();
    let odd: Vec<Complex64> = x.iter().skip(1).step_by(2).copied().collect();
    let e = radix2(&even);
    let o = radix2(&odd);
    let half = n / 2;
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..half {
        let w = Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64);
        let t = w * o[k];
        out[k] = e[k] + t;
        out[k + half] = e[k] - t;
    }
    out
}

//! Real orthonormal spherical harmonics.
//!
//! Coefficients are ordered by `l` ascending and `m` from `-l` to `l`, i.e.
//! index `l * l + l + m`. `m > 0` carries `cos(m phi)`, `m < 0` carries
//! `sin(|m| phi)`. No Condon-Shortley phase.

use std::f64::consts::PI;

/// Number of coefficients up to and including degree `degree`.
pub fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

#[inline]
pub fn sh_index(l: usize, m: i64) -> usize {
    ((l * l + l) as i64 + m) as usize
}

/// Normalized associated Legendre values `P[l][m]` for `0 <= m <= l <= degree`,
/// flattened as `l * (l + 1) / 2 + m`, including the `sqrt((2l+1)/4pi ...)`
/// normalization of the real harmonics.
pub fn legendre_normalized(degree: usize, cos_theta: f64) -> Vec<f64> {
    let sin_theta = (1.0 - cos_theta * cos_theta).max(0.0).sqrt();
    let idx = |l: usize, m: usize| l * (l + 1) / 2 + m;
    let mut p = vec![0.0; (degree + 1) * (degree + 2) / 2];
    p[0] = (1.0 / (4.0 * PI)).sqrt();
    for m in 1..=degree {
        let mf = m as f64;
        p[idx(m, m)] = ((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * sin_theta * p[idx(m - 1, m - 1)];
    }
    for m in 0..degree {
        p[idx(m + 1, m)] = (2.0 * m as f64 + 3.0).sqrt() * cos_theta * p[idx(m, m)];
    }
    for m in 0..=degree {
        for l in (m + 2)..=degree {
            let (lf, mf) = (l as f64, m as f64);
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0).powi(2) - mf * mf) / (4.0 * (lf - 1.0).powi(2) - 1.0)).sqrt();
            p[idx(l, m)] = a * (cos_theta * p[idx(l - 1, m)] - b * p[idx(l - 2, m)]);
        }
    }
    p
}

/// All real harmonics up to `degree` at polar angle `theta`, azimuth `phi`.
pub fn eval_basis(degree: usize, theta: f64, phi: f64) -> Vec<f64> {
    let p = legendre_normalized(degree, theta.cos());
    let mut out = vec![0.0; coeff_count(degree)];
    fill_basis(degree, &p, phi, &mut out);
    out
}

pub(crate) fn fill_basis(degree: usize, legendre: &[f64], phi: f64, out: &mut [f64]) {
    let idx = |l: usize, m: usize| l * (l + 1) / 2 + m;
    let sqrt2 = std::f64::consts::SQRT_2;
    for l in 0..=degree {
        let base = l * l + l;
        out[base] = legendre[idx(l, 0)];
        for m in 1..=l {
            let (s, c) = (m as f64 * phi).sin_cos();
            let v = sqrt2 * legendre[idx(l, m)];
            out[base + m] = v * c;
            out[base - m] = v * s;
        }
    }
}

//! Spherical Bessel functions of the first and second kind and the
//! first-kind spherical Hankel function.
//!
//! `j_l` is evaluated with Miller's downward recurrence normalized against
//! the closed forms of `j_0` / `j_1`; `y_l` uses the upward recurrence,
//! which is stable for the irregular solution.

use num_complex::Complex64;

use crate::error::{Error, Result};

const RESCALE_LIMIT: f64 = 1e200;

fn start_order(l_max: usize, x: f64) -> usize {
    // Past l ~ x the regular solution decays like exp(-nu (alpha - tanh alpha));
    // this margin keeps the truncated tail below ~e^-40.
    let base = (l_max as f64).max(x.ceil());
    (base + 12.2 * x.cbrt() + 15.0).ceil() as usize
}

/// `j_0(x) .. j_{l_max}(x)` for `x > 0`.
pub fn spherical_jn_all(l_max: usize, x: f64) -> Vec<f64> {
    debug_assert!(x > 0.0);
    let top = start_order(l_max, x);
    let mut vals = vec![0.0; top + 2];
    vals[top + 1] = 0.0;
    vals[top] = 1e-300;
    for l in (1..=top).rev() {
        let next = (2 * l + 1) as f64 / x * vals[l] - vals[l + 1];
        vals[l - 1] = next;
        if next.abs() > RESCALE_LIMIT {
            for v in vals[l - 1..].iter_mut() {
                *v /= RESCALE_LIMIT;
            }
        }
    }
    let (s, c) = x.sin_cos();
    let j0 = s / x;
    let j1 = s / (x * x) - c / x;
    let scale = if j0.abs() >= j1.abs() {
        j0 / vals[0]
    } else {
        j1 / vals[1]
    };
    vals.truncate(l_max + 1);
    vals.iter_mut().for_each(|v| *v *= scale);
    vals
}

/// `y_0(x) .. y_{l_max}(x)` for `x > 0`.
pub fn spherical_yn_all(l_max: usize, x: f64) -> Vec<f64> {
    debug_assert!(x > 0.0);
    let (s, c) = x.sin_cos();
    let mut vals = Vec::with_capacity(l_max + 1);
    vals.push(-c / x);
    if l_max >= 1 {
        vals.push(-c / (x * x) - s / x);
    }
    for l in 1..l_max {
        let next = (2 * l + 1) as f64 / x * vals[l] - vals[l - 1];
        vals.push(next);
    }
    vals
}

/// Derivatives from `f_l' = f_{l-1} - (l+1)/x f_l` (and `f_0' = -f_1`).
/// `vals` must hold orders `0..=l_max + 1`; returns orders `0..=l_max`.
pub fn derivatives(vals: &[f64], x: f64) -> Vec<f64> {
    let l_max = vals.len() - 2;
    (0..=l_max)
        .map(|l| {
            if l == 0 {
                -vals[1]
            } else {
                vals[l - 1] - (l + 1) as f64 / x * vals[l]
            }
        })
        .collect()
}

/// Values and derivatives of `j_l`, `y_l` for `l = 0..=l_max`.
#[derive(Debug, Clone)]
pub struct RadialTable {
    pub x: f64,
    pub j: Vec<f64>,
    pub y: Vec<f64>,
    pub dj: Vec<f64>,
    pub dy: Vec<f64>,
}

impl RadialTable {
    pub fn new(l_max: usize, x: f64) -> Result<Self> {
        check_arg(x)?;
        let mut j = spherical_jn_all(l_max + 1, x);
        let mut y = spherical_yn_all(l_max + 1, x);
        let dj = derivatives(&j, x);
        let dy = derivatives(&y, x);
        j.truncate(l_max + 1);
        y.truncate(l_max + 1);
        Ok(Self { x, j, y, dj, dy })
    }

    pub fn hankel(&self, l: usize) -> Complex64 {
        Complex64::new(self.j[l], self.y[l])
    }

    pub fn hankel_deriv(&self, l: usize) -> Complex64 {
        Complex64::new(self.dj[l], self.dy[l])
    }
}

fn check_arg(x: f64) -> Result<()> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::param(format!(
            "spherical Bessel argument must be positive and finite, got {x}"
        )));
    }
    Ok(())
}

/// First-kind spherical Hankel function `h_l(x) = j_l(x) + i y_l(x)`.
pub fn spherical_hankel(l: usize, x: f64) -> Result<Complex64> {
    check_arg(x)?;
    let j = spherical_jn_all(l, x);
    let y = spherical_yn_all(l, x);
    Ok(Complex64::new(j[l], y[l]))
}

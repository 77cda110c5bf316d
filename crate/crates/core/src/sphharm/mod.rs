//! Real spherical-harmonic field codec up to order 3.
//!
//! Convention: real, orthonormal over the unit sphere, Condon–Shortley
//! phase omitted. Coefficients are stored in `(l, m)` row-major order,
//! `index = l^2 + l + m`, so `(0,0), (1,-1), (1,0), (1,1), (2,-2), …, (3,3)`.
//! Negative `m` uses `sin(|m| phi)`, positive `m` uses `cos(m phi)`.

pub mod bessel;

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::{textio, BANDS_HZ};

pub use bessel::{spherical_hankel, RadialTable};

/// Maximum SH order carried by [`ShCoeffs`].
pub const MAX_ORDER: usize = 3;
/// `(MAX_ORDER + 1)^2`.
pub const NUM_COEFFS: usize = 16;
/// Default lat-long grid: 10° cells.
pub const DEFAULT_N_THETA: usize = 18;
pub const DEFAULT_N_PHI: usize = 36;
/// Magnitudes are clamped to this floor before taking logarithms.
pub const MAGNITUDE_FLOOR: f64 = 1e-9;

pub const SH_FORMAT: &str = "asf-sh/1";
pub const SH_ORDERING: &str = "lm-row-major";
pub const SH_CONVENTION: &str = "real-orthonormal-nocs";

#[inline]
pub fn sh_index(l: usize, m: i32) -> usize {
    ((l * l + l) as i32 + m) as usize
}

/// `(l, m)` of a flat coefficient index.
pub fn sh_lm(index: usize) -> (usize, i32) {
    let l = (index as f64).sqrt().floor() as usize;
    (l, index as i32 - (l * l + l) as i32)
}

/// 16 real SH coefficients for one frequency band.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShCoeffs {
    pub frequency_hz: u32,
    pub coeffs: [f64; NUM_COEFFS],
}

impl ShCoeffs {
    pub fn new(frequency_hz: u32, coeffs: [f64; NUM_COEFFS]) -> Result<Self> {
        check_band(frequency_hz)?;
        if let Some(i) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(Error::param(format!("coefficient {i} is not finite")));
        }
        Ok(Self {
            frequency_hz,
            coeffs,
        })
    }

    pub fn zeros(frequency_hz: u32) -> Result<Self> {
        Self::new(frequency_hz, [0.0; NUM_COEFFS])
    }

    pub fn get(&self, l: usize, m: i32) -> f64 {
        self.coeffs[sh_index(l, m)]
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = *self;
        out.coeffs.iter_mut().for_each(|c| *c *= s);
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "format: {SH_FORMAT}");
        let _ = writeln!(out, "frequency_hz: {}", self.frequency_hz);
        let _ = writeln!(out, "ordering: {SH_ORDERING}");
        let _ = writeln!(out, "convention: {SH_CONVENTION}");
        for c in &self.coeffs {
            let _ = writeln!(out, "{c}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        const WHAT: &str = "SH coefficient file";
        let mut header = std::collections::BTreeMap::new();
        let mut values = Vec::with_capacity(NUM_COEFFS);
        for (line, content) in textio::content_lines(text) {
            if let Some((k, v)) = content.split_once(':') {
                if !values.is_empty() {
                    return Err(Error::format(WHAT, format!("line {line}: header after values")));
                }
                header.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                values.push(textio::parse_f64(content, WHAT, line)?);
            }
        }
        let field = |k: &str| {
            header
                .get(k)
                .cloned()
                .ok_or_else(|| Error::format(WHAT, format!("missing header {k:?}")))
        };
        let expect = |k: &str, v: &str| -> Result<()> {
            let got = field(k)?;
            if got != v {
                return Err(Error::format(WHAT, format!("{k} is {got:?}, expected {v:?}")));
            }
            Ok(())
        };
        expect("format", SH_FORMAT)?;
        expect("ordering", SH_ORDERING)?;
        expect("convention", SH_CONVENTION)?;
        let freq: u32 = field("frequency_hz")?
            .parse()
            .map_err(|_| Error::format(WHAT, "bad frequency_hz"))?;
        if values.len() != NUM_COEFFS {
            return Err(Error::format(
                WHAT,
                format!("expected {NUM_COEFFS} coefficients, found {}", values.len()),
            ));
        }
        let mut coeffs = [0.0; NUM_COEFFS];
        coeffs.copy_from_slice(&values);
        Self::new(freq, coeffs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&textio::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        textio::write_string(path, &self.to_text())
    }
}

pub fn check_band(frequency_hz: u32) -> Result<()> {
    if BANDS_HZ.contains(&frequency_hz) {
        Ok(())
    } else {
        Err(Error::param(format!(
            "frequency {frequency_hz} Hz is not one of {BANDS_HZ:?}"
        )))
    }
}

/// Associated Legendre function `P_l^m(x)` without the Condon–Shortley phase.
pub fn assoc_legendre(l: usize, m: usize, x: f64) -> f64 {
    debug_assert!(m <= l);
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = 1.0;
    for k in 1..=m {
        pmm *= (2 * k - 1) as f64 * s;
    }
    if l == m {
        return pmm;
    }
    let mut pm1 = x * (2 * m + 1) as f64 * pmm;
    if l == m + 1 {
        return pm1;
    }
    let mut pm2 = pmm;
    for ll in (m + 2)..=l {
        let p = ((2 * ll - 1) as f64 * x * pm1 - (ll + m - 1) as f64 * pm2) / (ll - m) as f64;
        pm2 = pm1;
        pm1 = p;
    }
    pm1
}

fn norm_factor(l: usize, m: usize) -> f64 {
    let mut ratio = 1.0;
    for k in (l - m + 1)..=(l + m) {
        ratio /= k as f64;
    }
    ((2 * l + 1) as f64 / (4.0 * PI) * ratio).sqrt()
}

/// Orthonormal real spherical harmonic `Y_l^m(theta, phi)`; `theta` is the
/// colatitude.
pub fn real_sh(l: usize, m: i32, theta: f64, phi: f64) -> Result<f64> {
    if m.unsigned_abs() as usize > l {
        return Err(Error::param(format!("invalid SH index (l={l}, m={m})")));
    }
    if !theta.is_finite() || !phi.is_finite() {
        return Err(Error::param("SH angles must be finite"));
    }
    Ok(real_sh_unchecked(l, m, theta, phi))
}

pub(crate) fn real_sh_unchecked(l: usize, m: i32, theta: f64, phi: f64) -> f64 {
    let am = m.unsigned_abs() as usize;
    let p = norm_factor(l, am) * assoc_legendre(l, am, theta.cos());
    match m.cmp(&0) {
        std::cmp::Ordering::Equal => p,
        std::cmp::Ordering::Greater => std::f64::consts::SQRT_2 * p * (am as f64 * phi).cos(),
        std::cmp::Ordering::Less => std::f64::consts::SQRT_2 * p * (am as f64 * phi).sin(),
    }
}

/// All basis values up to `l_max` at one direction, in flat index order.
pub fn sh_basis(l_max: usize, theta: f64, phi: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity((l_max + 1) * (l_max + 1));
    for l in 0..=l_max {
        for m in -(l as i32)..=(l as i32) {
            out.push(real_sh_unchecked(l, m, theta, phi));
        }
    }
    out
}

/// `sum c_l^m Y_l^m(theta, phi)`.
pub fn reconstruct(coeffs: &ShCoeffs, theta: f64, phi: f64) -> f64 {
    reconstruct_slice(&coeffs.coeffs, theta, phi)
}

pub fn reconstruct_slice(coeffs: &[f64], theta: f64, phi: f64) -> f64 {
    let l_max = ((coeffs.len() as f64).sqrt() as usize).saturating_sub(1);
    sh_basis(l_max, theta, phi)
        .iter()
        .zip(coeffs)
        .map(|(y, c)| y * c)
        .sum()
}

/// Equiangular grid of real values over the sphere. Rows are colatitude
/// cell centers in (0, pi), columns are longitudes `2 pi j / n_phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatLongMap {
    n_theta: usize,
    n_phi: usize,
    values: Vec<f64>,
}

impl LatLongMap {
    pub fn new(n_theta: usize, n_phi: usize, values: Vec<f64>) -> Result<Self> {
        if n_theta == 0 || n_phi == 0 {
            return Err(Error::param("lat-long grid must be non-empty"));
        }
        if values.len() != n_theta * n_phi {
            return Err(Error::param(format!(
                "{} values for a {n_theta}x{n_phi} grid",
                values.len()
            )));
        }
        Ok(Self {
            n_theta,
            n_phi,
            values,
        })
    }

    pub fn from_fn(n_theta: usize, n_phi: usize, mut f: impl FnMut(f64, f64) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(n_theta * n_phi);
        for i in 0..n_theta {
            let t = grid_theta(n_theta, i);
            for j in 0..n_phi {
                values.push(f(t, grid_phi(n_phi, j)));
            }
        }
        Self::new(n_theta, n_phi, values)
    }

    /// Magnitude map `|sum c Y|` of a coefficient vector.
    pub fn from_coeffs(coeffs: &ShCoeffs, n_theta: usize, n_phi: usize) -> Result<Self> {
        Self::from_fn(n_theta, n_phi, |t, p| reconstruct(coeffs, t, p).abs())
    }

    pub fn n_theta(&self) -> usize {
        self.n_theta
    }

    pub fn n_phi(&self) -> usize {
        self.n_phi
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_phi + j]
    }

    pub fn theta(&self, i: usize) -> f64 {
        grid_theta(self.n_theta, i)
    }

    pub fn phi(&self, j: usize) -> f64 {
        grid_phi(self.n_phi, j)
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.n_theta == other.n_theta && self.n_phi == other.n_phi
    }

    /// CSV: first row longitudes, first column colatitudes, body magnitudes.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("colatitude\\longitude");
        for j in 0..self.n_phi {
            let _ = write!(out, ",{}", self.phi(j));
        }
        out.push('\n');
        for i in 0..self.n_theta {
            let _ = write!(out, "{}", self.theta(i));
            for j in 0..self.n_phi {
                let _ = write!(out, ",{}", self.get(i, j));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        const WHAT: &str = "lat-long CSV";
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        let (_, head) = lines.next().ok_or_else(|| Error::format(WHAT, "empty file"))?;
        let n_phi = head.split(',').count() - 1;
        let mut values = Vec::new();
        let mut n_theta = 0;
        for (i, line) in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != n_phi + 1 {
                return Err(Error::format(WHAT, format!("line {}: wrong column count", i + 1)));
            }
            for c in &cells[1..] {
                values.push(textio::parse_f64(c.trim(), WHAT, i + 1)?);
            }
            n_theta += 1;
        }
        Self::new(n_theta, n_phi, values)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        textio::write_string(path, &self.to_csv())
    }
}

pub fn grid_theta(n_theta: usize, i: usize) -> f64 {
    (i as f64 + 0.5) * PI / n_theta as f64
}

pub fn grid_phi(n_phi: usize, j: usize) -> f64 {
    2.0 * PI * j as f64 / n_phi as f64
}

/// Result of projecting a gridded field onto the SH basis.
#[derive(Debug, Clone)]
pub struct Projection {
    /// Coefficients up to the requested order, flat `(l, m)` order.
    pub coeffs: Vec<f64>,
    /// Area-weighted relative residual `|f - f_L| / |f|` over the grid.
    pub relative_error: f64,
}

fn check_sampling(map: &LatLongMap, l_max: usize) -> Result<()> {
    let need_t = 2 * (l_max + 1);
    let need_p = 2 * (l_max + 1) + 1;
    if map.n_theta < need_t || map.n_phi < need_p {
        return Err(Error::param(format!(
            "{}x{} grid too coarse for order {l_max}: need at least {need_t}x{need_p}",
            map.n_theta, map.n_phi
        )));
    }
    Ok(())
}

/// Area-weighted least-squares projection onto orders `0..=l_max`.
///
/// Exact (to rounding) on band-limited fields, and the residual can only
/// shrink as `l_max` grows since the trial spaces are nested.
pub fn project_order(map: &LatLongMap, l_max: usize) -> Result<Projection> {
    if l_max > MAX_ORDER {
        return Err(Error::param(format!("order {l_max} exceeds {MAX_ORDER}")));
    }
    check_sampling(map, l_max)?;
    let nc = (l_max + 1) * (l_max + 1);
    let mut gram = DMatrix::<f64>::zeros(nc, nc);
    let mut rhs = DVector::<f64>::zeros(nc);
    let mut basis_rows = Vec::with_capacity(map.values.len());
    for i in 0..map.n_theta {
        let t = map.theta(i);
        let w = t.sin();
        for j in 0..map.n_phi {
            let y = sh_basis(l_max, t, map.phi(j));
            let f = map.get(i, j);
            for a in 0..nc {
                rhs[a] += w * y[a] * f;
                for b in a..nc {
                    gram[(a, b)] += w * y[a] * y[b];
                }
            }
            basis_rows.push(y);
        }
    }
    for a in 0..nc {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::param("projection normal matrix is not positive definite"))?;
    let c = chol.solve(&rhs);
    let coeffs: Vec<f64> = c.iter().copied().collect();

    let mut res2 = 0.0;
    let mut f2 = 0.0;
    for i in 0..map.n_theta {
        let w = map.theta(i).sin();
        for j in 0..map.n_phi {
            let y = &basis_rows[i * map.n_phi + j];
            let fl: f64 = y.iter().zip(&coeffs).map(|(a, b)| a * b).sum();
            let f = map.get(i, j);
            res2 += w * (f - fl) * (f - fl);
            f2 += w * f * f;
        }
    }
    let relative_error = if f2 > 0.0 { (res2 / f2).sqrt() } else { 0.0 };
    Ok(Projection {
        coeffs,
        relative_error,
    })
}

/// Projects onto the 16 coefficients of order 3 and tags the band.
pub fn project(map: &LatLongMap, frequency_hz: u32) -> Result<(ShCoeffs, f64)> {
    let p = project_order(map, MAX_ORDER)?;
    let mut coeffs = [0.0; NUM_COEFFS];
    coeffs.copy_from_slice(&p.coeffs);
    Ok((ShCoeffs::new(frequency_hz, coeffs)?, p.relative_error))
}

/// Area-weighted mean of `|20 log10(a / b)|` over the grid, magnitudes
/// floored at [`MAGNITUDE_FLOOR`].
pub fn db_error(a: &LatLongMap, b: &LatLongMap) -> Result<f64> {
    if !a.same_grid(b) {
        return Err(Error::param(format!(
            "grid mismatch: {}x{} vs {}x{}",
            a.n_theta, a.n_phi, b.n_theta, b.n_phi
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..a.n_theta {
        let w = a.theta(i).sin();
        for j in 0..a.n_phi {
            let x = a.get(i, j).abs().max(MAGNITUDE_FLOOR);
            let y = b.get(i, j).abs().max(MAGNITUDE_FLOOR);
            num += w * (20.0 * (x / y).log10()).abs();
            den += w;
        }
    }
    Ok(num / den)
}

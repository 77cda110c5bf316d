//! Power sums, Newton's identities and multiset recovery.
//!
//! For a multiset `X = {x_1..x_M}` the power sums `E_q(X) = sum x_m^q`,
//! `q = 0..M`, determine `X` uniquely: Newton's identities turn them into
//! the elementary symmetric polynomials, i.e. the coefficients of
//! `prod (t - x_m)`, whose roots give back `X`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Tolerance on the `[0, 1]` domain when validating recovered roots.
pub const DOMAIN_SLACK: f64 = 1e-6;

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2` (double-double).
///
/// Recovering clustered roots from power sums loses roughly half the
/// working precision, so sums, Newton's identities and residuals are
/// carried in about 32 significant digits.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    fn new(v: f64) -> Self {
        Self { hi: v, lo: 0.0 }
    }

    fn quick(s: f64, e: f64) -> Self {
        let hi = s + e;
        Self { hi, lo: e - (hi - s) }
    }

    fn add(self, o: Self) -> Self {
        let s = self.hi + o.hi;
        let bb = s - self.hi;
        let err = (self.hi - (s - bb)) + (o.hi - bb);
        Self::quick(s, err + self.lo + o.lo)
    }

    fn neg(self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    fn mul(self, o: Self) -> Self {
        let p = self.hi * o.hi;
        let err = self.hi.mul_add(o.hi, -p) + (self.hi * o.lo + self.lo * o.hi);
        Self::quick(p, err)
    }

    fn div_f64(self, d: f64) -> Self {
        let q = self.hi / d;
        let p = q * d;
        let pe = q.mul_add(d, -p);
        let r = ((self.hi - p) - pe + self.lo) / d;
        Self::quick(q, r)
    }
}

/// Sorted multiset of values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Multiset {
    values: Vec<f64>,
}

impl Multiset {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::param("multiset must be non-empty"));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param(format!("multiset value {v} outside [0, 1]")));
        }
        values.sort_by(f64::total_cmp);
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `e[q] = sum x^q` for `q = 0..=M`.
///
/// `e` holds the correctly rounded sums; `lo` the residual `exact - e`
/// when known (zero for sums supplied as plain floats).
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSums {
    pub e: Vec<f64>,
    pub lo: Vec<f64>,
}

impl PowerSums {
    pub fn from_floats(e: Vec<f64>) -> Self {
        let lo = vec![0.0; e.len()];
        Self { e, lo }
    }

    /// Number of elements `M`.
    pub fn order(&self) -> usize {
        self.e.len() - 1
    }

    fn dd(&self, q: usize) -> Dd {
        Dd::new(self.e[q]).add(Dd::new(self.lo.get(q).copied().unwrap_or(0.0)))
    }
}

/// Power sums of arbitrary reals (no domain check).
pub fn power_sums_of(values: &[f64]) -> PowerSums {
    let m = values.len();
    let mut acc = vec![Dd::default(); m + 1];
    acc[0] = Dd::new(m as f64);
    for &x in values {
        let mut p = Dd::new(1.0);
        for q in acc.iter_mut().skip(1) {
            p = p.mul(Dd::new(x));
            *q = q.add(p);
        }
    }
    PowerSums {
        e: acc.iter().map(|d| d.hi).collect(),
        lo: acc.iter().map(|d| d.lo).collect(),
    }
}

pub fn power_sums(ms: &Multiset) -> PowerSums {
    power_sums_of(ms.values())
}

fn newton_elementary_dd(ps: &PowerSums) -> Vec<Dd> {
    let m = ps.order();
    let mut el = vec![Dd::new(1.0); m + 1];
    for r in 1..=m {
        let mut acc = Dd::default();
        for i in 1..=r {
            let t = el[r - i].mul(ps.dd(i));
            acc = acc.add(if i % 2 == 1 { t } else { t.neg() });
        }
        el[r] = acc.div_f64(r as f64);
    }
    el.remove(0);
    el
}

/// Elementary symmetric polynomials `e_1..e_M` by Newton's recurrence
/// `r e_r = sum_{i=1..r} (-1)^(i-1) e_(r-i) p_i`.
pub fn newton_elementary(ps: &PowerSums) -> Vec<f64> {
    newton_elementary_dd(ps).iter().map(|d| d.hi + d.lo).collect()
}

/// Coefficients of `prod (t - x_m)`, highest degree first, leading 1.
fn monic_from_elementary(el: &[Dd]) -> Vec<Dd> {
    let mut c = Vec::with_capacity(el.len() + 1);
    c.push(Dd::new(1.0));
    for (r, v) in el.iter().enumerate() {
        c.push(if r % 2 == 0 { v.neg() } else { *v });
    }
    c
}

/// `p(x)` in extended precision and `p'(x)` in plain floats.
fn horner(c: &[Dd], x: f64) -> (f64, f64) {
    let mut p = Dd::default();
    let mut dp = 0.0;
    let xd = Dd::new(x);
    for a in c {
        dp = dp * x + p.hi;
        p = p.mul(xd).add(*a);
    }
    (p.hi + p.lo, dp)
}

/// Recovers the multiset whose power sums are `ps`.
///
/// Starting points are the companion-matrix eigenvalues (real parts); all
/// roots are then refined together with the Ehrlich-Aberth iteration,
/// whose mutual repulsion term keeps clustered roots apart.
pub fn recover_multiset(ps: &PowerSums) -> Result<Multiset> {
    let m = ps.order();
    if m == 0 {
        return Err(Error::param("power sums of an empty multiset"));
    }
    if ps.e[0] != m as f64 || ps.e.iter().chain(&ps.lo).any(|v| !v.is_finite()) {
        return Err(Error::InconsistentInput(format!(
            "e[0] = {} does not match {} entries",
            ps.e[0], m
        )));
    }
    let coeffs = monic_from_elementary(&newton_elementary_dd(ps));
    let plain: Vec<f64> = coeffs.iter().map(|c| c.hi).collect();
    let scale = 1.0 + plain.iter().fold(0.0f64, |a, c| a.max(c.abs()));

    let mut z = initial_roots(&plain);
    if let Some(&(re, im)) = z.iter().find(|r| r.1.abs() > 1e-3 * scale.sqrt()) {
        return Err(Error::InconsistentInput(format!("polynomial has a non-real root {re} + {im}i")));
    }
    z.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Split coincident starts so the repulsion term is defined.
    let mut x: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(i, r)| r.0 + r.1.abs() + 1e-9 * i as f64)
        .collect();
    for _ in 0..200 {
        let mut biggest: f64 = 0.0;
        for i in 0..m {
            let (p, dp) = horner(&coeffs, x[i]);
            if p == 0.0 {
                continue;
            }
            let ratio = p / dp;
            let repel: f64 = (0..m).filter(|&j| j != i).map(|j| 1.0 / (x[i] - x[j])).sum();
            let w = ratio / (1.0 - ratio * repel);
            if w.is_finite() {
                x[i] -= w;
                biggest = biggest.max(w.abs());
            }
        }
        if biggest <= 1e-17 {
            break;
        }
    }
    x.sort_by(f64::total_cmp);

    if let Some(v) = x.iter().find(|v| !(-DOMAIN_SLACK..=1.0 + DOMAIN_SLACK).contains(*v)) {
        return Err(Error::InconsistentInput(format!("recovered value {v} outside [0, 1]")));
    }
    Multiset::new(x.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Companion-matrix eigenvalues as `(re, im)`; evenly spaced points in
/// `[0, 1]` if the QR iteration does not converge (e.g. a nilpotent
/// companion matrix).
fn initial_roots(coeffs: &[f64]) -> Vec<(f64, f64)> {
    let m = coeffs.len() - 1;
    let mut companion = DMatrix::<f64>::zeros(m, m);
    for j in 0..m {
        companion[(0, j)] = -coeffs[j + 1];
    }
    for i in 1..m {
        companion[(i, i - 1)] = 1.0;
    }
    match nalgebra::linalg::Schur::try_new(companion, f64::EPSILON, 500) {
        Some(s) => s.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect(),
        None => (0..m).map(|i| ((i as f64 + 0.5) / m as f64, 0.0)).collect(),
    }
}

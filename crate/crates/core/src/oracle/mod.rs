//! Ground truth from the analytical rigid-sphere scattering problem.
//!
//! A unit-amplitude plane wave `exp(i k d·x)` hits a sound-hard sphere of
//! radius `a` at the origin. With `gamma` the angle between the observation
//! direction and the propagation direction `d`, the scattered pressure is
//!
//! ```text
//! p_s(r, gamma) = -sum_l (2l+1) i^l A_l h_l(kr) P_l(cos gamma),
//! A_l = j_l'(ka) / h_l'(ka)
//! ```
//!
//! and its far-field amplitude (`p_s ~ f(gamma) e^{ikr} / r`) is
//! `f(gamma) = (i / k) sum_l (2l+1) A_l P_l(cos gamma)`, measured in meters.
//! Targets encode `|f|` sampled in a frame whose polar axis is `d`.

pub mod dataset;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geom::{frame_from_axis, unit_from_angles, PointCloud, Vec3};
use crate::sphharm::{self, LatLongMap, RadialTable, ShCoeffs};
use crate::SPEED_OF_SOUND;

pub use dataset::{gen_dataset, Dataset, DatasetConfig, LabeledExample, Manifest, ManifestRow};

/// Sound-hard sphere centered at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScattererSpec {
    pub radius: f64,
}

impl ScattererSpec {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::param(format!("sphere radius must be positive, got {radius}")));
        }
        Ok(Self { radius })
    }
}

/// Unit-amplitude plane wave.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IncidentWave {
    pub direction: Vec3,
    pub frequency_hz: u32,
}

impl IncidentWave {
    /// Plane wave travelling along -x.
    pub fn new(frequency_hz: u32) -> Result<Self> {
        Self::with_direction(frequency_hz, Vec3::new(-1.0, 0.0, 0.0))
    }

    pub fn with_direction(frequency_hz: u32, direction: Vec3) -> Result<Self> {
        sphharm::check_band(frequency_hz)?;
        let n = direction.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::param("wave direction must be a non-zero finite vector"));
        }
        Ok(Self {
            direction: direction / n,
            frequency_hz,
        })
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.frequency_hz as f64 / SPEED_OF_SOUND
    }
}

/// Partial-wave truncation order for size parameter `ka`.
///
/// `ceil(ka) + 10` alone leaves changes of ~1e-7 at ka = 20; the extra
/// `4 (ka)^(1/3)` terms cover the transition region of the Bessel
/// functions, where `A_l` starts decaying super-exponentially.
pub fn truncation_order(ka: f64) -> usize {
    ka.ceil() as usize + 10 + (4.0 * ka.cbrt()).ceil() as usize
}

/// Legendre polynomials `P_0(x) .. P_n(x)`.
pub fn legendre_all(n: usize, x: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(n + 1);
    p.push(1.0);
    if n >= 1 {
        p.push(x);
    }
    for l in 1..n {
        let next = ((2 * l + 1) as f64 * x * p[l] - l as f64 * p[l - 1]) / (l + 1) as f64;
        p.push(next);
    }
    p
}

/// Rigid-sphere partial-wave coefficients `A_l` for one size parameter.
#[derive(Debug, Clone)]
pub struct RigidSphereSeries {
    pub ka: f64,
    coeffs: Vec<Complex64>,
}

impl RigidSphereSeries {
    pub fn new(ka: f64) -> Result<Self> {
        Self::with_order(ka, truncation_order(ka))
    }

    pub fn with_order(ka: f64, l_max: usize) -> Result<Self> {
        let t = RadialTable::new(l_max, ka)?;
        let coeffs = (0..=l_max)
            .map(|l| Complex64::new(t.dj[l], 0.0) / t.hankel_deriv(l))
            .collect();
        Ok(Self { ka, coeffs })
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coefficient(&self, l: usize) -> Complex64 {
        self.coeffs[l]
    }

    /// Dimensionless far-field amplitude `k f(gamma)`.
    pub fn farfield_k(&self, cos_gamma: f64) -> Complex64 {
        let p = legendre_all(self.order(), cos_gamma);
        let sum: Complex64 = self
            .coeffs
            .iter()
            .zip(&p)
            .enumerate()
            .map(|(l, (a, pl))| a * ((2 * l + 1) as f64 * pl))
            .sum();
        Complex64::i() * sum
    }

    /// Total (incident + scattered) pressure at radius `kr` (in units of 1/k).
    pub fn total_pressure(&self, kr: f64, cos_gamma: f64) -> Result<Complex64> {
        self.radial_sum(kr, cos_gamma, false)
    }

    /// `d p_total / d(kr)` from the analytic Bessel derivatives.
    pub fn total_pressure_radial_derivative(&self, kr: f64, cos_gamma: f64) -> Result<Complex64> {
        self.radial_sum(kr, cos_gamma, true)
    }

    fn radial_sum(&self, kr: f64, cos_gamma: f64, derivative: bool) -> Result<Complex64> {
        let l_max = self.order();
        let t = RadialTable::new(l_max, kr)?;
        let p = legendre_all(l_max, cos_gamma);
        let mut il = Complex64::new(1.0, 0.0);
        let mut sum = Complex64::new(0.0, 0.0);
        for l in 0..=l_max {
            let (j, h) = if derivative {
                (t.dj[l], t.hankel_deriv(l))
            } else {
                (t.j[l], t.hankel(l))
            };
            sum += il * ((2 * l + 1) as f64 * p[l]) * (Complex64::new(j, 0.0) - self.coeffs[l] * h);
            il *= Complex64::i();
        }
        Ok(sum)
    }
}

/// Far-field scattering amplitude (meters) toward world direction
/// `(theta, phi)` (z-polar world frame).
pub fn sphere_farfield(spec: &ScattererSpec, wave: &IncidentWave, theta: f64, phi: f64) -> Result<Complex64> {
    let k = wave.wavenumber();
    let series = RigidSphereSeries::new(k * spec.radius)?;
    let dir = unit_from_angles(theta, phi);
    Ok(series.farfield_k(dir.dot(&wave.direction)) / k)
}

/// Raw (unnormalized) SH encoding of one band's far-field magnitude.
#[derive(Debug, Clone)]
pub struct AsfTarget {
    pub coeffs: ShCoeffs,
    pub relative_error: f64,
}

/// Samples `|f|` on the default grid of the frame whose polar axis is the
/// propagation direction, then projects onto order 3.
pub fn sphere_asf(spec: &ScattererSpec, wave: &IncidentWave) -> Result<AsfTarget> {
    let map = sphere_farfield_map(
        spec,
        wave,
        sphharm::DEFAULT_N_THETA,
        sphharm::DEFAULT_N_PHI,
    )?;
    let (coeffs, relative_error) = sphharm::project(&map, wave.frequency_hz)?;
    Ok(AsfTarget {
        coeffs,
        relative_error,
    })
}

/// `|f|` on a lat-long grid in the propagation-aligned frame.
pub fn sphere_farfield_map(
    spec: &ScattererSpec,
    wave: &IncidentWave,
    n_theta: usize,
    n_phi: usize,
) -> Result<LatLongMap> {
    let k = wave.wavenumber();
    let series = RigidSphereSeries::new(k * spec.radius)?;
    let frame = frame_from_axis(&wave.direction, None);
    LatLongMap::from_fn(n_theta, n_phi, |t, p| {
        let world = frame * unit_from_angles(t, p);
        (series.farfield_k(world.dot(&wave.direction)) / k).norm()
    })
}

/// Quasi-uniform points on the sphere surface: a Fibonacci lattice of `2n`
/// points under a seeded random rotation, reduced to `n` by furthest-point
/// sampling from a seeded start index.
pub fn sample_sphere_cloud(spec: &ScattererSpec, n: usize, seed: u64) -> Result<PointCloud> {
    use rand::{Rng, SeedableRng};
    if n < 4 {
        return Err(Error::param(format!("need at least 4 points, got {n}")));
    }
    let m = 2 * n;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        gaussian(&mut rng),
        gaussian(&mut rng),
        gaussian(&mut rng),
        gaussian(&mut rng),
    ));
    let rot = q.to_rotation_matrix();
    let points: Vec<Vec3> = (0..m)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / m as f64;
            let r = (1.0 - z * z).sqrt();
            let a = golden * i as f64;
            let u = rot * Vec3::new(r * a.cos(), r * a.sin(), z);
            u.normalize() * spec.radius
        })
        .collect();
    let start = rng.random_range(0..m);
    crate::geom::furthest_point_sample(&PointCloud::new(points)?, n, start)
}

fn gaussian<R: rand::Rng>(rng: &mut R) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

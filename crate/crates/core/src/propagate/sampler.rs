use std::f64::consts::{PI, TAU};

use rand::Rng;

use crate::geom::{unit_from_angles, Vec3};
use crate::sphharm::{grid_phi, grid_theta, reconstruct, ShCoeffs, DEFAULT_N_PHI, DEFAULT_N_THETA};

/// Outgoing-direction distribution of one scattering field.
///
/// Each lat-long cell gets probability proportional to the squared
/// reconstructed magnitude at its center times its solid angle. Inside a
/// cell directions are uniform in `(cos theta, phi)`, i.e. uniform over
/// solid angle. Because sampling follows the energy pattern exactly, the
/// energy weight of a sampled direction is one.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSampler {
    pub n_theta: usize,
    pub n_phi: usize,
    /// Cell probabilities, row-major `theta x phi`, summing to one.
    pub prob: Vec<f64>,
    /// Probability per steradian in each cell.
    pub density: Vec<f64>,
    cdf: Vec<f64>,
    /// Set when the field was zero or non-finite everywhere and the
    /// sampler fell back to a uniform distribution.
    pub fallback_uniform: bool,
}

fn cell_solid_angle(n_theta: usize, n_phi: usize, i: usize) -> f64 {
    let t0 = PI * i as f64 / n_theta as f64;
    let t1 = PI * (i + 1) as f64 / n_theta as f64;
    (t0.cos() - t1.cos()) * TAU / n_phi as f64
}

/// Builds a sampler on the default lat-long grid.
pub fn build_sampler(coeffs: &ShCoeffs) -> DirectionSampler {
    build_sampler_on(coeffs, DEFAULT_N_THETA, DEFAULT_N_PHI)
}

pub fn build_sampler_on(coeffs: &ShCoeffs, n_theta: usize, n_phi: usize) -> DirectionSampler {
    let mut weight = Vec::with_capacity(n_theta * n_phi);
    for i in 0..n_theta {
        let area = cell_solid_angle(n_theta, n_phi, i);
        for j in 0..n_phi {
            let f = reconstruct(coeffs, grid_theta(n_theta, i), grid_phi(n_phi, j));
            weight.push(f * f * area);
        }
    }
    let total: f64 = weight.iter().sum();
    let fallback_uniform = !(total > 0.0 && total.is_finite());
    if fallback_uniform {
        weight.clear();
        for i in 0..n_theta {
            weight.extend(std::iter::repeat_n(cell_solid_angle(n_theta, n_phi, i), n_phi));
        }
    }
    let total: f64 = weight.iter().sum();
    let prob: Vec<f64> = weight.iter().map(|w| w / total).collect();
    let density = prob
        .iter()
        .enumerate()
        .map(|(c, p)| p / cell_solid_angle(n_theta, n_phi, c / n_phi))
        .collect();
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = prob
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    // Guard the inverse lookup against rounding in the running sum.
    if let Some(last) = cdf.last_mut() {
        *last = f64::INFINITY;
    }
    DirectionSampler {
        n_theta,
        n_phi,
        prob,
        density,
        cdf,
        fallback_uniform,
    }
}

impl DirectionSampler {
    /// Cell index containing the canonical direction `(theta, phi)`.
    pub fn cell_of(&self, theta: f64, phi: f64) -> usize {
        let i = ((theta / PI * self.n_theta as f64) as usize).min(self.n_theta - 1);
        let dphi = TAU / self.n_phi as f64;
        let j = ((phi.rem_euclid(TAU) / dphi + 0.5) as usize) % self.n_phi;
        i * self.n_phi + j
    }

    /// Draws a cell by inverse CDF, then a uniform direction inside it.
    /// Returns the cell and the unit vector in the canonical frame.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Vec3) {
        let u: f64 = rng.random();
        let cell = self.cdf.partition_point(|&c| c <= u).min(self.prob.len() - 1);
        let (i, j) = (cell / self.n_phi, cell % self.n_phi);
        let c0 = (PI * i as f64 / self.n_theta as f64).cos();
        let c1 = (PI * (i + 1) as f64 / self.n_theta as f64).cos();
        let ct = c0 + (c1 - c0) * rng.random::<f64>();
        let dphi = TAU / self.n_phi as f64;
        let phi = grid_phi(self.n_phi, j) + dphi * (rng.random::<f64>() - 0.5);
        (cell, unit_from_angles(ct.clamp(-1.0, 1.0).acos(), phi))
    }
}

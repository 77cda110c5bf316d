//! Stochastic ray tracing in a shoebox room with scattering-field driven
//! redirection at scatterers, assembled into per-band energy impulse
//! responses.
//!
//! Every band is traced with its own rays. Ray `r` of band `b` draws from
//! the ChaCha8 stream `4 r + b` of the trace seed, so results do not depend
//! on the thread count. Each band emits a total energy of one, split evenly
//! over the rays. Walls absorb a fraction of the energy and reflect the rest
//! specularly or diffusely. Scatterers redirect without loss. Occluders and
//! the listener absorb everything.

mod sampler;
mod scene;

pub use sampler::{build_sampler, build_sampler_on, DirectionSampler};
pub use scene::{Occluder, Scatterer, Scene, Wall, WALL_NAMES};

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{frame_from_axis, Vec3};
use crate::sphharm::ShCoeffs;
use crate::{textio, BANDS_HZ, SPEED_OF_SOUND};

pub const IR_COLUMNS: [&str; 5] = ["time_s", "e125", "e250", "e500", "e1000"];

/// Rays per work unit; histograms are merged in unit order.
const CHUNK: usize = 512;

/// Per-band arriving energy in fixed-width time bins.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyImpulseResponse {
    pub bands: [u32; 4],
    pub bin_width: f64,
    /// Paths that never met a scatterer.
    pub unscattered: Vec<[f64; 4]>,
    /// Paths redirected by at least one scatterer.
    pub scattered: Vec<[f64; 4]>,
    pub emitted: [f64; 4],
    pub rays: usize,
    pub seed: u64,
    pub max_bounces: usize,
    pub warnings: Vec<String>,
}

impl EnergyImpulseResponse {
    fn empty(n_bins: usize, bin_width: f64, rays: usize, seed: u64, max_bounces: usize) -> Self {
        Self {
            bands: BANDS_HZ,
            bin_width,
            unscattered: vec![[0.0; 4]; n_bins],
            scattered: vec![[0.0; 4]; n_bins],
            emitted: [1.0; 4],
            rays,
            seed,
            max_bounces,
            warnings: Vec::new(),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.unscattered.len()
    }

    /// Total energy per bin and band.
    pub fn bins(&self) -> Vec<[f64; 4]> {
        self.unscattered
            .iter()
            .zip(&self.scattered)
            .map(|(a, b)| std::array::from_fn(|k| a[k] + b[k]))
            .collect()
    }

    pub fn total(&self) -> [f64; 4] {
        sum_bins(&self.bins())
    }

    pub fn scattered_total(&self) -> [f64; 4] {
        sum_bins(&self.scattered)
    }

    /// Indices of bins with energy in any band.
    pub fn occupied_bins(&self) -> Vec<usize> {
        self.bins()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.iter().any(|&v| v > 0.0))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_tsv(&self, header: &[String]) -> String {
        let mut s = String::new();
        for h in header {
            let _ = writeln!(s, "# {h}");
        }
        let _ = writeln!(s, "# rays: {}", self.rays);
        let _ = writeln!(s, "# seed: {}", self.seed);
        let _ = writeln!(s, "# max_bounces: {}", self.max_bounces);
        let _ = writeln!(s, "# bin_width_s: {}", self.bin_width);
        let _ = writeln!(s, "# emitted energy per band: 1");
        for w in &self.warnings {
            let _ = writeln!(s, "# warning: {w}");
        }
        s.push_str(&IR_COLUMNS.join("\t"));
        s.push('\n');
        for (i, e) in self.bins().iter().enumerate() {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", i as f64 * self.bin_width, e[0], e[1], e[2], e[3]);
        }
        s
    }

    pub fn save(&self, path: &Path, header: &[String]) -> Result<()> {
        textio::write_string(path, &self.to_tsv(header))
    }
}

fn sum_bins(bins: &[[f64; 4]]) -> [f64; 4] {
    bins.iter().fold([0.0; 4], |acc, e| std::array::from_fn(|k| acc[k] + e[k]))
}

/// Returns a copy of `scene` whose scatterer `id` uses new fields (one per
/// band in `BANDS_HZ` order).
pub fn replace_asf(scene: &Scene, id: &str, coeffs: Vec<ShCoeffs>) -> Result<Scene> {
    let mut out = scene.clone();
    let s = out
        .scatterers
        .iter_mut()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::param(format!("no scatterer with id {id:?}")))?;
    *s = Scatterer::new(id, s.center, s.radius, coeffs)?.with_orientation(s.orientation);
    Ok(out)
}

/// Entry distance along a unit-direction ray, if the ray meets the sphere
/// ahead of its origin.
fn sphere_hit(origin: &Vec3, dir: &Vec3, center: &Vec3, radius: f64) -> Option<f64> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    if t0 > 0.0 {
        return Some(t0);
    }
    // Origin inside the sphere.
    let t1 = -b + sq;
    (c < 0.0 && t1 > 0.0).then_some(0.0)
}

/// Distance to the wall a ray from inside the room meets, and that wall.
fn wall_hit(dims: &Vec3, origin: &Vec3, dir: &Vec3) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for a in 0..3 {
        if dir[a] == 0.0 {
            continue;
        }
        let (bound, wall) = if dir[a] > 0.0 { (dims[a], 2 * a + 1) } else { (0.0, 2 * a) };
        let t = ((bound - origin[a]) / dir[a]).max(0.0);
        if t < best.0 {
            best = (t, wall);
        }
    }
    best
}

fn inward_normal(wall: usize) -> Vec3 {
    let mut n = Vec3::zeros();
    n[wall / 2] = if wall % 2 == 0 { 1.0 } else { -1.0 };
    n
}

fn uniform_direction(rng: &mut ChaCha8Rng) -> Vec3 {
    let z = 1.0 - 2.0 * rng.random::<f64>();
    let phi = std::f64::consts::TAU * rng.random::<f64>();
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

fn cosine_direction(normal: &Vec3, rng: &mut ChaCha8Rng) -> Vec3 {
    let u: f64 = rng.random();
    let phi = std::f64::consts::TAU * rng.random::<f64>();
    let r = u.sqrt();
    let local = Vec3::new(r * phi.cos(), r * phi.sin(), (1.0 - u).sqrt());
    frame_from_axis(normal, None) * local
}

/// Outgoing direction at a scatterer. The stored field assumes incidence
/// along the canonical polar axis, so the sample is drawn in the frame
/// whose polar axis is the incoming direction (expressed in object
/// coordinates, azimuth measured from the object's y axis) and mapped back
/// to world coordinates.
fn scatter_direction(s: &Scatterer, band: usize, incoming: &Vec3, rng: &mut ChaCha8Rng) -> Vec3 {
    let local_in = s.orientation.inverse() * incoming;
    let frame = frame_from_axis(&local_in, Some(&Vec3::y()));
    let (_, v) = s.samplers()[band].sample(rng);
    s.orientation * (frame * v)
}

enum Event {
    Wall(usize),
    Listener,
    Occluder,
    Scatterer(usize),
}

struct Histograms {
    unscattered: Vec<[f64; 4]>,
    scattered: Vec<[f64; 4]>,
}

fn trace_ray(scene: &Scene, band: usize, rng: &mut ChaCha8Rng, energy0: f64, max_bounces: usize, h: &mut Histograms) {
    let max_len = scene.duration * SPEED_OF_SOUND;
    let mut pos = scene.source;
    let mut dir = uniform_direction(rng);
    let mut energy = energy0;
    let mut path = 0.0;
    let mut scattered = false;
    let mut skip = None;
    for _ in 0..=max_bounces {
        let (mut t, wall) = wall_hit(&scene.dims, &pos, &dir);
        let mut event = Event::Wall(wall);
        if let Some(tl) = sphere_hit(&pos, &dir, &scene.listener, scene.listener_radius) {
            if tl < t {
                (t, event) = (tl, Event::Listener);
            }
        }
        for o in &scene.occluders {
            if let Some(to) = sphere_hit(&pos, &dir, &o.center, o.radius) {
                if to < t {
                    (t, event) = (to, Event::Occluder);
                }
            }
        }
        for (i, s) in scene.scatterers.iter().enumerate() {
            if skip == Some(i) {
                continue;
            }
            if let Some(ts) = sphere_hit(&pos, &dir, &s.center, s.radius) {
                if ts < t {
                    (t, event) = (ts, Event::Scatterer(i));
                }
            }
        }
        match event {
            Event::Listener => {
                // Arrival time is taken at the listener center.
                let len = path + (scene.listener - pos).norm();
                let bin = ((len / SPEED_OF_SOUND) / scene.bin_width).floor() as usize;
                let hist = if scattered { &mut h.scattered } else { &mut h.unscattered };
                if let Some(b) = hist.get_mut(bin) {
                    b[band] += energy;
                }
                return;
            }
            Event::Occluder => return,
            Event::Scatterer(i) => {
                let s = &scene.scatterers[i];
                path += (s.center - pos).norm();
                pos = s.center;
                dir = scatter_direction(s, band, &dir, rng);
                skip = Some(i);
                scattered = true;
            }
            Event::Wall(w) => {
                pos += dir * t;
                for a in 0..3 {
                    pos[a] = pos[a].clamp(0.0, scene.dims[a]);
                }
                path += t;
                let wall = &scene.walls[w];
                energy *= 1.0 - wall.absorption;
                if energy <= 0.0 {
                    return;
                }
                let n = inward_normal(w);
                dir = if rng.random::<f64>() < wall.scattering {
                    cosine_direction(&n, rng)
                } else {
                    let mut d = dir;
                    d[w / 2] = -d[w / 2];
                    d
                };
                skip = None;
            }
        }
        if path > max_len {
            return;
        }
    }
}

/// Traces `rays` rays per band from the source, allowing up to
/// `max_bounces` wall or scatterer interactions per ray.
pub fn trace(scene: &Scene, rays: usize, seed: u64, max_bounces: usize) -> Result<EnergyImpulseResponse> {
    scene.validate()?;
    if rays == 0 {
        return Err(Error::param("ray count must be at least 1"));
    }
    let n_bins = (scene.duration / scene.bin_width).ceil() as usize;
    let energy0 = 1.0 / rays as f64;
    let starts: Vec<usize> = (0..rays).step_by(CHUNK).collect();
    let parts: Vec<Histograms> = starts
        .par_iter()
        .map(|&start| {
            let mut h = Histograms {
                unscattered: vec![[0.0; 4]; n_bins],
                scattered: vec![[0.0; 4]; n_bins],
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for r in start..(start + CHUNK).min(rays) {
                for band in 0..BANDS_HZ.len() {
                    rng.set_stream(4 * r as u64 + band as u64);
                    rng.set_word_pos(0);
                    trace_ray(scene, band, &mut rng, energy0, max_bounces, &mut h);
                }
            }
            h
        })
        .collect();
    let mut ir = EnergyImpulseResponse::empty(n_bins, scene.bin_width, rays, seed, max_bounces);
    for p in parts {
        for (acc, v) in ir.unscattered.iter_mut().zip(&p.unscattered) {
            (0..4).for_each(|k| acc[k] += v[k]);
        }
        for (acc, v) in ir.scattered.iter_mut().zip(&p.scattered) {
            (0..4).for_each(|k| acc[k] += v[k]);
        }
    }
    for s in &scene.scatterers {
        for (sampler, band) in s.samplers().iter().zip(BANDS_HZ) {
            if sampler.fallback_uniform {
                ir.warnings
                    .push(format!("scatterer {} at {band} Hz has a zero field; sampled uniformly", s.id));
            }
        }
    }
    Ok(ir)
}

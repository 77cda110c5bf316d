//! Labeled sphere datasets on disk.
//!
//! Layout of an output directory:
//!
//! ```text
//! manifest.tsv            one row per example, `#` provenance header
//! clouds/<id>.xyz         point cloud, geom text format
//! targets/<id>_<hz>.sh    normalized coefficients per band
//! ```
//!
//! Targets are divided by a per-band dataset constant (stored in every
//! manifest row) so that all entries lie in [-1, 1].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Unit};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{sample_sphere_cloud, sphere_asf, IncidentWave, ScattererSpec};
use crate::error::{Error, Result};
use crate::geom::{PointCloud, Vec3};
use crate::sphharm::{ShCoeffs, NUM_COEFFS};
use crate::textio;
use crate::BANDS_HZ;

/// Headroom above the largest raw coefficient magnitude when picking the
/// per-band normalization constant.
pub const NORMALIZATION_HEADROOM: f64 = 1.1;

const MANIFEST: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub radii: Vec<f64>,
    pub seeds: usize,
    pub noise_sigma: f64,
    pub points: usize,
    /// Apply a random rotation about the propagation axis to every cloud.
    pub rotate: bool,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            radii: vec![0.5, 0.75, 1.0],
            seeds: 1,
            noise_sigma: 0.0,
            points: 1024,
            rotate: true,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        if self.radii.is_empty() {
            return Err(Error::param("radius range is empty"));
        }
        for &r in &self.radii {
            ScattererSpec::new(r)?;
        }
        if self.seeds == 0 {
            return Err(Error::param("seeds must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::param(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.points < 4 {
            return Err(Error::param("clouds need at least 4 points"));
        }
        Ok(())
    }
}

/// Seed for substream `stream` of a master seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Adds i.i.d. `N(0, sigma)` noise to every coordinate.
pub fn jitter(cloud: &PointCloud, sigma: f64, seed: u64) -> Result<PointCloud> {
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::param(format!("noise sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = cloud
        .points()
        .iter()
        .map(|p| p + Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))
        .collect();
    PointCloud::new(pts)
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub radius: f64,
    pub seed: u64,
    pub noise_sigma: f64,
    pub cloud: String,
    /// Target file per band, in `BANDS_HZ` order.
    pub targets: [String; 4],
    /// Normalization constant per band.
    pub norms: [f64; 4],
    /// Relative projection residual per band.
    pub residuals: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    /// Comment lines (without the leading `# `).
    pub header: Vec<String>,
    pub rows: Vec<ManifestRow>,
}

const COLUMNS: [&str; 17] = [
    "id", "radius", "seed", "noise_sigma", "cloud", "sh_125", "sh_250", "sh_500", "sh_1000", "norm_125", "norm_250",
    "norm_500", "norm_1000", "residual_125", "residual_250", "residual_500", "residual_1000",
];

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for h in &self.header {
            let _ = writeln!(s, "# {h}");
        }
        s.push_str(&COLUMNS.join("\t"));
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{}\t{}\t{}\t{}\t{}", r.id, r.radius, r.seed, r.noise_sigma, r.cloud);
            for t in &r.targets {
                let _ = write!(s, "\t{t}");
            }
            for v in r.norms.iter().chain(&r.residuals) {
                let _ = write!(s, "\t{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let header = text
            .lines()
            .filter_map(|l| l.strip_prefix('#'))
            .map(|l| l.trim().to_string())
            .collect();
        let mut lines = textio::content_lines(text);
        let (_, first) = lines.next().ok_or_else(|| Error::format("manifest", "missing column header"))?;
        if first.split('\t').collect::<Vec<_>>() != COLUMNS {
            return Err(Error::format("manifest", "unexpected column header"));
        }
        let mut rows = Vec::new();
        for (n, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != COLUMNS.len() {
                return Err(Error::format("manifest", format!("line {n}: expected {} columns", COLUMNS.len())));
            }
            let num = |i: usize| textio::parse_f64(f[i], "manifest", n);
            let seed = f[2]
                .parse()
                .map_err(|_| Error::format("manifest", format!("line {n}: bad seed")))?;
            rows.push(ManifestRow {
                id: f[0].to_string(),
                radius: num(1)?,
                seed,
                noise_sigma: num(3)?,
                cloud: f[4].to_string(),
                targets: [5, 6, 7, 8].map(|i| f[i].to_string()),
                norms: [num(9)?, num(10)?, num(11)?, num(12)?],
                residuals: [num(13)?, num(14)?, num(15)?, num(16)?],
            });
        }
        Ok(Self { header, rows })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::parse(&textio::read_to_string(&dir.join(MANIFEST))?)
    }
}

/// Position of a band in `BANDS_HZ`.
pub fn band_index(frequency_hz: u32) -> Result<usize> {
    BANDS_HZ
        .iter()
        .position(|&b| b == frequency_hz)
        .ok_or_else(|| Error::param(format!("unsupported band {frequency_hz} Hz")))
}

struct Generated {
    row: ManifestRow,
    cloud: PointCloud,
    raw: [[f64; NUM_COEFFS]; 4],
}

fn generate_one(cfg: &DatasetConfig, ri: usize, si: usize) -> Result<Generated> {
    let radius = cfg.radii[ri];
    let spec = ScattererSpec::new(radius)?;
    let index = (ri * cfg.seeds + si) as u64;
    let seed = derive_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = sample_sphere_cloud(&spec, cfg.points, rng.next_u64())?;
    let wave_dir = IncidentWave::new(BANDS_HZ[0])?.direction;
    if cfg.rotate {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        cloud = cloud.transformed(&Rotation3::from_axis_angle(&Unit::new_normalize(wave_dir), angle));
    }
    cloud = jitter(&cloud, cfg.noise_sigma, rng.next_u64())?;

    let mut raw = [[0.0; NUM_COEFFS]; 4];
    let mut residuals = [0.0; 4];
    for (b, &band) in BANDS_HZ.iter().enumerate() {
        let t = sphere_asf(&spec, &IncidentWave::new(band)?)?;
        raw[b] = t.coeffs.coeffs;
        residuals[b] = t.relative_error;
    }
    let id = format!("r{ri:03}_s{si:03}");
    Ok(Generated {
        row: ManifestRow {
            cloud: format!("clouds/{id}.xyz"),
            targets: BANDS_HZ.map(|b| format!("targets/{id}_{b}.sh")),
            id,
            radius,
            seed,
            noise_sigma: cfg.noise_sigma,
            norms: [0.0; 4],
            residuals,
        },
        cloud,
        raw,
    })
}

/// Generates every (radius, seed) example, writes the dataset to `out_dir`
/// and returns its manifest. Output is identical for serial and parallel
/// execution.
pub fn gen_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.radii.len())
        .flat_map(|ri| (0..cfg.seeds).map(move |si| (ri, si)))
        .collect();
    let mut generated = jobs
        .par_iter()
        .map(|&(ri, si)| generate_one(cfg, ri, si))
        .collect::<Result<Vec<_>>>()?;

    let mut norms = [0.0f64; 4];
    for g in &generated {
        for b in 0..4 {
            let m = g.raw[b].iter().fold(0.0f64, |a, c| a.max(c.abs()));
            norms[b] = norms[b].max(m);
        }
    }
    for n in norms.iter_mut() {
        *n = if *n > 0.0 { *n * NORMALIZATION_HEADROOM } else { 1.0 };
    }
    for g in generated.iter_mut() {
        g.row.norms = norms;
    }

    for sub in ["clouds", "targets"] {
        let p = out_dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    generated.par_iter().try_for_each(|g| -> Result<()> {
        g.cloud.save(&out_dir.join(&g.row.cloud))?;
        for (b, &band) in BANDS_HZ.iter().enumerate() {
            let c = ShCoeffs::new(band, g.raw[b].map(|v| v / norms[b]))?;
            c.save(&out_dir.join(&g.row.targets[b]))?;
        }
        Ok(())
    })?;

    let radii: Vec<String> = cfg.radii.iter().map(|r| r.to_string()).collect();
    let manifest = Manifest {
        header: vec![
            format!("asf-dataset/1 generated by asf {}", crate::VERSION),
            format!("radii: {}", radii.join(",")),
            format!("seeds: {}", cfg.seeds),
            format!("noise_sigma: {}", cfg.noise_sigma),
            format!("points: {}", cfg.points),
            format!("rotate_about_axis: {}", cfg.rotate),
            format!("seed: {}", cfg.seed),
            "field: far-field scattering amplitude magnitude, polar axis = propagation direction (-x)".into(),
        ],
        rows: generated.into_iter().map(|g| g.row).collect(),
    };
    let path = out_dir.join(MANIFEST);
    textio::write_string(&path, &manifest.to_text())?;
    Ok(manifest)
}

/// A cloud with its normalized per-band targets.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub id: String,
    pub radius: f64,
    pub seed: u64,
    pub noise_sigma: f64,
    pub cloud: PointCloud,
    /// Normalized targets in `BANDS_HZ` order.
    pub targets: Vec<ShCoeffs>,
}

/// A dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let examples = manifest
            .rows
            .par_iter()
            .map(|r| -> Result<LabeledExample> {
                let targets = r
                    .targets
                    .iter()
                    .map(|t| ShCoeffs::load(&dir.join(t)))
                    .collect::<Result<Vec<_>>>()?;
                for (t, &band) in targets.iter().zip(&BANDS_HZ) {
                    if t.frequency_hz != band {
                        return Err(Error::format("dataset", format!("{}: band mismatch", r.id)));
                    }
                }
                Ok(LabeledExample {
                    id: r.id.clone(),
                    radius: r.radius,
                    seed: r.seed,
                    noise_sigma: r.noise_sigma,
                    cloud: PointCloud::load(&dir.join(&r.cloud))?,
                    targets,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Normalization constant of a band (shared by every row).
    pub fn norm(&self, frequency_hz: u32) -> Result<f64> {
        let b = band_index(frequency_hz)?;
        self.manifest
            .rows
            .first()
            .map(|r| r.norms[b])
            .ok_or_else(|| Error::param("dataset is empty"))
    }

    pub fn example(&self, id: &str) -> Option<&LabeledExample> {
        self.examples.iter().find(|e| e.id == id)
    }
}

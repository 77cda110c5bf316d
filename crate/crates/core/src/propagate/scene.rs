use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Rotation3;

use super::sampler::{build_sampler, DirectionSampler};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::sphharm::ShCoeffs;
use crate::textio;
use crate::BANDS_HZ;

const WHAT: &str = "scene file";

/// Wall order used by every per-wall array.
pub const WALL_NAMES: [&str; 6] = ["x0", "x1", "y0", "y1", "z0", "z1"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wall {
    /// Fraction of incident energy absorbed, in `[0, 1]`.
    pub absorption: f64,
    /// Probability that a reflection is diffuse rather than specular.
    pub scattering: f64,
}

impl Default for Wall {
    fn default() -> Self {
        Self {
            absorption: 0.1,
            scattering: 0.2,
        }
    }
}

/// An object represented by its bounding sphere and one scattering field
/// per band. Rays hitting the sphere leave from its center in a direction
/// drawn from the band's field.
#[derive(Debug, Clone)]
pub struct Scatterer {
    pub id: String,
    pub center: Vec3,
    pub radius: f64,
    /// Object frame in world coordinates.
    pub orientation: Rotation3<f64>,
    coeffs: Vec<ShCoeffs>,
    samplers: Vec<DirectionSampler>,
}

impl Scatterer {
    /// `coeffs` holds one field per band in `BANDS_HZ` order.
    pub fn new(id: &str, center: Vec3, radius: f64, coeffs: Vec<ShCoeffs>) -> Result<Self> {
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(Error::param(format!("bad scatterer id {id:?}")));
        }
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::param("scatterer radius must be positive"));
        }
        let mut s = Self {
            id: id.to_string(),
            center,
            radius,
            orientation: Rotation3::identity(),
            coeffs: Vec::new(),
            samplers: Vec::new(),
        };
        s.set_coeffs(coeffs)?;
        Ok(s)
    }

    pub fn with_orientation(mut self, orientation: Rotation3<f64>) -> Self {
        self.orientation = orientation;
        self
    }

    fn set_coeffs(&mut self, coeffs: Vec<ShCoeffs>) -> Result<()> {
        if coeffs.len() != BANDS_HZ.len() {
            return Err(Error::param(format!("need {} fields, one per band", BANDS_HZ.len())));
        }
        for (c, band) in coeffs.iter().zip(BANDS_HZ) {
            if c.frequency_hz != band {
                return Err(Error::param(format!(
                    "field for {} Hz given where {band} Hz is expected",
                    c.frequency_hz
                )));
            }
        }
        self.samplers = coeffs.iter().map(build_sampler).collect();
        self.coeffs = coeffs;
        Ok(())
    }

    pub fn coeffs(&self) -> &[ShCoeffs] {
        &self.coeffs
    }

    pub fn samplers(&self) -> &[DirectionSampler] {
        &self.samplers
    }
}

/// A sphere that absorbs every ray reaching it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occluder {
    pub center: Vec3,
    pub radius: f64,
}

/// A shoebox room spanning `[0, dims]` with a point source, a spherical
/// listener, scatterers and occluders.
#[derive(Debug, Clone)]
pub struct Scene {
    pub dims: Vec3,
    pub walls: [Wall; 6],
    pub source: Vec3,
    pub listener: Vec3,
    pub listener_radius: f64,
    /// Histogram bin width in seconds.
    pub bin_width: f64,
    /// Arrivals later than this many seconds are not recorded.
    pub duration: f64,
    pub scatterers: Vec<Scatterer>,
    pub occluders: Vec<Occluder>,
}

fn inside_box(dims: &Vec3, p: &Vec3, margin: f64) -> bool {
    (0..3).all(|a| p[a] - margin > 0.0 && p[a] + margin < dims[a])
}

impl Scene {
    pub fn new(dims: Vec3, source: Vec3, listener: Vec3) -> Self {
        Self {
            dims,
            walls: [Wall::default(); 6],
            source,
            listener,
            listener_radius: 0.5,
            bin_width: 1e-3,
            duration: 1.0,
            scatterers: Vec::new(),
            occluders: Vec::new(),
        }
    }

    pub fn with_walls(mut self, wall: Wall) -> Self {
        self.walls = [wall; 6];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0..3).all(|a| self.dims[a] > 0.0 && self.dims[a].is_finite()) {
            return Err(Error::param("room dimensions must be positive"));
        }
        for (w, name) in self.walls.iter().zip(WALL_NAMES) {
            if !(0.0..=1.0).contains(&w.absorption) || !(0.0..=1.0).contains(&w.scattering) {
                return Err(Error::param(format!("wall {name}: coefficients must lie in [0, 1]")));
            }
        }
        if !(self.bin_width > 0.0) || !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::param("bin width and duration must be positive"));
        }
        if !(self.listener_radius > 0.0) {
            return Err(Error::param("listener radius must be positive"));
        }
        if !inside_box(&self.dims, &self.source, 0.0) {
            return Err(Error::param("source lies outside the room"));
        }
        if !inside_box(&self.dims, &self.listener, self.listener_radius) {
            return Err(Error::param("listener sphere must lie inside the room"));
        }
        if (self.source - self.listener).norm() <= self.listener_radius {
            return Err(Error::param("source lies inside the listener sphere"));
        }
        let spheres = self
            .scatterers
            .iter()
            .map(|s| (format!("scatterer {}", s.id), s.center, s.radius))
            .chain(
                self.occluders
                    .iter()
                    .enumerate()
                    .map(|(i, o)| (format!("occluder {i}"), o.center, o.radius)),
            );
        for (name, c, r) in spheres {
            if !(r > 0.0) || !inside_box(&self.dims, &c, r) {
                return Err(Error::param(format!("{name} must lie inside the room")));
            }
            if (self.source - c).norm() <= r {
                return Err(Error::param(format!("source lies inside {name}")));
            }
        }
        for (i, s) in self.scatterers.iter().enumerate() {
            if self.scatterers[..i].iter().any(|o| o.id == s.id) {
                return Err(Error::param(format!("duplicate scatterer id {}", s.id)));
            }
        }
        Ok(())
    }

    pub fn scatterer(&self, id: &str) -> Option<&Scatterer> {
        self.scatterers.iter().find(|s| s.id == id)
    }

    /// Parses scene text; relative coefficient paths resolve against
    /// `base_dir`. Anything after `#` on a line is a comment.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut scene = Scene::new(Vec3::zeros(), Vec3::zeros(), Vec3::zeros());
        let mut seen_room = false;
        let mut seen_source = false;
        let mut seen_listener = false;
        let mut block: Option<Block> = None;
        for (no, line) in textio::content_lines(text) {
            let line = line.split('#').next().unwrap_or_default().trim_end();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::format(WHAT, format!("line {no}: {msg}"));
            let mut words = line.split_whitespace();
            let head = words.next().unwrap_or_default();
            if head == "end" {
                let b = block.take().ok_or_else(|| at("`end` outside a block".into()))?;
                b.finish(&mut scene, base_dir).map_err(|e| at(e.to_string()))?;
                continue;
            }
            if head == "scatterer" || head == "occluder" {
                if block.is_some() {
                    return Err(at("blocks cannot nest".into()));
                }
                let id = words.next().unwrap_or_default().to_string();
                if head == "scatterer" && id.is_empty() {
                    return Err(at("scatterer needs an id".into()));
                }
                block = Some(Block {
                    kind: head.to_string(),
                    id,
                    line: no,
                    fields: Vec::new(),
                });
                continue;
            }
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| at(format!("expected `key: value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(b) = block.as_mut() {
                b.fields.push((key.to_string(), value.to_string(), no));
                continue;
            }
            match key {
                "room" => {
                    scene.dims = vec3(value).map_err(at)?;
                    seen_room = true;
                }
                "source" => {
                    scene.source = vec3(value).map_err(at)?;
                    seen_source = true;
                }
                "listener" => {
                    scene.listener = vec3(value).map_err(at)?;
                    seen_listener = true;
                }
                "listener_radius" => scene.listener_radius = num(value).map_err(at)?,
                "bin_width" => scene.bin_width = num(value).map_err(at)?,
                "duration" => scene.duration = num(value).map_err(at)?,
                "absorption" => {
                    for (w, v) in scene.walls.iter_mut().zip(per_wall(value).map_err(at)?) {
                        w.absorption = v;
                    }
                }
                "scattering" => {
                    for (w, v) in scene.walls.iter_mut().zip(per_wall(value).map_err(at)?) {
                        w.scattering = v;
                    }
                }
                _ => return Err(at(format!("unknown key {key:?}"))),
            }
        }
        if let Some(b) = block {
            return Err(Error::format(WHAT, format!("block opened on line {} is not closed", b.line)));
        }
        if !(seen_room && seen_source && seen_listener) {
            return Err(Error::format(WHAT, "room, source and listener are required"));
        }
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&textio::read_to_string(path)?, base)
    }

    /// Scene text with each scatterer's fields referenced as
    /// `{prefix}{id}_{band}.sh`; the files themselves are not written.
    pub fn to_text(&self, prefix: &str) -> String {
        let v = |p: &Vec3| format!("{} {} {}", p.x, p.y, p.z);
        let mut s = String::new();
        let _ = writeln!(s, "room: {}", v(&self.dims));
        let join = |f: &dyn Fn(&Wall) -> f64| self.walls.iter().map(|w| f(w).to_string()).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "absorption: {}", join(&|w| w.absorption));
        let _ = writeln!(s, "scattering: {}", join(&|w| w.scattering));
        let _ = writeln!(s, "source: {}", v(&self.source));
        let _ = writeln!(s, "listener: {}", v(&self.listener));
        let _ = writeln!(s, "listener_radius: {}", self.listener_radius);
        let _ = writeln!(s, "bin_width: {}", self.bin_width);
        let _ = writeln!(s, "duration: {}", self.duration);
        for sc in &self.scatterers {
            let _ = writeln!(s, "\nscatterer {}", sc.id);
            let _ = writeln!(s, "center: {}", v(&sc.center));
            let _ = writeln!(s, "radius: {}", sc.radius);
            let m = sc.orientation.matrix();
            let _ = writeln!(s, "axes: {} {}", v(&m.column(0).into()), v(&m.column(2).into()));
            for band in BANDS_HZ {
                let _ = writeln!(s, "sh_{band}: {prefix}{}_{band}.sh", sc.id);
            }
            s.push_str("end\n");
        }
        for o in &self.occluders {
            let _ = writeln!(s, "\noccluder\ncenter: {}\nradius: {}\nend", v(&o.center), o.radius);
        }
        s
    }
}

struct Block {
    kind: String,
    id: String,
    line: usize,
    fields: Vec<(String, String, usize)>,
}

impl Block {
    fn finish(self, scene: &mut Scene, base_dir: &Path) -> Result<()> {
        let mut center = None;
        let mut radius = None;
        let mut axes = None;
        let mut paths: [Option<PathBuf>; 4] = Default::default();
        for (key, value, no) in &self.fields {
            let at = |msg: String| Error::format(WHAT, format!("line {no}: {msg}"));
            match key.as_str() {
                "center" => center = Some(vec3(value).map_err(at)?),
                "radius" => radius = Some(num(value).map_err(at)?),
                "axes" if self.kind == "scatterer" => axes = Some(orientation(value).map_err(at)?),
                k if self.kind == "scatterer" && k.starts_with("sh_") => {
                    let band: u32 = k[3..].parse().map_err(|_| at(format!("bad key {k:?}")))?;
                    let b = crate::oracle::dataset::band_index(band).map_err(|e| at(e.to_string()))?;
                    paths[b] = Some(base_dir.join(value));
                }
                _ => return Err(at(format!("unknown {} key {key:?}", self.kind))),
            }
        }
        let missing = |what: &str| Error::format(WHAT, format!("{} block on line {} lacks {what}", self.kind, self.line));
        let center = center.ok_or_else(|| missing("center"))?;
        let radius = radius.ok_or_else(|| missing("radius"))?;
        if self.kind == "occluder" {
            scene.occluders.push(Occluder { center, radius });
            return Ok(());
        }
        let coeffs = paths
            .iter()
            .zip(BANDS_HZ)
            .map(|(p, band)| {
                let p = p.as_ref().ok_or_else(|| missing(&format!("sh_{band}")))?;
                ShCoeffs::load(p)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut s = Scatterer::new(&self.id, center, radius, coeffs)?;
        if let Some(r) = axes {
            s = s.with_orientation(r);
        }
        scene.scatterers.push(s);
        Ok(())
    }
}

fn num(v: &str) -> std::result::Result<f64, String> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| format!("bad number {v:?}"))
}

fn nums(v: &str) -> std::result::Result<Vec<f64>, String> {
    v.split_whitespace().map(num).collect()
}

fn vec3(v: &str) -> std::result::Result<Vec3, String> {
    match nums(v)?.as_slice() {
        &[x, y, z] => Ok(Vec3::new(x, y, z)),
        _ => Err(format!("expected three numbers, got {v:?}")),
    }
}

fn per_wall(v: &str) -> std::result::Result<[f64; 6], String> {
    match nums(v)?.as_slice() {
        &[x] => Ok([x; 6]),
        &[a, b, c, d, e, f] => Ok([a, b, c, d, e, f]),
        _ => Err(format!("expected one value or six (x0 x1 y0 y1 z0 z1), got {v:?}")),
    }
}

/// `axes: x1 x2 x3 z1 z2 z3` gives the object's local x and z axes in world
/// coordinates.
fn orientation(v: &str) -> std::result::Result<Rotation3<f64>, String> {
    let n = nums(v)?;
    if n.len() != 6 {
        return Err(format!("axes needs six numbers, got {v:?}"));
    }
    let x = Vec3::new(n[0], n[1], n[2]);
    let z = Vec3::new(n[3], n[4], n[5]);
    if x.norm() < 1e-12 || z.norm() < 1e-12 || x.normalize().dot(&z.normalize()).abs() > 1e-6 {
        return Err("axes must be non-zero and orthogonal".into());
    }
    let (x, z) = (x.normalize(), z.normalize());
    Ok(Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[x, z.cross(&x), z])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fields(dir: &Path, id: &str) {
        for band in BANDS_HZ {
            let mut c = [0.0; 16];
            c[0] = 1.0;
            c[2] = 0.5;
            ShCoeffs::new(band, c).unwrap().save(&dir.join(format!("{id}_{band}.sh"))).unwrap();
        }
    }

    const TEXT: &str = "\
# small room
room: 6 5 3
absorption: 0.1 0.1 0.2 0.2 0.3 0.05
scattering: 0.2   # diffuse share
source: 1 1 1.5
listener: 5 4 1.5
listener_radius: 0.4

scatterer chair # tagged object
center: 3 2.5 1
radius: 0.6
axes: 0 1 0 0 0 1
sh_125: chair_125.sh
sh_250: chair_250.sh
sh_500: chair_500.sh
sh_1000: chair_1000.sh
end

occluder
center: 3 4 2
radius: 0.3
end
";

    #[test]
    fn parses_blocks_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write_fields(dir.path(), "chair");
        let s = Scene::parse(TEXT, dir.path()).unwrap();
        assert_eq!(s.walls[4].absorption, 0.3);
        assert_eq!(s.walls[5].scattering, 0.2);
        assert_eq!(s.scatterers.len(), 1);
        assert_eq!(s.occluders.len(), 1);
        let sc = s.scatterer("chair").unwrap();
        assert!((sc.orientation * Vec3::x() - Vec3::y()).norm() < 1e-12);
        assert_eq!(sc.coeffs()[3].frequency_hz, 1000);
        let again = Scene::parse(&s.to_text(""), dir.path()).unwrap();
        assert_eq!(again.to_text(""), s.to_text(""));
    }

    #[test]
    fn rejects_bad_scenes() {
        let dir = tempfile::tempdir().unwrap();
        write_fields(dir.path(), "chair");
        let bad = [
            TEXT.replace("source: 1 1 1.5", "source: 9 1 1.5"),
            TEXT.replace("radius: 0.6", "radius: 2.9"),
            TEXT.replace("absorption: 0.1 0.1 0.2 0.2 0.3 0.05", "absorption: 1.5"),
            TEXT.replace("absorption: 0.1 0.1 0.2 0.2 0.3 0.05", "absorption: 0.1 0.2"),
            TEXT.replace("sh_1000: chair_1000.sh\n", ""),
            TEXT.replace("sh_1000: chair_1000.sh", "sh_1000: chair_500.sh"),
            TEXT.replacen("end\n", "", 1),
            TEXT.replace("listener_radius: 0.4", "listener_radius: 1.4"),
            TEXT.replace("room: 6 5 3\n", ""),
            TEXT.replace("axes: 0 1 0 0 0 1", "axes: 0 1 0 0 1 1"),
            TEXT.replace("duration", "durations").replace("listener_radius: 0.4", "wobble: 1"),
        ];
        for (i, t) in bad.iter().enumerate() {
            assert!(Scene::parse(t, dir.path()).is_err(), "case {i}");
        }
    }
}

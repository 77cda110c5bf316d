//! Point clouds and the local-shape kernels computed on them.
//!
//! Neighbor order is canonical: ascending squared distance, ties broken by
//! the lexicographic order of the neighbor's (x, y, z) coordinates and only
//! then by index. Because the rule looks at coordinates rather than storage
//! position, every per-point quantity derived from a neighborhood is the
//! same no matter how the cloud is permuted.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::textio;

pub type Vec3 = Vector3<f64>;

/// Ordered list of 3D points in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

/// Indices of the K nearest neighbors of one point, in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSet {
    pub indices: Vec<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if let Some(i) = points
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::param(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    pub fn from_xyz(coords: &[[f64; 3]]) -> Result<Self> {
        Self::new(coords.iter().map(|c| Vec3::new(c[0], c[1], c[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &Vec3 {
        &self.points[i]
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    /// Reorders the points: output point `k` is input point `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            points: perm.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn translated(&self, t: &Vec3) -> Self {
        Self {
            points: self.points.iter().map(|p| p + t).collect(),
        }
    }

    pub fn transformed(&self, rot: &nalgebra::Rotation3<f64>) -> Self {
        Self {
            points: self.points.iter().map(|p| rot * p).collect(),
        }
    }

    pub fn centroid(&self) -> Vec3 {
        let sum: Vec3 = self.points.iter().sum();
        sum / self.points.len().max(1) as f64
    }

    /// Reads the plain-text format: one `x y z` point per line, `#` comments.
    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&textio::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (line, content) in textio::content_lines(text) {
            let toks: Vec<&str> = content.split_whitespace().collect();
            if toks.len() != 3 {
                return Err(Error::format(
                    "point cloud",
                    format!("line {line}: expected 3 values, found {}", toks.len()),
                ));
            }
            let mut xyz = [0.0; 3];
            for (slot, tok) in xyz.iter_mut().zip(&toks) {
                *slot = textio::parse_f64(tok, "point cloud", line)?;
            }
            points.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
        }
        Self::new(points)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 48);
        for p in &self.points {
            let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        textio::write_string(path, &self.to_text())
    }
}

/// Rotation whose third column is `axis` (normalized): it maps a local
/// frame with polar axis +z onto world coordinates. The local x axis is the
/// projection of `reference` (or of the world axis least aligned with
/// `axis` when `reference` is parallel or absent) orthogonal to `axis`.
pub fn frame_from_axis(axis: &Vec3, reference: Option<&Vec3>) -> nalgebra::Rotation3<f64> {
    let e3 = axis.normalize();
    let fallback = || {
        let a = e3.map(f64::abs);
        if a.x <= a.y && a.x <= a.z {
            Vec3::x()
        } else if a.y <= a.z {
            Vec3::y()
        } else {
            Vec3::z()
        }
    };
    let mut helper = reference.copied().unwrap_or_else(fallback);
    let mut e1 = helper - e3 * helper.dot(&e3);
    if e1.norm() < 1e-9 {
        helper = fallback();
        e1 = helper - e3 * helper.dot(&e3);
    }
    let e1 = e1.normalize();
    let e2 = e3.cross(&e1);
    nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[e1, e2, e3]))
}

/// Unit vector of colatitude `theta` and longitude `phi` in a +z-polar frame.
pub fn unit_from_angles(theta: f64, phi: f64) -> Vec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vec3::new(st * cp, st * sp, ct)
}

/// Inverse of [`unit_from_angles`]; `phi` in `[0, 2 pi)`.
pub fn angles_from_unit(v: &Vec3) -> (f64, f64) {
    let theta = v.z.clamp(-1.0, 1.0).acos();
    let mut phi = v.y.atan2(v.x);
    if phi < 0.0 {
        phi += std::f64::consts::TAU;
    }
    (theta, phi)
}

/// Total order on candidate neighbors: squared distance, then coordinates,
/// then index.
#[inline]
fn candidate_cmp(a: (f64, &Vec3, usize), b: (f64, &Vec3, usize)) -> Ordering {
    a.0.total_cmp(&b.0)
        .then_with(|| lex_cmp(a.1, b.1))
        .then_with(|| a.2.cmp(&b.2))
}

#[inline]
pub(crate) fn lex_cmp(a: &Vec3, b: &Vec3) -> Ordering {
    a.x.total_cmp(&b.x)
        .then_with(|| a.y.total_cmp(&b.y))
        .then_with(|| a.z.total_cmp(&b.z))
}

#[inline]
fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

fn check_k(cloud: &PointCloud, k: usize) -> Result<()> {
    if k == 0 || k >= cloud.len() {
        return Err(Error::param(format!(
            "k = {k} out of range 1..={} for a cloud of {} points",
            cloud.len().saturating_sub(1),
            cloud.len()
        )));
    }
    Ok(())
}

/// K nearest neighbors of point `query` by exhaustive scan, excluding itself.
pub fn knn(cloud: &PointCloud, query: usize, k: usize) -> Result<NeighborSet> {
    check_k(cloud, k)?;
    if query >= cloud.len() {
        return Err(Error::param(format!("query index {query} out of range")));
    }
    Ok(NeighborSet {
        indices: knn_unchecked(cloud.points(), query, k),
    })
}

/// Neighbor sets of every point.
pub fn knn_all(cloud: &PointCloud, k: usize) -> Result<Vec<NeighborSet>> {
    check_k(cloud, k)?;
    Ok((0..cloud.len())
        .map(|i| NeighborSet {
            indices: knn_unchecked(cloud.points(), i, k),
        })
        .collect())
}

fn knn_unchecked(points: &[Vec3], query: usize, k: usize) -> Vec<usize> {
    let q = &points[query];
    // Sorted best-k buffer; k is small so insertion is cheaper than a heap.
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (j, p) in points.iter().enumerate() {
        if j == query {
            continue;
        }
        let d = dist2(q, p);
        if best.len() == k {
            let (wd, wj) = best[k - 1];
            if d > wd {
                continue;
            }
            if candidate_cmp((d, p, j), (wd, &points[wj], wj)) != Ordering::Less {
                continue;
            }
        }
        let pos = best
            .iter()
            .position(|&(bd, bj)| candidate_cmp((d, p, j), (bd, &points[bj], bj)) == Ordering::Less)
            .unwrap_or(best.len());
        best.insert(pos, (d, j));
        best.truncate(k);
    }
    best.into_iter().map(|(_, j)| j).collect()
}

/// Greedy max-min subsampling starting at `seed_index`; output is in
/// selection order. Ties on the max-min distance go to the lexicographically
/// smallest point.
pub fn furthest_point_sample(cloud: &PointCloud, n: usize, seed_index: usize) -> Result<PointCloud> {
    let idx = furthest_point_indices(cloud, n, seed_index)?;
    Ok(cloud.permuted(&idx))
}

pub fn furthest_point_indices(cloud: &PointCloud, n: usize, seed_index: usize) -> Result<Vec<usize>> {
    let pts = cloud.points();
    if n > pts.len() {
        return Err(Error::param(format!(
            "cannot sample {n} points from a cloud of {}",
            pts.len()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if seed_index >= pts.len() {
        return Err(Error::param(format!("seed index {seed_index} out of range")));
    }
    let mut selected = Vec::with_capacity(n);
    let mut taken = vec![false; pts.len()];
    let mut min_d = vec![f64::INFINITY; pts.len()];
    let mut current = seed_index;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == n {
            break;
        }
        let c = pts[current];
        let mut next: Option<usize> = None;
        for (j, p) in pts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let d = dist2(&c, p);
            if d < min_d[j] {
                min_d[j] = d;
            }
            next = match next {
                None => Some(j),
                Some(b) => match min_d[j].total_cmp(&min_d[b]) {
                    Ordering::Greater => Some(j),
                    Ordering::Equal if lex_cmp(p, &pts[b]) == Ordering::Less => Some(j),
                    _ => Some(b),
                },
            };
        }
        current = next.expect("fewer untaken points than requested");
    }
    Ok(selected)
}

/// Uniformly weighted differential coordinate: mean of `v_i - v_j` over the
/// neighborhood.
pub fn uniform_delta(cloud: &PointCloud, i: usize, neighbors: &NeighborSet) -> Vec3 {
    let vi = cloud.point(i);
    let sum: Vec3 = neighbors.indices.iter().map(|&j| vi - cloud.point(j)).sum();
    sum / neighbors.indices.len() as f64
}

/// Gaussian RBF weight `exp(-|d|^2 / scale^2)`.
#[inline]
pub fn rbf(d2: f64, scale: f64) -> f64 {
    (-d2 / (scale * scale)).exp()
}

/// Normalized RBF weights `phi(v_i - v_j) / sum phi` over the neighborhood,
/// in neighbor order.
pub fn rbf_weights(
    cloud: &PointCloud,
    i: usize,
    neighbors: &NeighborSet,
    scale: f64,
) -> Result<Vec<f64>> {
    let vi = cloud.point(i);
    let mut w: Vec<f64> = neighbors
        .indices
        .iter()
        .map(|&j| rbf(dist2(vi, cloud.point(j)), scale))
        .collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateNeighborhood { index: i });
    }
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

/// RBF-weighted differential coordinate with unit length scale.
pub fn rbf_delta(cloud: &PointCloud, i: usize, neighbors: &NeighborSet) -> Result<Vec3> {
    rbf_delta_scaled(cloud, i, neighbors, 1.0)
}

/// RBF-weighted differential coordinate; `scale` stretches the Gaussian
/// (1.0 reproduces `exp(-|d|^2)` exactly).
pub fn rbf_delta_scaled(
    cloud: &PointCloud,
    i: usize,
    neighbors: &NeighborSet,
    scale: f64,
) -> Result<Vec3> {
    let w = rbf_weights(cloud, i, neighbors, scale)?;
    let vi = cloud.point(i);
    Ok(neighbors
        .indices
        .iter()
        .zip(&w)
        .map(|(&j, &wj)| (vi - cloud.point(j)) * wj)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn knn_nearest_by_inspection() {
        let c = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        assert_eq!(knn(&c, 0, 1).unwrap().indices, vec![1]);
    }

    #[test]
    fn knn_square_tie_break_is_lexicographic() {
        // Both (0,1,0) and (1,0,0) are at distance 1; (0,1,0) sorts first.
        let c = PointCloud::from_xyz(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
        ])
        .unwrap();
        assert_eq!(knn(&c, 0, 2).unwrap().indices, vec![3, 1]);
    }

    #[test]
    fn knn_matches_sorted_scan() {
        let c = random_cloud(200, 1);
        for q in [0, 17, 101, 199] {
            let mut all: Vec<usize> = (0..200).filter(|&j| j != q).collect();
            all.sort_by(|&a, &b| {
                let da = (c.point(q) - c.point(a)).norm_squared();
                let db = (c.point(q) - c.point(b)).norm_squared();
                da.total_cmp(&db)
            });
            assert_eq!(knn(&c, q, 5).unwrap().indices, all[..5].to_vec());
        }
    }

    #[test]
    fn knn_rejects_bad_k() {
        let c = random_cloud(4, 2);
        assert!(matches!(knn(&c, 0, 0), Err(Error::Parameter(_))));
        assert!(matches!(knn(&c, 0, 4), Err(Error::Parameter(_))));
        assert!(knn(&c, 0, 3).is_ok());
    }

    #[test]
    fn knn_with_duplicates_is_permutation_stable() {
        let c = PointCloud::from_xyz(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ])
        .unwrap();
        let n0 = knn(&c, 0, 3).unwrap();
        let coords0: Vec<Vec3> = n0.indices.iter().map(|&j| *c.point(j)).collect();
        let p = c.permuted(&[4, 2, 0, 3, 1]);
        let n1 = knn(&p, 2, 3).unwrap();
        let coords1: Vec<Vec3> = n1.indices.iter().map(|&j| *p.point(j)).collect();
        assert_eq!(coords0, coords1);
    }

    #[test]
    fn fps_full_cloud_is_permutation() {
        let c = random_cloud(30, 3);
        let mut idx = furthest_point_indices(&c, 30, 5).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn fps_collinear_picks_extremes() {
        let pts: Vec<[f64; 3]> = (0..=10).map(|x| [x as f64, 0.0, 0.0]).collect();
        let c = PointCloud::from_xyz(&pts).unwrap();
        let s = furthest_point_sample(&c, 2, 0).unwrap();
        assert_eq!(s.point(0).x, 0.0);
        assert_eq!(s.point(1).x, 10.0);
    }

    #[test]
    fn fps_too_many_is_error() {
        let c = random_cloud(10, 4);
        assert!(furthest_point_sample(&c, 11, 0).is_err());
    }

    #[test]
    fn uniform_delta_examples() {
        let c = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
            .unwrap();
        let sym = NeighborSet { indices: vec![1, 2] };
        assert_eq!(uniform_delta(&c, 0, &sym), Vec3::zeros());
        let one = NeighborSet { indices: vec![3] };
        assert_eq!(uniform_delta(&c, 0, &one), Vec3::new(0.0, 0.0, -1.0));
    }

    #[test]
    fn hexagon_deltas_vanish() {
        let mut pts = vec![[0.0, 0.0, 0.0]];
        for k in 0..6 {
            let a = k as f64 * std::f64::consts::PI / 3.0;
            pts.push([0.3 * a.cos(), 0.3 * a.sin(), 0.0]);
        }
        let c = PointCloud::from_xyz(&pts).unwrap();
        let n = knn(&c, 0, 6).unwrap();
        assert!(uniform_delta(&c, 0, &n).norm() < 1e-15);
        assert!(rbf_delta(&c, 0, &n).unwrap().norm() < 1e-15);
    }

    #[test]
    fn rbf_delta_two_neighbors() {
        let c = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]).unwrap();
        let d = rbf_delta(&c, 0, &NeighborSet { indices: vec![1, 2] }).unwrap();
        assert!((d.x - -0.95257).abs() < 5e-6, "{d}");
        assert!((d.y - -0.09485).abs() < 5e-6, "{d}");
        assert_eq!(d.z, 0.0);
    }

    #[test]
    fn rbf_delta_underflow_is_degenerate() {
        let c = PointCloud::from_xyz(&[[0.0, 0.0, 0.0], [100.0, 0.0, 0.0], [0.0, -100.0, 0.0]]).unwrap();
        let err = rbf_delta(&c, 0, &NeighborSet { indices: vec![1, 2] }).unwrap_err();
        assert!(matches!(err, Error::DegenerateNeighborhood { index: 0 }));
    }

    #[test]
    fn rbf_delta_is_rotation_equivariant() {
        let c = random_cloud(64, 5);
        let rot = Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let rc = c.transformed(&rot);
        for i in 0..64 {
            let n = knn(&c, i, 5).unwrap();
            let nr = knn(&rc, i, 5).unwrap();
            let d = rbf_delta(&c, i, &n).unwrap();
            let dr = rbf_delta(&rc, i, &nr).unwrap();
            assert!((rot * d - dr).norm() < 1e-9);
        }
    }

    #[test]
    fn delta_norm_bounded_by_farthest_neighbor() {
        let c = random_cloud(100, 6);
        for i in 0..100 {
            let n = knn(&c, i, 5).unwrap();
            let far = n
                .indices
                .iter()
                .map(|&j| (c.point(i) - c.point(j)).norm())
                .fold(0.0, f64::max);
            assert!(rbf_delta(&c, i, &n).unwrap().norm() <= far + 1e-15);
        }
    }

    #[test]
    fn text_round_trip_and_comments() {
        let c = random_cloud(10, 7);
        let text = format!("# header\n\n{}", c.to_text());
        assert_eq!(PointCloud::parse(&text).unwrap(), c);
        assert!(PointCloud::parse("1 2\n").is_err());
        assert!(PointCloud::parse("1 2 x\n").is_err());
        assert!(PointCloud::parse("1 2 NaN\n").is_err());
    }

    #[test]
    fn frame_maps_polar_axis() {
        for axis in [Vec3::new(-1.0, 0.0, 0.0), Vec3::new(0.3, -0.2, 0.9), Vec3::z()] {
            let r = frame_from_axis(&axis, None);
            assert!((r * Vec3::z() - axis.normalize()).norm() < 1e-15);
            assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
        }
        let r = frame_from_axis(&Vec3::z(), Some(&Vec3::new(1.0, 1.0, 0.0)));
        assert!((r * Vec3::x() - Vec3::new(1.0, 1.0, 0.0).normalize()).norm() < 1e-15);
    }

    #[test]
    fn angle_round_trip() {
        for (t, p) in [(0.3, 0.1), (2.0, 5.0), (1.5, 3.2)] {
            let (t2, p2) = angles_from_unit(&unit_from_angles(t, p));
            assert!((t - t2).abs() < 1e-12 && (p - p2).abs() < 1e-12);
        }
    }

    #[test]
    fn rbf_scale_one_is_verbatim() {
        let c = random_cloud(20, 8);
        let n = knn(&c, 3, 5).unwrap();
        assert_eq!(
            rbf_delta(&c, 3, &n).unwrap(),
            rbf_delta_scaled(&c, 3, &n, 1.0).unwrap()
        );
    }
}

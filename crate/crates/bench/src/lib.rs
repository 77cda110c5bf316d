//! Shared fixtures for the benchmarks.

use asf_core::oracle::{sample_sphere_cloud, ScattererSpec};
use asf_core::propagate::{Scatterer, Scene, Wall};
use asf_core::{PointCloud, ShCoeffs, Vec3, BANDS_HZ};

/// Points on a sphere of radius `radius`, deterministic in `seed`.
pub fn sphere_cloud(radius: f64, n: usize, seed: u64) -> PointCloud {
    sample_sphere_cloud(&ScattererSpec::new(radius).expect("valid radius"), n, seed).expect("valid cloud")
}

/// An 8 x 6 x 3 m room with one forward-lobed scatterer between source and
/// listener.
pub fn bench_scene() -> Scene {
    let mut scene = Scene::new(Vec3::new(8.0, 6.0, 3.0), Vec3::new(1.5, 3.0, 1.5), Vec3::new(6.5, 3.0, 1.5)).with_walls(
        Wall {
            absorption: 0.2,
            scattering: 0.2,
        },
    );
    let fields = BANDS_HZ
        .iter()
        .map(|&b| {
            let mut c = [0.0; 16];
            c[0] = 0.6;
            c[2] = 0.4;
            c[6] = 0.2;
            ShCoeffs::new(b, c).expect("valid band")
        })
        .collect();
    scene
        .scatterers
        .push(Scatterer::new("obj", Vec3::new(4.0, 3.0, 1.5), 0.7, fields).expect("valid scatterer"));
    scene
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn asf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asf"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run asf")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = asf(dir, args);
    assert!(
        out.status.success(),
        "asf {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const GEN: [&str; 10] = [
    "gen", "--radii", "0.5:1.0:0.05", "--seeds", "2", "--points", "96", "--seed", "4", "--out",
];

fn small_dataset(dir: &Path, name: &str) {
    let mut args = GEN.to_vec();
    args.push(name);
    ok(dir, &args);
}

#[test]
fn gen_writes_full_grid_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_dataset(d, "a");
    small_dataset(d, "b");
    let manifest = fs::read_to_string(d.join("a/manifest.tsv")).unwrap();
    let rows = manifest.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(rows, 22);
    assert_eq!(files(&d.join("a")), files(&d.join("b")));
    // Regenerating into an existing dataset replaces it identically.
    small_dataset(d, "a");
    assert_eq!(files(&d.join("a")), files(&d.join("b")));
}

#[test]
fn gen_records_noise() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        tmp.path(),
        &["gen", "--radii", "0.6,0.8", "--seeds", "1", "--points", "64", "--noise", "0.05", "--out", "n"],
    );
    let manifest = fs::read_to_string(tmp.path().join("n/manifest.tsv")).unwrap();
    assert!(manifest.contains("noise_sigma: 0.05"));
    let row = manifest.lines().find(|l| l.starts_with("r000")).unwrap();
    assert_eq!(row.split('\t').nth(3), Some("0.05"));
}

#[test]
fn invalid_flags_leave_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for args in [
        vec!["gen", "--radii", "1.0:0.5:0.1", "--out", "x"],
        vec!["gen", "--radii", "0.5", "--seeds", "0", "--out", "x"],
        vec!["gen", "--radii", "0.5", "--bogus", "--out", "x"],
        vec!["train", "--band", "300", "--data", "x", "--out", "m.ckpt"],
        vec!["trace", "--scene", "missing.scn", "--rays", "0"],
        vec!["frobnicate"],
    ] {
        let out = asf(d, &args);
        assert!(!out.status.success(), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    assert!(fs::read_dir(d).unwrap().next().is_none(), "stray files left");
    let usage = asf(d, &["gen", "--bogus"]);
    assert!(String::from_utf8_lossy(&usage.stderr).contains("Usage"));
}

fn train_args<'a>(out: &'a str, band: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "train",
        "--band",
        band,
        "--data",
        "data",
        "--out",
        out,
        "--epochs",
        "4",
        "--input-points",
        "48",
        "--batch-size",
        "4",
        "--seed",
        "9",
    ];
    v.extend_from_slice(extra);
    v
}

fn last_val_loss(log: &Path) -> f64 {
    let text = fs::read_to_string(log).unwrap();
    let last = text.lines().last().unwrap();
    last.split('\t').nth(4).unwrap().parse().unwrap()
}

#[test]
fn train_eval_predict_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_dataset(d, "data");

    ok(d, &train_args("m125.ckpt", "125", &[]));
    ok(d, &train_args("m1000.ckpt", "1000", &[]));
    for f in ["m125.ckpt", "m125.log.tsv", "m125.split.json", "m125.state.json"] {
        assert!(d.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(d.join("m125.log.tsv")).unwrap();
    assert!(log.contains("epoch\tstep\tlr\ttrain_loss\tval_loss"));
    assert!(log.contains("# seed: 9"));

    // Reruns are byte-identical.
    ok(d, &train_args("again.ckpt", "125", &[]));
    assert_eq!(fs::read(d.join("m125.ckpt")).unwrap(), fs::read(d.join("again.ckpt")).unwrap());
    assert_eq!(fs::read(d.join("m125.log.tsv")).unwrap(), fs::read(d.join("again.log.tsv")).unwrap());

    let out = ok(d, &["eval", "--model", "m125.ckpt", "m1000.ckpt", "--split", "test"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "band_hz\tn_examples\tmean_db_error\tnoise_sigma\tablation_flags");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("125\t2\t") && rows[2].starts_with("1000\t2\t"));

    ok(d, &["eval", "--model", "m125.ckpt", "--noise", "0.05", "--out", "noisy.tsv"]);
    assert!(fs::read_to_string(d.join("noisy.tsv")).unwrap().contains("\t0.05\tnone"));

    ok(d, &["predict", "--model", "m125.ckpt", "--cloud", "data/clouds/r003_s001.xyz", "--out", "pred"]);
    let sh = asf_core::ShCoeffs::load(&d.join("pred.sh")).unwrap();
    assert_eq!(sh.frequency_hz, 125);
    let map = asf_core::LatLongMap::parse_csv(&fs::read_to_string(d.join("pred.csv")).unwrap()).unwrap();
    assert_eq!((map.n_theta(), map.n_phi()), (18, 36));
}

#[test]
fn ablation_is_recorded_and_resume_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_dataset(d, "data");
    ok(d, &train_args("abl.ckpt", "500", &["--ablation", "no-surface-encoder"]));
    assert!(fs::read_to_string(d.join("abl.log.tsv")).unwrap().contains("ablation: no-surface-encoder"));

    ok(d, &train_args("full.ckpt", "500", &[]));
    ok(d, &train_args("part.ckpt", "500", &["--stop-after-epochs", "2"]));
    ok(d, &train_args("part.ckpt", "500", &["--resume"]));
    let a = last_val_loss(&d.join("full.log.tsv"));
    let b = last_val_loss(&d.join("part.log.tsv"));
    assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    assert_eq!(fs::read(d.join("full.ckpt")).unwrap(), fs::read(d.join("part.ckpt")).unwrap());
}

fn write_scene(d: &Path) {
    for band in [125, 250, 500, 1000] {
        let mut c = [0.0; 16];
        c[0] = 0.8;
        c[2] = 0.4;
        asf_core::ShCoeffs::new(band, c)
            .unwrap()
            .save(&d.join(format!("obj_{band}.sh")))
            .unwrap();
    }
    fs::write(
        d.join("room.scn"),
        "room: 8 6 3\nabsorption: 0.2\nsource: 1.5 2 1.4\nlistener: 6 4 1.6\nlistener_radius: 0.4\n\n\
         scatterer obj\ncenter: 4 3 1.5\nradius: 0.7\n\
         sh_125: obj_125.sh\nsh_250: obj_250.sh\nsh_500: obj_500.sh\nsh_1000: obj_1000.sh\nend\n",
    )
    .unwrap();
}

#[test]
fn trace_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_scene(d);
    ok(d, &["trace", "--scene", "room.scn", "--rays", "20000", "--seed", "7", "--out", "a.tsv"]);
    ok(d, &["trace", "--scene", "room.scn", "--rays", "20000", "--seed", "7", "--out", "b.tsv"]);
    let a = fs::read_to_string(d.join("a.tsv")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("b.tsv")).unwrap());
    assert!(a.contains("time_s\te125\te250\te500\te1000"));
    assert!(a.contains("# seed: 7"));
    let rows = a.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(rows, 1000);
    ok(d, &["trace", "--scene", "room.scn", "--rays", "20000", "--seed", "8", "--out", "c.tsv"]);
    assert_ne!(a, fs::read_to_string(d.join("c.tsv")).unwrap());
}

//! `asf`: dataset generation, training, evaluation, prediction and ray
//! tracing for learned acoustic scattering fields.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use asf_core::net::{forward, load_model};
use asf_core::oracle::dataset::derive_seed;
use asf_core::oracle::{gen_dataset, Dataset, DatasetConfig};
use asf_core::propagate::trace;
use asf_core::sphharm::{DEFAULT_N_PHI, DEFAULT_N_THETA};
use asf_core::train::{evaluate, split_dataset, train_model, SplitManifest, TrainConfig, TrainOutputs, EVAL_COLUMNS};
use asf_core::{Ablation, Error, LatLongMap, PointCloud, Pooling, Result, Scene, VERSION};
use clap::{Args, Parser, Subcommand};

/// Substream of `--seed` used for the train/validation/test split.
const SPLIT_STREAM: u64 = 2;

#[derive(Parser, Debug)]
#[command(name = "asf", version, about = "Learned acoustic scattering fields for point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled sphere dataset from the analytical oracle.
    Gen(GenArgs),
    /// Train one network for one frequency band.
    Train(TrainArgs),
    /// Mean dB error of trained models on a dataset split.
    Eval(EvalArgs),
    /// Predict the scattering field of a point cloud.
    Predict(PredictArgs),
    /// Trace an energy impulse response through a scene.
    Trace(TraceArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Radii in meters: `start:stop:step` (inclusive) or a comma list.
    #[arg(long, value_parser = parse_radii)]
    radii: Radii,
    /// Clouds per radius.
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    /// Standard deviation of Gaussian point noise, meters.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Points per cloud.
    #[arg(long, default_value_t = 1024)]
    points: usize,
    /// Keep every cloud in the same orientation.
    #[arg(long)]
    no_rotate: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Frequency band in Hz (125, 250, 500 or 1000).
    #[arg(long)]
    band: u32,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; the log, split and resume state go next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// `none`, `uniform-delta`, `no-surface-encoder`, or both joined by `+`.
    #[arg(long, default_value = "none", value_parser = parse_ablation)]
    ablation: Ablation,
    /// `max` or `mean`.
    #[arg(long, default_value = "max", value_parser = parse_pooling)]
    pooling: Pooling,
    /// Points per cloud fed to the network (0 keeps all).
    #[arg(long, default_value_t = 512)]
    input_points: usize,
    /// Continue from the saved state if it exists.
    #[arg(long)]
    resume: bool,
    /// Stop after this many epochs in this invocation.
    #[arg(long)]
    stop_after_epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint(s); one report row per model.
    #[arg(long, required = true, num_args = 1..)]
    model: Vec<PathBuf>,
    /// `train`, `validation` or `test`.
    #[arg(long, default_value = "test")]
    split: String,
    /// Dataset directory (defaults to the one recorded at training time).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Gaussian noise added to every evaluated cloud, meters.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path (prints to stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Point cloud in `.xyz` format.
    #[arg(long)]
    cloud: PathBuf,
    /// Output prefix; writes `PREFIX.sh` and `PREFIX.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_N_THETA)]
    n_theta: usize,
    #[arg(long, default_value_t = DEFAULT_N_PHI)]
    n_phi: usize,
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    rays: usize,
    #[arg(long, default_value_t = 50)]
    max_bounces: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// IR path (defaults to the scene path with `.ir.tsv`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
struct Radii(Vec<f64>);

fn parse_radii(s: &str) -> std::result::Result<Radii, String> {
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("bad number {t:?}"));
    if let [a, b, step] = s.split(':').collect::<Vec<_>>().as_slice() {
        let (a, b, step) = (num(a)?, num(b)?, num(step)?);
        if !(step > 0.0) || b < a {
            return Err("expected start:stop:step with stop >= start and step > 0".into());
        }
        let n = ((b - a) / step + 1e-9).floor() as usize + 1;
        // Rounded so that 0.5:1.0:0.05 lists 0.55 rather than 0.55000000000000004.
        return Ok(Radii((0..n).map(|i| ((a + i as f64 * step) * 1e12).round() / 1e12).collect()));
    }
    s.split(',').map(num).collect::<std::result::Result<_, _>>().map(Radii)
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_pooling(s: &str) -> std::result::Result<Pooling, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn provenance(command: &str, fields: &[(&str, String)]) -> Vec<String> {
    let mut h = vec![format!("asf {VERSION} {command}")];
    h.extend(fields.iter().map(|(k, v)| format!("{k}: {v}")));
    h
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn parent_dir(path: &Path) -> &Path {
    path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn io_err(path: &Path)-> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let cfg = DatasetConfig {
        radii: a.radii.0,
        seeds: a.seeds,
        noise_sigma: a.noise,
        points: a.points,
        rotate: !a.no_rotate,
        seed: a.seed,
    };
    // Build in a sibling temporary directory and move it into place so a
    // failed run leaves nothing behind.
    let parent = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(io_err(&parent))?;
    if a.out.exists() {
        let is_dataset = a.out.join("manifest.tsv").is_file();
        let is_empty = fs::read_dir(&a.out).map_err(io_err(&a.out))?.next().is_none();
        if !is_dataset && !is_empty {
            return Err(Error::Parameter(format!(
                "{} exists and is not a dataset; refusing to overwrite",
                a.out.display()
            )));
        }
    }
    let tmp = tempfile::Builder::new()
        .prefix(".asf-gen-")
        .tempdir_in(&parent)
        .map_err(io_err(&parent))?;
    let manifest = gen_dataset(&cfg, tmp.path())?;
    if a.out.exists() {
        fs::remove_dir_all(&a.out).map_err(io_err(&a.out))?;
    }
    let staged = tmp.keep();
    fs::rename(&staged, &a.out).map_err(io_err(&a.out))?;
    eprintln!("wrote {} examples to {}", manifest.rows.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::new(a.band);
    cfg.epochs = a.epochs;
    cfg.batch_size = a.batch_size;
    cfg.learning_rate0 = a.lr;
    cfg.ablation = a.ablation;
    cfg.pooling = a.pooling;
    cfg.input_points = a.input_points;
    cfg.seed = a.seed;
    cfg.stop_after = a.stop_after_epochs;
    cfg.validate()?;

    let ds = Dataset::load(&a.data)?;
    let ids: Vec<String> = ds.examples.iter().map(|e| e.id.clone()).collect();
    let mut split = split_dataset(&ids, derive_seed(a.seed, SPLIT_STREAM))?;
    // Recorded relative to the split file so the model directory and its
    // dataset can move together.
    let data_dir = fs::canonicalize(&a.data).map_err(io_err(&a.data))?;
    let out_dir = parent_dir(&a.out);
    let base = fs::canonicalize(out_dir).map_err(io_err(out_dir))?;
    let recorded = pathdiff::diff_paths(&data_dir, &base).unwrap_or(data_dir);
    split.dataset = Some(recorded.to_string_lossy().into_owned());
    split.save(&with_suffix(&a.out, ".split.json"))?;

    let outputs = TrainOutputs {
        checkpoint: a.out.clone(),
        log: with_suffix(&a.out, ".log.tsv"),
        state: Some(with_suffix(&a.out, ".state.json")),
        resume: a.resume,
        header: provenance(
            "train",
            &[("data", a.data.display().to_string()), ("split seed", split.seed.to_string())],
        ),
    };
    let report = train_model(&cfg, &ds, &split, &outputs)?;
    let last = report.log.last().expect("log has the initial row");
    eprintln!(
        "epoch {} of {}: train {:.4e}, validation {:.4e}, best validation {:.4e}{}",
        last.epoch,
        cfg.epochs,
        last.train_loss,
        last.val_loss,
        report.best_val_loss,
        if report.finished { "" } else { " (stopped early; rerun with --resume)" }
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut rows = Vec::new();
    let mut header = provenance(
        "eval",
        &[
            ("split", a.split.clone()),
            ("noise_sigma", a.noise.to_string()),
            ("seed", a.seed.to_string()),
        ],
    );
    for model_path in &a.model {
        let model = load_model(model_path)?;
        let split = SplitManifest::load(&with_suffix(model_path, ".split.json"))?;
        let data = match (&a.data, &split.dataset) {
            (Some(d), _) => d.clone(),
            (None, Some(d)) => parent_dir(model_path).join(d),
            (None, None) => return Err(Error::Parameter("no dataset recorded; pass --data".into())),
        };
        let ds = Dataset::load(&data)?;
        let report = evaluate(&model, &ds, split.get(&a.split)?, a.noise, a.seed)?;
        header.push(format!("model: {} data: {}", model_path.display(), data.display()));
        rows.push(report.row());
    }
    let mut text: String = header.iter().map(|h| format!("# {h}\n")).collect();
    text.push_str(&EVAL_COLUMNS.join("\t"));
    text.push('\n');
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    match &a.out {
        Some(path) => write_atomic(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    fs::write(tmp.path(), text).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let cloud = PointCloud::load(&a.cloud)?;
    let coeffs = forward(&model, &cloud)?.scaled(model.arch.target_scale);
    let map = LatLongMap::from_coeffs(&coeffs, a.n_theta, a.n_phi)?;
    let prefix = a
        .out
        .clone()
        .unwrap_or_else(|| with_suffix(&a.cloud, &format!("_{}", model.arch.frequency_hz)));
    let header = provenance(
        "predict",
        &[
            ("model", a.model.display().to_string()),
            ("cloud", a.cloud.display().to_string()),
        ],
    );
    let comments: String = header.iter().map(|h| format!("# {h}\n")).collect();
    let sh_path = prefix.with_extension("sh");
    let csv_path = prefix.with_extension("csv");
    write_atomic(&sh_path, &format!("{comments}{}", coeffs.to_text()))?;
    write_atomic(&csv_path, &format!("{comments}{}", map.to_csv()))?;
    eprintln!("wrote {} and {}", sh_path.display(), csv_path.display());
    Ok(())
}

fn cmd_trace(a: TraceArgs) -> Result<()> {
    let scene = Scene::load(&a.scene)?;
    let ir = trace(&scene, a.rays, a.seed, a.max_bounces)?;
    let out = a.out.clone().unwrap_or_else(|| with_suffix(&a.scene, ".ir.tsv"));
    let header = provenance("trace", &[("scene", a.scene.display().to_string())]);
    ir.save(&out, &header)?;
    for w in &ir.warnings {
        eprintln!("warning: {w}");
    }
    let total = ir.total();
    eprintln!(
        "wrote {} ({} bins); arrived energy per band: {:.4e} {:.4e} {:.4e} {:.4e}",
        out.display(),
        ir.n_bins(),
        total[0],
        total[1],
        total[2],
        total[3]
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Trace(a) => cmd_trace(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

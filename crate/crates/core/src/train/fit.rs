use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adam_step, lr_schedule, AdamState, SplitManifest, TrainConfig};
use crate::error::{Error, Result};
use crate::net::{self, Architecture, ModelParams, Prepared};
use crate::oracle::dataset::{band_index, derive_seed};
use crate::oracle::Dataset;
use crate::sphharm::NUM_COEFFS;
use crate::textio;

pub const LOG_COLUMNS: [&str; 5] = ["epoch", "step", "lr", "train_loss", "val_loss"];

const STATE_VERSION: u32 = 1;

/// Where a run writes. With `resume` set and an existing state file, the
/// run continues from the last completed epoch.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub state: Option<PathBuf>,
    pub resume: bool,
    /// Extra provenance lines for the log header.
    pub header: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub best: ModelParams,
    pub best_val_loss: f64,
    pub init_val_loss: f64,
    pub log: Vec<LogRow>,
    pub completed_epochs: usize,
    /// True when all configured epochs ran.
    pub finished: bool,
}

#[derive(Serialize, Deserialize)]
struct State {
    version: u32,
    fingerprint: Vec<String>,
    epoch: usize,
    step: u64,
    params: Vec<f64>,
    best: Vec<f64>,
    best_val: f64,
    init_val: f64,
    adam: AdamState,
    log: Vec<LogRow>,
}

fn fill(arch: &Architecture, values: &[f64]) -> Result<ModelParams> {
    let mut p = ModelParams::zeros(arch.clone())?;
    if values.len() != p.parameter_count() {
        return Err(Error::format("training state", "parameter count does not match the architecture"));
    }
    p.values_mut().zip(values).for_each(|(d, s)| *d = *s);
    Ok(p)
}

struct Item<'a> {
    prep: Prepared,
    target: &'a [f64; NUM_COEFFS],
}

fn mean_loss(params: &ModelParams, items: &[Item]) -> f64 {
    let losses: Vec<f64> = items
        .par_iter()
        .map(|it| {
            let y = net::forward_prepared(params, &it.prep).output();
            y.iter().zip(it.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / NUM_COEFFS as f64
        })
        .collect();
    losses.iter().sum::<f64>() / losses.len() as f64
}

fn log_text(header: &[String], rows: &[LogRow]) -> String {
    let mut s = String::new();
    for h in header {
        let _ = writeln!(s, "# {h}");
    }
    s.push_str(&LOG_COLUMNS.join("\t"));
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.epoch, r.step, r.lr, r.train_loss, r.val_loss);
    }
    s
}

/// Trains one per-band network on the training split with mean squared
/// coefficient loss, keeping the checkpoint with the lowest validation
/// loss (the initial parameters count as epoch 0).
pub fn train_model(
    cfg: &TrainConfig,
    dataset: &Dataset,
    split: &SplitManifest,
    out: &TrainOutputs,
) -> Result<TrainReport> {
    cfg.validate()?;
    let band = band_index(cfg.frequency_hz)?;
    if split.train.is_empty() {
        return Err(Error::param("training split is empty"));
    }
    let mut arch = Architecture::new(cfg.frequency_hz)?;
    arch.ablation = cfg.ablation;
    arch.pooling = cfg.pooling;
    arch.input_points = cfg.input_points;
    arch.target_scale = dataset.norm(cfg.frequency_hz)?;
    arch.validate()?;

    let by_id: HashMap<&str, usize> = dataset
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id.as_str(), i))
        .collect();
    let items = |ids: &[String]| -> Result<Vec<Item>> {
        ids.par_iter()
            .map(|id| {
                let &i = by_id
                    .get(id.as_str())
                    .ok_or_else(|| Error::param(format!("split refers to unknown example {id}")))?;
                let e = &dataset.examples[i];
                Ok(Item {
                    prep: net::prepare(&arch, &e.cloud)?,
                    target: &e.targets[band].coeffs,
                })
            })
            .collect()
    };
    let train = items(&split.train)?;
    let validation = items(&split.validation)?;
    // Selection falls back to the training loss without a validation split.
    let selection: &[Item] = if validation.is_empty() { &train } else { &validation };
    let schedule = cfg.schedule(train.len());

    let mut header = vec![format!("asf train log, version {}", crate::VERSION)];
    header.extend(cfg.describe());
    header.push(format!("target_scale: {}", arch.target_scale));
    header.push(format!("parameters: {}", arch.parameter_count()));
    header.push(format!(
        "split: seed {}, {} train / {} validation / {} test",
        split.seed,
        split.train.len(),
        split.validation.len(),
        split.test.len()
    ));
    header.push(format!(
        "lr decay: continuous exponent, lr0 * {}^(step / {}), step = training examples processed",
        cfg.decay_rate, schedule.decay_step
    ));
    header.extend(out.header.iter().cloned());

    let mut fingerprint = header.clone();
    fingerprint.push(format!("train ids: {}", split.train.join(",")));
    fingerprint.push(format!("validation ids: {}", split.validation.join(",")));

    let resumed = match (&out.state, out.resume) {
        (Some(path), true) if path.exists() => {
            let st: State = serde_json::from_str(&textio::read_to_string(path)?)
                .map_err(|e| Error::format("training state", e.to_string()))?;
            if st.version != STATE_VERSION {
                return Err(Error::Version {
                    what: "training state",
                    found: st.version,
                    expected: STATE_VERSION,
                });
            }
            if st.fingerprint != fingerprint {
                return Err(Error::param("training state was written by a different configuration"));
            }
            Some(st)
        }
        _ => None,
    };

    let (mut params, mut best, mut best_val, init_val, mut adam, mut log, mut step, start) = match resumed {
        Some(st) => (
            fill(&arch, &st.params)?,
            fill(&arch, &st.best)?,
            st.best_val,
            st.init_val,
            st.adam,
            st.log,
            st.step,
            st.epoch + 1,
        ),
        None => {
            let params = ModelParams::init(arch.clone(), derive_seed(cfg.seed, 1))?;
            let init_val = mean_loss(&params, selection);
            let init_train = mean_loss(&params, &train);
            if !init_val.is_finite() || !init_train.is_finite() {
                return Err(Error::Training("non-finite loss at initialization".into()));
            }
            net::save_model(&params, &out.checkpoint)?;
            let adam = AdamState::new(params.parameter_count(), cfg.beta1, cfg.beta2, cfg.epsilon);
            let row = LogRow {
                epoch: 0,
                step: 0,
                lr: lr_schedule(&schedule, 0),
                train_loss: init_train,
                val_loss: init_val,
            };
            (params.clone(), params, init_val, init_val, adam, vec![row], 0, 1)
        }
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut ran = 0;
    let mut epoch = start;
    while epoch <= cfg.epochs {
        if cfg.stop_after.is_some_and(|n| ran >= n) {
            break;
        }
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1000 + epoch as u64)));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = lr_schedule(&schedule, step);
            let results: Vec<(f64, ModelParams)> = batch
                .par_iter()
                .map(|&i| net::loss_and_grad(&params, &train[i].prep, train[i].target))
                .collect();
            let mut grad = params.zeros_like();
            let mut batch_loss = 0.0;
            for (l, g) in &results {
                batch_loss += l;
                grad.add_scaled(g, 1.0 / batch.len() as f64);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged in epoch {epoch}; best checkpoint kept at {}",
                    out.checkpoint.display()
                )));
            }
            adam_step(&mut params, &mut adam, &grad, lr)?;
            epoch_loss += batch_loss;
            step += batch.len() as u64;
        }
        let val = mean_loss(&params, selection);
        if !val.is_finite() {
            return Err(Error::Training(format!(
                "validation loss diverged in epoch {epoch}; best checkpoint kept at {}",
                out.checkpoint.display()
            )));
        }
        if val < best_val {
            best_val = val;
            best = params.clone();
            net::save_model(&best, &out.checkpoint)?;
        }
        log.push(LogRow {
            epoch,
            step,
            lr: lr_schedule(&schedule, step),
            train_loss: epoch_loss / train.len() as f64,
            val_loss: val,
        });
        textio::write_string(&out.log, &log_text(&header, &log))?;
        if let Some(path) = &out.state {
            let st = State {
                version: STATE_VERSION,
                fingerprint: fingerprint.clone(),
                epoch,
                step,
                params: params.values().copied().collect(),
                best: best.values().copied().collect(),
                best_val,
                init_val,
                adam: adam.clone(),
                log: log.clone(),
            };
            let json = serde_json::to_string(&st).map_err(|e| Error::format("training state", e.to_string()))?;
            textio::write_string(path, &json)?;
        }
        ran += 1;
        epoch += 1;
    }
    textio::write_string(&out.log, &log_text(&header, &log))?;
    Ok(TrainReport {
        best,
        best_val_loss: best_val,
        init_val_loss: init_val,
        completed_epochs: epoch - 1,
        finished: epoch > cfg.epochs,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{gen_dataset, DatasetConfig};

    fn dataset(dir: &std::path::Path) -> Dataset {
        let cfg = DatasetConfig {
            radii: vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            seeds: 2,
            points: 48,
            seed: 5,
            ..Default::default()
        };
        gen_dataset(&cfg, dir).unwrap();
        Dataset::load(dir).unwrap()
    }

    fn outputs(dir: &std::path::Path, tag: &str) -> TrainOutputs {
        TrainOutputs {
            checkpoint: dir.join(format!("{tag}.ckpt")),
            log: dir.join(format!("{tag}.tsv")),
            state: Some(dir.join(format!("{tag}.state"))),
            resume: true,
            header: vec![],
        }
    }

    fn small_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::new(250);
        cfg.epochs = 6;
        cfg.batch_size = 4;
        cfg.input_points = 32;
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn overfits_a_single_example() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(&dir.path().join("data"));
        let id = ds.examples[3].id.clone();
        let split = SplitManifest {
            seed: 0,
            dataset: None,
            train: vec![id.clone()],
            validation: vec![id],
            test: vec![],
        };
        let mut cfg = small_cfg();
        cfg.learning_rate0 = 3e-3;
        cfg.epochs = 400;
        let r = train_model(&cfg, &ds, &split, &outputs(dir.path(), "one")).unwrap();
        assert!(r.best_val_loss < 1e-4, "{}", r.best_val_loss);
    }

    #[test]
    fn best_checkpoint_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(&dir.path().join("data"));
        let ids: Vec<String> = ds.examples.iter().map(|e| e.id.clone()).collect();
        let split = super::super::split_dataset(&ids, 1).unwrap();
        let out = outputs(dir.path(), "m");
        let r = train_model(&small_cfg(), &ds, &split, &out).unwrap();
        assert!(r.finished);
        assert!(r.best_val_loss <= r.init_val_loss);
        assert_eq!(r.log.len(), 7);
        let saved = net::load_model(&out.checkpoint).unwrap();
        assert_eq!(saved, r.best);
        let text = std::fs::read_to_string(&out.log).unwrap();
        assert!(text.contains("epoch\tstep\tlr\ttrain_loss\tval_loss"));
        assert!(text.contains("continuous exponent"));
        // Test examples never reach a gradient step: the log only counts
        // training examples.
        assert_eq!(r.log.last().unwrap().step, 6 * split.train.len() as u64);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(&dir.path().join("data"));
        let ids: Vec<String> = ds.examples.iter().map(|e| e.id.clone()).collect();
        let split = super::super::split_dataset(&ids, 2).unwrap();
        let full = train_model(&small_cfg(), &ds, &split, &outputs(dir.path(), "full")).unwrap();

        let out = outputs(dir.path(), "part");
        let mut cfg = small_cfg();
        cfg.stop_after = Some(2);
        let first = train_model(&cfg, &ds, &split, &out).unwrap();
        assert!(!first.finished);
        cfg.stop_after = None;
        let resumed = train_model(&cfg, &ds, &split, &out).unwrap();
        assert!(resumed.finished);
        assert_eq!(resumed.log, full.log);
        assert_eq!(resumed.best, full.best);
        let a = std::fs::read(dir.path().join("full.ckpt")).unwrap();
        let b = std::fs::read(dir.path().join("part.ckpt")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn surface_encoder_ablation_is_smaller() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(&dir.path().join("data"));
        let ids: Vec<String> = ds.examples.iter().map(|e| e.id.clone()).collect();
        let split = super::super::split_dataset(&ids, 1).unwrap();
        let mut cfg = small_cfg();
        cfg.epochs = 1;
        let full = train_model(&cfg, &ds, &split, &outputs(dir.path(), "a")).unwrap();
        cfg.ablation.use_surface_encoder = false;
        let abl = train_model(&cfg, &ds, &split, &outputs(dir.path(), "b")).unwrap();
        assert!(abl.best.parameter_count() < full.best.parameter_count());
        let text = std::fs::read_to_string(dir.path().join("b.tsv")).unwrap();
        assert!(text.contains("ablation: no-surface-encoder"));
    }
}

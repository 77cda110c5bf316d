use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::net::{self, ModelParams};
use crate::oracle::dataset::{band_index, derive_seed, jitter};
use crate::oracle::Dataset;
use crate::sphharm::{db_error, LatLongMap, ShCoeffs, DEFAULT_N_PHI, DEFAULT_N_THETA};

pub const EVAL_COLUMNS: [&str; 5] = ["band_hz", "n_examples", "mean_db_error", "noise_sigma", "ablation_flags"];

/// Stream offset for per-example evaluation noise.
const NOISE_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub band_hz: u32,
    pub noise_sigma: f64,
    pub ablation_flags: String,
    pub mean_db_error: f64,
    /// `(id, dB error)` in the order evaluated.
    pub per_example: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn n_examples(&self) -> usize {
        self.per_example.len()
    }

    /// Summary row in [`EVAL_COLUMNS`] order.
    pub fn row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.band_hz,
            self.n_examples(),
            self.mean_db_error,
            self.noise_sigma,
            self.ablation_flags
        )
    }

    /// TSV with `#` header lines, the summary columns and one commented
    /// line per example.
    pub fn to_tsv(&self, header: &[String]) -> String {
        let mut s = String::new();
        for h in header {
            let _ = writeln!(s, "# {h}");
        }
        s.push_str(&EVAL_COLUMNS.join("\t"));
        s.push('\n');
        s.push_str(&self.row());
        s.push('\n');
        for (id, e) in &self.per_example {
            let _ = writeln!(s, "# example\t{id}\t{e}");
        }
        s
    }
}

/// Evaluates an arbitrary predictor. `predict` returns unnormalized
/// coefficients; targets are de-normalized with the dataset constant.
/// With `noise_sigma > 0` each cloud is jittered with a seed derived from
/// `seed` and the example's position in the dataset.
pub fn evaluate_with<F>(
    dataset: &Dataset,
    frequency_hz: u32,
    ids: &[String],
    noise_sigma: f64,
    seed: u64,
    ablation_flags: &str,
    predict: F,
) -> Result<EvalReport>
where
    F: Fn(&PointCloud) -> Result<ShCoeffs> + Sync,
{
    let band = band_index(frequency_hz)?;
    if ids.is_empty() {
        return Err(Error::param("no examples to evaluate"));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::param("noise sigma must be finite and non-negative"));
    }
    let norm = dataset.norm(frequency_hz)?;
    let per_example = ids
        .par_iter()
        .map(|id| {
            let pos = dataset
                .examples
                .iter()
                .position(|e| &e.id == id)
                .ok_or_else(|| Error::param(format!("unknown example {id}")))?;
            let ex = &dataset.examples[pos];
            let cloud = jitter(&ex.cloud, noise_sigma, derive_seed(seed, NOISE_STREAM + pos as u64))?;
            let pred = predict(&cloud)?;
            if pred.frequency_hz != frequency_hz {
                return Err(Error::param(format!(
                    "prediction is for {} Hz, evaluating {} Hz",
                    pred.frequency_hz, frequency_hz
                )));
            }
            let target = ex.targets[band].scaled(norm);
            let a = LatLongMap::from_coeffs(&pred, DEFAULT_N_THETA, DEFAULT_N_PHI)?;
            let b = LatLongMap::from_coeffs(&target, DEFAULT_N_THETA, DEFAULT_N_PHI)?;
            Ok((id.clone(), db_error(&a, &b)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_db_error = per_example.iter().map(|(_, e)| e).sum::<f64>() / per_example.len() as f64;
    Ok(EvalReport {
        band_hz: frequency_hz,
        noise_sigma,
        ablation_flags: ablation_flags.to_string(),
        mean_db_error,
        per_example,
    })
}

/// Mean dB error of a trained model against the dataset targets.
pub fn evaluate(model: &ModelParams, dataset: &Dataset, ids: &[String], noise_sigma: f64, seed: u64) -> Result<EvalReport> {
    let freq = model.arch.frequency_hz;
    let scale = model.arch.target_scale;
    evaluate_with(dataset, freq, ids, noise_sigma, seed, &model.arch.ablation.to_string(), |cloud| {
        Ok(net::forward(model, cloud)?.scaled(scale))
    })
}

//! Error metrics, AQI category accuracy, per-split reports, and ablation sweeps.

use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::{categorize_clamped, Pollutant};
use crate::error::{Error, Result};
use crate::impute::ImputedViews;
use crate::ingest::{CellSplit, TemporalSplit};
use crate::models::{Forecaster, ForecasterConfig, ModelKind, Predictions, Split, TrainConfig};
use crate::represent::{Dataset, StaticFeatures, WindowConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub n: usize,
}

fn masked_pairs<'a>(pred: &'a [f64], target: &'a [f64], mask: &'a [bool]) -> Result<Vec<(f64, f64)>> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::shape("metrics", &[pred.len(), target.len()], &[mask.len()]));
    }
    let pairs: Vec<(f64, f64)> = pred
        .iter()
        .zip(target)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &t), _)| (p, t))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Empty("no masked-true entries to evaluate".into()));
    }
    Ok(pairs)
}

/// MSE, RMSE, MAE and `R² = 1 − RSS/TSS` over masked entries.
pub fn metrics(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<Metrics> {
    let pairs = masked_pairs(pred, target, mask)?;
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let rss: f64 = pairs.iter().map(|(p, t)| (p - t) * (p - t)).sum();
    let tss: f64 = pairs.iter().map(|(_, t)| (t - mean) * (t - mean)).sum();
    if !(tss > 0.0) {
        return Err(Error::InvalidArgument(
            "targets have zero variance over the mask; R² is undefined".into(),
        ));
    }
    let mse = rss / n;
    Ok(Metrics {
        mse,
        rmse: mse.sqrt(),
        mae: pairs.iter().map(|(p, t)| (p - t).abs()).sum::<f64>() / n,
        r2: 1.0 - rss / tss,
        n: pairs.len(),
    })
}

/// Percentage of masked entries whose predicted AQI category matches the target's.
pub fn category_accuracy(pred: &[f64], target: &[f64], mask: &[bool], pollutant: Pollutant) -> Result<f64> {
    let pairs = masked_pairs(pred, target, mask)?;
    let hits = pairs
        .iter()
        .filter(|(p, t)| categorize_clamped(*p, pollutant) == categorize_clamped(*t, pollutant))
        .count();
    Ok(100.0 * hits as f64 / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub pollutant: Pollutant,
    pub split: Split,
    pub rmse: f64,
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
    pub accuracy: f64,
    pub n_samples: usize,
    pub n_entries: usize,
}

/// One report per pollutant for a split's predictions.
pub fn report_predictions(model: &str, split: Split, preds: &Predictions) -> Result<Vec<EvalReport>> {
    Pollutant::ALL
        .iter()
        .map(|&p| {
            let (pr, t, m) = preds.for_pollutant(p.index());
            let mt = metrics(&pr, &t, &m)?;
            Ok(EvalReport {
                model: model.to_string(),
                pollutant: p,
                split,
                rmse: mt.rmse,
                mse: mt.mse,
                mae: mt.mae,
                r2: mt.r2,
                accuracy: category_accuracy(&pr, &t, &m, p)?,
                n_samples: preds.n_samples,
                n_entries: mt.n,
            })
        })
        .collect()
}

/// Test-set reports, plus extended-set reports when the dataset has extended cells.
pub fn evaluate(model: &Forecaster, ds: &Dataset) -> Result<Vec<EvalReport>> {
    let name = model.kind().as_str();
    let mut out = report_predictions(name, Split::Test, &model.predict_split(ds, Split::Test)?)?;
    if !ds.split.extended_cells.is_empty() {
        let preds = model.predict_split(ds, Split::Extended)?;
        if preds.mask.iter().any(|&m| m) {
            out.extend(report_predictions(name, Split::Extended, &preds)?);
        }
    }
    Ok(out)
}

pub fn write_reports_csv<W: Write>(w: W, reports: &[EvalReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "model", "pollutant", "split", "rmse", "mse", "mae", "r2", "accuracy", "n_samples", "n_entries",
    ])?;
    for r in reports {
        out.write_record([
            r.model.clone(),
            r.pollutant.to_string(),
            r.split.to_string(),
            r.rmse.to_string(),
            r.mse.to_string(),
            r.mae.to_string(),
            r.r2.to_string(),
            r.accuracy.to_string(),
            r.n_samples.to_string(),
            r.n_entries.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Table with one row per model and RMSE / R² / accuracy per (pollutant, split).
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut models: Vec<&str> = Vec::new();
    for r in reports {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let mut cols: Vec<(Split, Pollutant)> = Vec::new();
    for r in reports {
        if !cols.contains(&(r.split, r.pollutant)) {
            cols.push((r.split, r.pollutant));
        }
    }
    cols.sort();
    let mut s = String::new();
    let _ = write!(s, "{:<10}", "model");
    for (sp, p) in &cols {
        let _ = write!(s, " | {:^24}", format!("{sp} {p}"));
    }
    s.push('\n');
    let _ = write!(s, "{:<10}", "");
    for _ in &cols {
        let _ = write!(s, " | {:>9} {:>6} {:>7}", "RMSE", "R2", "Acc%");
    }
    s.push('\n');
    s.push_str(&"-".repeat(10 + cols.len() * 27));
    s.push('\n');
    for m in models {
        let _ = write!(s, "{m:<10}");
        for (sp, p) in &cols {
            match reports.iter().find(|r| r.model == m && r.split == *sp && r.pollutant == *p) {
                Some(r) => {
                    let _ = write!(s, " | {:>9.2} {:>6.3} {:>7.1}", r.rmse, r.r2, r.accuracy);
                }
                None => {
                    let _ = write!(s, " | {:>24}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Layers,
    /// Input window, in days.
    SeqLen,
    /// Forecast horizon, in days.
    Horizon,
    KNeighbors,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Layers => "layers",
            AblationAxis::SeqLen => "seq_len",
            AblationAxis::Horizon => "horizon",
            AblationAxis::KNeighbors => "k_neighbors",
        }
    }

    /// Default grid per axis.
    pub fn default_values(self) -> Vec<usize> {
        match self {
            AblationAxis::Layers => vec![1, 2, 3, 6, 9],
            AblationAxis::SeqLen => vec![1, 2, 3, 4, 5],
            AblationAxis::Horizon => vec![1, 2, 3, 4, 5],
            AblationAxis::KNeighbors => (2..=7).collect(),
        }
    }

    pub fn check_kind(self, kind: ModelKind) -> Result<()> {
        let ok = match self {
            AblationAxis::KNeighbors => kind.is_graph(),
            AblationAxis::Layers => kind.is_neural(),
            AblationAxis::SeqLen | AblationAxis::Horizon => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "ablation axis `{}` does not apply to model kind {kind}",
                self.as_str()
            )))
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            AblationAxis::Layers,
            AblationAxis::SeqLen,
            AblationAxis::Horizon,
            AblationAxis::KNeighbors,
        ]
        .into_iter()
        .find(|a| a.as_str() == s)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown ablation axis `{s}` (expected layers, seq_len, horizon or k_neighbors)"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: usize,
    pub pollutant: Pollutant,
    pub r2: f64,
    pub rmse: f64,
}

/// Inputs shared by every grid point of a sweep.
pub struct AblationBase<'a> {
    pub views: &'a ImputedViews,
    pub split: &'a CellSplit,
    pub tsplit: &'a TemporalSplit,
    pub statics: Option<&'a StaticFeatures>,
    pub windows: WindowConfig,
    pub model: ForecasterConfig,
    pub train: TrainConfig,
}

/// Trains one model per grid value (same seed throughout) and reports
/// test-set R² and RMSE per pollutant.
pub fn ablate(axis: AblationAxis, values: &[usize], base: &AblationBase) -> Result<Vec<AblationRow>> {
    axis.check_kind(base.model.kind)?;
    if values.is_empty() {
        return Err(Error::InvalidArgument("ablation grid is empty".into()));
    }
    let bpd = base.views.train.frames.bins_per_day();
    let mut rows = Vec::new();
    for &v in values {
        let mut model = base.model.clone();
        let mut windows = base.windows;
        match axis {
            AblationAxis::Layers => model.layers = v,
            AblationAxis::KNeighbors => model.k_neighbors = v,
            AblationAxis::SeqLen => windows.input_bins = Some(v * bpd),
            AblationAxis::Horizon => windows.horizon_bins = Some(v * bpd),
        }
        let ds = Dataset::new(
            base.views,
            base.split.clone(),
            base.tsplit.clone(),
            windows,
            base.statics.cloned(),
        )?;
        let (f, _) = Forecaster::fit(model, &base.train, &ds)?;
        let preds = f.predict_split(&ds, Split::Test)?;
        for r in report_predictions(base.model.kind.as_str(), Split::Test, &preds)? {
            rows.push(AblationRow {
                value: v,
                pollutant: r.pollutant,
                r2: r.r2,
                rmse: r.rmse,
            });
        }
    }
    Ok(rows)
}

/// Writes the rows of one pollutant as `value,pollutant,r2,rmse`.
pub fn write_ablation_csv<W: Write>(w: W, rows: &[AblationRow], pollutant: Pollutant) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["value", "pollutant", "r2", "rmse"])?;
    for r in rows.iter().filter(|r| r.pollutant == pollutant) {
        out.write_record([r.value.to_string(), r.pollutant.to_string(), r.r2.to_string(), r.rmse.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn ablation_file_name(axis: AblationAxis, pollutant: Pollutant) -> String {
    format!("ablate_{}_{}.csv", axis.as_str(), pollutant.as_str().to_lowercase())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let m = metrics(&[1.0, 2.0], &[1.0, 3.0], &[true, true]).unwrap();
        assert_eq!(m.mse, 0.5);
        assert_eq!(m.mae, 0.5);
        assert_eq!(m.rmse, 0.5f64.sqrt());
    }

    #[test]
    fn perfect_and_mean_predictors() {
        let t = [3.0, 7.0, 1.0, 9.0];
        let mask = [true; 4];
        let m = metrics(&t, &t, &mask).unwrap();
        assert_eq!((m.r2, m.mse, m.mae), (1.0, 0.0, 0.0));
        let mean = [5.0; 4];
        assert!(metrics(&mean, &t, &mask).unwrap().r2.abs() < 1e-15);
    }

    #[test]
    fn mask_excludes_entries() {
        let m = metrics(&[1.0, 100.0, 3.0], &[1.0, 0.0, 3.0], &[true, false, true]).unwrap();
        assert_eq!(m.n, 2);
        assert_eq!(m.mse, 0.0);
    }

    #[test]
    fn empty_mask_and_constant_targets_error() {
        assert!(metrics(&[1.0], &[1.0], &[false]).is_err());
        assert!(metrics(&[1.0, 2.0], &[4.0, 4.0], &[true, true]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(category_accuracy(&[25.0], &[29.0], &[true], Pollutant::Pm25).unwrap(), 100.0);
        assert_eq!(category_accuracy(&[25.0, 31.0], &[29.0, 29.0], &[true, true], Pollutant::Pm25).unwrap(), 50.0);
        // negative R² with nonzero accuracy
        let pred = [29.0, 1.0];
        let target = [1.0, 29.0];
        let m = metrics(&pred, &target, &[true, true]).unwrap();
        assert!(m.r2 < 0.0);
        assert_eq!(category_accuracy(&pred, &target, &[true, true], Pollutant::Pm25).unwrap(), 100.0);
    }

    #[test]
    fn table_renders_one_row_per_model() {
        let r = EvalReport {
            model: "GRU".into(),
            pollutant: Pollutant::Pm25,
            split: Split::Test,
            rmse: 20.9,
            mse: 20.9 * 20.9,
            mae: 15.0,
            r2: 0.893,
            accuracy: 98.6,
            n_samples: 1,
            n_entries: 2,
        };
        let t = format_table(&[r]);
        assert!(t.contains("test PM25"));
        assert!(t.contains("    20.90  0.893    98.6"), "{t}");
    }

    #[test]
    fn axis_kind_checks() {
        assert!(AblationAxis::KNeighbors.check_kind(ModelKind::Gru).is_err());
        assert!(AblationAxis::KNeighbors.check_kind(ModelKind::GatGru).is_ok());
        assert_eq!(AblationAxis::Layers.default_values().len(), 5);
        assert_eq!(
            ablation_file_name(AblationAxis::KNeighbors, Pollutant::Pm25),
            "ablate_k_neighbors_pm25.csv"
        );
    }
}

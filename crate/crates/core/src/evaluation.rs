use serde::{Deserialize, Serialize};

use crate::detector::DecodeConfig;
use crate::error::Result;
use crate::geoproto::{FixedSupportSet, ScenePair, SweepSpec};
use crate::metrics::{EvalReport, ImageResult};
use crate::model::Model;
use crate::numerics::Scalar;

/// Operating confidence for the P/R/F1 columns of reports.
pub const DEFAULT_OPERATING_THRESHOLD: f64 = 0.3;

pub fn predict_images<T: Scalar>(model: &Model<T>, pairs: &[ScenePair], decode: &DecodeConfig) -> Result<Vec<ImageResult>> {
    pairs
        .iter()
        .map(|p| Ok(ImageResult { detections: model.predict(p, decode)?, ground_truth: p.annotations.clone() }))
        .collect()
}

pub fn evaluate<T: Scalar>(model: &Model<T>, pairs: &[ScenePair], decode: &DecodeConfig, operating_threshold: f64) -> Result<EvalReport> {
    let mut report = EvalReport::compute(&predict_images(model, pairs, decode)?, operating_threshold)?;
    report.config_hash = Some(model.config_hash()?);
    Ok(report)
}

/// One line of the shift-sweep CSV; `direction` is `mean` for the
/// direction-averaged rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub shift_magnitude: u32,
    pub direction: String,
    pub map50: f64,
    pub loc_f1: f64,
    pub cls_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub spec: SweepSpec,
    /// Per (magnitude, direction) reports, magnitude-major.
    pub reports: Vec<EvalReport>,
    /// Direction-averaged rows, one per magnitude.
    pub mean_rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Per-direction rows followed, for each magnitude, by the mean row.
    pub fn csv_rows(&self) -> Vec<SweepRow> {
        let mut rows = Vec::new();
        for (k, mean) in self.mean_rows.iter().enumerate() {
            let n = self.spec.directions.len();
            for r in &self.reports[k * n..(k + 1) * n] {
                rows.push(SweepRow {
                    shift_magnitude: r.shift_magnitude,
                    direction: r.direction.map(|d| d.to_string()).unwrap_or_default(),
                    map50: r.map50,
                    loc_f1: r.localization_f1,
                    cls_acc: r.classification_accuracy,
                });
            }
            rows.push(mean.clone());
        }
        rows
    }

    pub fn row(&self, magnitude: u32) -> Option<&SweepRow> {
        self.mean_rows.iter().find(|r| r.shift_magnitude == magnitude)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluates every (magnitude, direction) cell of the fixed-support protocol
/// and averages over directions.
pub fn sweep_shift<T: Scalar>(
    model: &Model<T>,
    pairs: &[ScenePair],
    spec: &SweepSpec,
    decode: &DecodeConfig,
    operating_threshold: f64,
) -> Result<SweepResult> {
    let set = FixedSupportSet::new(pairs, spec.clone())?;
    let hash = model.config_hash()?;
    let mut reports = Vec::new();
    let mut mean_rows = Vec::new();
    for &magnitude in &spec.magnitudes {
        let mut cell_reports = Vec::new();
        for (d, &direction) in spec.directions.iter().enumerate() {
            let cases = pairs.iter().map(|p| set.case(p, magnitude, d)).collect::<Result<Vec<_>>>()?;
            let mut r = EvalReport::compute(&predict_images(model, &cases, decode)?, operating_threshold)?;
            r.config_hash = Some(hash);
            r.shift_magnitude = magnitude;
            r.direction = Some(direction);
            cell_reports.push(r);
        }
        mean_rows.push(SweepRow {
            shift_magnitude: magnitude,
            direction: "mean".into(),
            map50: mean(cell_reports.iter().map(|r| r.map50)).unwrap_or(0.0),
            loc_f1: mean(cell_reports.iter().map(|r| r.localization_f1)).unwrap_or(0.0),
            cls_acc: mean(cell_reports.iter().filter_map(|r| r.classification_accuracy)),
        });
        reports.extend(cell_reports);
    }
    Ok(SweepResult { spec: spec.clone(), reports, mean_rows })
}

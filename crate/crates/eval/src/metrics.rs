//! One-pass evaluation metrics: precision and success curves, AUC and
//! center location error.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mttrack_core::{BBox, Error, Result};

/// Number of thresholds on each curve.
pub const CURVE_POINTS: usize = 51;
/// Center-error threshold of the headline precision score, in pixels.
pub const PRECISION_THRESHOLD: usize = 20;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Center location error in pixels.
pub fn cle(a: &BBox, b: &BBox) -> f64 {
    a.center_distance(b)
}

/// Pixel thresholds `0, 1, ..., 50`.
pub fn precision_thresholds() -> Vec<f64> {
    (0..CURVE_POINTS).map(|i| i as f64).collect()
}

/// Overlap thresholds `0, 0.02, ..., 1`.
pub fn success_thresholds() -> Vec<f64> {
    (0..CURVE_POINTS).map(|i| i as f64 / 50.0).collect()
}

/// Tracker output for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
    pub fps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub precision_curve: Vec<f64>,
    pub success_curve: Vec<f64>,
    pub auc: f64,
    pub precision_at_20: f64,
    pub mean_cle: f64,
    pub fps: f64,
}

impl SequenceMetrics {
    /// Scores predicted boxes against ground truth frame by frame.
    pub fn evaluate(pred: &[BBox], gt: &[BBox], fps: f64) -> Result<Self> {
        if pred.len() != gt.len() || gt.is_empty() {
            return Err(Error::Contract(format!(
                "{} predicted boxes for {} ground-truth boxes",
                pred.len(),
                gt.len()
            )));
        }
        let n = gt.len() as f64;
        let errors: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| cle(p, g)).collect();
        let overlaps: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
        let precision_curve: Vec<f64> = precision_thresholds()
            .iter()
            .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / n)
            .collect();
        let success_curve: Vec<f64> = success_thresholds()
            .iter()
            .map(|&t| overlaps.iter().filter(|&&o| o > t).count() as f64 / n)
            .collect();
        Ok(Self {
            auc: success_curve.iter().sum::<f64>() / CURVE_POINTS as f64,
            precision_at_20: precision_curve[PRECISION_THRESHOLD],
            mean_cle: errors.iter().sum::<f64>() / n,
            precision_curve,
            success_curve,
            fps,
        })
    }

    /// Unweighted mean of every field over `items`.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a SequenceMetrics>) -> Option<Self> {
        let items: Vec<&SequenceMetrics> = items.into_iter().collect();
        if items.is_empty() {
            return None;
        }
        let k = items.len() as f64;
        let avg = |f: &dyn Fn(&SequenceMetrics) -> f64| items.iter().map(|m| f(m)).sum::<f64>() / k;
        let curve = |f: &dyn Fn(&SequenceMetrics) -> &Vec<f64>| -> Vec<f64> {
            (0..CURVE_POINTS)
                .map(|i| items.iter().map(|m| f(m)[i]).sum::<f64>() / k)
                .collect()
        };
        Some(Self {
            precision_curve: curve(&|m| &m.precision_curve),
            success_curve: curve(&|m| &m.success_curve),
            auc: avg(&|m| m.auc),
            precision_at_20: avg(&|m| m.precision_at_20),
            mean_cle: avg(&|m| m.mean_cle),
            fps: avg(&|m| m.fps),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sequences: BTreeMap<String, SequenceMetrics>,
    pub aggregate: SequenceMetrics,
}

/// Evaluates every result against its ground truth. Every result must
/// have ground truth of the same length.
pub fn compute_metrics(
    results: &BTreeMap<String, TrackResult>,
    gts: &BTreeMap<String, Vec<BBox>>,
) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::Input("no sequences to evaluate".into()));
    }
    let mut sequences = BTreeMap::new();
    for (name, r) in results {
        let gt = gts
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no ground truth for sequence {name}")))?;
        let m = SequenceMetrics::evaluate(&r.boxes, gt, r.fps)
            .map_err(|e| Error::Contract(format!("sequence {name}: {e}")))?;
        sequences.insert(name.clone(), m);
    }
    let aggregate = SequenceMetrics::mean(sequences.values()).expect("non-empty");
    Ok(MetricsReport { sequences, aggregate })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Writes `metrics.json` and per-curve CSV files (`threshold,value`)
    /// for the aggregate and every sequence.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("curves"))?;
        std::fs::write(dir.join("metrics.json"), self.to_json()?)?;
        let named = std::iter::once(("aggregate", &self.aggregate))
            .chain(self.sequences.iter().map(|(k, v)| (k.as_str(), v)));
        for (name, m) in named {
            write_curve(&dir.join("curves").join(format!("{name}_precision.csv")), &precision_thresholds(), &m.precision_curve)?;
            write_curve(&dir.join("curves").join(format!("{name}_success.csv")), &success_thresholds(), &m.success_curve)?;
        }
        Ok(())
    }
}

fn write_curve(path: &Path, thresholds: &[f64], values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["threshold", "value"]).map_err(csv_err)?;
    for (t, v) in thresholds.iter().zip(values) {
        w.write_record([t.to_string(), v.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::from_corner(x, y, w, h).unwrap()
    }

    #[test]
    fn iou_and_cle_cases() {
        assert_eq!(iou(&b(0.0, 0.0, 2.0, 2.0), &b(0.0, 0.0, 2.0, 2.0)), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 2.0, 2.0), &b(5.0, 5.0, 2.0, 2.0)), 0.0);
        assert!((iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 0.0, 2.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cle(&b(0.0, 0.0, 2.0, 2.0), &b(3.0, 4.0, 2.0, 2.0)), 5.0);
    }

    #[test]
    fn perfect_predictions() {
        let gt = vec![b(0.0, 0.0, 10.0, 10.0), b(3.0, 2.0, 8.0, 9.0)];
        let m = SequenceMetrics::evaluate(&gt, &gt, 1.0).unwrap();
        assert_eq!(m.precision_at_20, 1.0);
        assert!((m.auc - 50.0 / 51.0).abs() < 1e-15);
        assert_eq!(m.success_curve[50], 0.0);
    }

    #[test]
    fn far_predictions_score_zero() {
        let gt = vec![b(0.0, 0.0, 10.0, 10.0); 3];
        let pred = vec![b(500.0, 500.0, 10.0, 10.0); 3];
        let m = SequenceMetrics::evaluate(&pred, &gt, 1.0).unwrap();
        assert_eq!((m.precision_at_20, m.auc), (0.0, 0.0));
    }

    #[test]
    fn length_mismatch_is_contract_error() {
        let gt = vec![b(0.0, 0.0, 1.0, 1.0); 3];
        let err = SequenceMetrics::evaluate(&gt[..2], &gt, 1.0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn empty_results_rejected() {
        let err = compute_metrics(&BTreeMap::new(), &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("no sequences"));
    }
}

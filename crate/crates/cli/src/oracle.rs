//! Metric checks against a brute-force per-frame recount.

use std::collections::BTreeMap;

use mttrack_core::selftest::CheckResult;
use mttrack_core::{BBox, Result};
use mttrack_eval::metrics::CURVE_POINTS;
use mttrack_eval::{compute_metrics, TrackResult};

/// Corner-form boxes `[x, y, w, h]` of a fixture.
pub struct Fixture {
    pub name: &'static str,
    pub gt: Vec<[f64; 4]>,
    pub pred: Vec<[f64; 4]>,
}

pub fn fixtures() -> Vec<Fixture> {
    let g = [45.0, 45.0, 10.0, 10.0];
    vec![
        Fixture {
            name: "identical",
            gt: vec![[0.0, 0.0, 10.0, 10.0], [3.0, 2.0, 8.0, 9.0], [7.5, 1.25, 4.0, 6.0]],
            pred: vec![[0.0, 0.0, 10.0, 10.0], [3.0, 2.0, 8.0, 9.0], [7.5, 1.25, 4.0, 6.0]],
        },
        Fixture {
            name: "cle-0-15-30",
            gt: vec![g; 3],
            pred: vec![g, [60.0, 45.0, 10.0, 10.0], [45.0, 75.0, 10.0, 10.0]],
        },
        Fixture {
            name: "far",
            gt: vec![g; 2],
            pred: vec![[500.0, 500.0, 10.0, 10.0]; 2],
        },
        Fixture {
            name: "partial-overlap",
            gt: vec![[0.0, 0.0, 2.0, 2.0], [10.0, 10.0, 20.0, 10.0], [0.0, 0.0, 4.0, 4.0], [5.0, 5.0, 5.0, 5.0]],
            pred: vec![[1.0, 0.0, 2.0, 2.0], [12.0, 11.0, 18.0, 12.0], [2.0, 2.0, 4.0, 4.0], [5.0, 5.0, 5.0, 5.0]],
        },
        Fixture {
            name: "threshold-edges",
            gt: vec![[0.0, 0.0, 10.0, 10.0]; 4],
            pred: vec![
                [20.0, 0.0, 10.0, 10.0],
                [12.0, 16.0, 10.0, 10.0],
                [5.0, 0.0, 10.0, 10.0],
                [0.0, 0.0, 10.0, 20.0],
            ],
        },
    ]
}

fn oracle_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0.0);
    let ih = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

fn oracle_cle(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let dx = (a[0] + a[2] / 2.0) - (b[0] + b[2] / 2.0);
    let dy = (a[1] + a[3] / 2.0) - (b[1] + b[3] / 2.0);
    (dx * dx + dy * dy).sqrt()
}

/// Precision and success curves recounted frame by frame.
pub fn recount(f: &Fixture) -> (Vec<f64>, Vec<f64>) {
    let n = f.gt.len() as f64;
    let mut precision = Vec::new();
    let mut success = Vec::new();
    for i in 0..CURVE_POINTS {
        let (mut p, mut s) = (0usize, 0usize);
        for (g, q) in f.gt.iter().zip(&f.pred) {
            if oracle_cle(q, g) <= i as f64 {
                p += 1;
            }
            if oracle_iou(q, g) > i as f64 / 50.0 {
                s += 1;
            }
        }
        precision.push(p as f64 / n);
        success.push(s as f64 / n);
    }
    (precision, success)
}

fn boxes(v: &[[f64; 4]]) -> Result<Vec<BBox>> {
    v.iter().map(|b| BBox::from_corner(b[0], b[1], b[2], b[3])).collect()
}

/// One check per fixture; the error is the largest curve difference.
pub fn metric_oracle_checks() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for f in fixtures() {
        let results = BTreeMap::from([(
            f.name.to_string(),
            TrackResult {
                boxes: boxes(&f.pred)?,
                scores: vec![0.0; f.pred.len()],
                fps: 0.0,
            },
        )]);
        let gts = BTreeMap::from([(f.name.to_string(), boxes(&f.gt)?)]);
        let report = compute_metrics(&results, &gts)?;
        let m = &report.sequences[f.name];
        let (p, s) = recount(&f);
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let auc = s.iter().sum::<f64>() / CURVE_POINTS as f64;
        let err = diff(&m.precision_curve, &p)
            .max(diff(&m.success_curve, &s))
            .max((m.auc - auc).abs())
            .max((m.precision_at_20 - p[20]).abs());
        out.push(CheckResult::within(
            format!("metrics/{}", f.name),
            err,
            0.0,
            format!("precision@20 {:.4}, auc {:.4}", m.precision_at_20, m.auc),
        ));
    }
    Ok(out)
}

//! Run statistics, the evaluation report and its CSV tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::detection::{mean_average_precision, mean_iou};
use super::mac::MacReport;
use crate::detector::DetectionSet;
use crate::error::{Error, Result};
use crate::geometry::ObjectAnnotation;
use crate::trainer::ClassifierReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub frames: usize,
    pub full_compute_count: usize,
    /// Reuse decisions taken at exit `l`, indexed by `l - 1`.
    pub reuse_counts: Vec<usize>,
    /// Frames reused by a fixed recompute schedule without consulting any exit.
    pub scheduled_reuse_count: usize,
    pub total_macs: u64,
    pub full_macs: u64,
    pub avg_macs_per_frame: f64,
    /// Frames per full compute.
    pub updating_ratio: f64,
    pub mac_speedup: f64,
}

impl RunStats {
    /// Ratios are 0 for an empty run.
    pub fn new(
        full_compute_count: usize,
        reuse_counts: Vec<usize>,
        scheduled_reuse_count: usize,
        total_macs: u64,
        full_macs: u64,
    ) -> Self {
        let frames = full_compute_count + reuse_counts.iter().sum::<usize>() + scheduled_reuse_count;
        let avg = if frames == 0 { 0.0 } else { total_macs as f64 / frames as f64 };
        Self {
            frames,
            full_compute_count,
            reuse_counts,
            scheduled_reuse_count,
            total_macs,
            full_macs,
            avg_macs_per_frame: avg,
            updating_ratio: if full_compute_count == 0 {
                0.0
            } else {
                frames as f64 / full_compute_count as f64
            },
            mac_speedup: if avg == 0.0 { 0.0 } else { full_macs as f64 / avg },
        }
    }

    /// Pools several runs (e.g. one per video) that share a full-path cost.
    pub fn merge(parts: &[RunStats]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::Config("nothing to merge".into()));
        };
        if parts.iter().any(|p| p.full_macs != first.full_macs || p.reuse_counts.len() != first.reuse_counts.len()) {
            return Err(Error::Integrity("run stats with different cost models".into()));
        }
        let mut reuse = vec![0; first.reuse_counts.len()];
        for p in parts {
            for (a, b) in reuse.iter_mut().zip(&p.reuse_counts) {
                *a += b;
            }
        }
        Ok(Self::new(
            parts.iter().map(|p| p.full_compute_count).sum(),
            reuse,
            parts.iter().map(|p| p.scheduled_reuse_count).sum(),
            parts.iter().map(|p| p.total_macs).sum(),
            first.full_macs,
        ))
    }
}

/// A value together with the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tagged<T> {
    pub run_id: String,
    pub value: T,
}

impl<T> Tagged<T> {
    pub fn new(run_id: impl Into<String>, value: T) -> Self {
        Self {
            run_id: run_id.into(),
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalInputs {
    pub detections: Vec<DetectionSet>,
    pub annotations: Vec<Vec<ObjectAnnotation>>,
    pub thresholds: Vec<f64>,
}

/// Large-scale published figures, carried for context only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub method: String,
    pub map: f64,
    pub miou: f64,
    pub updating_ratio: f64,
}

pub fn reference_rows() -> Vec<ReferenceRow> {
    vec![
        ReferenceRow {
            method: "large-scale reference: per-frame two-stage detector".into(),
            map: 0.231,
            miou: 0.8,
            updating_ratio: 1.0,
        },
        ReferenceRow {
            method: "large-scale reference: temporal early exit".into(),
            map: 0.209,
            miou: 0.75,
            updating_ratio: 20.0,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub thresholds: Vec<f64>,
    pub per_threshold_ap: Vec<f64>,
    pub map: f64,
    pub miou: f64,
    pub classifier: Option<ClassifierReport>,
    pub run_stats: Option<RunStats>,
    pub config: serde_json::Value,
    pub reference: Vec<ReferenceRow>,
}

impl EvalReport {
    /// Pretty JSON with a trailing newline; key order is fixed by the struct.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

pub fn assemble_report(
    classifier: Option<Tagged<&ClassifierReport>>,
    stats: Option<Tagged<&RunStats>>,
    eval: Tagged<&EvalInputs>,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let run_id = &eval.run_id;
    for other in [classifier.as_ref().map(|c| &c.run_id), stats.as_ref().map(|s| &s.run_id)]
        .into_iter()
        .flatten()
    {
        if other != run_id {
            return Err(Error::Integrity(format!(
                "report inputs come from different runs: {other:?} and {run_id:?}"
            )));
        }
    }
    let ap = mean_average_precision(&eval.value.detections, &eval.value.annotations, &eval.value.thresholds)?;
    let miou = mean_iou(&eval.value.detections, &eval.value.annotations)?;
    Ok(EvalReport {
        run_id: run_id.clone(),
        thresholds: ap.thresholds,
        per_threshold_ap: ap.per_threshold,
        map: ap.map,
        miou,
        classifier: classifier.map(|c| c.value.clone()),
        run_stats: stats.map(|s| s.value.clone()),
        config,
        reference: reference_rows(),
    })
}

/// One method's line in the accuracy/compute comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub map: f64,
    pub miou: f64,
    pub updating_ratio: f64,
    pub mac_speedup: f64,
}

pub fn classifier_csv(report: &ClassifierReport) -> String {
    let mut s = String::from("exit,accuracy,precision,recall,f1,tp,fp,fn,tn\n");
    for e in &report.exits {
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{:.4},{:.4},{},{},{},{}",
            e.exit, e.accuracy, e.precision, e.recall, e.f1, e.tp, e.fp, e.fn_, e.tn
        );
    }
    s
}

pub fn mac_csv(report: &MacReport) -> String {
    let mut s = String::from("path,macs,params,exit_macs,exit_params\n");
    let _ = writeln!(s, "full,{},{},,", report.full.macs, report.full.params);
    for e in &report.exits {
        let _ = writeln!(s, "exit{},{},{},{},{}", e.exit, e.path.macs, e.path.params, e.teem.macs, e.teem.params);
    }
    s
}

pub fn comparison_csv(rows: &[ComparisonRow], reference: &[ReferenceRow]) -> String {
    let mut s = String::from("method,map,miou,updating_ratio,mac_speedup\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{:.2},{:.2}",
            r.method, r.map, r.miou, r.updating_ratio, r.mac_speedup
        );
    }
    for r in reference {
        let _ = writeln!(s, "{},{:.3},{:.3},{:.0},", r.method, r.map, r.miou, r.updating_ratio);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Detection;
    use crate::geometry::BoundingBox;
    use crate::trainer::ExitMetrics;

    #[test]
    fn speedup_for_mostly_static_run() {
        // 90% of frames exit at a path costing 1/100 of the full one
        let full = 100_000u64;
        let stats = RunStats::new(10, vec![90, 0, 0, 0], 0, 10 * full + 90 * full / 100, full);
        assert_eq!(stats.frames, 100);
        assert!((stats.mac_speedup - 1.0 / (0.1 + 0.9 / 100.0)).abs() < 1e-9);
        assert!((stats.mac_speedup - 9.17).abs() < 0.01);
        assert_eq!(stats.updating_ratio, 10.0);
    }

    #[test]
    fn conservation_and_merge() {
        let a = RunStats::new(2, vec![3, 1, 0, 0], 0, 500, 100);
        let b = RunStats::new(1, vec![0, 0, 0, 4], 2, 150, 100);
        let m = RunStats::merge(&[a.clone(), b]).unwrap();
        assert_eq!(m.frames, 13);
        assert_eq!(m.full_compute_count + m.reuse_counts.iter().sum::<usize>() + m.scheduled_reuse_count, m.frames);
        assert_eq!(m.reuse_counts, vec![3, 1, 0, 4]);
        let c = RunStats::new(1, vec![0, 0, 0, 0], 0, 7, 7);
        assert!(RunStats::merge(&[a, c]).is_err());
        assert_eq!(RunStats::new(0, vec![0; 4], 0, 0, 9).updating_ratio, 0.0);
    }

    fn inputs() -> EvalInputs {
        let b = BoundingBox::new(0., 0., 10., 10.).unwrap();
        EvalInputs {
            detections: vec![DetectionSet {
                frame_index: 0,
                detections: vec![Detection::new(b, 0, 0.9).unwrap()],
            }],
            annotations: vec![vec![ObjectAnnotation::new("a", 0, b)]],
            thresholds: super::super::detection::default_iou_thresholds(),
        }
    }

    #[test]
    fn report_integrity_and_mean() {
        let ev = inputs();
        let cls = ClassifierReport {
            exits: vec![ExitMetrics::from_counts(1, 1, 0, 0, 1)],
        };
        let stats = RunStats::new(1, vec![0; 4], 0, 10, 10);
        let r = assemble_report(
            Some(Tagged::new("r1", &cls)),
            Some(Tagged::new("r1", &stats)),
            Tagged::new("r1", &ev),
            serde_json::json!({"seed": 1}),
        )
        .unwrap();
        let mean = r.per_threshold_ap.iter().sum::<f64>() / r.per_threshold_ap.len() as f64;
        assert_eq!(r.map, mean);
        assert_eq!(r.to_json().unwrap(), r.clone().to_json().unwrap());
        assert_eq!(r.reference.len(), 2);

        let err = assemble_report(None, Some(Tagged::new("r2", &stats)), Tagged::new("r1", &ev), serde_json::Value::Null);
        assert!(matches!(err, Err(Error::Integrity(_))));
    }

    #[test]
    fn csv_layouts() {
        let cls = ClassifierReport {
            exits: vec![ExitMetrics::from_counts(1, 9, 1, 1, 9)],
        };
        let c = classifier_csv(&cls);
        assert_eq!(c.lines().nth(1).unwrap(), "1,0.9000,0.9000,0.9000,0.9000,9,1,1,9");
        let rows = vec![ComparisonRow {
            method: "per-frame".into(),
            map: 1.0,
            miou: 1.0,
            updating_ratio: 1.0,
            mac_speedup: 1.0,
        }];
        assert_eq!(comparison_csv(&rows, &reference_rows()).lines().count(), 4);
    }
}

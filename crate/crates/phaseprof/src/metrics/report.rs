//! Report rendering: the two metric-table CSVs, the per-class breakdown,
//! and along-track phase strip images.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::colloc::NUM_LAYERS;
use crate::io::{io_err, write_atomic, IoError};

use super::MetricsReport;

/// Figure-style palette: clear white, ice blue, mixed red, liquid green.
const PALETTE: [[u8; 3]; 4] = [[255, 255, 255], [0, 0, 255], [255, 0, 0], [0, 255, 0]];

/// Truth and predicted phase columns along a track, both stored
/// layer-major (`[NUM_LAYERS, len]`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StripData {
    pub len: usize,
    pub truth: Vec<u8>,
    pub pred: Vec<u8>,
}

/// One model's evaluation output, as written by `phaseprof eval` and
/// consumed by `phaseprof report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedReport {
    pub model: String,
    pub report: MetricsReport,
    pub strip: Option<StripData>,
}

/// Renders a binary PPM (P6) of a `[NUM_LAYERS, len]` phase strip; image
/// row 0 is the topmost layer (19 km).
pub fn render_strip(columns: &[u8], len: usize) -> Vec<u8> {
    debug_assert_eq!(columns.len(), NUM_LAYERS * len);
    let mut out = format!("P6\n{len} {NUM_LAYERS}\n255\n").into_bytes();
    for row in 0..NUM_LAYERS {
        let layer = NUM_LAYERS - 1 - row;
        for t in 0..len {
            let class = columns[layer * len + t].min(3) as usize;
            out.extend_from_slice(&PALETTE[class]);
        }
    }
    out
}

fn csv_row(name: &str, values: &[f64]) -> String {
    let mut row = String::from(name);
    for v in values {
        row.push_str(&format!(",{v:.6}"));
    }
    row.push('\n');
    row
}

/// Writes `mask_metrics.csv`, `phase_metrics.csv`, `per_class_metrics.csv`
/// and one strip image per model (plus the shared truth strip) into
/// `out_dir`. Returns whether any report carried a degenerate-metric
/// flag.
pub fn render_report(
    reports: &BTreeMap<String, NamedReport>,
    out_dir: &Path,
) -> crate::io::Result<bool> {
    if reports.is_empty() {
        return Err(IoError::Invalid {
            path: out_dir.display().to_string(),
            detail: "no reports to render".into(),
        });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let mask_path = out_dir.join("mask_metrics.csv");
    write_atomic(&mask_path, |w| {
        w.write_all(b"Models,Accuracy,Precision,Recall,F1,IoU\n")
            .map_err(|e| io_err(&mask_path, e))?;
        for (name, r) in reports {
            let m = &r.report.mask;
            w.write_all(
                csv_row(name, &[m.accuracy, m.precision, m.recall, m.f1, m.iou]).as_bytes(),
            )
            .map_err(|e| io_err(&mask_path, e))?;
        }
        Ok(())
    })?;

    let phase_path = out_dir.join("phase_metrics.csv");
    write_atomic(&phase_path, |w| {
        w.write_all(b"Models,Balanced_Accuracy,kappa,Precision_Macro,Recall_Macro,F1_Macro\n")
            .map_err(|e| io_err(&phase_path, e))?;
        for (name, r) in reports {
            let p = &r.report.phase;
            w.write_all(
                csv_row(
                    name,
                    &[
                        p.balanced_accuracy,
                        p.kappa,
                        p.precision_macro,
                        p.recall_macro,
                        p.f1_macro,
                    ],
                )
                .as_bytes(),
            )
            .map_err(|e| io_err(&phase_path, e))?;
        }
        Ok(())
    })?;

    let class_names = ["no_cloud", "ice", "mixed", "water"];
    let per_class_path = out_dir.join("per_class_metrics.csv");
    write_atomic(&per_class_path, |w| {
        w.write_all(b"Models,Class,Precision,Recall,F1\n")
            .map_err(|e| io_err(&per_class_path, e))?;
        for (name, r) in reports {
            for (class, m) in r.report.phase.per_class.iter().enumerate() {
                let row = format!(
                    "{name},{},{:.6},{:.6},{:.6}\n",
                    class_names[class], m.precision, m.recall, m.f1
                );
                w.write_all(row.as_bytes())
                    .map_err(|e| io_err(&per_class_path, e))?;
            }
        }
        Ok(())
    })?;

    let mut truth_written = false;
    for (name, r) in reports {
        let Some(strip) = &r.strip else { continue };
        if !truth_written {
            let path = out_dir.join("strip_truth.ppm");
            let bytes = render_strip(&strip.truth, strip.len);
            write_atomic(&path, |w| w.write_all(&bytes).map_err(|e| io_err(&path, e)))?;
            truth_written = true;
        }
        let path = out_dir.join(format!("strip_{name}.ppm"));
        let bytes = render_strip(&strip.pred, strip.len);
        write_atomic(&path, |w| w.write_all(&bytes).map_err(|e| io_err(&path, e)))?;
    }

    Ok(reports.values().any(|r| r.report.degenerate()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{evaluate_classes, MetricsReport};

    fn sample_report() -> MetricsReport {
        let labels = vec![0u8, 1, 2, 3];
        let mask = vec![true; 4];
        evaluate_classes(&labels, &labels, &mask, (1, 1, 2, 2)).unwrap()
    }

    #[test]
    fn single_report_writes_one_data_row_per_table() {
        let dir = tempfile::tempdir().unwrap();
        let mut reports = BTreeMap::new();
        reports.insert(
            "sgmagnet".to_string(),
            NamedReport {
                model: "sgmagnet".to_string(),
                report: sample_report(),
                strip: None,
            },
        );
        render_report(&reports, dir.path()).unwrap();
        let mask = std::fs::read_to_string(dir.path().join("mask_metrics.csv")).unwrap();
        let lines: Vec<&str> = mask.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "Models,Accuracy,Precision,Recall,F1,IoU");
        assert!(lines[1].starts_with("sgmagnet,"));
        let phase = std::fs::read_to_string(dir.path().join("phase_metrics.csv")).unwrap();
        let lines: Vec<&str> = phase.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[0],
            "Models,Balanced_Accuracy,kappa,Precision_Macro,Recall_Macro,F1_Macro"
        );
        let per_class =
            std::fs::read_to_string(dir.path().join("per_class_metrics.csv")).unwrap();
        assert_eq!(per_class.lines().count(), 1 + 4);
    }

    #[test]
    fn strip_image_has_38_rows_and_track_width() {
        let len = 21;
        let columns = vec![1u8; NUM_LAYERS * len];
        let ppm = render_strip(&columns, len);
        let header = format!("P6\n{len} {NUM_LAYERS}\n255\n");
        assert!(ppm.starts_with(header.as_bytes()));
        assert_eq!(ppm.len(), header.len() + 3 * NUM_LAYERS * len);
        // all-ice strip renders blue
        assert_eq!(&ppm[header.len()..header.len() + 3], &[0, 0, 255]);
    }

    #[test]
    fn strip_palette_matches_classes() {
        let len = 1;
        let mut columns = vec![0u8; NUM_LAYERS];
        columns[NUM_LAYERS - 1] = 2; // top layer mixed
        let ppm = render_strip(&columns, len);
        let header_len = format!("P6\n{len} {NUM_LAYERS}\n255\n").len();
        // row 0 is the top layer
        assert_eq!(&ppm[header_len..header_len + 3], &[255, 0, 0]);
        assert_eq!(&ppm[header_len + 3..header_len + 6], &[255, 255, 255]);
    }
}

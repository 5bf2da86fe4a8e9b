//! Adapter for the NIH Chest X-Ray 14 CSV shape: a findings table
//! (image index + pipe-separated finding labels) and a bbox table
//! (image index, finding label, x, y, w, h).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{csv_err, ingestion, DatasetManifest, ManifestRecord, Split};
use crate::error::{PylonError, Result};
use crate::metrics::BBox;

/// The 14 finding classes, in the dataset's published order.
pub const NIH_CLASSES: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural_Thickening",
    "Hernia",
];

const NO_FINDING: &str = "No Finding";

fn class_index(name: &str) -> Option<usize> {
    NIH_CLASSES.iter().position(|&c| c == name)
}

/// Build a manifest from NIH-shaped CSVs. `labels_csv` needs columns
/// `Image Index` and `Finding Labels`; `bbox_csv` needs `Image Index`,
/// `Finding Label` and `x`, `y`, `w`, `h` columns (header names containing
/// those letters, as in the published file). Unknown finding names error
/// with the offending rows listed. Every record lands in the train split;
/// apply [`super::split`] afterwards.
pub fn ingest_nih_csv(
    labels_csv: &Path,
    bbox_csv: &Path,
    image_dir: &Path,
) -> Result<DatasetManifest> {
    let classes: Vec<String> = NIH_CLASSES.iter().map(|s| s.to_string()).collect();

    let mut rdr =
        csv::Reader::from_path(labels_csv).map_err(|e| ingestion(labels_csv, &e.to_string()))?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ingestion(labels_csv, &format!("missing column `{name}`")))
    };
    let idx_col = col("Image Index")?;
    let finding_col = col("Finding Labels")?;

    let mut records = Vec::new();
    let mut bad_rows = Vec::new();
    for (row_no, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| ingestion(labels_csv, &e.to_string()))?;
        let image = &row[idx_col];
        let mut labels = Vec::new();
        for finding in row[finding_col].split('|') {
            let finding = finding.trim();
            if finding.is_empty() || finding == NO_FINDING {
                continue;
            }
            match class_index(finding) {
                Some(_) => labels.push(finding.to_string()),
                None => bad_rows.push(format!("row {}: `{finding}`", row_no + 2)),
            }
        }
        records.push(ManifestRecord {
            image_path: image_dir.join(image),
            split: Split::Train,
            labels,
        });
    }

    let mut boxes: BTreeMap<(String, String), Vec<BBox>> = BTreeMap::new();
    let mut rdr =
        csv::Reader::from_path(bbox_csv).map_err(|e| ingestion(bbox_csv, &e.to_string()))?;
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let find = |pred: &dyn Fn(&str) -> bool, what: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| pred(h.trim()))
            .ok_or_else(|| ingestion(bbox_csv, &format!("missing column `{what}`")))
    };
    let b_idx = find(&|h| h == "Image Index", "Image Index")?;
    let b_label = find(&|h| h == "Finding Label", "Finding Label")?;
    // The published header spells the geometry columns "Bbox [x", "y", "w", "h]".
    let b_x = find(&|h| h == "x" || h.ends_with("[x") || h == "Bbox [x", "x")?;
    let b_y = find(&|h| h == "y", "y")?;
    let b_w = find(&|h| h == "w", "w")?;
    let b_h = find(&|h| h == "h" || h.starts_with("h]") || h == "h]", "h")?;

    for (row_no, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| ingestion(bbox_csv, &e.to_string()))?;
        let finding = row[b_label].trim();
        if class_index(finding).is_none() {
            bad_rows.push(format!("bbox row {}: `{finding}`", row_no + 2));
            continue;
        }
        let num = |i: usize| -> Result<usize> {
            row[i]
                .trim()
                .parse::<f64>()
                .map(|v| v.round().max(0.0) as usize)
                .map_err(|_| ingestion(bbox_csv, &format!("bad number `{}` in row {}", &row[i], row_no + 2)))
        };
        let id = image_id(&PathBuf::from(&row[b_idx]));
        boxes
            .entry((id, finding.to_string()))
            .or_default()
            .push(BBox {
                x: num(b_x)?,
                y: num(b_y)?,
                w: num(b_w)?,
                h: num(b_h)?,
            });
    }

    if !bad_rows.is_empty() {
        return Err(ingestion(
            labels_csv,
            &format!("unknown finding names: {}", bad_rows.join("; ")),
        ));
    }
    if records.is_empty() {
        return Err(PylonError::MissingAnnotations(format!(
            "no rows in {}",
            labels_csv.display()
        )));
    }

    Ok(DatasetManifest {
        classes,
        records,
        boxes,
    })
}

fn image_id(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(path: &Path, content: &str) {
        let mut f = std::fs::File::create(path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
    }

    fn sample_csvs(dir: &Path) -> (PathBuf, PathBuf) {
        let labels = dir.join("labels.csv");
        let bbox = dir.join("bbox.csv");
        write(
            &labels,
            "Image Index,Finding Labels,Patient ID\n\
             00000001_000.png,Cardiomegaly,1\n\
             00000002_000.png,Nodule|Mass,2\n\
             00000003_000.png,No Finding,3\n",
        );
        write(
            &bbox,
            "Image Index,Finding Label,Bbox [x,y,w,h]\n\
             00000001_000.png,Cardiomegaly,100.5,200,300,150\n\
             00000002_000.png,Nodule,50,60,10,12\n",
        );
        (labels, bbox)
    }

    #[test]
    fn direct_mapping_and_multilabel() {
        let dir = tempfile::tempdir().unwrap();
        let (labels, bbox) = sample_csvs(dir.path());
        let m = ingest_nih_csv(&labels, &bbox, Path::new("imgs")).unwrap();
        assert_eq!(m.classes.len(), 14);
        assert_eq!(m.records.len(), 3);
        // multi-label row
        let r = &m.records[1];
        assert_eq!(r.labels, vec!["Nodule".to_string(), "Mass".to_string()]);
        assert_eq!(m.label_vector(r).iter().filter(|&&b| b).count(), 2);
        // "No Finding" maps to the all-zero vector
        assert!(m.records[2].labels.is_empty());
        // box mapping (x rounds to nearest)
        let b = m.boxes_for("00000001_000", "Cardiomegaly");
        assert_eq!(b, &[BBox { x: 101, y: 200, w: 300, h: 150 }]);
    }

    #[test]
    fn unknown_finding_lists_offending_rows() {
        let dir = tempfile::tempdir().unwrap();
        let labels = dir.path().join("labels.csv");
        let bbox = dir.path().join("bbox.csv");
        write(
            &labels,
            "Image Index,Finding Labels\nimg.png,Cardiomegaly|Dragonpox\n",
        );
        write(&bbox, "Image Index,Finding Label,Bbox [x,y,w,h]\n");
        let err = ingest_nih_csv(&labels, &bbox, Path::new("imgs")).unwrap_err();
        match err {
            PylonError::Ingestion { reason, .. } => assert!(reason.contains("Dragonpox")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trip_through_manifest_csv() {
        let dir = tempfile::tempdir().unwrap();
        let (labels, bbox) = sample_csvs(dir.path());
        let m = ingest_nih_csv(&labels, &bbox, Path::new("imgs")).unwrap();
        let out = tempfile::tempdir().unwrap();
        m.write_csv(out.path()).unwrap();
        let back = DatasetManifest::read_csv(out.path(), &m.classes).unwrap();
        assert_eq!(m, back);
    }
}

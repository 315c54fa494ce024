use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{ClassificationSample, DatasetError, DetectionSample, LabeledBox, Result};
use crate::imaging::{decode_image_auto, BBox};

pub const CSV_HEADER: [&str; 8] = ["filename", "width", "height", "class", "xmin", "ymin", "xmax", "ymax"];

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm")
    )
}

fn decodes(path: &Path) -> bool {
    fs::read(path)
        .ok()
        .is_some_and(|bytes| decode_image_auto::<f32>(&bytes).is_ok())
}

/// Enumerates `<root>/<class>/<image>` with classes in lexicographic order.
///
/// Only decodable PNG/PPM files count as samples. A class directory without
/// any is an error.
pub fn load_classification_tree(root: &Path) -> Result<(Vec<ClassificationSample>, Vec<String>)> {
    let unreadable = |source| DatasetError::UnreadableDirectory { path: root.to_path_buf(), source };
    let mut class_dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(unreadable)? {
        let entry = entry.map_err(unreadable)?;
        if entry.file_type().map_err(unreadable)?.is_dir() {
            class_dirs.push(entry.path());
        }
    }
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(DatasetError::EmptyDataset(root.to_path_buf()));
    }

    let mut samples = Vec::new();
    let mut class_names = Vec::with_capacity(class_dirs.len());
    for (class_id, dir) in class_dirs.iter().enumerate() {
        let class_name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let unreadable = |source| DatasetError::UnreadableDirectory { path: dir.clone(), source };
        let mut files: Vec<_> = fs::read_dir(dir)
            .map_err(unreadable)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        files.sort();
        let before = samples.len();
        for file in files.into_iter().filter(|p| decodes(p)) {
            samples.push(ClassificationSample {
                image_path: file.to_string_lossy().into_owned(),
                class_id,
                class_name: class_name.clone(),
            });
        }
        if samples.len() == before {
            return Err(DatasetError::EmptyClass(dir.clone()));
        }
        class_names.push(class_name);
    }
    Ok((samples, class_names))
}

/// Reads a `filename,width,height,class,xmin,ymin,xmax,ymax` CSV.
///
/// Rows sharing a filename merge into one sample (first-appearance order).
/// A row with an empty `class` declares an image without objects.
pub fn load_detection_csv(csv_path: &Path, image_dir: &Path) -> Result<Vec<DetectionSample>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(csv_path)?;
    let headers = reader.headers()?.clone();
    let mut col = [0usize; 8];
    for (slot, name) in col.iter_mut().zip(CSV_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or(DatasetError::MissingColumn(name))?;
    }

    let mut samples: Vec<DetectionSample> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let field = |k: usize| record.get(col[k]).unwrap_or("");
        let number = |k: usize| -> Result<f64> {
            field(k)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DatasetError::NonNumericCoordinate {
                    row,
                    column: CSV_HEADER[k],
                    value: field(k).to_string(),
                })
        };
        let filename = field(0).to_string();
        let (w, h) = (number(1)?, number(2)?);
        if w < 1.0 || h < 1.0 || w.fract() != 0.0 || h.fract() != 0.0 {
            return Err(DatasetError::NonNumericCoordinate {
                row,
                column: "width",
                value: format!("{w}x{h}"),
            });
        }
        let slot = *index.entry(filename.clone()).or_insert_with(|| {
            samples.push(DetectionSample {
                image_path: image_dir.join(&filename).to_string_lossy().into_owned(),
                image_w: w as usize,
                image_h: h as usize,
                objects: Vec::new(),
            });
            samples.len() - 1
        });
        if field(3).is_empty() {
            continue;
        }
        let (xmin, ymin, xmax, ymax) = (number(4)?, number(5)?, number(6)?, number(7)?);
        let bbox = BBox::from_corners(xmin, ymin, xmax, ymax)
            .ok()
            .filter(|b| b.within(w, h))
            .ok_or(DatasetError::BoxOutOfBounds { row })?;
        samples[slot].objects.push(LabeledBox { class_name: field(3).to_string(), bbox });
    }
    Ok(samples)
}

/// Writes samples in the fixed column order, one row per object (a single
/// blank-class row for images without objects). Filenames are written as
/// the final path component of `image_path`.
pub fn write_detection_csv(samples: &[DetectionSample], csv_path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(csv_path)?;
    writer.write_record(CSV_HEADER)?;
    for s in samples {
        let name = Path::new(&s.image_path)
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| s.image_path.clone());
        let (w, h) = (s.image_w.to_string(), s.image_h.to_string());
        if s.objects.is_empty() {
            writer.write_record([name.as_str(), &w, &h, "", "", "", "", ""])?;
        }
        for o in &s.objects {
            let b = o.bbox;
            writer.write_record([
                name.clone(),
                w.clone(),
                h.clone(),
                o.class_name.clone(),
                b.x.to_string(),
                b.y.to_string(),
                b.right().to_string(),
                b.bottom().to_string(),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

//! Referring-expression dataset model and on-disk annotation format.
//!
//! A dataset root contains `annotations.jsonl` (one record per object),
//! `vocab.txt`, an `images/` directory, and optionally a `masks/` directory
//! with ground-truth masks. Masks and boxes are evaluation-only: the
//! training item type carries neither, so no code path can feed them into a
//! training loss.


pub mod batches;
pub mod import;
pub mod synthetic;

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::encoders::Image;
use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Inclusive pixel bounding box `[x_min, y_min, x_max, y_max]`.
pub type BBox = [usize; 4];

/// One annotated object with its referring expressions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    /// Image path relative to the dataset root.
    pub image: String,
    pub object_id: u32,
    pub expressions: Vec<String>,
    /// Ground-truth mask path, evaluation only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    /// Ground-truth box, evaluation only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    pub split: String,
}

/// Loaded dataset restricted to one split.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    records: Vec<AnnotationRecord>,
    by_image: BTreeMap<String, Vec<usize>>,
    pub warnings: Vec<String>,
}

impl Dataset {
    /// Read and validate `annotations.jsonl`, keeping records of `split`.
    pub fn load(root: &Path, split: &str) -> Result<Self> {
        let ann_path = root.join("annotations.jsonl");
        let file = std::fs::File::open(&ann_path).map_err(|e| {
            Error::Dataset(format!("cannot open {}: {e}", ann_path.display()))
        })?;
        let reader = std::io::BufReader::new(file);
        let mut records = Vec::new();
        let mut warnings = Vec::new();
        let mut total = 0usize;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            total += 1;
            let rec: AnnotationRecord =
                serde_json::from_str(&line).map_err(|e| Error::DatasetRecord {
                    line: lineno + 1,
                    message: format!("malformed record: {e}"),
                })?;
            if rec.expressions.is_empty() {
                return Err(Error::DatasetRecord {
                    line: lineno + 1,
                    message: format!(
                        "object {}/{} has no expressions",
                        rec.image_id, rec.object_id
                    ),
                });
            }
            if !root.join(&rec.image).is_file() {
                return Err(Error::DatasetRecord {
                    line: lineno + 1,
                    message: format!("missing image file {}", rec.image),
                });
            }
            if rec.split == split {
                records.push(rec);
            }
        }
        if total == 0 {
            warnings.push(format!("{} is empty", ann_path.display()));
        }
        let mut by_image: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            by_image.entry(r.image_id.clone()).or_default().push(i);
        }
        Ok(Self {
            root: root.to_path_buf(),
            records,
            by_image,
            warnings,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }

    pub fn record(&self, idx: usize) -> &AnnotationRecord {
        &self.records[idx]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices of all objects annotated on `image_id`.
    pub fn objects_of_image(&self, image_id: &str) -> &[usize] {
        self.by_image
            .get(image_id)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn image_count(&self) -> usize {
        self.by_image.len()
    }

    /// All (record index, expression index) pairs across the split.
    pub fn expression_refs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            for e in 0..r.expressions.len() {
                out.push((i, e));
            }
        }
        out
    }

    pub fn load_image(&self, idx: usize) -> Result<Image> {
        load_image_file(&self.root.join(&self.records[idx].image))
    }

    /// Ground-truth mask of a record; evaluation only.
    pub fn load_gt_mask(&self, idx: usize) -> Result<Array2<u8>> {
        let rec = &self.records[idx];
        let path = rec.mask.as_ref().ok_or_else(|| {
            Error::Dataset(format!(
                "record {}/{} has no ground-truth mask",
                rec.image_id, rec.object_id
            ))
        })?;
        load_mask_file(&self.root.join(path))
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::load(&self.root.join("vocab.txt"))
    }
}

/// Write annotation records as line-delimited JSON.
pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load an RGB PNG into `[0, 1]` pixel values.
pub fn load_image_file(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut pixels = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            pixels[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
        }
    }
    Image::new(pixels)
}

/// Save `[0, 1]` pixels as an 8-bit RGB PNG.
pub fn save_image_file(path: &Path, pixels: &Array3<f64>) -> Result<()> {
    let (c, h, w) = pixels.dim();
    assert_eq!(c, 3, "save_image_file expects (3,H,W)");
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = pixels[[ch, y as usize, x as usize]].clamp(0.0, 1.0);
            p.0[ch] = (v * 255.0).round() as u8;
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Load a binary mask; any nonzero sample maps to 1.
pub fn load_mask_file(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut mask = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        mask[[y as usize, x as usize]] = u8::from(p.0[0] > 0);
    }
    Ok(mask)
}

/// Save a binary mask as a 1-bit grayscale PNG.
pub fn save_mask_file(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let file = std::fs::File::create(path)?;
    let writer = std::io::BufWriter::new(file);
    let mut encoder = png::Encoder::new(writer, w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::One);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Png(e.to_string()))?;
    let row_bytes = w.div_ceil(8);
    let mut data = vec![0u8; row_bytes * h];
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] != 0 {
                data[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    writer
        .write_image_data(&data)
        .map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}

/// Tight bounding box of a mask's nonzero pixels, if any.
pub fn mask_bbox(mask: &Array2<u8>) -> Option<BBox> {
    let (h, w) = mask.dim();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] != 0 {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    any.then_some([x0, y0, x1, y1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_record(i: usize, split: &str) -> AnnotationRecord {
        AnnotationRecord {
            image_id: format!("img_{i:04}"),
            image: format!("images/img_{i:04}.png"),
            object_id: 0,
            expressions: vec!["red circle".into()],
            mask: Some(format!("masks/img_{i:04}_0.png")),
            bbox: Some([1, 2, 10, 12]),
            split: split.into(),
        }
    }

    fn write_dummy_image(root: &Path, rec: &AnnotationRecord) {
        let p = root.join(&rec.image);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        let px = Array3::from_elem((3, 8, 8), 0.5);
        save_image_file(&p, &px).unwrap();
    }

    #[test]
    fn empty_annotations_yield_empty_dataset_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("annotations.jsonl"), "").unwrap();
        let ds = Dataset::load(dir.path(), "train").unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.warnings.len(), 1);
    }

    #[test]
    fn record_without_expressions_is_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = sample_record(0, "train");
        write_dummy_image(dir.path(), &rec);
        rec.expressions.clear();
        write_annotations(&dir.path().join("annotations.jsonl"), &[rec]).unwrap();
        let err = Dataset::load(dir.path(), "train").unwrap_err();
        match err {
            Error::DatasetRecord { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("annotations.jsonl"),
            "{\"image_id\": 12}\n",
        )
        .unwrap();
        let err = Dataset::load(dir.path(), "train").unwrap_err();
        assert!(matches!(err, Error::DatasetRecord { line: 1, .. }));
    }

    #[test]
    fn round_trip_preserves_fields() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<AnnotationRecord> = (0..10).map(|i| sample_record(i, "train")).collect();
        for r in &records {
            write_dummy_image(dir.path(), r);
        }
        write_annotations(&dir.path().join("annotations.jsonl"), &records).unwrap();
        let ds = Dataset::load(dir.path(), "train").unwrap();
        assert_eq!(ds.len(), 10);
        for (a, b) in records.iter().zip(ds.records()) {
            assert_eq!(a.image_id, b.image_id);
            assert_eq!(a.image, b.image);
            assert_eq!(a.object_id, b.object_id);
            assert_eq!(a.expressions, b.expressions);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.bbox, b.bbox);
            assert_eq!(a.split, b.split);
        }
    }

    #[test]
    fn mask_png_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut mask = Array2::<u8>::zeros((13, 9));
        mask[[0, 0]] = 1;
        mask[[5, 7]] = 1;
        mask[[12, 8]] = 1;
        let p = dir.path().join("m.png");
        save_mask_file(&p, &mask).unwrap();
        let back = load_mask_file(&p).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn image_png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let px = Array3::from_shape_fn((3, 6, 7), |(c, y, x)| {
            ((c * 31 + y * 7 + x) % 256) as f64 / 255.0
        });
        let p = dir.path().join("i.png");
        save_image_file(&p, &px).unwrap();
        let back = load_image_file(&p).unwrap();
        for (a, b) in px.iter().zip(back.pixels().iter()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn bbox_of_mask() {
        let mut mask = Array2::<u8>::zeros((6, 6));
        assert_eq!(mask_bbox(&mask), None);
        mask[[2, 3]] = 1;
        mask[[4, 1]] = 1;
        assert_eq!(mask_bbox(&mask), Some([1, 2, 3, 4]));
    }
}

//! Import adapter for external referring-expression annotations.
//!
//! External datasets are converted to the native format through a small
//! line-delimited schema; masks arrive as COCO-style uncompressed RLE and are
//! re-encoded as 1-bit PNGs.
//!
//! Field mapping from common referring-expression releases:
//! - `image` / `file_name`  -> `image` (path relative to the dataset root;
//!   image files themselves are not copied, place or symlink them under
//!   `images/` before importing)
//! - `sentences[].raw`      -> `expressions`
//! - `segmentation.counts` + `segmentation.size = [h, w]` -> `mask_rle`
//! - `bbox = [x, y, w, h]` (floats, xywh) -> inclusive pixel box
//! - `split`                -> `split`

use std::io::BufRead;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{save_mask_file, write_annotations, AnnotationRecord, BBox};
use crate::error::{Error, Result};

/// Uncompressed run-length mask: alternating runs of 0s and 1s in
/// column-major order, starting with zeros.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RleMask {
    pub counts: Vec<usize>,
    /// `[height, width]`
    pub size: [usize; 2],
}

/// One external annotation line accepted by [`import_jsonl`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalRecord {
    pub image_id: String,
    pub image: String,
    pub object_id: u32,
    pub sentences: Vec<String>,
    #[serde(default)]
    pub mask_rle: Option<RleMask>,
    /// `[x, y, w, h]` in pixels.
    #[serde(default)]
    pub bbox_xywh: Option<[f64; 4]>,
    pub split: String,
}

/// Decode column-major uncompressed RLE into a binary mask.
pub fn rle_to_mask(counts: &[usize], h: usize, w: usize) -> Result<Array2<u8>> {
    let total: usize = counts.iter().sum();
    if total != h * w {
        return Err(Error::Dataset(format!(
            "RLE covers {total} pixels, mask has {}",
            h * w
        )));
    }
    let mut mask = Array2::<u8>::zeros((h, w));
    let mut pos = 0usize;
    let mut value = 0u8;
    for &run in counts {
        if value == 1 {
            for p in pos..pos + run {
                // column-major: p = x * h + y
                mask[[p % h, p / h]] = 1;
            }
        }
        pos += run;
        value ^= 1;
    }
    Ok(mask)
}

/// Encode a binary mask as column-major uncompressed RLE.
pub fn mask_to_rle(mask: &Array2<u8>) -> Vec<usize> {
    let (h, w) = mask.dim();
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0usize;
    for x in 0..w {
        for y in 0..h {
            let v = u8::from(mask[[y, x]] != 0);
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
    }
    counts.push(run);
    counts
}

fn xywh_to_inclusive(b: [f64; 4], h: usize, w: usize) -> BBox {
    let x0 = b[0].max(0.0).floor() as usize;
    let y0 = b[1].max(0.0).floor() as usize;
    let x1 = ((b[0] + b[2] - 1.0).round().max(0.0) as usize).min(w.saturating_sub(1));
    let y1 = ((b[1] + b[3] - 1.0).round().max(0.0) as usize).min(h.saturating_sub(1));
    [x0, y0, x1.max(x0), y1.max(y0)]
}

/// Convert an external JSONL file into the native dataset layout under
/// `out_root`; returns the number of records written.
pub fn import_jsonl(external: &Path, out_root: &Path) -> Result<usize> {
    let file = std::fs::File::open(external)?;
    std::fs::create_dir_all(out_root.join("masks"))?;
    let mut records = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ext: ExternalRecord = serde_json::from_str(&line).map_err(|e| Error::DatasetRecord {
            line: lineno + 1,
            message: format!("malformed external record: {e}"),
        })?;
        if ext.sentences.is_empty() {
            return Err(Error::DatasetRecord {
                line: lineno + 1,
                message: "external record has no sentences".into(),
            });
        }
        let mut mask_rel = None;
        let mut bbox = None;
        if let Some(rle) = &ext.mask_rle {
            let mask = rle_to_mask(&rle.counts, rle.size[0], rle.size[1])
                .map_err(|e| Error::DatasetRecord {
                    line: lineno + 1,
                    message: e.to_string(),
                })?;
            let rel = format!("masks/{}_{}.png", ext.image_id, ext.object_id);
            save_mask_file(&out_root.join(&rel), &mask)?;
            bbox = super::mask_bbox(&mask);
            mask_rel = Some(rel);
        }
        if let (Some(b), Some(rle)) = (ext.bbox_xywh, &ext.mask_rle) {
            bbox = Some(xywh_to_inclusive(b, rle.size[0], rle.size[1]));
        }
        records.push(AnnotationRecord {
            image_id: ext.image_id,
            image: ext.image,
            object_id: ext.object_id,
            expressions: ext.sentences,
            mask: mask_rel,
            bbox,
            split: ext.split,
        });
    }
    write_annotations(&out_root.join("annotations.jsonl"), &records)?;
    Ok(records.len())
}

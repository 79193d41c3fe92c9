//! Evaluation metrics: mask IoU (mean and overall), Prec@0.5, the pointing
//! game against boxes (PointIt) and against masks (PointM), and box accuracy.
//!
//! PointM is the stricter pointing metric: a maximum-response pixel that
//! lands inside the ground-truth box but outside the ground-truth mask is a
//! PointIt hit yet a PointM miss; this is exactly the in-box error PointM
//! removes. Maximum-pixel ties resolve to the lowest row-major index.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::resize_bilinear_2d;
use crate::data::{mask_bbox, BBox};
use crate::error::{Error, Result};

/// Heatmap input for the pointing metrics: a raw response map (upsampled to
/// the ground-truth resolution first) or an already-binary mask.
pub enum PointInput<'a> {
    Response(&'a Array2<f64>),
    Mask(&'a Array2<u8>),
}

/// IoU value plus the empty-union flag.
#[derive(Debug, Clone, Copy)]
pub struct IouOutcome {
    pub value: f64,
    pub empty_union: bool,
}

/// Mask intersection-over-union; an empty union is defined as 0 and flagged.
pub fn iou(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<IouOutcome> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch {
            context: "iou masks",
            expected: format!("{:?}", gt.dim()),
            actual: format!("{:?}", pred.dim()),
        });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (p != 0, g != 0);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    if union == 0 {
        Ok(IouOutcome {
            value: 0.0,
            empty_union: true,
        })
    } else {
        Ok(IouOutcome {
            value: inter as f64 / union as f64,
            empty_union: false,
        })
    }
}

/// 1 iff `iou >= k` (boundary counts as a hit).
pub fn precision_at(pred: &Array2<u8>, gt: &Array2<u8>, k: f64) -> Result<bool> {
    Ok(iou(pred, gt)?.value >= k)
}

/// Global maximum position, lowest row-major index on ties.
pub fn max_pixel(map: &Array2<f64>) -> (usize, usize) {
    let (_, w) = map.dim();
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0usize;
    for (i, &v) in map.iter().enumerate() {
        if v > best {
            best = v;
            arg = i;
        }
    }
    (arg / w, arg % w)
}

fn point_of(input: &PointInput, out_h: usize, out_w: usize) -> (usize, usize) {
    match input {
        PointInput::Response(map) => {
            if map.dim() == (out_h, out_w) {
                max_pixel(map)
            } else {
                max_pixel(&resize_bilinear_2d(map, out_h, out_w))
            }
        }
        PointInput::Mask(mask) => {
            debug_assert_eq!(mask.dim(), (out_h, out_w));
            max_pixel(&mask.mapv(|v| v as f64))
        }
    }
}

/// Hit iff the maximum pixel falls inside the ground-truth mask.
pub fn point_m(input: &PointInput, gt_mask: &Array2<u8>) -> Result<bool> {
    if !gt_mask.iter().any(|&v| v != 0) {
        return Err(Error::Dataset("PointM requires a non-empty ground-truth mask".into()));
    }
    let (h, w) = gt_mask.dim();
    let (y, x) = point_of(input, h, w);
    Ok(gt_mask[[y, x]] != 0)
}

/// Hit iff the maximum pixel falls inside the ground-truth box (inclusive).
pub fn point_it(input: &PointInput, gt_box: BBox, image_h: usize, image_w: usize) -> Result<bool> {
    let [x0, y0, x1, y1] = gt_box;
    if x1 >= image_w || y1 >= image_h || x0 > x1 || y0 > y1 {
        return Err(Error::Dataset(format!(
            "box {gt_box:?} outside {image_h}x{image_w} image"
        )));
    }
    let (y, x) = point_of(input, image_h, image_w);
    Ok(x >= x0 && x <= x1 && y >= y0 && y <= y1)
}

/// IoU of two inclusive pixel boxes.
pub fn box_iou(a: BBox, b: BBox) -> f64 {
    let area = |r: BBox| ((r[2] - r[0] + 1) * (r[3] - r[1] + 1)) as f64;
    let ix0 = a[0].max(b[0]);
    let iy0 = a[1].max(b[1]);
    let ix1 = a[2].min(b[2]);
    let iy1 = a[3].min(b[3]);
    if ix0 > ix1 || iy0 > iy1 {
        return 0.0;
    }
    let inter = ((ix1 - ix0 + 1) * (iy1 - iy0 + 1)) as f64;
    inter / (area(a) + area(b) - inter)
}

/// Hit iff the tight box of the predicted mask reaches box-IoU >= 0.5 with
/// the ground-truth box; an empty prediction is a miss.
pub fn acc_box(pred_mask: &Array2<u8>, gt_box: BBox) -> bool {
    match mask_bbox(pred_mask) {
        Some(pred_box) => box_iou(pred_box, gt_box) >= 0.5,
        None => false,
    }
}

/// Per-sample evaluation row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEval {
    pub image_id: String,
    pub object_id: u32,
    pub expression_index: usize,
    pub iou: f64,
    pub empty_union: bool,
    pub prec_at_05: bool,
    pub point_it: bool,
    pub point_m: bool,
    pub acc_box: bool,
    pub intersection: usize,
    pub union: usize,
}

/// Aggregated metrics over a split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean of per-sample IoU values.
    pub mean_iou: f64,
    /// Cumulative intersection over cumulative union.
    pub overall_iou: f64,
    pub prec_at_05: f64,
    pub point_it: f64,
    pub point_m: f64,
    pub acc_box: f64,
    pub sample_count: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub samples: Vec<SampleEval>,
}

impl MetricsReport {
    pub fn from_samples(samples: Vec<SampleEval>) -> Self {
        let n = samples.len();
        let rate = |f: &dyn Fn(&SampleEval) -> bool| {
            if n == 0 {
                0.0
            } else {
                samples.iter().filter(|s| f(s)).count() as f64 / n as f64
            }
        };
        let mean_iou = if n == 0 {
            0.0
        } else {
            samples.iter().map(|s| s.iou).sum::<f64>() / n as f64
        };
        let total_inter: usize = samples.iter().map(|s| s.intersection).sum();
        let total_union: usize = samples.iter().map(|s| s.union).sum();
        let overall_iou = if total_union == 0 {
            0.0
        } else {
            total_inter as f64 / total_union as f64
        };
        Self {
            mean_iou,
            overall_iou,
            prec_at_05: rate(&|s| s.prec_at_05),
            point_it: rate(&|s| s.point_it),
            point_m: rate(&|s| s.point_m),
            acc_box: rate(&|s| s.acc_box),
            sample_count: n,
            samples,
        }
    }

    /// Per-sample rows as line-delimited JSON.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample row"));
            out.push('\n');
        }
        out
    }

    /// Human-readable summary table.
    pub fn summary_table(&self) -> String {
        format!(
            "metric        value\n\
             ------------  -------\n\
             mean IoU      {:\u{20}>7.4}\n\
             overall IoU   {:\u{20}>7.4}\n\
             P@0.5         {:\u{20}>7.4}\n\
             PointIt       {:\u{20}>7.4}\n\
             PointM        {:\u{20}>7.4}\n\
             Acc_box       {:\u{20}>7.4}\n\
             samples       {:\u{20}>7}",
            self.mean_iou,
            self.overall_iou,
            self.prec_at_05,
            self.point_it,
            self.point_m,
            self.acc_box,
            self.sample_count
        )
    }
}

/// Evaluate one (prediction, ground truth) pair into a sample row.
pub fn evaluate_sample(
    image_id: &str,
    object_id: u32,
    expression_index: usize,
    pred_mask: &Array2<u8>,
    response: Option<&Array2<f64>>,
    gt_mask: &Array2<u8>,
    gt_box: BBox,
) -> Result<SampleEval> {
    let out = iou(pred_mask, gt_mask)?;
    let mut inter = 0usize;
    let mut uni = 0usize;
    for (&p, &g) in pred_mask.iter().zip(gt_mask.iter()) {
        inter += usize::from(p != 0 && g != 0);
        uni += usize::from(p != 0 || g != 0);
    }
    let (h, w) = gt_mask.dim();
    let point = match response {
        Some(r) => PointInput::Response(r),
        None => PointInput::Mask(pred_mask),
    };
    Ok(SampleEval {
        image_id: image_id.to_string(),
        object_id,
        expression_index,
        iou: out.value,
        empty_union: out.empty_union,
        prec_at_05: out.value >= 0.5,
        point_it: point_it(&point, gt_box, h, w)?,
        point_m: point_m(&point, gt_mask)?,
        acc_box: acc_box(pred_mask, gt_box),
        intersection: inter,
        union: uni,
    })
}

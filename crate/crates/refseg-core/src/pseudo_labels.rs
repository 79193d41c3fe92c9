//! Positive response map selection and pseudo-label generation.
//!
//! An object usually has several expressions, each with its own response
//! map. The map whose masked region matches *all* of the object's
//! expressions best (maximum cumulative similarity score) wins, and is
//! thresholded into a binary pseudo mask after min-max normalization and
//! upsampling. Components smaller than `min_component_px` are dropped
//! (4-connectivity).

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::resize_bilinear_2d;
use crate::calibration::{masked_similarity, CalibrationSettings};
use crate::encoders::{EncoderBundle, Image, TokenSequence};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::response::ResponseMap;

/// All expressions of one object together with their response maps.
#[derive(Debug, Clone)]
pub struct ExpressionGroup {
    pub image_id: String,
    pub object_id: u32,
    pub expressions: Vec<TokenSequence>,
    pub response_maps: Vec<ResponseMap>,
}

impl ExpressionGroup {
    pub fn new(
        image_id: String,
        object_id: u32,
        expressions: Vec<TokenSequence>,
        response_maps: Vec<ResponseMap>,
    ) -> Result<Self> {
        if expressions.is_empty() || expressions.len() != response_maps.len() {
            return Err(Error::Dataset(format!(
                "expression group {image_id}/{object_id} needs M >= 1 expressions with matching maps"
            )));
        }
        let (h, w) = (response_maps[0].height, response_maps[0].width);
        for m in &response_maps {
            if m.height != h || m.width != w || m.num_queries() != 1 {
                return Err(Error::ShapeMismatch {
                    context: "expression group response maps",
                    expected: format!("single-query {h}x{w}"),
                    actual: format!("{}-query {}x{}", m.num_queries(), m.height, m.width),
                });
            }
        }
        Ok(Self {
            image_id,
            object_id,
            expressions,
            response_maps,
        })
    }

    pub fn len(&self) -> usize {
        self.expressions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Cumulative score of each candidate map: `CS_t = sum_m S(I, R_t, Q_m)`.
pub fn cumulative_scores(
    group: &ExpressionGroup,
    image: &Image,
    bundle: &EncoderBundle,
    store: &ParamStore,
    settings: &CalibrationSettings,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(group.len());
    for map in &group.response_maps {
        let r2 = map.column_2d(0);
        let mut cs = 0.0;
        for q in &group.expressions {
            cs += masked_similarity(image, &r2, q, bundle, store, settings)?.s_prob;
        }
        scores.push(cs);
    }
    Ok(scores)
}

/// Index of the maximum score; ties break to the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0usize;
    let mut bv = f64::NEG_INFINITY;
    for (i, &s) in scores.iter().enumerate() {
        if s > bv {
            bv = s;
            best = i;
        }
    }
    best
}

/// Select the response map with the maximum cumulative score.
pub fn select_map<'g>(
    group: &'g ExpressionGroup,
    image: &Image,
    bundle: &EncoderBundle,
    store: &ParamStore,
    settings: &CalibrationSettings,
) -> Result<(usize, &'g ResponseMap, Vec<f64>)> {
    let scores = cumulative_scores(group, image, bundle, store, settings)?;
    let idx = argmax_lowest(&scores);
    Ok((idx, &group.response_maps[idx], scores))
}

/// Binary pseudo mask plus its provenance.
#[derive(Debug, Clone)]
pub struct PseudoLabel {
    pub mask: Array2<u8>,
    pub winning_index: usize,
    pub cumulative_scores: Vec<f64>,
    pub threshold_used: f64,
    pub degenerate: bool,
}

/// Threshold a single-query response map into a full-resolution binary mask.
///
/// The map is min-max normalized, bilinearly upsampled to `(out_h, out_w)`,
/// thresholded at `threshold`, and cleaned of connected components smaller
/// than `min_component_px`. Constant maps (and maps left empty by the
/// threshold) return an all-zeros mask flagged degenerate.
pub fn to_pseudo_mask(
    map: &Array2<f64>,
    out_h: usize,
    out_w: usize,
    threshold: f64,
    min_component_px: usize,
) -> Result<(Array2<u8>, bool)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "pseudo-mask threshold must lie in (0,1), got {threshold}"
        )));
    }
    let mn = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(mn.is_finite() && mx.is_finite()) {
        return Err(Error::NonFinite("response map"));
    }
    let range = mx - mn;
    if range < 1e-12 {
        return Ok((Array2::zeros((out_h, out_w)), true));
    }
    let normalized = map.mapv(|v| (v - mn) / range);
    let up = resize_bilinear_2d(&normalized, out_h, out_w);
    let mut mask = up.mapv(|v| u8::from(v >= threshold));
    drop_small_components(&mut mask, min_component_px);
    let empty = mask.iter().all(|&v| v == 0);
    Ok((mask, empty))
}

/// Remove 4-connected components with fewer than `min_px` pixels.
pub fn drop_small_components(mask: &mut Array2<u8>, min_px: usize) {
    if min_px <= 1 {
        return;
    }
    let (h, w) = mask.dim();
    let mut seen = Array2::<u8>::zeros((h, w));
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if mask[[sy, sx]] == 0 || seen[[sy, sx]] != 0 {
                continue;
            }
            component.clear();
            stack.push((sy, sx));
            seen[[sy, sx]] = 1;
            while let Some((y, x)) = stack.pop() {
                component.push((y, x));
                let mut push = |ny: usize, nx: usize, seen: &mut Array2<u8>| {
                    if mask[[ny, nx]] != 0 && seen[[ny, nx]] == 0 {
                        seen[[ny, nx]] = 1;
                        stack.push((ny, nx));
                    }
                };
                if y > 0 {
                    push(y - 1, x, &mut seen);
                }
                if y + 1 < h {
                    push(y + 1, x, &mut seen);
                }
                if x > 0 {
                    push(y, x - 1, &mut seen);
                }
                if x + 1 < w {
                    push(y, x + 1, &mut seen);
                }
            }
            if component.len() < min_px {
                for &(y, x) in &component {
                    mask[[y, x]] = 0;
                }
            }
        }
    }
}

/// One line of the pseudo-label sidecar index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoIndexEntry {
    pub image_id: String,
    pub object_id: u32,
    pub winning_index: usize,
    pub threshold: f64,
    pub degenerate: bool,
}

impl PseudoIndexEntry {
    pub fn mask_file_name(&self) -> String {
        format!("{}_{}.png", self.image_id, self.object_id)
    }
}

/// Write one pseudo mask; the index is written separately by a single
/// writer once all labels exist.
pub fn write_pseudo_mask(dir: &Path, entry: &PseudoIndexEntry, mask: &Array2<u8>) -> Result<()> {
    crate::data::save_mask_file(&dir.join(entry.mask_file_name()), mask)
}

pub fn write_pseudo_index(dir: &Path, entries: &[PseudoIndexEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    std::fs::write(dir.join("index.jsonl"), out)?;
    Ok(())
}

pub fn read_pseudo_index(dir: &Path) -> Result<Vec<PseudoIndexEntry>> {
    let text = std::fs::read_to_string(dir.join("index.jsonl"))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line).map_err(|e| Error::DatasetRecord {
                line: lineno + 1,
                message: format!("malformed pseudo index entry: {e}"),
            })?,
        );
    }
    Ok(out)
}

pub fn read_pseudo_mask(dir: &Path, entry: &PseudoIndexEntry) -> Result<Array2<u8>> {
    crate::data::load_mask_file(&dir.join(entry.mask_file_name()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::rng_for;
    use rand::Rng;

    #[test]
    fn constant_map_yields_flagged_empty_mask() {
        let map = Array2::from_elem((4, 4), 0.7);
        let (mask, degenerate) = to_pseudo_mask(&map, 16, 16, 0.4, 1).unwrap();
        assert!(degenerate);
        assert!(mask.iter().all(|&v| v == 0));
    }

    #[test]
    fn indicator_map_reproduces_mask_exactly() {
        // full-resolution indicator map: upsampling is the identity
        let mut map = Array2::<f64>::zeros((8, 8));
        for y in 2..6 {
            for x in 3..7 {
                map[[y, x]] = 1.0;
            }
        }
        let (mask, degenerate) = to_pseudo_mask(&map, 8, 8, 0.4, 1).unwrap();
        assert!(!degenerate);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(mask[[y, x]], u8::from(map[[y, x]] == 1.0));
            }
        }
    }

    #[test]
    fn random_map_matches_pixel_loop_oracle() {
        let mut rng = rng_for(1, "mask");
        let map = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-2.0..2.0f64));
        let (mask, _) = to_pseudo_mask(&map, 12, 12, 0.4, 1).unwrap();

        // oracle: normalize + bilinear taps + threshold, plain loops
        let mn = map.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let norm = map.mapv(|v| (v - mn) / (mx - mn));
        let taps = |o: usize, osz: usize, isz: usize| -> (usize, usize, f64) {
            let s = (o as f64 + 0.5) * (isz as f64 / osz as f64) - 0.5;
            if s <= 0.0 {
                (0, 0, 0.0)
            } else if s >= (isz - 1) as f64 {
                (isz - 1, isz - 1, 0.0)
            } else {
                let lo = s.floor() as usize;
                (lo, lo + 1, s - s.floor())
            }
        };
        for oy in 0..12 {
            for ox in 0..12 {
                let (y0, y1, fy) = taps(oy, 12, 4);
                let (x0, x1, fx) = taps(ox, 12, 4);
                let v = (1.0 - fy) * (1.0 - fx) * norm[[y0, x0]]
                    + (1.0 - fy) * fx * norm[[y0, x1]]
                    + fy * (1.0 - fx) * norm[[y1, x0]]
                    + fy * fx * norm[[y1, x1]];
                assert_eq!(mask[[oy, ox]], u8::from(v >= 0.4), "pixel ({oy},{ox})");
            }
        }
    }

    #[test]
    fn mask_area_is_monotone_in_threshold() {
        let mut rng = rng_for(2, "mono");
        let map = Array2::from_shape_fn((6, 6), |_| rng.gen_range(0.0..1.0f64));
        let mut prev = usize::MAX;
        for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let (mask, _) = to_pseudo_mask(&map, 24, 24, t, 1).unwrap();
            let area = mask.iter().filter(|&&v| v != 0).count();
            assert!(area <= prev, "area grew at threshold {t}");
            prev = area;
        }
    }

    #[test]
    fn positive_scaling_leaves_mask_unchanged() {
        let mut rng = rng_for(3, "scale");
        let map = Array2::from_shape_fn((5, 5), |_| rng.gen_range(-1.0..1.0f64));
        let (base, _) = to_pseudo_mask(&map, 20, 20, 0.4, 1).unwrap();
        for c in [1e-3, 0.5, 2.0, 1e4] {
            let scaled = map.mapv(|v| v * c);
            let (mask, _) = to_pseudo_mask(&scaled, 20, 20, 0.4, 1).unwrap();
            assert_eq!(mask, base, "scale {c}");
        }
    }

    #[test]
    fn small_components_are_dropped() {
        let mut mask = Array2::<u8>::zeros((8, 8));
        // 3-pixel component
        mask[[0, 0]] = 1;
        mask[[0, 1]] = 1;
        mask[[1, 0]] = 1;
        // 10-pixel component
        for y in 4..6 {
            for x in 2..7 {
                mask[[y, x]] = 1;
            }
        }
        drop_small_components(&mut mask, 4);
        assert_eq!(mask[[0, 0]], 0);
        assert_eq!(mask[[0, 1]], 0);
        assert_eq!(mask[[1, 0]], 0);
        assert_eq!(mask[[5, 5]], 1);
        assert_eq!(mask.iter().filter(|&&v| v != 0).count(), 10);
    }

    #[test]
    fn diagonal_pixels_are_separate_components() {
        let mut mask = Array2::<u8>::zeros((4, 4));
        mask[[0, 0]] = 1;
        mask[[1, 1]] = 1;
        drop_small_components(&mut mask, 2);
        assert!(mask.iter().all(|&v| v == 0));
    }

    #[test]
    fn argmax_breaks_ties_to_lowest_index() {
        assert_eq!(argmax_lowest(&[0.2, 0.9, 0.5]), 1);
        assert_eq!(argmax_lowest(&[0.7, 0.7, 0.7]), 0);
        assert_eq!(argmax_lowest(&[0.1, 0.9, 0.9]), 1);
    }

    #[test]
    fn invalid_threshold_is_rejected() {
        let map = Array2::zeros((2, 2));
        assert!(to_pseudo_mask(&map, 4, 4, 0.0, 1).is_err());
        assert!(to_pseudo_mask(&map, 4, 4, 1.0, 1).is_err());
    }

    #[test]
    fn prms_selection_and_permutation() {
        use crate::config::RunConfig;
        use crate::encoders::{EncoderBundle, Image};
        use crate::params::ParamStore;
        use ndarray::Array3;

        let mut cfg = RunConfig::desk();
        cfg.c_v = 8;
        cfg.c_l = 8;
        cfg.c_d = 8;
        cfg.image_size = 16;
        let mut store = ParamStore::new();
        let bundle = EncoderBundle::init(&mut store, &cfg, 16, "enc").unwrap();
        let settings = crate::calibration::CalibrationSettings::from(&cfg);
        let mut rng = rng_for(4, "prms");
        let image = Image::new(Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(0.0..1.0)))
            .unwrap();
        let grid = 16 / cfg.s;

        let mk_map = |rng: &mut rand_chacha::ChaCha8Rng| crate::response::ResponseMap {
            values: ndarray::Array2::from_shape_fn((grid * grid, 1), |_| rng.gen_range(-1.0..1.0)),
            height: grid,
            width: grid,
            log_temperature: 0.0,
        };
        let maps: Vec<_> = (0..3).map(|_| mk_map(&mut rng)).collect();
        let exprs: Vec<_> = (1..=3)
            .map(|i| crate::encoders::TokenSequence::new(vec![i]).unwrap())
            .collect();

        let group = ExpressionGroup::new("img".into(), 0, exprs.clone(), maps.clone()).unwrap();
        let scores = cumulative_scores(&group, &image, &bundle, &store, &settings).unwrap();
        assert_eq!(scores.len(), 3);
        // oracle: explicit (t, m) double loop over masked similarities
        for (t, map) in maps.iter().enumerate() {
            let r2 = map.column_2d(0);
            let mut cs = 0.0;
            for q in &exprs {
                cs += crate::calibration::masked_similarity(&image, &r2, q, &bundle, &store, &settings)
                    .unwrap()
                    .s_prob;
            }
            assert!((scores[t] - cs).abs() < 1e-9);
        }
        let (win, _, _) = select_map(&group, &image, &bundle, &store, &settings).unwrap();
        assert_eq!(win, argmax_lowest(&scores));

        // permuting the group permutes the winner consistently
        let perm = [2usize, 0, 1];
        let pmaps: Vec<_> = perm.iter().map(|&i| maps[i].clone()).collect();
        let pgroup = ExpressionGroup::new("img".into(), 0, exprs.clone(), pmaps).unwrap();
        let (pwin, pmap, _) = select_map(&pgroup, &image, &bundle, &store, &settings).unwrap();
        assert_eq!(perm[pwin], win);
        assert_eq!(pmap.values, maps[win].values);

        // identical maps: every score equal, winner is index 0
        let same = vec![maps[0].clone(); 3];
        let sgroup = ExpressionGroup::new("img".into(), 0, exprs, same).unwrap();
        let (swin, _, s_scores) = select_map(&sgroup, &image, &bundle, &store, &settings).unwrap();
        assert_eq!(swin, 0);
        assert!((s_scores[0] - s_scores[1]).abs() < 1e-12);
        assert!((s_scores[1] - s_scores[2]).abs() < 1e-12);
    }

    #[test]
    fn single_expression_group_is_forced() {
        let map = crate::response::ResponseMap {
            values: ndarray::Array2::from_elem((4, 1), 0.5),
            height: 2,
            width: 2,
            log_temperature: 0.0,
        };
        let group = ExpressionGroup::new(
            "img".into(),
            0,
            vec![crate::encoders::TokenSequence::new(vec![1]).unwrap()],
            vec![map],
        )
        .unwrap();
        assert_eq!(group.len(), 1);
        assert_eq!(argmax_lowest(&[0.42]), 0);
    }

    #[test]
    fn index_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            PseudoIndexEntry {
                image_id: "img_0".into(),
                object_id: 0,
                winning_index: 2,
                threshold: 0.4,
                degenerate: false,
            },
            PseudoIndexEntry {
                image_id: "img_1".into(),
                object_id: 1,
                winning_index: 0,
                threshold: 0.4,
                degenerate: true,
            },
        ];
        let mask = Array2::from_elem((4, 4), 1u8);
        for e in &entries {
            write_pseudo_mask(dir.path(), e, &mask).unwrap();
        }
        write_pseudo_index(dir.path(), &entries).unwrap();
        let back = read_pseudo_index(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].winning_index, 2);
        assert!(back[1].degenerate);
        let m = read_pseudo_mask(dir.path(), &back[0]).unwrap();
        assert_eq!(m, mask);
    }
}

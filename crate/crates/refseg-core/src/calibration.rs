//! Masked-region similarity scoring and the calibration loss.
//!
//! The positive response map, min-max normalized and upsampled to image
//! resolution, soft-masks the input image. The masked image is embedded by
//! the scoring encoders and compared against the positive query and K
//! same-image negative queries by cosine similarity. The loss sharpens the
//! response map: gradients flow into the map (and through it into the
//! response parameters) while the scoring encoders stay frozen by default.

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{RescaleMode, RunConfig};
use crate::data::Dataset;
use crate::encoders::{EncoderBundle, ImageTextEncoder, TokenSequence};
use crate::error::{Error, Result};

/// Similarity of one masked image region against one query.
#[derive(Debug, Clone, Copy)]
pub struct MatchScore {
    /// Cosine similarity in `[-1, 1]`.
    pub s_raw: f64,
    /// Rescaled score in `(eps, 1 - eps)`.
    pub s_prob: f64,
    /// The response map was constant; the mask carried no information.
    pub degenerate: bool,
}

/// Same-image negative queries, supplemented from other images when the
/// image does not have enough other objects.
#[derive(Debug, Clone)]
pub struct SameImageNegatives {
    pub queries: Vec<String>,
    pub supplemented_from_global: usize,
}

/// Calibration knobs taken from the run config.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationSettings {
    pub epsilon_clamp: f64,
    pub rescale_mode: RescaleMode,
    pub rescale_temp: f64,
    pub pos_term: bool,
    pub neg_term: bool,
    pub scoring_frozen: bool,
}

impl From<&RunConfig> for CalibrationSettings {
    fn from(cfg: &RunConfig) -> Self {
        Self {
            epsilon_clamp: cfg.epsilon_clamp,
            rescale_mode: cfg.rescale_mode,
            rescale_temp: cfg.rescale_temp,
            pos_term: cfg.calibration_pos_term,
            neg_term: cfg.calibration_neg_term,
            scoring_frozen: cfg.scoring_frozen,
        }
    }
}

/// Min-max normalize to `[0, 1]`. A constant map cannot be normalized; it is
/// clamped to `[0, 1]` instead and flagged degenerate.
pub fn minmax_normalize_var(g: &mut Graph, r: Var) -> (Var, bool) {
    let mn = g.min_all(r);
    let mx = g.max_all(r);
    let range = g.scalar_value(mx) - g.scalar_value(mn);
    if range < 1e-12 {
        (g.clamp(r, 0.0, 1.0), true)
    } else {
        let shifted = g.sub_s(r, mn);
        let span = g.sub(mx, mn);
        (g.div_s(shifted, span), false)
    }
}

/// Cosine similarity of two single-row (or 1-d) vectors as a 0-d node.
pub fn cosine_similarity_var(g: &mut Graph, a: Var, b: Var) -> Var {
    let prod = g.mul(a, b);
    let dot = g.sum_all(prod);
    let a2 = g.square(a);
    let na2 = g.sum_all(a2);
    let na = g.sqrt(na2);
    let b2 = g.square(b);
    let nb2 = g.sum_all(b2);
    let nb = g.sqrt(nb2);
    let denom = g.mul(na, nb);
    let denom = g.clamp_min(denom, 1e-12);
    g.div(dot, denom)
}

/// Map a cosine similarity into `(eps, 1 - eps)`.
pub fn rescale_score_var(g: &mut Graph, s_raw: Var, settings: &CalibrationSettings) -> Var {
    let eps = settings.epsilon_clamp;
    match settings.rescale_mode {
        RescaleMode::Affine => {
            let half = g.scale(s_raw, 0.5);
            let shifted = g.add_const(half, 0.5);
            g.clamp(shifted, eps, 1.0 - eps)
        }
        RescaleMode::Sigmoid => {
            let scaled = g.scale(s_raw, settings.rescale_temp);
            let sig = g.sigmoid(scaled);
            g.clamp(sig, eps, 1.0 - eps)
        }
    }
}

/// Embed the image soft-masked by the (normalized, upsampled) response map.
///
/// `image` is a `(3, H, W)` node, `r_p` a `(HW', 1)` response column over an
/// `h x w` grid. Returns the pooled `(C_l,)` embedding and the degenerate
/// flag of the mask normalization.
pub fn masked_global_embedding_var(
    g: &mut Graph,
    pv: &mut crate::params::ParamVars,
    store: &crate::params::ParamStore,
    bundle: &EncoderBundle,
    image: Var,
    r_p: Var,
    h: usize,
    w: usize,
    settings: &CalibrationSettings,
) -> Result<(Var, bool)> {
    let ishape = g.shape(image).to_vec();
    if ishape.len() != 3 || ishape[0] != 3 {
        return Err(Error::ShapeMismatch {
            context: "masked_global_embedding image",
            expected: "(3,H,W)".into(),
            actual: format!("{ishape:?}"),
        });
    }
    if g.value(r_p).len() != h * w {
        return Err(Error::ShapeMismatch {
            context: "masked_global_embedding response column",
            expected: format!("{} values", h * w),
            actual: format!("{}", g.value(r_p).len()),
        });
    }
    let (normalized, degenerate) = minmax_normalize_var(g, r_p);
    let grid = g.reshape(normalized, &[1, h, w]);
    let mask = g.upsample_bilinear(grid, ishape[1], ishape[2]);
    let masked = g.mul_bcast0(image, mask);
    let embed = bundle.global_embedding_var(g, pv, store, masked, !settings.scoring_frozen);
    Ok((embed, degenerate))
}

/// Similarity of the masked target region against one query.
pub fn masked_similarity(
    image: &crate::encoders::Image,
    r_p: &ndarray::Array2<f64>,
    query: &TokenSequence,
    bundle: &EncoderBundle,
    store: &crate::params::ParamStore,
    settings: &CalibrationSettings,
) -> Result<MatchScore> {
    let (h, w) = r_p.dim();
    let mut g = Graph::new();
    let mut pv = crate::params::ParamVars::new();
    let img = bundle.image_var(&mut g, image)?;
    let col: Vec<f64> = r_p.iter().cloned().collect();
    let rv = g.constant(ndarray::ArrayD::from_shape_vec(IxDyn(&[h * w, 1]), col).unwrap());
    let (embed, degenerate) =
        masked_global_embedding_var(&mut g, &mut pv, store, bundle, img, rv, h, w, settings)?;
    let (text, _) = bundle.text_features(&mut g, &mut pv, store, query, false)?;
    let text_flat = g.reshape(text, &[bundle.c_l]);
    let s_raw = cosine_similarity_var(&mut g, embed, text_flat);
    let s_prob = rescale_score_var(&mut g, s_raw, settings);
    Ok(MatchScore {
        s_raw: g.scalar_value(s_raw),
        s_prob: g.scalar_value(s_prob),
        degenerate,
    })
}

/// Calibration loss over graph nodes; returns the loss and the degenerate
/// flag of the mask normalization.
#[allow(clippy::too_many_arguments)]
pub fn calibration_loss_var(
    g: &mut Graph,
    pv: &mut crate::params::ParamVars,
    store: &crate::params::ParamStore,
    bundle: &EncoderBundle,
    image: Var,
    r_p: Var,
    h: usize,
    w: usize,
    q_pos: &TokenSequence,
    negatives: &[TokenSequence],
    settings: &CalibrationSettings,
) -> Result<(Var, bool)> {
    if negatives.is_empty() {
        return Err(Error::Config(
            "calibration requires at least one same-image negative (K >= 1)".into(),
        ));
    }
    let (embed, degenerate) =
        masked_global_embedding_var(g, pv, store, bundle, image, r_p, h, w, settings)?;
    let trainable_text = !settings.scoring_frozen;
    let mut terms: Vec<Var> = Vec::new();
    if settings.pos_term {
        let (text, _) = bundle.text_features(g, pv, store, q_pos, trainable_text)?;
        let text_flat = g.reshape(text, &[bundle.c_l]);
        let s_raw = cosine_similarity_var(g, embed, text_flat);
        let s_prob = rescale_score_var(g, s_raw, settings);
        terms.push(g.ln(s_prob));
    }
    if settings.neg_term {
        for q in negatives {
            let (text, _) = bundle.text_features(g, pv, store, q, trainable_text)?;
            let text_flat = g.reshape(text, &[bundle.c_l]);
            let s_raw = cosine_similarity_var(g, embed, text_flat);
            let s_prob = rescale_score_var(g, s_raw, settings);
            let neg_s = g.neg(s_prob);
            let one_minus = g.add_const(neg_s, 1.0);
            terms.push(g.ln(one_minus));
        }
    }
    if terms.is_empty() {
        return Err(Error::Config(
            "calibration loss has no active terms (both ablation switches off)".into(),
        ));
    }
    let stacked = g.stack_scalars(&terms);
    let total = g.sum_all(stacked);
    Ok((g.neg(total), degenerate))
}

/// Closed form of the calibration loss given already-rescaled scores.
pub fn calibration_loss_from_scores(s_pos: f64, s_negs: &[f64], pos_term: bool, neg_term: bool) -> f64 {
    let mut total = 0.0;
    if pos_term {
        total += s_pos.ln();
    }
    if neg_term {
        for &s in s_negs {
            total += (1.0 - s).ln();
        }
    }
    -total
}

/// Sample `k` expressions describing other objects of the same image;
/// supplement from other images when the pool is short.
pub fn sample_same_image_negatives(
    dataset: &Dataset,
    anchor_image_id: &str,
    anchor_object_id: u32,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SameImageNegatives> {
    let mut pool: Vec<String> = Vec::new();
    for &rec_idx in dataset.objects_of_image(anchor_image_id) {
        let rec = dataset.record(rec_idx);
        if rec.object_id != anchor_object_id {
            pool.extend(rec.expressions.iter().cloned());
        }
    }
    let mut queries = Vec::with_capacity(k);
    let mut supplemented = 0usize;
    if pool.len() >= k {
        let idx = rand::seq::index::sample(rng, pool.len(), k);
        queries.extend(idx.iter().map(|i| pool[i].clone()));
    } else {
        queries.extend(pool.iter().cloned());
        let global: Vec<(usize, usize)> = dataset
            .expression_refs()
            .into_iter()
            .filter(|(rec, _)| dataset.record(*rec).image_id != anchor_image_id)
            .collect();
        let need = k - queries.len();
        if global.is_empty() {
            return Err(Error::Dataset(format!(
                "cannot supplement calibration negatives for {anchor_image_id}: no other images"
            )));
        }
        if global.len() >= need {
            let idx = rand::seq::index::sample(rng, global.len(), need);
            for i in idx.iter() {
                let (r, e) = global[i];
                queries.push(dataset.record(r).expressions[e].clone());
            }
        } else {
            for _ in 0..need {
                let (r, e) = global[rng.gen_range(0..global.len())];
                queries.push(dataset.record(r).expressions[e].clone());
            }
        }
        supplemented = need;
    }
    Ok(SameImageNegatives {
        queries,
        supplemented_from_global: supplemented,
    })
}

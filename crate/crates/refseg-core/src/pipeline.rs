//! Step-1 model assembly: encoders + bilateral prompt + temperature-scaled
//! responses + classification and calibration losses, and the pseudo-label
//! generation pass that bridges into step 2.

use std::path::Path;

use ndarray::IxDyn;

use crate::autodiff::{Graph, Var};
use crate::calibration::{calibration_loss_var, CalibrationSettings};
use crate::config::{PsiMode, RunConfig};
use crate::data::Dataset;
use crate::encoders::{EncoderBundle, Image, ImageTextEncoder, TokenSequence};
use crate::error::{Error, Result};
use crate::params::{scalar_param, ParamStore, ParamVars};
use crate::prompt::{bilateral_prompt, PromptParams, PromptSettings};
use crate::pseudo_labels::{
    to_pseudo_mask, write_pseudo_index, write_pseudo_mask, ExpressionGroup, PseudoIndexEntry,
};
use crate::response::{
    aggregate_var, classification_loss_var, response_map_var, ResponseMap,
};
use crate::vocab::Vocab;

/// Everything step 1 trains: encoder bundle, prompt matrices, and the log
/// temperature.
#[derive(Debug, Clone)]
pub struct Step1Model {
    pub bundle: EncoderBundle,
    pub prompt: PromptParams,
    pub prompt_settings: PromptSettings,
    pub cal_settings: CalibrationSettings,
    pub psi_mode: PsiMode,
    pub psi_focal_gamma: f64,
    pub lambda_cls: f64,
    temp_name: String,
}

/// Loss pieces of one training sample.
pub struct SampleLoss {
    pub total: Var,
    pub cls_value: f64,
    pub cal_value: f64,
    pub mask_degenerate: bool,
}

impl Step1Model {
    pub fn init(store: &mut ParamStore, cfg: &RunConfig, vocab_size: usize) -> Result<Self> {
        let bundle = EncoderBundle::init(store, cfg, vocab_size, "step1.enc")?;
        let prompt = PromptParams::init(store, cfg, "step1.prompt");
        let temp_name = "step1.log_temp".to_string();
        store.insert(temp_name.clone(), scalar_param(cfg.temperature_init));
        Ok(Self {
            bundle,
            prompt,
            prompt_settings: PromptSettings::from(cfg),
            cal_settings: CalibrationSettings::from(cfg),
            psi_mode: cfg.psi_mode,
            psi_focal_gamma: cfg.psi_focal_gamma,
            lambda_cls: cfg.lambda_cls,
            temp_name,
        })
    }

    /// Rebuild the model description against an existing store (resume).
    pub fn from_config(cfg: &RunConfig, vocab_size: usize) -> Result<Self> {
        let mut scratch = ParamStore::new();
        Self::init(&mut scratch, cfg, vocab_size)
    }

    pub fn temperature_name(&self) -> &str {
        &self.temp_name
    }

    /// Keep the learnable log temperature below `ln(100)` after updates.
    pub fn clamp_temperature(&self, store: &mut ParamStore) {
        let t = store.scalar(&self.temp_name);
        if t > crate::response::MAX_LOG_TEMP {
            store.set_scalar(&self.temp_name, crate::response::MAX_LOG_TEMP);
        }
    }

    /// Projected, prompted response columns for `queries` against one image.
    /// Returns the `(HW, J)` response node plus grid dims.
    fn response_batch_var(
        &self,
        g: &mut Graph,
        pv: &mut ParamVars,
        store: &ParamStore,
        image_var: Var,
        queries: &[TokenSequence],
        trainable: bool,
    ) -> Result<(Var, usize, usize)> {
        let raw_v = self
            .bundle
            .spatial_features_var(g, pv, store, image_var, trainable);
        let vshape = g.shape(raw_v).to_vec();
        let (h, w) = (vshape[1], vshape[2]);
        let v = self.bundle.project_grid_var(g, pv, store, raw_v, trainable);
        let log_temp = pv.bind(g, store, &self.temp_name, trainable);

        let mut columns = Vec::with_capacity(queries.len());
        for q in queries {
            let (raw_t, _) = self.bundle.text_features(g, pv, store, q, trainable)?;
            let l = self.bundle.project_text_var(g, pv, store, raw_t, trainable);
            let p = bilateral_prompt(
                g,
                pv,
                store,
                v,
                l,
                &self.prompt,
                &self.prompt_settings,
                trainable,
            )?;
            let col = response_map_var(g, p.v_hat, &[p.l_hat], log_temp)?;
            columns.push(col);
        }
        let r = if columns.len() == 1 {
            columns[0]
        } else {
            g.concat(1, &columns)
        };
        Ok((r, h, w))
    }

    /// Full training loss for one sample:
    /// `lambda * L_cls + L_cal`.
    pub fn sample_loss_var(
        &self,
        g: &mut Graph,
        pv: &mut ParamVars,
        store: &ParamStore,
        image: &Image,
        positive: &TokenSequence,
        negatives: &[TokenSequence],
        same_image: &[TokenSequence],
    ) -> Result<SampleLoss> {
        let image_var = self.bundle.image_var(g, image)?;
        let mut queries = Vec::with_capacity(1 + negatives.len());
        queries.push(positive.clone());
        queries.extend(negatives.iter().cloned());
        let (r, h, w) = self.response_batch_var(g, pv, store, image_var, &queries, true)?;

        let y = aggregate_var(g, r, None);
        let mut z = vec![0.0; queries.len()];
        z[0] = 1.0;
        let l_cls = classification_loss_var(g, y, &z, self.psi_mode, self.psi_focal_gamma)?;

        let r_p = g.narrow(r, 1, 0, 1);
        let (l_cal, mask_degenerate) = calibration_loss_var(
            g,
            pv,
            store,
            &self.bundle,
            image_var,
            r_p,
            h,
            w,
            positive,
            same_image,
            &self.cal_settings,
        )?;

        let weighted = g.scale(l_cls, self.lambda_cls);
        let total = g.add(weighted, l_cal);
        Ok(SampleLoss {
            total,
            cls_value: g.scalar_value(l_cls),
            cal_value: g.scalar_value(l_cal),
            mask_degenerate,
        })
    }

    /// Response map of one image against several queries (inference).
    pub fn response_batch(
        &self,
        store: &ParamStore,
        image: &Image,
        queries: &[TokenSequence],
    ) -> Result<ResponseMap> {
        let mut g = Graph::new();
        let mut pv = ParamVars::new();
        let image_var = self.bundle.image_var(&mut g, image)?;
        let (r, h, w) = self.response_batch_var(&mut g, &mut pv, store, image_var, queries, false)?;
        let values = g
            .value(r)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("response 2-d");
        Ok(ResponseMap {
            values,
            height: h,
            width: w,
            log_temperature: store.scalar(&self.temp_name),
        })
    }

    /// Single-query response map.
    pub fn response_for_query(
        &self,
        store: &ParamStore,
        image: &Image,
        query: &TokenSequence,
    ) -> Result<ResponseMap> {
        self.response_batch(store, image, std::slice::from_ref(query))
    }

    /// Image-level scores `y` for ranking evaluation.
    pub fn scores(
        &self,
        store: &ParamStore,
        image: &Image,
        queries: &[TokenSequence],
    ) -> Result<Vec<f64>> {
        let r = self.response_batch(store, image, queries)?;
        Ok(crate::response::aggregate(&r))
    }
}

/// Outcome counts of a pseudo-label generation pass.
#[derive(Debug, Clone, Default)]
pub struct PseudoGenSummary {
    pub total: usize,
    pub degenerate: usize,
}

impl PseudoGenSummary {
    pub fn degenerate_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.degenerate as f64 / self.total as f64
        }
    }
}

/// Generate pseudo labels for every object of the dataset split.
///
/// Response maps for all of an object's expressions are scored by the
/// cumulative-similarity selection rule; the winning map is thresholded into
/// a mask. Groups run in parallel; files are written by this single writer.
pub fn generate_pseudo_labels(
    cfg: &RunConfig,
    model: &Step1Model,
    store: &ParamStore,
    dataset: &Dataset,
    vocab: &Vocab,
    out_dir: &Path,
) -> Result<PseudoGenSummary> {
    use rayon::prelude::*;
    std::fs::create_dir_all(out_dir)?;
    let results: Vec<Result<(PseudoIndexEntry, ndarray::Array2<u8>)>> = (0..dataset.len())
        .into_par_iter()
        .map(|idx| {
            let rec = dataset.record(idx);
            let image = dataset.load_image(idx)?;
            let expressions: Vec<TokenSequence> = rec
                .expressions
                .iter()
                .map(|e| TokenSequence::new(vocab.encode(e)))
                .collect::<Result<_>>()?;
            let maps: Vec<ResponseMap> = expressions
                .iter()
                .map(|q| model.response_for_query(store, &image, q))
                .collect::<Result<_>>()?;
            let group = ExpressionGroup::new(
                rec.image_id.clone(),
                rec.object_id,
                expressions,
                maps,
            )?;
            let (winning_index, map, _scores) = crate::pseudo_labels::select_map(
                &group,
                &image,
                &model.bundle,
                store,
                &model.cal_settings,
            )?;
            let (mask, degenerate) = to_pseudo_mask(
                &map.column_2d(0),
                image.height(),
                image.width(),
                cfg.threshold,
                cfg.min_component_px,
            )?;
            Ok((
                PseudoIndexEntry {
                    image_id: rec.image_id.clone(),
                    object_id: rec.object_id,
                    winning_index,
                    threshold: cfg.threshold,
                    degenerate,
                },
                mask,
            ))
        })
        .collect();

    let mut entries = Vec::with_capacity(results.len());
    let mut summary = PseudoGenSummary::default();
    for r in results {
        let (entry, mask) = r?;
        summary.total += 1;
        if entry.degenerate {
            summary.degenerate += 1;
        }
        write_pseudo_mask(out_dir, &entry, &mask)?;
        entries.push(entry);
    }
    write_pseudo_index(out_dir, &entries)?;
    Ok(summary)
}

/// Tokenize an expression against a vocabulary, rejecting empty results.
pub fn tokenize(vocab: &Vocab, expression: &str) -> Result<TokenSequence> {
    let ids = vocab.encode(expression);
    if ids.is_empty() {
        return Err(Error::Dataset(format!(
            "expression '{expression}' tokenizes to nothing"
        )));
    }
    TokenSequence::new(ids)
}

/// Bind a raw response column as a graph leaf; test and tooling helper.
pub fn response_column_var(g: &mut Graph, column: &[f64]) -> Var {
    g.input(ndarray::ArrayD::from_shape_vec(IxDyn(&[column.len(), 1]), column.to_vec()).unwrap())
}

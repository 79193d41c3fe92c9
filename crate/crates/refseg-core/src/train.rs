//! Training loops for both steps and the evaluation entry points.
//!
//! Parameters mutate only in this module's single-threaded update path;
//! per-sample forward/backward passes run in parallel over the batch and
//! their gradients are reduced in sample order, so runs are bit-reproducible
//! for a fixed `(config, seed)`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayD;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::batches::{epoch_batches, TrainItem};
use crate::data::Dataset;
use crate::encoders::{Image, TokenSequence};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_sample, MetricsReport, SampleEval};
use crate::optim::AdamW;
use crate::params::{rng_for, ParamStore, ParamVars};
use crate::pipeline::{tokenize, Step1Model};
use crate::pseudo_labels::{read_pseudo_index, read_pseudo_mask, to_pseudo_mask};
use crate::segmentor::{ce_loss_var, predict_mask, SegmentationOutput, Step2Model};
use crate::vocab::Vocab;

/// Per-epoch loss summary.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean of `lambda * L_cls` over the epoch (step 1) or the CE loss
    /// (step 2).
    pub weighted_cls: f64,
    /// Mean calibration loss (step 1 only, zero for step 2).
    pub calibration: f64,
    pub total: f64,
    pub lr: f64,
}

/// A trained step-1 state.
pub struct TrainedStep1 {
    pub store: ParamStore,
    pub model: Step1Model,
    pub vocab: Vocab,
    pub optimizer: AdamW,
    pub log: Vec<EpochLog>,
    pub epoch: usize,
    pub global_step: usize,
}

/// A trained step-2 state.
pub struct TrainedStep2 {
    pub store: ParamStore,
    pub model: Step2Model,
    pub vocab: Vocab,
    pub optimizer: AdamW,
    pub log: Vec<EpochLog>,
    pub epoch: usize,
    pub global_step: usize,
}

fn preload_images(dataset: &Dataset) -> Result<BTreeMap<String, Image>> {
    let mut images = BTreeMap::new();
    for i in 0..dataset.len() {
        let rec = dataset.record(i);
        if !images.contains_key(&rec.image_id) {
            images.insert(rec.image_id.clone(), dataset.load_image(i)?);
        }
    }
    Ok(images)
}

fn poly_power(cfg: &RunConfig) -> f64 {
    if cfg.lr_schedule == "polynomial" {
        cfg.lr_poly_power
    } else {
        0.0
    }
}

fn reduce_gradients(
    per_sample: Vec<BTreeMap<String, ArrayD<f64>>>,
) -> BTreeMap<String, ArrayD<f64>> {
    let n = per_sample.len() as f64;
    let mut acc: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    for grads in per_sample {
        for (name, g) in grads {
            match acc.get_mut(&name) {
                Some(a) => *a += &g,
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    for g in acc.values_mut() {
        *g /= n;
    }
    acc
}

/// Train step 1 on the `train` split of `dataset`.
pub fn train_step1(
    cfg: &RunConfig,
    dataset: &Dataset,
    resume: Option<&Checkpoint>,
    mut progress: Option<&mut dyn FnMut(&EpochLog)>,
) -> Result<TrainedStep1> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let vocab = dataset.vocab()?;
    let (mut store, model, start_epoch, restored_step) = match resume {
        Some(ck) => {
            let model = Step1Model::from_config(cfg, vocab.len())?;
            (ck.params.clone(), model, ck.epoch, ck.global_step)
        }
        None => {
            let mut store = ParamStore::new();
            let model = Step1Model::init(&mut store, cfg, vocab.len())?;
            (store, model, 0, 0)
        }
    };
    let images = preload_images(dataset)?;
    let samples_per_epoch = dataset.expression_refs().len();
    let steps_per_epoch = samples_per_epoch.div_ceil(cfg.batch);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut optimizer = AdamW::new(cfg.lr, cfg.weight_decay, poly_power(cfg), total_steps);
    if let Some(ck) = resume {
        optimizer = ck.restore_optimizer(optimizer);
    } else {
        optimizer.step = restored_step;
    }

    let mut log = Vec::new();
    let mut global_step = restored_step;
    for epoch in start_epoch..cfg.epochs {
        let batches = epoch_batches(
            dataset,
            cfg.batch,
            cfg.n_negatives,
            cfg.k_calibration,
            cfg.seed,
            epoch,
        )?;
        let mut sums = (0.0, 0.0, 0.0);
        let mut count = 0usize;
        for (step, batch) in batches.iter().enumerate() {
            type SampleOut = (f64, f64, f64, BTreeMap<String, ArrayD<f64>>);
            let results: Vec<Result<SampleOut>> = batch
                .par_iter()
                .map(|item: &TrainItem| {
                    let image = &images[&item.image_id];
                    let positive = tokenize(&vocab, &item.positive)?;
                    let negatives: Vec<TokenSequence> = item
                        .negatives
                        .iter()
                        .map(|e| tokenize(&vocab, e))
                        .collect::<Result<_>>()?;
                    let same: Vec<TokenSequence> = item
                        .same_image
                        .queries
                        .iter()
                        .map(|e| tokenize(&vocab, e))
                        .collect::<Result<_>>()?;
                    let mut g = Graph::new();
                    let mut pv = ParamVars::new();
                    let loss = model.sample_loss_var(
                        &mut g, &mut pv, &store, image, &positive, &negatives, &same,
                    )?;
                    let total = g.scalar_value(loss.total);
                    let bindings: Vec<(String, crate::autodiff::Var)> =
                        pv.trainable().map(|(n, v)| (n.to_string(), v)).collect();
                    let grads = g.backward(loss.total);
                    let mut gmap = BTreeMap::new();
                    for (name, var) in bindings {
                        if let Some(grad) = grads.wrt(var) {
                            gmap.insert(name, grad.clone());
                        }
                    }
                    Ok((total, loss.cls_value, loss.cal_value, gmap))
                })
                .collect();

            let mut batch_grads = Vec::with_capacity(batch.len());
            for (item, r) in batch.iter().zip(results) {
                let (total, cls, cal, grads) = r?;
                if !total.is_finite() {
                    return Err(Error::NanLoss {
                        epoch,
                        step,
                        batch_ids: batch.iter().map(|i| i.sample_id()).collect(),
                    });
                }
                sums.0 += cfg.lambda_cls * cls;
                sums.1 += cal;
                sums.2 += total;
                count += 1;
                let _ = item;
                batch_grads.push(grads);
            }
            let reduced = reduce_gradients(batch_grads);
            optimizer.apply(&mut store, &reduced);
            model.clamp_temperature(&mut store);
            global_step += 1;
        }
        let n = count.max(1) as f64;
        let entry = EpochLog {
            epoch,
            weighted_cls: sums.0 / n,
            calibration: sums.1 / n,
            total: sums.2 / n,
            lr: optimizer.current_lr(),
        };
        if let Some(cb) = progress.as_deref_mut() {
            cb(&entry);
        }
        log.push(entry);
    }

    Ok(TrainedStep1 {
        store,
        model,
        vocab,
        optimizer,
        log,
        epoch: cfg.epochs,
        global_step,
    })
}

/// One step-2 training sample: an expression paired with its object's
/// pseudo mask. Ground-truth masks never appear here.
struct Step2Sample {
    image_id: String,
    expression: String,
    pseudo: ndarray::Array2<u8>,
}

/// Train the segmentation network on pseudo labels.
pub fn train_step2(
    cfg: &RunConfig,
    dataset: &Dataset,
    pseudo_dir: &Path,
    resume: Option<&Checkpoint>,
    mut progress: Option<&mut dyn FnMut(&EpochLog)>,
) -> Result<TrainedStep2> {
    cfg.validate()?;
    let vocab = dataset.vocab()?;
    let entries = read_pseudo_index(pseudo_dir)?;
    let mut samples = Vec::new();
    for entry in &entries {
        if entry.degenerate {
            continue;
        }
        let mask = read_pseudo_mask(pseudo_dir, entry)?;
        for i in 0..dataset.len() {
            let rec = dataset.record(i);
            if rec.image_id == entry.image_id && rec.object_id == entry.object_id {
                for expr in &rec.expressions {
                    samples.push(Step2Sample {
                        image_id: rec.image_id.clone(),
                        expression: expr.clone(),
                        pseudo: mask.clone(),
                    });
                }
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Dataset(
            "no usable pseudo labels (all degenerate or no matching records)".into(),
        ));
    }
    let images = preload_images(dataset)?;

    let (mut store, model, start_epoch, restored_step) = match resume {
        Some(ck) => {
            let mut scratch = ParamStore::new();
            let model = Step2Model::init(&mut scratch, cfg, vocab.len(), "step2")?;
            (ck.params.clone(), model, ck.epoch, ck.global_step)
        }
        None => {
            let mut store = ParamStore::new();
            let model = Step2Model::init(&mut store, cfg, vocab.len(), "step2")?;
            (store, model, 0, 0)
        }
    };
    let steps_per_epoch = samples.len().div_ceil(cfg.batch);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut optimizer = AdamW::new(cfg.lr, cfg.weight_decay, poly_power(cfg), total_steps);
    if let Some(ck) = resume {
        optimizer = ck.restore_optimizer(optimizer);
    }

    let mut log = Vec::new();
    let mut global_step = restored_step;
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = rng_for(cfg.seed, &format!("step2.shuffle.{epoch}"));
            order.shuffle(&mut rng);
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let results: Vec<Result<(f64, BTreeMap<String, ArrayD<f64>>)>> = chunk
                .par_iter()
                .map(|&si| {
                    let s = &samples[si];
                    let image = &images[&s.image_id];
                    let tokens = tokenize(&vocab, &s.expression)?;
                    let mut g = Graph::new();
                    let mut pv = ParamVars::new();
                    let iv = g.constant(image.pixels().clone().into_dyn());
                    let out = model.forward_var(&mut g, &mut pv, &store, iv, &tokens, true)?;
                    let loss = ce_loss_var(&mut g, out, &s.pseudo)?;
                    let total = g.scalar_value(loss);
                    let bindings: Vec<(String, crate::autodiff::Var)> =
                        pv.trainable().map(|(n, v)| (n.to_string(), v)).collect();
                    let grads = g.backward(loss);
                    let mut gmap = BTreeMap::new();
                    for (name, var) in bindings {
                        if let Some(grad) = grads.wrt(var) {
                            gmap.insert(name, grad.clone());
                        }
                    }
                    Ok((total, gmap))
                })
                .collect();
            let mut batch_grads = Vec::with_capacity(chunk.len());
            for r in results {
                let (total, grads) = r?;
                if !total.is_finite() {
                    return Err(Error::NanLoss {
                        epoch,
                        step,
                        batch_ids: chunk
                            .iter()
                            .map(|&si| {
                                format!("{}:'{}'", samples[si].image_id, samples[si].expression)
                            })
                            .collect(),
                    });
                }
                sum += total;
                count += 1;
                batch_grads.push(grads);
            }
            let reduced = reduce_gradients(batch_grads);
            optimizer.apply(&mut store, &reduced);
            global_step += 1;
        }
        let n = count.max(1) as f64;
        let entry = EpochLog {
            epoch,
            weighted_cls: sum / n,
            calibration: 0.0,
            total: sum / n,
            lr: optimizer.current_lr(),
        };
        if let Some(cb) = progress.as_deref_mut() {
            cb(&entry);
        }
        log.push(entry);
    }

    Ok(TrainedStep2 {
        store,
        model,
        vocab,
        optimizer,
        log,
        epoch: cfg.epochs,
        global_step,
    })
}

/// Fraction of samples whose positive score strictly beats all sampled
/// negatives.
pub fn eval_ranking(
    model: &Step1Model,
    store: &ParamStore,
    dataset: &Dataset,
    vocab: &Vocab,
    n_eval_negatives: usize,
    seed: u64,
) -> Result<f64> {
    let refs = dataset.expression_refs();
    if refs.is_empty() {
        return Err(Error::Dataset("empty evaluation split".into()));
    }
    let images = preload_images(dataset)?;
    let hits: Vec<Result<bool>> = refs
        .par_iter()
        .map(|&(rec_idx, expr_idx)| {
            let rec = dataset.record(rec_idx);
            let mut rng = rng_for(seed, &format!("evalneg.{rec_idx}.{expr_idx}"));
            let (neg_refs, _) =
                crate::response::sample_negatives(dataset, &rec.image_id, n_eval_negatives, &mut rng)?;
            let mut queries = vec![tokenize(vocab, &rec.expressions[expr_idx])?];
            for (r, e) in neg_refs {
                queries.push(tokenize(vocab, &dataset.record(r).expressions[e])?);
            }
            let y = model.scores(store, &images[&rec.image_id], &queries)?;
            let best_neg = y[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Ok(y[0] > best_neg)
        })
        .collect();
    let mut n_hit = 0usize;
    for h in &hits {
        match h {
            Ok(true) => n_hit += 1,
            Ok(false) => {}
            Err(e) => return Err(Error::Dataset(e.to_string())),
        }
    }
    Ok(n_hit as f64 / hits.len() as f64)
}

fn gt_box_of(dataset: &Dataset, idx: usize, mask: &ndarray::Array2<u8>) -> Result<crate::data::BBox> {
    if let Some(b) = dataset.record(idx).bbox {
        return Ok(b);
    }
    crate::data::mask_bbox(mask)
        .ok_or_else(|| Error::Dataset("empty ground-truth mask".into()))
}

/// Evaluate step-1 response maps against ground truth. The predicted mask is
/// the thresholded response map; pointing metrics use the raw map.
pub fn eval_step1_maps(
    cfg: &RunConfig,
    model: &Step1Model,
    store: &ParamStore,
    dataset: &Dataset,
    vocab: &Vocab,
) -> Result<MetricsReport> {
    let images = preload_images(dataset)?;
    let rows: Vec<Result<Vec<SampleEval>>> = (0..dataset.len())
        .into_par_iter()
        .map(|idx| {
            let rec = dataset.record(idx);
            let gt = dataset.load_gt_mask(idx)?;
            let gt_box = gt_box_of(dataset, idx, &gt)?;
            let image = &images[&rec.image_id];
            let queries: Vec<TokenSequence> = rec
                .expressions
                .iter()
                .map(|e| tokenize(vocab, e))
                .collect::<Result<_>>()?;
            let rmap = model.response_batch(store, image, &queries)?;
            let mut out = Vec::with_capacity(queries.len());
            for e in 0..queries.len() {
                let col = rmap.column_2d(e);
                let (pred, _) = to_pseudo_mask(
                    &col,
                    image.height(),
                    image.width(),
                    cfg.threshold,
                    cfg.min_component_px,
                )?;
                out.push(evaluate_sample(
                    &rec.image_id,
                    rec.object_id,
                    e,
                    &pred,
                    Some(&col),
                    &gt,
                    gt_box,
                )?);
            }
            Ok(out)
        })
        .collect();
    let mut samples = Vec::new();
    for r in rows {
        samples.extend(r?);
    }
    if samples.is_empty() {
        return Err(Error::Dataset("no evaluable samples in split".into()));
    }
    Ok(MetricsReport::from_samples(samples))
}

/// Evaluate a trained segmentor against ground truth. Pointing metrics use
/// the target-class probability map.
pub fn eval_step2_model(
    model: &Step2Model,
    store: &ParamStore,
    dataset: &Dataset,
    vocab: &Vocab,
) -> Result<MetricsReport> {
    let images = preload_images(dataset)?;
    let rows: Vec<Result<Vec<SampleEval>>> = (0..dataset.len())
        .into_par_iter()
        .map(|idx| {
            let rec = dataset.record(idx);
            let gt = dataset.load_gt_mask(idx)?;
            let gt_box = gt_box_of(dataset, idx, &gt)?;
            let image = &images[&rec.image_id];
            let mut out = Vec::with_capacity(rec.expressions.len());
            for (e, expr) in rec.expressions.iter().enumerate() {
                let tokens = tokenize(vocab, expr)?;
                let seg: SegmentationOutput = model.forward(store, image, &tokens)?;
                let pred = predict_mask(&seg);
                let prob = seg.probabilities();
                let heat =
                    ndarray::Array2::from_shape_fn(gt.dim(), |(y, x)| prob[[1, y, x]]);
                out.push(evaluate_sample(
                    &rec.image_id,
                    rec.object_id,
                    e,
                    &pred,
                    Some(&heat),
                    &gt,
                    gt_box,
                )?);
            }
            Ok(out)
        })
        .collect();
    let mut samples = Vec::new();
    for r in rows {
        samples.extend(r?);
    }
    if samples.is_empty() {
        return Err(Error::Dataset("no evaluable samples in split".into()));
    }
    Ok(MetricsReport::from_samples(samples))
}

/// Evaluate stored pseudo labels directly against ground truth.
pub fn eval_pseudo_dir(pseudo_dir: &Path, dataset: &Dataset) -> Result<MetricsReport> {
    let entries = read_pseudo_index(pseudo_dir)?;
    let mut samples = Vec::new();
    for entry in &entries {
        let mut found = None;
        for i in 0..dataset.len() {
            let rec = dataset.record(i);
            if rec.image_id == entry.image_id && rec.object_id == entry.object_id {
                found = Some(i);
                break;
            }
        }
        let Some(idx) = found else { continue };
        let gt = dataset.load_gt_mask(idx)?;
        let gt_box = gt_box_of(dataset, idx, &gt)?;
        let pred = read_pseudo_mask(pseudo_dir, entry)?;
        samples.push(evaluate_sample(
            &entry.image_id,
            entry.object_id,
            entry.winning_index,
            &pred,
            None,
            &gt,
            gt_box,
        )?);
    }
    if samples.is_empty() {
        return Err(Error::Dataset(
            "no pseudo labels matched records with ground-truth masks".into(),
        ));
    }
    Ok(MetricsReport::from_samples(samples))
}

/// Overfit one (image, mask) pair for `steps` optimizer steps and return the
/// final IoU between the prediction and the target mask.
pub fn overfit_single_pair(
    cfg: &RunConfig,
    vocab_size: usize,
    image: &Image,
    tokens: &TokenSequence,
    target: &ndarray::Array2<u8>,
    steps: usize,
    lr: f64,
) -> Result<f64> {
    let mut store = ParamStore::new();
    let model = Step2Model::init(&mut store, cfg, vocab_size, "step2")?;
    let mut opt = AdamW::new(lr, 0.0, 0.0, steps);
    for _ in 0..steps {
        let mut g = Graph::new();
        let mut pv = ParamVars::new();
        let iv = g.constant(image.pixels().clone().into_dyn());
        let out = model.forward_var(&mut g, &mut pv, &store, iv, tokens, true)?;
        let loss = ce_loss_var(&mut g, out, target)?;
        let bindings: Vec<(String, crate::autodiff::Var)> =
            pv.trainable().map(|(n, v)| (n.to_string(), v)).collect();
        let grads = g.backward(loss);
        let mut gmap = BTreeMap::new();
        for (name, var) in bindings {
            if let Some(grad) = grads.wrt(var) {
                gmap.insert(name, grad.clone());
            }
        }
        opt.apply(&mut store, &gmap);
    }
    let seg = model.forward(&store, image, tokens)?;
    let pred = predict_mask(&seg);
    Ok(crate::metrics::iou(&pred, target)?.value)
}

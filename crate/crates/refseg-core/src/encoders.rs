//! Visual and text encoders, the projection layer, and L2 normalization that
//! produce the aligned feature spaces.
//!
//! The shipped encoders are seeded toy networks: a small strided
//! convolutional stack for images and an embedding-table + mean-pool + linear
//! head for text. Pretrained multimodal backbones plug in through
//! [`ImageTextEncoder`]; no weights ship with the crate. The visual encoder
//! exposes both a spatial grid (for response maps) and a pooled global
//! embedding in the raw text space (for masked-region similarity scoring).

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};

use crate::autodiff::{Graph, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{init_uniform, rng_for, ParamStore, ParamVars};

/// RGB image with values in `[0, 1]`, stored channels-first `(3, H, W)`.
#[derive(Debug, Clone)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::Sizing(format!(
                "image must be (3, H>0, W>0), got ({c}, {h}, {w})"
            )));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::NonFinite("image pixels outside [0,1]"));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }
}

/// Tokenized referring expression; never empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyTokens);
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Raw (pre-projection) features of one image/expression pair.
#[derive(Debug, Clone)]
pub struct RawFeatures {
    /// `(C_v, H, W)` spatial visual features.
    pub visual: Array3<f64>,
    /// `(C_l,)` pooled text features.
    pub text: Array1<f64>,
}

/// Projected spatial features, flattened to `(H*W, C_d)` row-major.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub values: Array2<f64>,
    pub height: usize,
    pub width: usize,
    pub normalized: bool,
}

/// Projected pooled text embedding `(C_d,)`.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub values: Array1<f64>,
    pub normalized: bool,
}

/// Raw text encoding plus the over-length truncation flag.
#[derive(Debug, Clone)]
pub struct EncodedText {
    pub features: Array1<f64>,
    pub truncated: bool,
}

/// Positions whose channel vector was (near-)zero before normalization; the
/// epsilon floor makes them well-defined but they carry no direction.
#[derive(Debug, Clone, Default)]
pub struct NormalizationFlags {
    pub degenerate_positions: Vec<usize>,
    pub text_degenerate: bool,
}

const NORM_FLOOR: f64 = 1e-12;

/// Interface for pluggable multimodal encoders.
///
/// Implementations build graph nodes so gradients can flow where the
/// implementation supports it; a frozen pretrained adapter may bind all of
/// its parameters as constants. The toy bundle is the only shipped
/// implementation.
pub trait ImageTextEncoder {
    /// Spatial features `(C_v, H/s, W/s)` for an image already in the graph
    /// as a `(3, H, W)` node.
    fn spatial_features_var(
        &self,
        g: &mut Graph,
        pv: &mut ParamVars,
        store: &ParamStore,
        image: Var,
        trainable: bool,
    ) -> Var;

    /// Pooled global embedding `(C_l,)` of a `(3, H, W)` image node.
    fn global_embedding_var(
        &self,
        g: &mut Graph,
        pv: &mut ParamVars,
        store: &ParamStore,
        image: Var,
        trainable: bool,
    ) -> Var;

    /// Pooled text features `(1, C_l)` plus the truncation flag.
    fn text_features(
        &self,
        g: &mut Graph,
        pv: &mut ParamVars,
        store: &ParamStore,
        tokens: &TokenSequence,
        trainable: bool,
    ) -> Result<(Var, bool)>;

    fn down_sample_ratio(&self) -> usize;
    fn visual_channels(&self) -> usize;
    fn text_channels(&self) -> usize;
}

#[derive(Debug, Clone)]
struct ConvLayer {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

/// Decompose the total stride `s` into at most four per-layer strides of 2
/// or 4, larger strides first.
fn stride_plan(s: usize) -> Vec<usize> {
    debug_assert!(s.is_power_of_two() && (2..=256).contains(&s));
    let n2 = s.trailing_zeros() as usize;
    let layers = n2.min(4).max(n2.div_ceil(2));
    let fours = n2 - layers;
    let twos = layers - fours;
    let mut strides = vec![4usize; fours];
    strides.extend(std::iter::repeat(2).take(twos));
    strides
}

/// Toy encoders plus the projection matrices into the unified space.
#[derive(Debug, Clone)]
pub struct EncoderBundle {
    prefix: String,
    conv_layers: Vec<ConvLayer>,
    pub c_v: usize,
    pub c_l: usize,
    pub c_d: usize,
    pub s: usize,
    pub t_max: usize,
    pub vocab_size: usize,
}

impl EncoderBundle {
    /// Register all encoder parameters under `prefix` and return the bundle.
    pub fn init(
        store: &mut ParamStore,
        cfg: &RunConfig,
        vocab_size: usize,
        prefix: &str,
    ) -> Result<Self> {
        if cfg.c_v != cfg.c_l {
            return Err(Error::Config(
                "toy encoder bundle requires c_v == c_l".into(),
            ));
        }
        let strides = stride_plan(cfg.s);
        let n = strides.len();
        let mut conv_layers = Vec::with_capacity(n);
        // input: RGB plus two normalized coordinate channels, so the stack
        // can represent absolute position ("left", "top", ...)
        let mut in_ch = 5usize;
        for (i, &stride) in strides.iter().enumerate() {
            let out_ch = (cfg.c_v >> (n - 1 - i)).max(8).min(cfg.c_v);
            let out_ch = if i == n - 1 { cfg.c_v } else { out_ch };
            let (kernel, pad) = if stride == 2 { (3, 1) } else { (4, 0) };
            conv_layers.push(ConvLayer {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            });
            in_ch = out_ch;
        }

        let mut rng = rng_for(cfg.seed, &format!("{prefix}.init"));
        for (i, l) in conv_layers.iter().enumerate() {
            let fan_in = l.in_ch * l.kernel * l.kernel;
            store.insert(
                format!("{prefix}.visual.conv{i}.weight"),
                init_uniform(&mut rng, &[l.out_ch, l.in_ch, l.kernel, l.kernel], fan_in),
            );
            store.insert(
                format!("{prefix}.visual.conv{i}.bias"),
                ArrayD::zeros(IxDyn(&[l.out_ch])),
            );
        }
        store.insert(
            format!("{prefix}.text.embed"),
            init_uniform(&mut rng, &[vocab_size, cfg.c_l], cfg.c_l),
        );
        store.insert(
            format!("{prefix}.text.head.weight"),
            init_uniform(&mut rng, &[cfg.c_l, cfg.c_l], cfg.c_l),
        );
        store.insert(
            format!("{prefix}.text.head.bias"),
            ArrayD::zeros(IxDyn(&[cfg.c_l])),
        );
        store.insert(
            format!("{prefix}.proj.visual"),
            init_uniform(&mut rng, &[cfg.c_v, cfg.c_d], cfg.c_v),
        );
        store.insert(
            format!("{prefix}.proj.text"),
            init_uniform(&mut rng, &[cfg.c_l, cfg.c_d], cfg.c_l),
        );

        Ok(Self {
            prefix: prefix.to_string(),
            conv_layers,
            c_v: cfg.c_v,
            c_l: cfg.c_l,
            c_d: cfg.c_d,
            s: cfg.s,
            t_max: cfg.t_max,
            vocab_size,
        })
    }

    fn coord_channels(h: usize, w: usize) -> Array3<f64> {
        let mut c = Array3::<f64>::zeros((2, h, w));
        for y in 0..h {
            for x in 0..w {
                c[[0, y, x]] = (y as f64 + 0.5) / h as f64;
                c[[1, y, x]] = (x as f64 + 0.5) / w as f64;
            }
        }
        c
    }

    /// Check the divisibility precondition and bind an image as a constant.
    pub fn image_var(&self, g: &mut Graph, image: &Image) -> Result<Var> {
        let (h, w) = (image.height(), image.width());
        if h % self.s != 0 || w % self.s != 0 {
            return Err(Error::Sizing(format!(
                "image dimensions {h}x{w} are not divisible by the down-sampling ratio {}",
                self.s
            )));
        }
        Ok(g.constant(image.pixels().clone().into_dyn()))
    }

    /// Flatten `(C_v, H, W)` spatial features to `(H*W, C_v)`, project to
    /// `(H*W, C_d)` and L2-normalize every row.
    pub fn project_grid_var(
        &self,
        g: &mut Graph,
        pv: &mut ParamVars,
        store: &ParamStore,
        raw_visual: Var,
        trainable: bool,
    ) -> Var {
        let shape = g.shape(raw_visual).to_vec();
        debug_assert_eq!(shape.len(), 3);
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let flat = g.reshape(raw_visual, &[c, h * w]);
        let hw_c = g.transpose2(flat);
        let wp = pv.bind(g, store, &format!("{}.proj.visual", self.prefix), trainable);
        let projected = g.matmul(hw_c, wp);
        l2_normalize_rows(g, projected)
    }

    /// Project pooled text features `(1, C_l)` to a unit-norm `(1, C_d)` row.
    pub fn project_text_var(
        &self,
        g: &mut Graph,
        pv: &mut ParamVars,
        store: &ParamStore,
        raw_text: Var,
        trainable: bool,
    ) -> Var {
        let wp = pv.bind(g, store, &format!("{}.proj.text", self.prefix), trainable);
        let projected = g.matmul(raw_text, wp);
        l2_normalize_rows(g, projected)
    }
}

impl ImageTextEncoder for EncoderBundle {
    fn spatial_features_var(
        &self,
        g: &mut Graph,
        pv: &mut ParamVars,
        store: &ParamStore,
        image: Var,
        trainable: bool,
    ) -> Var {
        let shape = g.shape(image).to_vec();
        debug_assert_eq!(shape[0], 3, "visual encoder expects (3,H,W)");
        let coords = g.constant(Self::coord_channels(shape[1], shape[2]).into_dyn());
        let mut x = g.concat(0, &[image, coords]);
        for (i, l) in self.conv_layers.iter().enumerate() {
            let wname = format!("{}.visual.conv{i}.weight", self.prefix);
            let bname = format!("{}.visual.conv{i}.bias", self.prefix);
            let wv = pv.bind(g, store, &wname, trainable);
            let bv = pv.bind(g, store, &bname, trainable);
            let y = g.conv2d(x, wv, bv, l.stride, l.pad);
            x = g.tanh(y);
        }
        x
    }

    fn global_embedding_var(
        &self,
        g: &mut Graph,
        pv: &mut ParamVars,
        store: &ParamStore,
        image: Var,
        trainable: bool,
    ) -> Var {
        let feats = self.spatial_features_var(g, pv, store, image, trainable);
        let shape = g.shape(feats).to_vec();
        let flat = g.reshape(feats, &[shape[0], shape[1] * shape[2]]);
        g.mean_axis(flat, 1)
    }

    fn text_features(
        &self,
        g: &mut Graph,
        pv: &mut ParamVars,
        store: &ParamStore,
        tokens: &TokenSequence,
        trainable: bool,
    ) -> Result<(Var, bool)> {
        let (ids, truncated) = self.truncate(tokens)?;
        let table = pv.bind(g, store, &format!("{}.text.embed", self.prefix), trainable);
        let rows = g.embedding(table, &ids);
        let pooled = g.mean_axis(rows, 0);
        let pooled = g.reshape(pooled, &[1, self.c_l]);
        let wh = pv.bind(g, store, &format!("{}.text.head.weight", self.prefix), trainable);
        let bh = pv.bind(g, store, &format!("{}.text.head.bias", self.prefix), trainable);
        let bh = g.reshape(bh, &[1, self.c_l]);
        let y = g.matmul(pooled, wh);
        Ok((g.add(y, bh), truncated))
    }

    fn down_sample_ratio(&self) -> usize {
        self.s
    }

    fn visual_channels(&self) -> usize {
        self.c_v
    }

    fn text_channels(&self) -> usize {
        self.c_l
    }
}

impl EncoderBundle {
    /// Per-token text features `(T, C_l)`: embedding rows through the linear
    /// head. Pooling their mean reproduces [`ImageTextEncoder::text_features`].
    pub fn token_features(
        &self,
        g: &mut Graph,
        pv: &mut ParamVars,
        store: &ParamStore,
        tokens: &TokenSequence,
        trainable: bool,
    ) -> Result<(Var, bool)> {
        let (ids, truncated) = self.truncate(tokens)?;
        let table = pv.bind(g, store, &format!("{}.text.embed", self.prefix), trainable);
        let rows = g.embedding(table, &ids);
        let wh = pv.bind(g, store, &format!("{}.text.head.weight", self.prefix), trainable);
        let bh = pv.bind(g, store, &format!("{}.text.head.bias", self.prefix), trainable);
        let t = ids.len();
        let bh = g.reshape(bh, &[1, self.c_l]);
        let y = g.matmul(rows, wh);
        let ones = g.constant(ArrayD::ones(IxDyn(&[t, 1])));
        let bias_rows = g.matmul(ones, bh);
        Ok((g.add(y, bias_rows), truncated))
    }

    fn truncate(&self, tokens: &TokenSequence) -> Result<(Vec<usize>, bool)> {
        let ids = tokens.ids();
        for &id in ids {
            if id >= self.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: self.vocab_size,
                });
            }
        }
        if ids.len() > self.t_max {
            Ok((ids[..self.t_max].to_vec(), true))
        } else {
            Ok((ids.to_vec(), false))
        }
    }
}

/// Row-wise L2 normalization with a `1e-12` floor in the denominator so
/// zero vectors stay zero instead of producing NaN.
pub fn l2_normalize_rows(g: &mut Graph, x: Var) -> Var {
    let sq = g.square(x);
    let ss = g.sum_axis(sq, 1);
    let norm = g.sqrt(ss);
    let floored = g.clamp_min(norm, NORM_FLOOR);
    let inv = g.recip(floored);
    let m = g.shape(x)[0];
    let col = g.reshape(inv, &[m, 1]);
    g.mul_bcast1(x, col)
}

// ---- plain-array entry points ------------------------------------------------

/// Raw spatial visual features `(C_v, H/s, W/s)` of an image.
pub fn encode_image(
    image: &Image,
    bundle: &EncoderBundle,
    store: &ParamStore,
) -> Result<Array3<f64>> {
    let mut g = Graph::new();
    let mut pv = ParamVars::new();
    let img = bundle.image_var(&mut g, image)?;
    let feats = bundle.spatial_features_var(&mut g, &mut pv, store, img, false);
    let value = g.value(feats);
    Ok(value
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("spatial features 3-d"))
}

/// Raw pooled text features `(C_l,)` plus truncation flag.
pub fn encode_text(
    tokens: &TokenSequence,
    bundle: &EncoderBundle,
    store: &ParamStore,
) -> Result<EncodedText> {
    let mut g = Graph::new();
    let mut pv = ParamVars::new();
    let (feat, truncated) = bundle.text_features(&mut g, &mut pv, store, tokens, false)?;
    let v = g.value(feat);
    let features = Array1::from_iter(v.iter().cloned());
    Ok(EncodedText { features, truncated })
}

/// Project raw features into the unified space and L2-normalize.
pub fn project_normalize(
    raw: &RawFeatures,
    bundle: &EncoderBundle,
    store: &ParamStore,
) -> Result<(FeatureGrid, TextEmbedding, NormalizationFlags)> {
    if !raw.visual.iter().all(|v| v.is_finite()) || !raw.text.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("raw features"));
    }
    let (c, h, w) = raw.visual.dim();
    if c != bundle.c_v {
        return Err(Error::ShapeMismatch {
            context: "project_normalize visual channels",
            expected: bundle.c_v.to_string(),
            actual: c.to_string(),
        });
    }
    if raw.text.len() != bundle.c_l {
        return Err(Error::ShapeMismatch {
            context: "project_normalize text channels",
            expected: bundle.c_l.to_string(),
            actual: raw.text.len().to_string(),
        });
    }

    let mut g = Graph::new();
    let mut pv = ParamVars::new();
    let rawv = g.constant(raw.visual.clone().into_dyn());
    let gridv = bundle.project_grid_var(&mut g, &mut pv, store, rawv, false);
    let rawt = g.constant(
        Array2::from_shape_vec((1, bundle.c_l), raw.text.to_vec())
            .expect("text row")
            .into_dyn(),
    );
    let textv = bundle.project_text_var(&mut g, &mut pv, store, rawt, false);

    let grid = g
        .value(gridv)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("grid 2-d");
    let text = Array1::from_iter(g.value(textv).iter().cloned());

    // flag positions whose projected vector was below the floor
    let mut flags = NormalizationFlags::default();
    let proj = {
        let flat = raw
            .visual
            .to_shape((c, h * w))
            .expect("flatten raw visual")
            .to_owned();
        let wp = store.get(&format!("{}.proj.visual", bundle.prefix));
        let wp2 = wp.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        flat.t().dot(&wp2)
    };
    for (i, row) in proj.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm < NORM_FLOOR {
            flags.degenerate_positions.push(i);
        }
    }
    {
        let wp = store.get(&format!("{}.proj.text", bundle.prefix));
        let wp2 = wp.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let t = raw.text.dot(&wp2);
        if t.dot(&t).sqrt() < NORM_FLOOR {
            flags.text_degenerate = true;
        }
    }

    Ok((
        FeatureGrid {
            values: grid,
            height: h,
            width: w,
            normalized: true,
        },
        TextEmbedding {
            values: text,
            normalized: true,
        },
        flags,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::rng_for;
    use rand::Rng;

    fn desk_bundle(vocab: usize) -> (ParamStore, EncoderBundle, RunConfig) {
        let cfg = RunConfig::desk();
        let mut store = ParamStore::new();
        let bundle = EncoderBundle::init(&mut store, &cfg, vocab, "enc").unwrap();
        (store, bundle, cfg)
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = rng_for(seed, "img");
        let pixels = Array3::from_shape_fn((3, h, w), |_| rng.gen_range(0.0..1.0));
        Image::new(pixels).unwrap()
    }

    #[test]
    fn stride_plans_cover_supported_ratios() {
        assert_eq!(stride_plan(2), vec![2]);
        assert_eq!(stride_plan(8), vec![2, 2, 2]);
        assert_eq!(stride_plan(16), vec![2, 2, 2, 2]);
        assert_eq!(stride_plan(32), vec![4, 2, 2, 2]);
        assert_eq!(stride_plan(256), vec![4, 4, 4, 4]);
        for s in [2usize, 4, 8, 16, 32, 64, 128, 256] {
            let prod: usize = stride_plan(s).iter().product();
            assert_eq!(prod, s);
            assert!(stride_plan(s).len() <= 4);
        }
    }

    #[test]
    fn full_scale_grid_is_10x10_for_320_input() {
        // 320x320 image at s=32 -> 10x10 spatial grid
        let mut cfg = RunConfig::default();
        cfg.c_v = 16;
        cfg.c_l = 16;
        cfg.c_d = 16;
        let mut store = ParamStore::new();
        let bundle = EncoderBundle::init(&mut store, &cfg, 8, "enc").unwrap();
        let img = random_image(0, 320, 320);
        let feats = encode_image(&img, &bundle, &store).unwrap();
        assert_eq!(feats.dim(), (16, 10, 10));
    }

    #[test]
    fn toy_grid_is_4x4_for_32_input_s8() {
        let (store, bundle, _) = desk_bundle(8);
        let img = random_image(1, 32, 32);
        let feats = encode_image(&img, &bundle, &store).unwrap();
        assert_eq!(feats.dim(), (64, 4, 4));
    }

    #[test]
    fn encoding_is_deterministic() {
        let (store, bundle, _) = desk_bundle(8);
        let img = random_image(2, 64, 64);
        let a = encode_image(&img, &bundle, &store).unwrap();
        let b = encode_image(&img, &bundle, &store).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn indivisible_size_is_rejected() {
        let (store, bundle, _) = desk_bundle(8);
        let img = random_image(3, 60, 64);
        let err = encode_image(&img, &bundle, &store).unwrap_err();
        assert!(matches!(err, Error::Sizing(_)), "got {err:?}");
    }

    #[test]
    fn text_encoding_shape_and_truncation() {
        let (store, bundle, cfg) = desk_bundle(50);
        let toks = TokenSequence::new(vec![1, 2, 3]).unwrap();
        let enc = encode_text(&toks, &bundle, &store).unwrap();
        assert_eq!(enc.features.len(), cfg.c_l);
        assert!(!enc.truncated);
        assert!(enc.features.iter().all(|v| v.is_finite()));

        // 25 tokens truncate to the first t_max = 20
        let long = TokenSequence::new((1..=25).collect()).unwrap();
        let enc_long = encode_text(&long, &bundle, &store).unwrap();
        assert!(enc_long.truncated);
        let first20 = TokenSequence::new((1..=20).collect()).unwrap();
        let enc20 = encode_text(&first20, &bundle, &store).unwrap();
        assert_eq!(enc_long.features, enc20.features);
    }

    #[test]
    fn empty_tokens_rejected() {
        assert!(matches!(
            TokenSequence::new(vec![]).unwrap_err(),
            Error::EmptyTokens
        ));
    }

    #[test]
    fn out_of_range_token_rejected() {
        let (store, bundle, _) = desk_bundle(8);
        let toks = TokenSequence::new(vec![9]).unwrap();
        assert!(encode_text(&toks, &bundle, &store).is_err());
    }

    #[test]
    fn distinct_expressions_get_distinct_embeddings() {
        let (store, bundle, _) = desk_bundle(100);
        let mut rng = rng_for(4, "pairs");
        for _ in 0..100 {
            let len_a = rng.gen_range(1..=6);
            let len_b = rng.gen_range(1..=6);
            let a: Vec<usize> = (0..len_a).map(|_| rng.gen_range(0..100)).collect();
            let b: Vec<usize> = (0..len_b).map(|_| rng.gen_range(0..100)).collect();
            if a == b {
                continue;
            }
            let ea = encode_text(&TokenSequence::new(a).unwrap(), &bundle, &store).unwrap();
            let eb = encode_text(&TokenSequence::new(b).unwrap(), &bundle, &store).unwrap();
            assert_ne!(ea.features, eb.features);
        }
    }

    #[test]
    fn projection_normalizes_rows_to_unit_norm() {
        let (store, bundle, cfg) = desk_bundle(8);
        let mut rng = rng_for(5, "raw");
        let raw = RawFeatures {
            visual: Array3::from_shape_fn((cfg.c_v, 5, 5), |_| rng.gen_range(-1.0..1.0)),
            text: Array1::from_shape_fn(cfg.c_l, |_| rng.gen_range(-1.0..1.0)),
        };
        let (grid, text, flags) = project_normalize(&raw, &bundle, &store).unwrap();
        assert!(grid.normalized && text.normalized);
        assert_eq!(grid.values.dim(), (25, cfg.c_d));
        for row in grid.values.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        assert!((text.values.dot(&text.values).sqrt() - 1.0).abs() < 1e-6);
        assert!(flags.degenerate_positions.is_empty());
        assert!(!flags.text_degenerate);
    }

    #[test]
    fn l2_normalization_handles_known_vector_and_zero() {
        // (3,4) -> (0.6, 0.8)
        let mut g = Graph::new();
        let x = g.input(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![3.0, 4.0]).unwrap());
        let y = l2_normalize_rows(&mut g, x);
        let v = g.value(y);
        assert!((v[IxDyn(&[0, 0])] - 0.6).abs() < 1e-12);
        assert!((v[IxDyn(&[0, 1])] - 0.8).abs() < 1e-12);

        // zero vector stays zero under the epsilon floor
        let mut g = Graph::new();
        let x = g.input(ArrayD::zeros(IxDyn(&[1, 4])));
        let y = l2_normalize_rows(&mut g, x);
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_visual_position_is_flagged() {
        let (store, bundle, cfg) = desk_bundle(8);
        let mut rng = rng_for(6, "raw");
        let mut visual = Array3::from_shape_fn((cfg.c_v, 2, 2), |_| rng.gen_range(-1.0..1.0));
        for c in 0..cfg.c_v {
            visual[[c, 1, 1]] = 0.0; // position index 3 in row-major (H*W)
        }
        let raw = RawFeatures {
            visual,
            text: Array1::from_shape_fn(cfg.c_l, |_| rng.gen_range(-1.0..1.0)),
        };
        let (_, _, flags) = project_normalize(&raw, &bundle, &store).unwrap();
        assert_eq!(flags.degenerate_positions, vec![3]);
    }

    #[test]
    fn shape_law_holds_across_ratios() {
        for s in [2usize, 4, 8, 16] {
            let mut cfg = RunConfig::desk();
            cfg.s = s;
            cfg.image_size = 64;
            let mut store = ParamStore::new();
            let bundle = EncoderBundle::init(&mut store, &cfg, 8, "enc").unwrap();
            let img = random_image(7, 64, 64);
            let feats = encode_image(&img, &bundle, &store).unwrap();
            assert_eq!(feats.dim().1, 64 / s);
            assert_eq!(feats.dim().2, 64 / s);
        }
    }

    #[test]
    fn conv_shapes_agree_with_helper() {
        use crate::autodiff::conv2d_shape;
        assert_eq!(conv2d_shape(64, 3, 2, 1), 32);
        assert_eq!(conv2d_shape(64, 4, 4, 0), 16);
    }

    #[test]
    fn token_feature_mean_matches_pooled_text() {
        let (store, bundle, _) = desk_bundle(20);
        let toks = TokenSequence::new(vec![3, 7, 11]).unwrap();
        let mut g = Graph::new();
        let mut pv = ParamVars::new();
        let (tok, _) = bundle
            .token_features(&mut g, &mut pv, &store, &toks, false)
            .unwrap();
        let mean = g.mean_axis(tok, 0);
        let (pooled, _) = bundle
            .text_features(&mut g, &mut pv, &store, &toks, false)
            .unwrap();
        let mv = g.value(mean).clone();
        let pv2 = g.value(pooled).clone();
        for (a, b) in mv.iter().zip(pv2.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

//! Step-2 segmentation network: a strided encoder whose last three stages
//! fuse text through gated single-head cross-attention, and a symmetric
//! decoder with skip connections producing full-resolution two-class logits.
//!
//! Fusion gates are zero-initialized, so an untrained (or gate-ablated)
//! network is exactly text-independent.

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::autodiff::{Graph, Var};
use crate::config::RunConfig;
use crate::encoders::{Image, TokenSequence};
use crate::error::{Error, Result};
use crate::params::{init_uniform, rng_for, ParamStore, ParamVars};

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

/// Two-class segmentation logits `(2, H, W)`.
#[derive(Debug, Clone)]
pub struct SegmentationOutput {
    pub logits: Array3<f64>,
}

impl SegmentationOutput {
    /// Per-pixel class probabilities via softmax over the class axis.
    pub fn probabilities(&self) -> Array3<f64> {
        let (_, h, w) = self.logits.dim();
        let mut out = Array3::<f64>::zeros((2, h, w));
        for y in 0..h {
            for x in 0..w {
                let l0 = self.logits[[0, y, x]];
                let l1 = self.logits[[1, y, x]];
                let m = l0.max(l1);
                let e0 = (l0 - m).exp();
                let e1 = (l1 - m).exp();
                let z = e0 + e1;
                out[[0, y, x]] = e0 / z;
                out[[1, y, x]] = e1 / z;
            }
        }
        out
    }
}

/// Argmax over the class axis; exact ties resolve to background.
pub fn predict_mask(output: &SegmentationOutput) -> Array2<u8> {
    let (_, h, w) = output.logits.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        u8::from(output.logits[[1, y, x]] > output.logits[[0, y, x]])
    })
}

/// The segmentation network's parameters and architecture.
#[derive(Debug, Clone)]
pub struct Step2Model {
    prefix: String,
    enc: Vec<ConvSpec>,
    dec: Vec<ConvSpec>,
    head: ConvSpec,
    fusion_dim: Vec<usize>,
    pub c_l: usize,
    pub t_max: usize,
    pub vocab_size: usize,
}

impl Step2Model {
    /// Register all parameters under `prefix`.
    pub fn init(
        store: &mut ParamStore,
        cfg: &RunConfig,
        vocab_size: usize,
        prefix: &str,
    ) -> Result<Self> {
        if cfg.image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "segmentor needs image_size divisible by 8, got {}",
                cfg.image_size
            )));
        }
        let c = [
            (cfg.c_v >> 2).max(8),
            (cfg.c_v >> 1).max(8),
            cfg.c_v.max(8),
        ];
        let enc = vec![
            ConvSpec { in_ch: 5, out_ch: c[0], kernel: 3, stride: 2, pad: 1 },
            ConvSpec { in_ch: c[0], out_ch: c[1], kernel: 3, stride: 2, pad: 1 },
            ConvSpec { in_ch: c[1], out_ch: c[2], kernel: 3, stride: 2, pad: 1 },
        ];
        let dec = vec![
            // after upsample x2, concatenated with the matching encoder stage
            ConvSpec { in_ch: c[2] + c[1], out_ch: c[1], kernel: 3, stride: 1, pad: 1 },
            ConvSpec { in_ch: c[1] + c[0], out_ch: c[0], kernel: 3, stride: 1, pad: 1 },
            ConvSpec { in_ch: c[0], out_ch: c[0], kernel: 3, stride: 1, pad: 1 },
        ];
        let head = ConvSpec { in_ch: c[0], out_ch: 2, kernel: 1, stride: 1, pad: 0 };
        let fusion_dim: Vec<usize> = c.iter().map(|&ck| ck.min(64)).collect();

        let mut rng = rng_for(cfg.seed, &format!("{prefix}.init"));
        for (i, l) in enc.iter().chain(dec.iter()).chain(std::iter::once(&head)).enumerate() {
            let fan_in = l.in_ch * l.kernel * l.kernel;
            let tag = if i < enc.len() {
                format!("enc{i}")
            } else if i < enc.len() + dec.len() {
                format!("dec{}", i - enc.len())
            } else {
                "head".to_string()
            };
            store.insert(
                format!("{prefix}.{tag}.weight"),
                init_uniform(&mut rng, &[l.out_ch, l.in_ch, l.kernel, l.kernel], fan_in),
            );
            store.insert(format!("{prefix}.{tag}.bias"), ArrayD::zeros(IxDyn(&[l.out_ch])));
        }
        for (k, (&ck, &d)) in c.iter().zip(fusion_dim.iter()).enumerate() {
            store.insert(
                format!("{prefix}.fuse{k}.wq"),
                init_uniform(&mut rng, &[ck, d], ck),
            );
            store.insert(
                format!("{prefix}.fuse{k}.wk"),
                init_uniform(&mut rng, &[cfg.c_l, d], cfg.c_l),
            );
            store.insert(
                format!("{prefix}.fuse{k}.wv"),
                init_uniform(&mut rng, &[cfg.c_l, ck], cfg.c_l),
            );
            // zero-initialized gate: the no-text baseline is exact
            store.insert(format!("{prefix}.fuse{k}.gate"), ArrayD::zeros(IxDyn(&[1])));
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

        Ok(Self {
            prefix: prefix.to_string(),
            enc,
            dec,
            head,
            fusion_dim,
            c_l: cfg.c_l,
            t_max: cfg.t_max,
            vocab_size,
        })
    }

    fn conv(
        &self,
        g: &mut Graph,
        pv: &mut ParamVars,
        store: &ParamStore,
        tag: &str,
        spec: &ConvSpec,
        x: Var,
        trainable: bool,
    ) -> Var {
        let w = pv.bind(g, store, &format!("{}.{tag}.weight", self.prefix), trainable);
        let b = pv.bind(g, store, &format!("{}.{tag}.bias", self.prefix), trainable);
        g.conv2d(x, w, b, spec.stride, spec.pad)
    }

    /// Per-token text features `(T, C_l)`.
    fn token_features(
        &self,
        g: &mut Graph,
        pv: &mut ParamVars,
        store: &ParamStore,
        tokens: &TokenSequence,
        trainable: bool,
    ) -> Result<Var> {
        let mut ids = tokens.ids().to_vec();
        if ids.len() > self.t_max {
            ids.truncate(self.t_max);
        }
        for &id in &ids {
            if id >= self.vocab_size {
                return Err(Error::TokenOutOfRange { id, vocab_size: self.vocab_size });
            }
        }
        let table = pv.bind(g, store, &format!("{}.text.embed", self.prefix), trainable);
        let rows = g.embedding(table, &ids);
        let wh = pv.bind(g, store, &format!("{}.text.head.weight", self.prefix), trainable);
        let bh = pv.bind(g, store, &format!("{}.text.head.bias", self.prefix), trainable);
        let y = g.matmul(rows, wh);
        let bh = g.reshape(bh, &[1, self.c_l]);
        let ones = g.constant(ArrayD::ones(IxDyn(&[ids.len(), 1])));
        let bias_rows = g.matmul(ones, bh);
        Ok(g.add(y, bias_rows))
    }

    /// Gated cross-attention of one encoder stage over the token features.
    fn fuse(
        &self,
        g: &mut Graph,
        pv: &mut ParamVars,
        store: &ParamStore,
        stage: usize,
        x: Var,
        text: Var,
        trainable: bool,
    ) -> Var {
        let shape = g.shape(x).to_vec();
        let (ck, h, w) = (shape[0], shape[1], shape[2]);
        let d = self.fusion_dim[stage];
        let flat = g.reshape(x, &[ck, h * w]);
        let xt = g.transpose2(flat); // (hw, ck)
        let wq = pv.bind(g, store, &format!("{}.fuse{stage}.wq", self.prefix), trainable);
        let wk = pv.bind(g, store, &format!("{}.fuse{stage}.wk", self.prefix), trainable);
        let wv = pv.bind(g, store, &format!("{}.fuse{stage}.wv", self.prefix), trainable);
        let q = g.matmul(xt, wq); // (hw, d)
        let k = g.matmul(text, wk); // (T, d)
        let v = g.matmul(text, wv); // (T, ck)
        let kt = g.transpose2(k);
        let logits = g.matmul(q, kt); // (hw, T)
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
        let attn = g.softmax_axis(logits, 1);
        let out = g.matmul(attn, v); // (hw, ck)
        let gate = pv.bind(g, store, &format!("{}.fuse{stage}.gate", self.prefix), trainable);
        let gate = g.reshape(gate, &[]);
        let gated = g.mul_s(out, gate);
        let fused = g.add(xt, gated);
        let back = g.transpose2(fused);
        g.reshape(back, &[ck, h, w])
    }

    /// Full forward pass to `(2, H, W)` logits.
    pub fn forward_var(
        &self,
        g: &mut Graph,
        pv: &mut ParamVars,
        store: &ParamStore,
        image: Var,
        tokens: &TokenSequence,
        trainable: bool,
    ) -> Result<Var> {
        let shape = g.shape(image).to_vec();
        let (h, w) = (shape[1], shape[2]);
        let coords = {
            let mut c = Array3::<f64>::zeros((2, h, w));
            for y in 0..h {
                for x in 0..w {
                    c[[0, y, x]] = (y as f64 + 0.5) / h as f64;
                    c[[1, y, x]] = (x as f64 + 0.5) / w as f64;
                }
            }
            g.constant(c.into_dyn())
        };
        let text = self.token_features(g, pv, store, tokens, trainable)?;

        let mut x = g.concat(0, &[image, coords]);
        let mut stages = Vec::with_capacity(3);
        for (i, spec) in self.enc.iter().enumerate() {
            let y = self.conv(g, pv, store, &format!("enc{i}"), spec, x, trainable);
            let a = g.tanh(y);
            let fused = self.fuse(g, pv, store, i, a, text, trainable);
            stages.push(fused);
            x = fused;
        }

        // decoder: upsample, concat skip, conv
        let s2 = g.shape(stages[1]).to_vec();
        let up = g.upsample_bilinear(x, s2[1], s2[2]);
        let cat = g.concat(0, &[up, stages[1]]);
        let y = self.conv(g, pv, store, "dec0", &self.dec[0], cat, trainable);
        let mut x = g.tanh(y);

        let s1 = g.shape(stages[0]).to_vec();
        let up = g.upsample_bilinear(x, s1[1], s1[2]);
        let cat = g.concat(0, &[up, stages[0]]);
        let y = self.conv(g, pv, store, "dec1", &self.dec[1], cat, trainable);
        x = g.tanh(y);

        let up = g.upsample_bilinear(x, h, w);
        let y = self.conv(g, pv, store, "dec2", &self.dec[2], up, trainable);
        x = g.tanh(y);

        Ok(self.conv(g, pv, store, "head", &self.head, x, trainable))
    }

    /// Array-in, array-out forward pass.
    pub fn forward(
        &self,
        store: &ParamStore,
        image: &Image,
        tokens: &TokenSequence,
    ) -> Result<SegmentationOutput> {
        let mut g = Graph::new();
        let mut pv = ParamVars::new();
        let iv = g.constant(image.pixels().clone().into_dyn());
        let out = self.forward_var(&mut g, &mut pv, store, iv, tokens, false)?;
        let logits = g
            .value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("logits 3-d");
        Ok(SegmentationOutput { logits })
    }
}

/// Mean per-pixel two-class cross-entropy against a binary mask.
pub fn ce_loss_var(g: &mut Graph, logits: Var, target: &Array2<u8>) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 3 || shape[0] != 2 || (shape[1], shape[2]) != target.dim() {
        return Err(Error::ShapeMismatch {
            context: "ce_loss",
            expected: format!("(2,{},{})", target.dim().0, target.dim().1),
            actual: format!("{shape:?}"),
        });
    }
    Ok(g.ce_two_class(logits, target))
}

/// Cross-entropy on a concrete output.
pub fn ce_loss(output: &SegmentationOutput, target: &Array2<u8>) -> Result<f64> {
    let mut g = Graph::new();
    let lv = g.constant(output.logits.clone().into_dyn());
    let loss = ce_loss_var(&mut g, lv, target)?;
    Ok(g.scalar_value(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::rng_for;
    use rand::Rng;

    fn tiny_model(seed: u64) -> (ParamStore, Step2Model, RunConfig) {
        let mut cfg = RunConfig::desk();
        cfg.image_size = 32;
        cfg.c_v = 16;
        cfg.c_l = 16;
        cfg.c_d = 16;
        cfg.seed = seed;
        let mut store = ParamStore::new();
        let model = Step2Model::init(&mut store, &cfg, 16, "step2").unwrap();
        (store, model, cfg)
    }

    fn rand_image(seed: u64, size: usize) -> Image {
        let mut rng = rng_for(seed, "img");
        Image::new(Array3::from_shape_fn((3, size, size), |_| rng.gen_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn output_shape_and_softmax() {
        let (store, model, cfg) = tiny_model(0);
        let img = rand_image(1, cfg.image_size);
        let toks = TokenSequence::new(vec![1, 2, 3]).unwrap();
        let out = model.forward(&store, &img, &toks).unwrap();
        assert_eq!(out.logits.dim(), (2, 32, 32));
        let p = out.probabilities();
        for y in 0..32 {
            for x in 0..32 {
                assert!((p[[0, y, x]] + p[[1, y, x]] - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_gates_make_output_text_independent() {
        let (store, model, cfg) = tiny_model(2);
        let img = rand_image(3, cfg.image_size);
        let a = model
            .forward(&store, &img, &TokenSequence::new(vec![1, 2]).unwrap())
            .unwrap();
        let b = model
            .forward(&store, &img, &TokenSequence::new(vec![5, 9, 11]).unwrap())
            .unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn nonzero_gates_make_output_text_sensitive() {
        let (mut store, model, cfg) = tiny_model(4);
        for k in 0..3 {
            store.set_scalar(&format!("step2.fuse{k}.gate"), 0.5);
        }
        let img = rand_image(5, cfg.image_size);
        let a = model
            .forward(&store, &img, &TokenSequence::new(vec![1, 2]).unwrap())
            .unwrap();
        let b = model
            .forward(&store, &img, &TokenSequence::new(vec![5, 9, 11]).unwrap())
            .unwrap();
        assert_ne!(a.logits, b.logits);
    }

    #[test]
    fn ce_saturated_and_uniform_values() {
        let mut logits = Array3::<f64>::zeros((2, 4, 4));
        let target = Array2::from_shape_fn((4, 4), |(y, x)| u8::from((y + x) % 2 == 0));
        // saturate toward the correct class
        for y in 0..4 {
            for x in 0..4 {
                let t = target[[y, x]] as usize;
                logits[[t, y, x]] = 30.0;
                logits[[1 - t, y, x]] = -30.0;
            }
        }
        let out = SegmentationOutput { logits };
        assert!(ce_loss(&out, &target).unwrap() < 1e-6);

        let uniform = SegmentationOutput {
            logits: Array3::zeros((2, 4, 4)),
        };
        assert!((ce_loss(&uniform, &target).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_matches_per_pixel_loop_oracle() {
        let mut rng = rng_for(6, "ce");
        let logits = Array3::from_shape_fn((2, 4, 4), |_| rng.gen_range(-3.0..3.0));
        let target = Array2::from_shape_fn((4, 4), |_| u8::from(rng.gen_bool(0.5)));
        let got = ce_loss(&SegmentationOutput { logits: logits.clone() }, &target).unwrap();
        let mut total = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                let l0 = logits[[0, y, x]];
                let l1 = logits[[1, y, x]];
                let z = l0.exp() + l1.exp();
                let lt = if target[[y, x]] == 1 { l1 } else { l0 };
                total += z.ln() - lt;
            }
        }
        assert!((got - total / 16.0).abs() < 1e-9);
    }

    #[test]
    fn ce_shape_mismatch_is_rejected() {
        let out = SegmentationOutput {
            logits: Array3::zeros((2, 4, 4)),
        };
        assert!(ce_loss(&out, &Array2::zeros((3, 4))).is_err());
    }

    #[test]
    fn predict_mask_rules_and_oracle() {
        let mut logits = Array3::<f64>::zeros((2, 2, 2));
        // all target
        logits[[1, 0, 0]] = 1.0;
        logits[[1, 0, 1]] = 2.0;
        logits[[1, 1, 0]] = 0.5;
        logits[[1, 1, 1]] = 3.0;
        let m = predict_mask(&SegmentationOutput { logits: logits.clone() });
        assert!(m.iter().all(|&v| v == 1));
        // exact ties resolve to background
        let ties = SegmentationOutput {
            logits: Array3::from_elem((2, 3, 3), 0.7),
        };
        assert!(predict_mask(&ties).iter().all(|&v| v == 0));
        // random oracle
        let mut rng = rng_for(7, "pm");
        let logits = Array3::from_shape_fn((2, 5, 5), |_| rng.gen_range(-1.0..1.0));
        let m = predict_mask(&SegmentationOutput { logits: logits.clone() });
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(m[[y, x]], u8::from(logits[[1, y, x]] > logits[[0, y, x]]));
            }
        }
    }

    #[test]
    fn decoder_head_gradient_matches_finite_differences() {
        let (store, model, cfg) = tiny_model(8);
        let img = rand_image(9, cfg.image_size);
        let toks = TokenSequence::new(vec![1, 3]).unwrap();
        let mut rng = rng_for(10, "tgt");
        let target = Array2::from_shape_fn((32, 32), |_| u8::from(rng.gen_bool(0.3)));

        let eval = |s: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let mut pv = ParamVars::new();
            let iv = g.constant(img.pixels().clone().into_dyn());
            let out = model.forward_var(&mut g, &mut pv, s, iv, &toks, false).unwrap();
            let loss = ce_loss_var(&mut g, out, &target).unwrap();
            g.scalar_value(loss)
        };

        let mut g = Graph::new();
        let mut pv = ParamVars::new();
        let iv = g.constant(img.pixels().clone().into_dyn());
        let out = model.forward_var(&mut g, &mut pv, &store, iv, &toks, true).unwrap();
        let loss = ce_loss_var(&mut g, out, &target).unwrap();
        let bound: Vec<(String, crate::autodiff::Var)> =
            pv.trainable().map(|(n, v)| (n.to_string(), v)).collect();
        let grads = g.backward(loss);

        let step = 1e-5;
        for name in [
            "step2.head.weight",
            "step2.dec2.weight",
            "step2.fuse2.gate",
            "step2.enc0.bias",
        ] {
            let var = bound.iter().find(|(n, _)| n == name).map(|(_, v)| *v).unwrap();
            let analytic = grads.wrt_or_zeros(var, store.get(name).shape());
            let len = store.get(name).len();
            let stride = (len / 6).max(1);
            for flat in (0..len).step_by(stride) {
                let mut sp = store.clone();
                *sp.get_mut(name).iter_mut().nth(flat).unwrap() += step;
                let mut sm = store.clone();
                *sm.get_mut(name).iter_mut().nth(flat).unwrap() -= step;
                let fd = (eval(&sp) - eval(&sm)) / (2.0 * step);
                let a = *analytic.iter().nth(flat).unwrap();
                assert!(
                    (a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()) + 1e-8,
                    "{name}[{flat}]: analytic {a} vs fd {fd}"
                );
            }
        }
    }
}

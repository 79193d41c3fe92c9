//! Bilateral cross-modal prompting: paired attention maps and residual
//! updates that enrich each modality with the other.
//!
//! Text residuals are attention-weighted combinations of projected pixel
//! features; visual residuals broadcast a projected text vector to every
//! position, weighted by the text-to-visual attention. Either direction can
//! be disabled to realize the unilateral ablations, in which case the
//! corresponding path is the exact identity.

use ndarray::{Array1, Array2};

use crate::autodiff::{Graph, Var};
use crate::config::{AttnVAxis, RunConfig};
use crate::error::{Error, Result};
use crate::params::{init_uniform, rng_for, ParamStore, ParamVars};

/// Names of the six learnable prompt matrices, all `C_d x C_d`.
#[derive(Debug, Clone)]
pub struct PromptParams {
    prefix: String,
    pub c_d: usize,
}

const MATRICES: [&str; 6] = ["w1_v", "w2_v", "w3_v", "w1_l", "w2_l", "w3_l"];

impl PromptParams {
    pub fn init(store: &mut ParamStore, cfg: &RunConfig, prefix: &str) -> Self {
        let mut rng = rng_for(cfg.seed, &format!("{prefix}.init"));
        for m in MATRICES {
            store.insert(
                format!("{prefix}.{m}"),
                init_uniform(&mut rng, &[cfg.c_d, cfg.c_d], cfg.c_d),
            );
        }
        Self {
            prefix: prefix.to_string(),
            c_d: cfg.c_d,
        }
    }

    pub fn matrix_names(&self) -> Vec<String> {
        MATRICES.iter().map(|m| format!("{}.{m}", self.prefix)).collect()
    }

    fn bind(
        &self,
        g: &mut Graph,
        pv: &mut ParamVars,
        store: &ParamStore,
        m: &str,
        trainable: bool,
    ) -> Var {
        pv.bind(g, store, &format!("{}.{m}", self.prefix), trainable)
    }
}

/// Mixing weights and ablation switches, taken from the run config.
#[derive(Debug, Clone, Copy)]
pub struct PromptSettings {
    pub alpha: f64,
    pub beta: f64,
    pub enable_t2v: bool,
    pub enable_v2t: bool,
    pub attn_v_axis: AttnVAxis,
}

impl From<&RunConfig> for PromptSettings {
    fn from(cfg: &RunConfig) -> Self {
        Self {
            alpha: cfg.alpha,
            beta: cfg.beta,
            enable_t2v: cfg.enable_t2v,
            enable_v2t: cfg.enable_v2t,
            attn_v_axis: cfg.attn_v_axis,
        }
    }
}

/// Graph handles of one prompt evaluation.
pub struct PromptVars {
    /// `(HW, C_d)` prompted visual features, not re-normalized.
    pub v_hat: Var,
    /// `(1, C_d)` prompted text features, not re-normalized.
    pub l_hat: Var,
    /// `(1, HW)` visual-to-text attention.
    pub attn_l: Var,
    /// `(HW, 1)` text-to-visual attention.
    pub attn_v: Var,
}

/// Concrete arrays of one prompt evaluation.
#[derive(Debug, Clone)]
pub struct PromptOutput {
    pub v_hat: Array2<f64>,
    pub l_hat: Array2<f64>,
    pub attn_l: Array2<f64>,
    pub attn_v: Array2<f64>,
}

/// Compute both attention maps from unit-normalized inputs.
///
/// `v` is `(HW, C_d)`, `l` is `(1, C_d)`. Returns `attn_l: (1, HW)` softmaxed
/// over positions and `attn_v: (HW, 1)` softmaxed according to
/// [`PromptSettings::attn_v_axis`].
pub fn attention_maps(
    g: &mut Graph,
    pv: &mut ParamVars,
    store: &ParamStore,
    v: Var,
    l: Var,
    params: &PromptParams,
    settings: &PromptSettings,
    trainable: bool,
) -> Result<(Var, Var)> {
    let scale = 1.0 / (params.c_d as f64).sqrt();
    let w1_v = params.bind(g, pv, store, "w1_v", trainable);
    let w2_l = params.bind(g, pv, store, "w2_l", trainable);
    let vw = g.matmul(v, w1_v);
    let lw = g.matmul(l, w2_l);
    let lwt = g.transpose2(lw);
    let logits_l = g.matmul(vw, lwt); // (HW, 1)
    let logits_l = g.scale(logits_l, scale);
    let logits_l = g.transpose2(logits_l); // (1, HW)

    let w1_l = params.bind(g, pv, store, "w1_l", trainable);
    let w2_v = params.bind(g, pv, store, "w2_v", trainable);
    let lw1 = g.matmul(l, w1_l);
    let vw2 = g.matmul(v, w2_v);
    let vw2t = g.transpose2(vw2);
    let logits_v = g.matmul(lw1, vw2t); // (1, HW)
    let logits_v = g.scale(logits_v, scale);
    let logits_v = g.transpose2(logits_v); // (HW, 1)

    if !g.value(logits_l).iter().all(|x| x.is_finite())
        || !g.value(logits_v).iter().all(|x| x.is_finite())
    {
        return Err(Error::NonFinite("attention logits"));
    }

    let attn_l = g.softmax_axis(logits_l, 1);
    let attn_v = match settings.attn_v_axis {
        // per-pixel distribution over the (single) query: every weight is 1
        AttnVAxis::Queries => g.softmax_axis(logits_v, 1),
        // distribution over positions
        AttnVAxis::Pixels => g.softmax_axis(logits_v, 0),
    };
    Ok((attn_l, attn_v))
}

/// Residual prompts from the attention maps.
///
/// `l_prime = attn_l (V W3_v)` is `(1, C_d)`; `v_prime = attn_v (L W3_l)`
/// is `(HW, C_d)` (the rank-1 broadcast implements the shape transform back
/// onto the spatial grid).
pub fn prompt_residuals(
    g: &mut Graph,
    pv: &mut ParamVars,
    store: &ParamStore,
    v: Var,
    l: Var,
    attn_l: Var,
    attn_v: Var,
    params: &PromptParams,
    trainable: bool,
) -> Result<(Var, Var)> {
    let (hw, c_d) = {
        let s = g.shape(v);
        (s[0], s[1])
    };
    if g.shape(attn_l) != [1, hw] || g.shape(attn_v) != [hw, 1] {
        return Err(Error::ShapeMismatch {
            context: "prompt_residuals attention",
            expected: format!("(1,{hw}) and ({hw},1)"),
            actual: format!("{:?} and {:?}", g.shape(attn_l), g.shape(attn_v)),
        });
    }
    if g.shape(l) != [1, c_d] {
        return Err(Error::ShapeMismatch {
            context: "prompt_residuals text",
            expected: format!("(1,{c_d})"),
            actual: format!("{:?}", g.shape(l)),
        });
    }
    let w3_v = params.bind(g, pv, store, "w3_v", trainable);
    let vw3 = g.matmul(v, w3_v);
    let l_prime = g.matmul(attn_l, vw3); // (1, C_d)

    let w3_l = params.bind(g, pv, store, "w3_l", trainable);
    let lw3 = g.matmul(l, w3_l); // (1, C_d)
    let v_prime = g.matmul(attn_v, lw3); // (HW, C_d)
    Ok((v_prime, l_prime))
}

/// Residual update. Disabled directions return the input node unchanged.
pub fn apply_prompt(
    g: &mut Graph,
    v: Var,
    l: Var,
    v_prime: Var,
    l_prime: Var,
    settings: &PromptSettings,
) -> Result<(Var, Var)> {
    if g.shape(v) != g.shape(v_prime) || g.shape(l) != g.shape(l_prime) {
        return Err(Error::ShapeMismatch {
            context: "apply_prompt",
            expected: format!("{:?} and {:?}", g.shape(v), g.shape(l)),
            actual: format!("{:?} and {:?}", g.shape(v_prime), g.shape(l_prime)),
        });
    }
    let v_hat = if settings.enable_t2v {
        let scaled = g.scale(v_prime, settings.alpha);
        g.add(v, scaled)
    } else {
        v
    };
    let l_hat = if settings.enable_v2t {
        let scaled = g.scale(l_prime, settings.beta);
        g.add(l, scaled)
    } else {
        l
    };
    Ok((v_hat, l_hat))
}

/// Full bilateral prompt: attention, residuals, and the residual update.
pub fn bilateral_prompt(
    g: &mut Graph,
    pv: &mut ParamVars,
    store: &ParamStore,
    v: Var,
    l: Var,
    params: &PromptParams,
    settings: &PromptSettings,
    trainable: bool,
) -> Result<PromptVars> {
    let (attn_l, attn_v) = attention_maps(g, pv, store, v, l, params, settings, trainable)?;
    let (v_prime, l_prime) =
        prompt_residuals(g, pv, store, v, l, attn_l, attn_v, params, trainable)?;
    let (v_hat, l_hat) = apply_prompt(g, v, l, v_prime, l_prime, settings)?;
    Ok(PromptVars {
        v_hat,
        l_hat,
        attn_l,
        attn_v,
    })
}

/// Array-in, array-out evaluation for tests and inspection.
pub fn prompt_forward(
    store: &ParamStore,
    params: &PromptParams,
    settings: &PromptSettings,
    v: &Array2<f64>,
    l: &Array1<f64>,
) -> Result<PromptOutput> {
    let mut g = Graph::new();
    let mut pv = ParamVars::new();
    let vv = g.constant(v.clone().into_dyn());
    let lrow = Array2::from_shape_vec((1, l.len()), l.to_vec()).expect("text row");
    let lv = g.constant(lrow.into_dyn());
    let out = bilateral_prompt(&mut g, &mut pv, store, vv, lv, params, settings, false)?;
    let to2 = |g: &Graph, v: Var| {
        g.value(v)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-d")
    };
    Ok(PromptOutput {
        v_hat: to2(&g, out.v_hat),
        l_hat: to2(&g, out.l_hat),
        attn_l: to2(&g, out.attn_l),
        attn_v: to2(&g, out.attn_v),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use ndarray::IxDyn;
    use rand::Rng;

    fn setup(c_d: usize, seed: u64) -> (ParamStore, PromptParams, PromptSettings) {
        let mut cfg = RunConfig::desk();
        cfg.c_d = c_d;
        cfg.c_v = c_d;
        cfg.c_l = c_d;
        cfg.seed = seed;
        let mut store = ParamStore::new();
        let params = PromptParams::init(&mut store, &cfg, "prompt");
        let settings = PromptSettings::from(&cfg);
        (store, params, settings)
    }

    fn rand_unit_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
        let mut a = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0f64));
        for mut r in a.rows_mut() {
            let n = r.dot(&r).sqrt().max(1e-12);
            r.mapv_inplace(|x| x / n);
        }
        a
    }

    #[test]
    fn singleton_grid_gives_unit_attention() {
        let (store, params, settings) = setup(4, 0);
        let mut rng = crate::params::rng_for(1, "t");
        let v = rand_unit_rows(&mut rng, 1, 4);
        let l = rand_unit_rows(&mut rng, 1, 4).row(0).to_owned();
        let out = prompt_forward(&store, &params, &settings, &v, &l).unwrap();
        assert_eq!(out.attn_l.dim(), (1, 1));
        assert!((out.attn_l[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_logits_give_uniform_attention() {
        let (mut store, params, settings) = setup(4, 0);
        // zero W1_v forces all visual-to-text logits to zero
        store.get_mut("prompt.w1_v").fill(0.0);
        let mut rng = crate::params::rng_for(2, "t");
        let v = rand_unit_rows(&mut rng, 6, 4);
        let l = rand_unit_rows(&mut rng, 1, 4).row(0).to_owned();
        let out = prompt_forward(&store, &params, &settings, &v, &l).unwrap();
        for &w in out.attn_l.iter() {
            assert!((w - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_dense_loop_oracle() {
        let (store, params, settings) = setup(4, 3);
        let mut rng = crate::params::rng_for(3, "t");
        let v = rand_unit_rows(&mut rng, 4, 4); // 2x2 grid
        let l1 = rand_unit_rows(&mut rng, 1, 4);
        let l = l1.row(0).to_owned();
        let out = prompt_forward(&store, &params, &settings, &v, &l).unwrap();

        // independent oracle: explicit loops over the defining formulas
        let get = |n: &str| {
            store
                .get(n)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned()
        };
        let (w1_v, w2_l) = (get("prompt.w1_v"), get("prompt.w2_l"));
        let hw = 4;
        let c_d = 4;
        let mut logits = vec![0.0f64; hw];
        // (V W1_v) and (L W2_l) with plain loops
        let mut vw = vec![vec![0.0f64; c_d]; hw];
        for i in 0..hw {
            for j in 0..c_d {
                let mut acc = 0.0;
                for k in 0..c_d {
                    acc += v[[i, k]] * w1_v[[k, j]];
                }
                vw[i][j] = acc;
            }
        }
        let mut lw = vec![0.0f64; c_d];
        for j in 0..c_d {
            let mut acc = 0.0;
            for k in 0..c_d {
                acc += l[k] * w2_l[[k, j]];
            }
            lw[j] = acc;
        }
        for i in 0..hw {
            let mut acc = 0.0;
            for j in 0..c_d {
                acc += vw[i][j] * lw[j];
            }
            logits[i] = acc / (c_d as f64).sqrt();
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for i in 0..hw {
            assert!(
                (out.attn_l[[0, i]] - exps[i] / z).abs() < 1e-6,
                "attn_l[{i}] mismatch"
            );
        }
    }

    #[test]
    fn one_hot_attention_selects_row() {
        let (store, params, _settings) = setup(4, 4);
        let mut rng = crate::params::rng_for(4, "t");
        let v = rand_unit_rows(&mut rng, 5, 4);
        let l = rand_unit_rows(&mut rng, 1, 4);
        let mut g = Graph::new();
        let mut pv = ParamVars::new();
        let vv = g.constant(v.clone().into_dyn());
        let lv = g.constant(l.clone().into_dyn());
        let mut onehot = Array2::<f64>::zeros((1, 5));
        onehot[[0, 3]] = 1.0;
        let al = g.constant(onehot.into_dyn());
        let av = g.constant(Array2::<f64>::ones((5, 1)).into_dyn());
        let (v_prime, l_prime) =
            prompt_residuals(&mut g, &mut pv, &store, vv, lv, al, av, &params, false).unwrap();
        // l_prime must equal row 3 of V W3_v
        let w3_v = store
            .get("prompt.w3_v")
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let expected = v.dot(&w3_v);
        let lp = g.value(l_prime);
        for j in 0..4 {
            assert!((lp[IxDyn(&[0, j])] - expected[[3, j]]).abs() < 1e-12);
        }
        // uniform (all-ones) attn_v: every spatial row of v_prime identical
        let vp = g.value(v_prime);
        for i in 1..5 {
            for j in 0..4 {
                assert_eq!(vp[IxDyn(&[i, j])], vp[IxDyn(&[0, j])]);
            }
        }
    }

    #[test]
    fn residuals_match_dense_loop_oracle() {
        let (store, params, settings) = setup(4, 5);
        let mut rng = crate::params::rng_for(5, "t");
        let v = rand_unit_rows(&mut rng, 4, 4);
        let l = rand_unit_rows(&mut rng, 1, 4).row(0).to_owned();
        let out = prompt_forward(&store, &params, &settings, &v, &l).unwrap();

        let get = |n: &str| {
            store
                .get(n)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned()
        };
        let w3_v = get("prompt.w3_v");
        let w3_l = get("prompt.w3_l");
        // oracle l_prime = attn_l (V W3_v)
        for j in 0..4 {
            let mut acc = 0.0;
            for i in 0..4 {
                let mut vw = 0.0;
                for k in 0..4 {
                    vw += v[[i, k]] * w3_v[[k, j]];
                }
                acc += out.attn_l[[0, i]] * vw;
            }
            let expected = l
                .iter()
                .enumerate()
                .fold(0.0, |s, (k, &lv)| s + lv * w3_l[[k, j]]);
            // l_hat = l + beta * l_prime
            let got = out.l_hat[[0, j]];
            let lp = (got - l[j]) / settings.beta;
            assert!((lp - acc).abs() < 1e-6, "l_prime[{j}]: {lp} vs {acc}");
            // v_hat rows: v + alpha * attn_v_i * (L W3_l)
            for i in 0..4 {
                let vp = (out.v_hat[[i, j]] - v[[i, j]]) / settings.alpha;
                let want = out.attn_v[[i, 0]] * expected;
                assert!((vp - want).abs() < 1e-6, "v_prime[{i},{j}]");
            }
        }
    }

    #[test]
    fn disabled_directions_are_exact_identities() {
        let (store, params, mut settings) = setup(4, 6);
        let mut rng = crate::params::rng_for(6, "t");
        let v = rand_unit_rows(&mut rng, 4, 4);
        let l = rand_unit_rows(&mut rng, 1, 4).row(0).to_owned();

        settings.enable_v2t = false;
        let out = prompt_forward(&store, &params, &settings, &v, &l).unwrap();
        for j in 0..4 {
            assert_eq!(out.l_hat[[0, j]], l[j]);
        }
        assert_ne!(out.v_hat, v);

        settings.enable_v2t = true;
        settings.enable_t2v = false;
        let out = prompt_forward(&store, &params, &settings, &v, &l).unwrap();
        assert_eq!(out.v_hat, v);
    }

    #[test]
    fn zero_alpha_beta_reduce_to_inputs() {
        let (store, params, mut settings) = setup(4, 7);
        settings.alpha = 0.0;
        settings.beta = 0.0;
        let mut rng = crate::params::rng_for(7, "t");
        let v = rand_unit_rows(&mut rng, 4, 4);
        let l = rand_unit_rows(&mut rng, 1, 4).row(0).to_owned();
        let out = prompt_forward(&store, &params, &settings, &v, &l).unwrap();
        assert_eq!(out.v_hat, v);
        for j in 0..4 {
            assert_eq!(out.l_hat[[0, j]], l[j]);
        }
    }

    #[test]
    fn alpha_one_with_opposed_residual_cancels() {
        // v_prime = -v when attn_v = 1 and (L W3_l) = -v_row for a 1-pixel grid
        let (mut store, params, mut settings) = setup(3, 8);
        settings.alpha = 1.0;
        // craft W3_l = -I and l = v_row so L W3_l = -v
        let w3 = store.get_mut("prompt.w3_l");
        let mut eye = Array2::<f64>::eye(3);
        eye *= -1.0;
        *w3 = eye.into_dyn();
        let v = Array2::from_shape_vec((1, 3), vec![0.6, 0.8, 0.0]).unwrap();
        let l = Array1::from_vec(vec![0.6, 0.8, 0.0]);
        let out = prompt_forward(&store, &params, &settings, &v, &l).unwrap();
        for j in 0..3 {
            assert!(out.v_hat[[0, j]].abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_sums_hold_for_both_axis_modes() {
        for axis in [AttnVAxis::Queries, AttnVAxis::Pixels] {
            let (store, params, mut settings) = setup(4, 9);
            settings.attn_v_axis = axis;
            let mut rng = crate::params::rng_for(9, "t");
            let v = rand_unit_rows(&mut rng, 9, 4);
            let l = rand_unit_rows(&mut rng, 1, 4).row(0).to_owned();
            let out = prompt_forward(&store, &params, &settings, &v, &l).unwrap();
            let sl: f64 = out.attn_l.iter().sum();
            assert!((sl - 1.0).abs() < 1e-6);
            match axis {
                AttnVAxis::Queries => {
                    for &w in out.attn_v.iter() {
                        assert!((w - 1.0).abs() < 1e-12);
                    }
                }
                AttnVAxis::Pixels => {
                    let sv: f64 = out.attn_v.iter().sum();
                    assert!((sv - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn prompt_gradients_match_finite_differences() {
        let (store, params, settings) = setup(4, 10);
        let mut rng = crate::params::rng_for(10, "t");
        let v = rand_unit_rows(&mut rng, 4, 4);
        let l = rand_unit_rows(&mut rng, 1, 4);

        let loss_with = |store: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let mut pv = ParamVars::new();
            let vv = g.constant(v.clone().into_dyn());
            let lv = g.constant(l.clone().into_dyn());
            let out =
                bilateral_prompt(&mut g, &mut pv, store, vv, lv, &params, &settings, false)
                    .unwrap();
            let sq_v = g.square(out.v_hat);
            let sq_l = g.square(out.l_hat);
            let sv = g.sum_all(sq_v);
            let sl = g.sum_all(sq_l);
            let total = g.add(sv, sl);
            g.scalar_value(total)
        };

        let mut g = Graph::new();
        let mut pv = ParamVars::new();
        let vv = g.constant(v.clone().into_dyn());
        let lv = g.constant(l.clone().into_dyn());
        let out =
            bilateral_prompt(&mut g, &mut pv, &store, vv, lv, &params, &settings, true).unwrap();
        let sq_v = g.square(out.v_hat);
        let sq_l = g.square(out.l_hat);
        let sv = g.sum_all(sq_v);
        let sl = g.sum_all(sq_l);
        let total = g.add(sv, sl);
        let bound: Vec<(String, Var)> = pv
            .trainable()
            .map(|(n, v)| (n.to_string(), v))
            .collect();
        let grads = g.backward(total);

        let step = 1e-5;
        for name in params.matrix_names() {
            let var = bound.iter().find(|(n, _)| *n == name).map(|(_, v)| *v).unwrap();
            let analytic = grads.wrt_or_zeros(var, store.get(&name).shape());
            let len = store.get(&name).len();
            for flat in (0..len).step_by(3) {
                let mut s_plus = store.clone();
                *s_plus.get_mut(&name).iter_mut().nth(flat).unwrap() += step;
                let mut s_minus = store.clone();
                *s_minus.get_mut(&name).iter_mut().nth(flat).unwrap() -= step;
                let fd = (loss_with(&s_plus) - loss_with(&s_minus)) / (2.0 * step);
                let a = *analytic.iter().nth(flat).unwrap();
                let err = (a - fd).abs();
                assert!(
                    err <= 1e-4 * a.abs().max(fd.abs()) + 1e-8,
                    "{name}[{flat}]: analytic {a} vs fd {fd}"
                );
            }
        }
    }
}

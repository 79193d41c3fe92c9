//! Text-to-image response maps, image-level score aggregation, and the
//! positive/negative classification loss.
//!
//! A response map holds the temperature-scaled inner products between every
//! spatial position and every query embedding. Scores aggregate each column
//! by `max + mean` (plus an injectable regularizer, zero by default) and the
//! classification loss is a numerically stable binary cross-entropy over the
//! one-positive label vector.

use ndarray::{Array1, Array2, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::PsiMode;
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Learnable log temperature is clamped from above; `exp(MAX_LOG_TEMP) = 100`.
pub const MAX_LOG_TEMP: f64 = 4.605170185988092;

/// Per-pixel responses of one image against `J` queries.
#[derive(Debug, Clone)]
pub struct ResponseMap {
    /// `(H*W, J)` responses, row-major over the spatial grid.
    pub values: Array2<f64>,
    pub height: usize,
    pub width: usize,
    /// Snapshot of the log temperature the map was computed with.
    pub log_temperature: f64,
}

impl ResponseMap {
    /// Single-query column as an `(H, W)` map.
    pub fn column_2d(&self, j: usize) -> Array2<f64> {
        let hw = self.height * self.width;
        let mut out = Array2::<f64>::zeros((self.height, self.width));
        for i in 0..hw {
            out[[i / self.width, i % self.width]] = self.values[[i, j]];
        }
        out
    }

    pub fn num_queries(&self) -> usize {
        self.values.ncols()
    }
}

/// One positive expression plus `N` cross-image negatives.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    pub positive: String,
    pub negatives: Vec<String>,
    /// Sampling fell back to replacement because the pool was too small.
    pub sampled_with_replacement: bool,
}

impl QueryBatch {
    pub fn new(positive: String, negatives: Vec<String>) -> Self {
        Self {
            positive,
            negatives,
            sampled_with_replacement: false,
        }
    }

    /// Label vector `z`: positive first, `1 + N` entries.
    pub fn labels(&self) -> Vec<f64> {
        let mut z = vec![0.0; 1 + self.negatives.len()];
        z[0] = 1.0;
        z
    }

    /// All queries, positive first.
    pub fn queries(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.positive.as_str()).chain(self.negatives.iter().map(|s| s.as_str()))
    }
}

/// Enforce the one-positive contract on a label vector.
pub fn validate_labels(z: &[f64]) -> Result<()> {
    let ones = z.iter().filter(|&&v| v == 1.0).count();
    let zeros = z.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != z.len() {
        return Err(Error::InvalidQueryBatch(format!(
            "label vector must contain exactly one 1 and zeros elsewhere, got {z:?}"
        )));
    }
    Ok(())
}

/// Temperature-scaled response map `R[i,j] = exp(t) * <v_hat_i, l_hat_j>`.
///
/// `v_hat` is `(HW, C_d)`; each `l_hat` is `(1, C_d)`; `log_temp` is a
/// single-element node, clamped at `ln(100)` from above.
pub fn response_map_var(
    g: &mut Graph,
    v_hat: Var,
    l_hats: &[Var],
    log_temp: Var,
) -> Result<Var> {
    let c_d = g.shape(v_hat)[1];
    for &l in l_hats {
        if g.shape(l) != [1, c_d] {
            return Err(Error::ShapeMismatch {
                context: "response_map channel dims",
                expected: format!("(1,{c_d})"),
                actual: format!("{:?}", g.shape(l)),
            });
        }
    }
    let l_all = if l_hats.len() == 1 {
        l_hats[0]
    } else {
        g.concat(0, l_hats)
    };
    let l_t = g.transpose2(l_all);
    let raw = g.matmul(v_hat, l_t); // (HW, J)
    let t0 = g.reshape(log_temp, &[]);
    let t = g.clamp(t0, f64::NEG_INFINITY, MAX_LOG_TEMP);
    let temp = g.exp(t);
    Ok(g.mul_s(raw, temp))
}

/// Image-level scores `y_j = max_i R[i,j] + mean_i R[i,j] + psi(R[.,j])`.
///
/// The regularizer slot is injectable; the default is the zero function.
pub fn aggregate_var(g: &mut Graph, r: Var, psi: Option<&dyn Fn(&mut Graph, Var) -> Var>) -> Var {
    let mx = g.max_axis(r, 0);
    let mn = g.mean_axis(r, 0);
    let base = g.add(mx, mn);
    match psi {
        Some(f) => {
            let extra = f(g, r);
            g.add(base, extra)
        }
        None => base,
    }
}

/// Stable binary cross-entropy over logits, averaged over the `1 + N`
/// queries:
/// `L = mean_j [ z_j softplus(-y_j) + (1 - z_j) softplus(y_j) ]`.
///
/// With `PsiMode::Focal` each term is scaled by a detached focal weight
/// (`(1-p)^gamma` for the positive, `p^gamma` for negatives) to down-weight
/// easy queries.
pub fn classification_loss_var(
    g: &mut Graph,
    y: Var,
    z: &[f64],
    psi: PsiMode,
    focal_gamma: f64,
) -> Result<Var> {
    let j = g.shape(y)[0];
    if j != z.len() {
        return Err(Error::ShapeMismatch {
            context: "classification_loss labels",
            expected: j.to_string(),
            actual: z.len().to_string(),
        });
    }
    let zv = g.constant(ndarray::ArrayD::from_shape_vec(IxDyn(&[j]), z.to_vec()).unwrap());
    let one_minus_z = g.constant(ndarray::ArrayD::from_shape_vec(
        IxDyn(&[j]),
        z.iter().map(|v| 1.0 - v).collect(),
    )
    .unwrap());
    let neg_y = g.neg(y);
    let sp_pos = g.softplus(neg_y); // -log sigmoid(y)
    let sp_neg = g.softplus(y); // -log (1 - sigmoid(y))
    let (pos_term, neg_term) = match psi {
        PsiMode::Zero => (g.mul(zv, sp_pos), g.mul(one_minus_z, sp_neg)),
        PsiMode::Focal => {
            let p = g.sigmoid(y);
            let p_d = g.detach(p);
            let neg_p = g.neg(p_d);
            let one_minus_p = g.add_const(neg_p, 1.0);
            let w_pos = powf_const(g, one_minus_p, focal_gamma);
            let w_neg = powf_const(g, p_d, focal_gamma);
            let zp = g.mul(zv, w_pos);
            let zn = g.mul(one_minus_z, w_neg);
            (g.mul(zp, sp_pos), g.mul(zn, sp_neg))
        }
    };
    let total = g.add(pos_term, neg_term);
    Ok(g.mean_all(total))
}


fn powf_const(g: &mut Graph, x: Var, p: f64) -> Var {
    if p == 2.0 {
        g.square(x)
    } else {
        let lx = g.ln(x);
        let sl = g.scale(lx, p);
        g.exp(sl)
    }
}

// ---- plain-array entry points -------------------------------------------------

/// Response map from concrete feature arrays.
pub fn response(
    v_hat: &Array2<f64>,
    l_hats: &[Array1<f64>],
    height: usize,
    width: usize,
    log_temperature: f64,
) -> Result<ResponseMap> {
    let c_d = v_hat.ncols();
    let mut g = Graph::new();
    let vv = g.constant(v_hat.clone().into_dyn());
    let mut lvars = Vec::with_capacity(l_hats.len());
    for l in l_hats {
        if l.len() != c_d {
            return Err(Error::ShapeMismatch {
                context: "response channel dims",
                expected: c_d.to_string(),
                actual: l.len().to_string(),
            });
        }
        let row = Array2::from_shape_vec((1, c_d), l.to_vec()).unwrap();
        lvars.push(g.constant(row.into_dyn()));
    }
    let t = g.constant(ndarray::ArrayD::from_elem(IxDyn(&[1]), log_temperature));
    let r = response_map_var(&mut g, vv, &lvars, t)?;
    let values = g
        .value(r)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("response 2-d");
    Ok(ResponseMap {
        values,
        height,
        width,
        log_temperature,
    })
}

/// Scores with the default zero regularizer.
pub fn aggregate(r: &ResponseMap) -> Vec<f64> {
    aggregate_with(r, |_col| 0.0)
}

/// Scores with an injectable column regularizer.
pub fn aggregate_with(r: &ResponseMap, psi: impl Fn(ndarray::ArrayView1<f64>) -> f64) -> Vec<f64> {
    let hw = r.values.nrows() as f64;
    r.values
        .columns()
        .into_iter()
        .map(|col| {
            let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean = col.sum() / hw;
            mx + mean + psi(col)
        })
        .collect()
}

/// Stable classification loss on concrete scores.
pub fn classification_loss(y: &[f64], z: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let yv = g.constant(ndarray::ArrayD::from_shape_vec(IxDyn(&[y.len()]), y.to_vec()).unwrap());
    let loss = classification_loss_var(&mut g, yv, z, PsiMode::Zero, 2.0)?;
    Ok(g.scalar_value(loss))
}

/// Draw `n` expressions annotated to other images, uniformly without
/// replacement; falls back to replacement (flagged) when the pool is small.
/// Returns `(record_idx, expression_idx)` pairs.
pub fn sample_negatives(
    dataset: &Dataset,
    anchor_image_id: &str,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<(usize, usize)>, bool)> {
    if dataset.image_count() < 2 {
        return Err(Error::Dataset(
            "negative sampling requires expressions from at least two images".into(),
        ));
    }
    let pool: Vec<(usize, usize)> = dataset
        .expression_refs()
        .into_iter()
        .filter(|(rec, _)| dataset.record(*rec).image_id != anchor_image_id)
        .collect();
    if pool.is_empty() {
        return Err(Error::Dataset(format!(
            "no expressions outside image {anchor_image_id}"
        )));
    }
    if n == 0 {
        return Ok((Vec::new(), false));
    }
    if pool.len() >= n {
        let idx = rand::seq::index::sample(rng, pool.len(), n);
        Ok((idx.iter().map(|i| pool[i]).collect(), false))
    } else {
        let picks = (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
        Ok((picks, true))
    }
}

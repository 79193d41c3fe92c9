//! Bilinear resampling with half-pixel centers.
//!
//! When the output size equals the input size the mapping is exactly the
//! identity. The four taps are combined in a fixed order
//! (top-left, top-right, bottom-left, bottom-right) so independent
//! re-implementations can reproduce results bit for bit.

use ndarray::Ix3;

use super::{Graph, Var};

/// One interpolation axis: low index, high index, and the fractional weight
/// of the high tap.
pub(crate) fn bilinear_taps(out_size: usize, in_size: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|o| {
            let s = (o as f64 + 0.5) * scale - 0.5;
            if s <= 0.0 {
                (0, 0, 0.0)
            } else if s >= (in_size - 1) as f64 {
                (in_size - 1, in_size - 1, 0.0)
            } else {
                let lo = s.floor() as usize;
                (lo, lo + 1, s - s.floor())
            }
        })
        .collect()
}

impl Graph {
    /// Resize `x: (c, h, w)` to `(c, oh, ow)` by bilinear interpolation.
    pub fn upsample_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = self.value_rc(x);
        let x3 = xv
            .view()
            .into_dimensionality::<Ix3>()
            .expect("upsample_bilinear input (c,h,w)");
        let (c, h, w) = x3.dim();
        let ys = bilinear_taps(oh, h);
        let xs = bilinear_taps(ow, w);

        let mut y = ndarray::Array3::<f64>::zeros((c, oh, ow));
        for ch in 0..c {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let w00 = (1.0 - fy) * (1.0 - fx);
                    let w01 = (1.0 - fy) * fx;
                    let w10 = fy * (1.0 - fx);
                    let w11 = fy * fx;
                    y[[ch, oy, ox]] = w00 * x3[[ch, y0, x0]]
                        + w01 * x3[[ch, y0, x1]]
                        + w10 * x3[[ch, y1, x0]]
                        + w11 * x3[[ch, y1, x1]];
                }
            }
        }

        let wants_x = self.wants(x);
        self.push_op(
            y.into_dyn(),
            vec![x],
            Box::new(move |g| {
                vec![wants_x.then(|| {
                    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                    let mut dx = ndarray::Array3::<f64>::zeros((c, h, w));
                    for ch in 0..c {
                        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                                let gv = g3[[ch, oy, ox]];
                                dx[[ch, y0, x0]] += (1.0 - fy) * (1.0 - fx) * gv;
                                dx[[ch, y0, x1]] += (1.0 - fy) * fx * gv;
                                dx[[ch, y1, x0]] += fy * (1.0 - fx) * gv;
                                dx[[ch, y1, x1]] += fy * fx * gv;
                            }
                        }
                    }
                    dx.into_dyn()
                })]
            }),
        )
    }
}

/// Plain (non-differentiable) bilinear resize of a 2-d map.
pub fn resize_bilinear_2d(x: &ndarray::Array2<f64>, oh: usize, ow: usize) -> ndarray::Array2<f64> {
    let (h, w) = x.dim();
    let ys = bilinear_taps(oh, h);
    let xs = bilinear_taps(ow, w);
    let mut y = ndarray::Array2::<f64>::zeros((oh, ow));
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            y[[oy, ox]] = w00 * x[[y0, x0]] + w01 * x[[y0, x1]] + w10 * x[[y1, x0]] + w11 * x[[y1, x1]];
        }
    }
    y
}

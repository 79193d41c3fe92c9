//! 2-d convolution through im2col so the inner product runs as one matrix
//! multiply.

use ndarray::{Array2, ArrayD, Ix1, Ix3, Ix4, IxDyn};

use super::{Graph, Var};

/// Output spatial size of a convolution: `(in + 2*pad - kernel) / stride + 1`.
pub fn conv2d_shape(in_size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (in_size + 2 * pad - kernel) / stride + 1
}

fn im2col(
    x: &ndarray::ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h2: usize,
    w2: usize,
) -> Array2<f64> {
    let (ci, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((ci * kh * kw, h2 * w2));
    for c in 0..ci {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                for oy in 0..h2 {
                    let sy = (oy * stride + i) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for ox in 0..w2 {
                        let sx = (ox * stride + j) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[[row, oy * w2 + ox]] = x[[c, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h2: usize,
    w2: usize,
) -> ArrayD<f64> {
    let mut dx = ndarray::Array3::<f64>::zeros((ci, h, w));
    for c in 0..ci {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                for oy in 0..h2 {
                    let sy = (oy * stride + i) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for ox in 0..w2 {
                        let sx = (ox * stride + j) as isize - pad as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dx[[c, sy as usize, sx as usize]] += dcols[[row, oy * w2 + ox]];
                    }
                }
            }
        }
    }
    dx.into_dyn()
}

impl Graph {
    /// Convolution of `x: (ci, h, w)` with `weight: (co, ci, kh, kw)` and
    /// `bias: (co,)`, producing `(co, h2, w2)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let (xv, wv, bv) = (self.value_rc(x), self.value_rc(weight), self.value_rc(bias));
        let x3 = xv.view().into_dimensionality::<Ix3>().expect("conv2d input (ci,h,w)");
        let w4 = wv.view().into_dimensionality::<Ix4>().expect("conv2d weight (co,ci,kh,kw)");
        let b1 = bv.view().into_dimensionality::<Ix1>().expect("conv2d bias (co,)");
        let (ci, h, w) = x3.dim();
        let (co, wci, kh, kw) = w4.dim();
        assert_eq!(ci, wci, "conv2d: channel mismatch");
        assert_eq!(co, b1.len(), "conv2d: bias length mismatch");
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d: kernel larger than input");
        let h2 = conv2d_shape(h, kh, stride, pad);
        let w2 = conv2d_shape(w, kw, stride, pad);

        let cols = im2col(&x3, kh, kw, stride, pad, h2, w2);
        let wmat = w4
            .to_shape((co, ci * kh * kw))
            .expect("conv2d weight reshape")
            .to_owned();
        let mut y2 = wmat.dot(&cols);
        for (mut row, &b) in y2.rows_mut().into_iter().zip(b1.iter()) {
            row += b;
        }
        let y = y2
            .into_shape_with_order((co, h2, w2))
            .expect("conv2d output reshape")
            .into_dyn();

        let cols = std::rc::Rc::new(cols);
        let (wx, ww, wb) = (self.wants(x), self.wants(weight), self.wants(bias));
        self.push_op(
            y,
            vec![x, weight, bias],
            Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let g2 = g3
                    .to_shape((co, h2 * w2))
                    .expect("conv2d grad reshape")
                    .to_owned();
                let dw = ww.then(|| {
                    let dwmat = g2.dot(&cols.t());
                    dwmat
                        .into_shape_with_order((co, ci, kh, kw))
                        .unwrap()
                        .into_dyn()
                });
                let db = wb.then(|| {
                    let v: Vec<f64> = g2.rows().into_iter().map(|r| r.sum()).collect();
                    ArrayD::from_shape_vec(IxDyn(&[co]), v).unwrap()
                });
                let dxv = wx.then(|| {
                    let w4 = wv.view().into_dimensionality::<Ix4>().unwrap();
                    let wmat = w4.to_shape((co, ci * kh * kw)).unwrap().to_owned();
                    let dcols = wmat.t().dot(&g2);
                    col2im(&dcols, ci, h, w, kh, kw, stride, pad, h2, w2)
                });
                vec![dxv, dw, db]
            }),
        )
    }
}

//! Core tensor operations: elementwise maps, reductions, linear algebra,
//! softmax, embedding lookup, and shape plumbing.

use ndarray::{concatenate, ArrayD, Axis, Dimension, Ix1, Ix2, IxDyn, Slice};

use super::{sigmoid_scalar, softplus_scalar, Graph, Var};

pub(crate) fn reshape_clone(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let v: Vec<f64> = a.iter().cloned().collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).expect("reshape: element count mismatch")
}

impl Graph {
    // ---- elementwise binary ----------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let y = &*av + &*bv;
        let (wa, wb) = (self.wants(a), self.wants(b));
        self.push_op(
            y,
            vec![a, b],
            Box::new(move |g| {
                vec![
                    wa.then(|| g.clone()),
                    wb.then(|| g.clone()),
                ]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
        let y = &*av - &*bv;
        let (wa, wb) = (self.wants(a), self.wants(b));
        self.push_op(
            y,
            vec![a, b],
            Box::new(move |g| vec![wa.then(|| g.clone()), wb.then(|| -g)]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let y = &*av * &*bv;
        let (wa, wb) = (self.wants(a), self.wants(b));
        self.push_op(
            y,
            vec![a, b],
            Box::new(move |g| {
                vec![
                    wa.then(|| g * &*bv),
                    wb.then(|| g * &*av),
                ]
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        assert_eq!(av.shape(), bv.shape(), "div: shape mismatch");
        let y = &*av / &*bv;
        let (wa, wb) = (self.wants(a), self.wants(b));
        self.push_op(
            y,
            vec![a, b],
            Box::new(move |g| {
                vec![
                    wa.then(|| g / &*bv),
                    wb.then(|| -(g * &*av) / &(&*bv * &*bv)),
                ]
            }),
        )
    }

    // ---- tensor (+|-|*|/) 0-d scalar var ---------------------------------

    pub fn add_s(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value_rc(x), self.value_rc(s));
        let c = sv.iter().next().copied().expect("add_s: empty scalar");
        let y = &*xv + c;
        let (wx, ws) = (self.wants(x), self.wants(s));
        self.push_op(
            y,
            vec![x, s],
            Box::new(move |g| {
                vec![
                    wx.then(|| g.clone()),
                    ws.then(|| ArrayD::from_elem(IxDyn(&[]), g.sum())),
                ]
            }),
        )
    }

    pub fn sub_s(&mut self, x: Var, s: Var) -> Var {
        let neg = self.neg(s);
        self.add_s(x, neg)
    }

    pub fn mul_s(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value_rc(x), self.value_rc(s));
        let c = sv.iter().next().copied().expect("mul_s: empty scalar");
        let y = &*xv * c;
        let (wx, ws) = (self.wants(x), self.wants(s));
        self.push_op(
            y,
            vec![x, s],
            Box::new(move |g| {
                vec![
                    wx.then(|| g * c),
                    ws.then(|| ArrayD::from_elem(IxDyn(&[]), (g * &*xv).sum())),
                ]
            }),
        )
    }

    pub fn div_s(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value_rc(x), self.value_rc(s));
        let c = sv.iter().next().copied().expect("div_s: empty scalar");
        let y = &*xv / c;
        let (wx, ws) = (self.wants(x), self.wants(s));
        self.push_op(
            y,
            vec![x, s],
            Box::new(move |g| {
                vec![
                    wx.then(|| g / c),
                    ws.then(|| ArrayD::from_elem(IxDyn(&[]), -(g * &*xv).sum() / (c * c))),
                ]
            }),
        )
    }

    // ---- elementwise unary -----------------------------------------------

    pub fn neg(&mut self, x: Var) -> Var {
        let xv = self.value_rc(x);
        let w = self.wants(x);
        self.push_op(-&*xv, vec![x], Box::new(move |g| vec![w.then(|| -g)]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value_rc(x);
        let w = self.wants(x);
        self.push_op(&*xv * c, vec![x], Box::new(move |g| vec![w.then(|| g * c)]))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value_rc(x);
        let w = self.wants(x);
        self.push_op(&*xv + c, vec![x], Box::new(move |g| vec![w.then(|| g.clone())]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let xv = self.value_rc(x);
        let y = xv.mapv(f64::exp);
        let yv = y.clone();
        let w = self.wants(x);
        self.push_op(y, vec![x], Box::new(move |g| vec![w.then(|| g * &yv)]))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let xv = self.value_rc(x);
        let y = xv.mapv(f64::ln);
        let w = self.wants(x);
        self.push_op(y, vec![x], Box::new(move |g| vec![w.then(|| g / &*xv)]))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let xv = self.value_rc(x);
        let y = xv.mapv(f64::sqrt);
        let yv = y.clone();
        let w = self.wants(x);
        self.push_op(
            y,
            vec![x],
            Box::new(move |g| vec![w.then(|| g * &yv.mapv(|v| 0.5 / v))]),
        )
    }

    pub fn square(&mut self, x: Var) -> Var {
        let xv = self.value_rc(x);
        let y = xv.mapv(|v| v * v);
        let w = self.wants(x);
        self.push_op(
            y,
            vec![x],
            Box::new(move |g| vec![w.then(|| g * &(&*xv * 2.0))]),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xv = self.value_rc(x);
        let y = xv.mapv(f64::tanh);
        let yv = y.clone();
        let w = self.wants(x);
        self.push_op(
            y,
            vec![x],
            Box::new(move |g| vec![w.then(|| g * &yv.mapv(|t| 1.0 - t * t))]),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value_rc(x);
        let y = xv.mapv(sigmoid_scalar);
        let yv = y.clone();
        let w = self.wants(x);
        self.push_op(
            y,
            vec![x],
            Box::new(move |g| vec![w.then(|| g * &yv.mapv(|s| s * (1.0 - s)))]),
        )
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let xv = self.value_rc(x);
        let y = xv.mapv(softplus_scalar);
        let w = self.wants(x);
        self.push_op(
            y,
            vec![x],
            Box::new(move |g| vec![w.then(|| g * &xv.mapv(sigmoid_scalar))]),
        )
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let xv = self.value_rc(x);
        let y = xv.mapv(|v| 1.0 / v);
        let w = self.wants(x);
        self.push_op(
            y,
            vec![x],
            Box::new(move |g| vec![w.then(|| -(g / &(&*xv * &*xv)))]),
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes where the input is inside the
    /// closed interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let xv = self.value_rc(x);
        let y = xv.mapv(|v| v.clamp(lo, hi));
        let w = self.wants(x);
        self.push_op(
            y,
            vec![x],
            Box::new(move |g| {
                vec![w.then(|| {
                    let mask = xv.mapv(|v| if (lo..=hi).contains(&v) { 1.0 } else { 0.0 });
                    g * &mask
                })]
            }),
        )
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.clamp(x, lo, f64::INFINITY)
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let xv = self.value_rc(x);
        let y = ArrayD::from_elem(IxDyn(&[]), xv.sum());
        let w = self.wants(x);
        self.push_op(
            y,
            vec![x],
            Box::new(move |g| {
                let gs = g.iter().next().copied().unwrap_or(0.0);
                vec![w.then(|| ArrayD::from_elem(xv.raw_dim(), gs))]
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, dropping it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let xv = self.value_rc(x);
        let y = xv.sum_axis(Axis(axis));
        let w = self.wants(x);
        self.push_op(
            y.into_dyn(),
            vec![x],
            Box::new(move |g| {
                vec![w.then(|| {
                    let gb = g.clone().insert_axis(Axis(axis));
                    gb.broadcast(xv.raw_dim()).expect("sum_axis backward").to_owned()
                })]
            }),
        )
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let n = self.value(x).shape()[axis] as f64;
        let s = self.sum_axis(x, axis);
        self.scale(s, 1.0 / n)
    }

    /// Max along `axis`, dropping it. Ties route the gradient to the lowest
    /// index along the axis.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Var {
        let xv = self.value_rc(x);
        let mut arg = Vec::new();
        let y = xv.map_axis(Axis(axis), |lane| {
            let mut best = 0usize;
            let mut bv = f64::NEG_INFINITY;
            for (i, &v) in lane.iter().enumerate() {
                if v > bv {
                    bv = v;
                    best = i;
                }
            }
            arg.push(best);
            bv
        });
        let argmax =
            ArrayD::from_shape_vec(y.raw_dim(), arg).expect("max_axis argmax shape");
        let w = self.wants(x);
        self.push_op(
            y.into_dyn(),
            vec![x],
            Box::new(move |g| {
                vec![w.then(|| {
                    let mut dx = ArrayD::zeros(xv.raw_dim());
                    for (idx, &am) in argmax.indexed_iter() {
                        let mut full = idx.slice().to_vec();
                        full.insert(axis, am);
                        dx[IxDyn(&full)] = g[&idx];
                    }
                    dx
                })]
            }),
        )
    }

    /// Global max as a 0-d value; ties pick the lowest row-major index.
    pub fn max_all(&mut self, x: Var) -> Var {
        self.extremum_all(x, true)
    }

    /// Global min as a 0-d value; ties pick the lowest row-major index.
    pub fn min_all(&mut self, x: Var) -> Var {
        self.extremum_all(x, false)
    }

    fn extremum_all(&mut self, x: Var, max: bool) -> Var {
        let xv = self.value_rc(x);
        let mut best = if max { f64::NEG_INFINITY } else { f64::INFINITY };
        let mut arg = 0usize;
        for (i, &v) in xv.iter().enumerate() {
            if (max && v > best) || (!max && v < best) {
                best = v;
                arg = i;
            }
        }
        let w = self.wants(x);
        self.push_op(
            ArrayD::from_elem(IxDyn(&[]), best),
            vec![x],
            Box::new(move |g| {
                let gs = g.iter().next().copied().unwrap_or(0.0);
                vec![w.then(|| {
                    let mut dx = ArrayD::zeros(xv.raw_dim());
                    *dx.iter_mut().nth(arg).expect("extremum index") = gs;
                    dx
                })]
            }),
        )
    }

    // ---- softmax -----------------------------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Var {
        let xv = self.value_rc(x);
        let mut y = (*xv).clone();
        for mut lane in y.lanes_mut(Axis(axis)) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in lane.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in lane.iter_mut() {
                *v /= z;
            }
        }
        let yv = y.clone();
        let w = self.wants(x);
        self.push_op(
            y,
            vec![x],
            Box::new(move |g| {
                vec![w.then(|| {
                    let gy = g * &yv;
                    let s = gy.sum_axis(Axis(axis)).insert_axis(Axis(axis));
                    let sb = s.broadcast(yv.raw_dim()).expect("softmax backward").to_owned();
                    &yv * &(g - &sb)
                })]
            }),
        )
    }

    // ---- linear algebra ----------------------------------------------------

    /// 2-d matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value_rc(a), self.value_rc(b));
        let a2 = av.view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-d");
        let b2 = bv.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-d");
        assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dimension mismatch");
        let y = a2.dot(&b2);
        let (wa, wb) = (self.wants(a), self.wants(b));
        self.push_op(
            y.into_dyn(),
            vec![a, b],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("matmul grad 2-d");
                let a2 = av.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
                vec![
                    wa.then(|| g2.dot(&b2.t()).into_dyn()),
                    wb.then(|| a2.t().dot(&g2).into_dyn()),
                ]
            }),
        )
    }

    /// Transpose of a 2-d tensor.
    pub fn transpose2(&mut self, x: Var) -> Var {
        let xv = self.value_rc(x);
        let x2 = xv.view().into_dimensionality::<Ix2>().expect("transpose2 needs 2-d");
        let y = x2.t().to_owned();
        let w = self.wants(x);
        self.push_op(
            y.into_dyn(),
            vec![x],
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                vec![w.then(|| g2.t().to_owned().into_dyn())]
            }),
        )
    }

    // ---- shape plumbing ------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value_rc(x);
        let y = reshape_clone(&xv, shape);
        let in_shape: Vec<usize> = xv.shape().to_vec();
        let w = self.wants(x);
        self.push_op(
            y,
            vec![x],
            Box::new(move |g| vec![w.then(|| reshape_clone(g, &in_shape))]),
        )
    }

    /// Concatenate along `axis`.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let views: Vec<_> = parts.iter().map(|p| self.value_rc(*p)).collect();
        let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
        let y = concatenate(Axis(axis), &view_refs).expect("concat: incompatible shapes");
        let sizes: Vec<usize> = views.iter().map(|v| v.shape()[axis]).collect();
        let wants: Vec<bool> = parts.iter().map(|p| self.wants(*p)).collect();
        self.push_op(
            y,
            parts.to_vec(),
            Box::new(move |g| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for (sz, w) in sizes.iter().zip(&wants) {
                    let piece = g
                        .slice_axis(Axis(axis), Slice::from(start..start + sz))
                        .to_owned();
                    out.push(w.then_some(piece));
                    start += sz;
                }
                out
            }),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xv = self.value_rc(x);
        let y = xv
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let w = self.wants(x);
        self.push_op(
            y,
            vec![x],
            Box::new(move |g| {
                vec![w.then(|| {
                    let mut dx = ArrayD::zeros(xv.raw_dim());
                    dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                        .assign(g);
                    dx
                })]
            }),
        )
    }

    /// Gather `J` 0-d vars into a 1-d vector of length `J`.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_scalars of zero vars");
        let vals: Vec<f64> = parts.iter().map(|p| self.scalar_value(*p)).collect();
        let wants: Vec<bool> = parts.iter().map(|p| self.wants(*p)).collect();
        let y = ArrayD::from_shape_vec(IxDyn(&[vals.len()]), vals).unwrap();
        self.push_op(
            y,
            parts.to_vec(),
            Box::new(move |g| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                wants
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w.then(|| ArrayD::from_elem(IxDyn(&[]), g1[i])))
                    .collect()
            }),
        )
    }

    // ---- lookups and broadcasts -----------------------------------------------

    /// Row lookup `table[ids] -> [len(ids), e]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value_rc(table);
        let t2 = tv.view().into_dimensionality::<Ix2>().expect("embedding table 2-d");
        let e = t2.ncols();
        let mut y = ndarray::Array2::<f64>::zeros((ids.len(), e));
        for (r, &id) in ids.iter().enumerate() {
            y.row_mut(r).assign(&t2.row(id));
        }
        let ids: Vec<usize> = ids.to_vec();
        let w = self.wants(table);
        self.push_op(
            y.into_dyn(),
            vec![table],
            Box::new(move |g| {
                vec![w.then(|| {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let t2 = tv.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dt = ndarray::Array2::<f64>::zeros(t2.raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id);
                        row += &g2.row(r);
                    }
                    dt.into_dyn()
                })]
            }),
        )
    }

    /// Multiply `x` by `m` where `m.shape()[0] == 1` and the remaining axes
    /// match; `m` broadcasts along axis 0.
    pub fn mul_bcast0(&mut self, x: Var, m: Var) -> Var {
        let (xv, mv) = (self.value_rc(x), self.value_rc(m));
        assert_eq!(mv.shape()[0], 1, "mul_bcast0: mask axis 0 must be 1");
        assert_eq!(&xv.shape()[1..], &mv.shape()[1..], "mul_bcast0: trailing shape mismatch");
        let mb = mv.broadcast(xv.raw_dim()).expect("mul_bcast0 broadcast").to_owned();
        let y = &*xv * &mb;
        let (wx, wm) = (self.wants(x), self.wants(m));
        self.push_op(
            y,
            vec![x, m],
            Box::new(move |g| {
                vec![
                    wx.then(|| {
                        let mb = mv.broadcast(xv.raw_dim()).unwrap();
                        g * &mb.to_owned()
                    }),
                    wm.then(|| {
                        let gx = g * &*xv;
                        gx.sum_axis(Axis(0)).insert_axis(Axis(0))
                    }),
                ]
            }),
        )
    }

    /// Multiply a 2-d `x: [m, n]` by a column `col: [m, 1]` broadcast along
    /// axis 1 (row-wise scaling).
    pub fn mul_bcast1(&mut self, x: Var, col: Var) -> Var {
        let (xv, cv) = (self.value_rc(x), self.value_rc(col));
        assert_eq!(xv.ndim(), 2, "mul_bcast1: x must be 2-d");
        assert_eq!(cv.shape(), &[xv.shape()[0], 1], "mul_bcast1: col must be [m,1]");
        let cb = cv.broadcast(xv.raw_dim()).expect("mul_bcast1 broadcast").to_owned();
        let y = &*xv * &cb;
        let (wx, wc) = (self.wants(x), self.wants(col));
        self.push_op(
            y,
            vec![x, col],
            Box::new(move |g| {
                vec![
                    wx.then(|| {
                        let cb = cv.broadcast(xv.raw_dim()).unwrap().to_owned();
                        g * &cb
                    }),
                    wc.then(|| {
                        let gx = g * &*xv;
                        gx.sum_axis(Axis(1)).insert_axis(Axis(1))
                    }),
                ]
            }),
        )
    }

    /// Stable two-class cross-entropy averaged over pixels.
    ///
    /// `logits` has shape `(2, h, w)`; `target` holds class indices in
    /// `{0, 1}` with shape `(h, w)`.
    pub fn ce_two_class(&mut self, logits: Var, target: &ndarray::Array2<u8>) -> Var {
        let lv = self.value_rc(logits);
        let shape = lv.shape().to_vec();
        assert_eq!(shape.len(), 3, "ce_two_class: logits must be (2,h,w)");
        assert_eq!(shape[0], 2, "ce_two_class: two classes expected");
        assert_eq!(
            (shape[1], shape[2]),
            target.dim(),
            "ce_two_class: target shape mismatch"
        );
        let (h, w_) = (shape[1], shape[2]);
        let n = (h * w_) as f64;
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w_ {
                let l0 = lv[[0, y, x]];
                let l1 = lv[[1, y, x]];
                let t = target[[y, x]];
                let lt = if t == 1 { l1 } else { l0 };
                let m = l0.max(l1);
                // log-sum-exp minus the target logit
                total += m + ((l0 - m).exp() + (l1 - m).exp()).ln() - lt;
            }
        }
        let tgt = target.clone();
        let w = self.wants(logits);
        self.push_op(
            ArrayD::from_elem(IxDyn(&[]), total / n),
            vec![logits],
            Box::new(move |g| {
                let gs = g.iter().next().copied().unwrap_or(0.0);
                vec![w.then(|| {
                    let mut dx = ArrayD::zeros(lv.raw_dim());
                    for y in 0..h {
                        for x in 0..w_ {
                            let l0 = lv[[0, y, x]];
                            let l1 = lv[[1, y, x]];
                            // softmax over the two classes
                            let p1 = sigmoid_scalar(l1 - l0);
                            let p0 = 1.0 - p1;
                            let t = tgt[[y, x]];
                            dx[[0, y, x]] = gs * (p0 - if t == 0 { 1.0 } else { 0.0 }) / n;
                            dx[[1, y, x]] = gs * (p1 - if t == 1 { 1.0 } else { 0.0 }) / n;
                        }
                    }
                    dx
                })]
            }),
        )
    }
}

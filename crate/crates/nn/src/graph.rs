//! Reverse-mode autodiff on a flat eager tape.
//!
//! Every operator computes its value immediately and records a backward
//! closure. `backward` walks the tape in reverse creation order, so the
//! whole thing is a few hundred lines with no graph surgery. Values are
//! dynamic-rank `ndarray` arrays; convolutional activations use the
//! `(batch, channel, height, width)` layout throughout.

use ndarray::{s, Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use std::sync::Arc;
use tomoforge_core::radon::Projector;
use tomoforge_core::Real;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&[ArrayD<T>], &ArrayD<T>) -> Vec<Option<ArrayD<T>>>>;

struct BackEntry<T> {
    parents: Vec<Var>,
    run: BackFn<T>,
}

/// Eager autodiff tape. Build one per training step, run `backward` once,
/// read gradients off, drop it.
pub struct Graph<T: Real> {
    values: Vec<ArrayD<T>>,
    backs: Vec<Option<BackEntry<T>>>,
    needs: Vec<bool>,
    grads: Vec<Option<ArrayD<T>>>,
    checked: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { values: Vec::new(), backs: Vec::new(), needs: Vec::new(), grads: Vec::new(), checked: false }
    }

    /// A graph that panics the moment any op produces a non-finite value.
    /// All tests run in this mode.
    pub fn checked() -> Self {
        let mut g = Graph::new();
        g.checked = true;
        g
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.values[v.0]
    }

    /// Scalar value of a rank-0 node.
    pub fn scalar(&self, v: Var) -> T {
        let a = &self.values[v.0];
        assert_eq!(a.len(), 1, "scalar() on a non-scalar node");
        *a.iter().next().unwrap()
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: ArrayD<T>, back: Option<BackEntry<T>>) -> Var {
        if self.checked {
            assert!(
                value.iter().all(|v| v.is_finite()),
                "non-finite value produced at node {}",
                self.values.len()
            );
        }
        let needs = match &back {
            Some(b) => b.parents.iter().any(|p| self.needs[p.0]),
            None => false,
        };
        self.values.push(value);
        self.backs.push(if needs { back } else { None });
        self.needs.push(needs);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, None)
    }

    /// Trainable leaf; `grad` is defined for it after `backward`.
    pub fn param(&mut self, value: ArrayD<T>) -> Var {
        let v = self.push(value, None);
        self.needs[v.0] = true;
        v
    }

    /// Whether gradients will flow into `v`.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Reverse pass from a scalar loss. Gradients accumulate over all paths;
    /// earlier gradients on the tape are cleared first.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.values[loss.0].len(), 1, "backward from a non-scalar loss");
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(ArrayD::ones(self.values[loss.0].raw_dim()));
        for id in (0..=loss.0).rev() {
            let Some(up) = self.grads[id].take() else { continue };
            if let Some(entry) = &self.backs[id] {
                let contributions = (entry.run)(&self.values, &up);
                debug_assert_eq!(contributions.len(), entry.parents.len());
                for (p, c) in entry.parents.iter().zip(contributions) {
                    let Some(c) = c else { continue };
                    if !self.needs[p.0] {
                        continue;
                    }
                    if self.checked {
                        assert!(
                            c.iter().all(|v| v.is_finite()),
                            "non-finite gradient flowing into node {}",
                            p.0
                        );
                    }
                    match &mut self.grads[p.0] {
                        Some(acc) => *acc += &c,
                        slot => *slot = Some(c),
                    }
                }
            }
            // Keep leaf gradients; interior ones were consumed by take().
            if self.backs[id].is_none() && self.needs[id] {
                self.grads[id] = Some(up);
            }
        }
    }

    // -- elementwise arithmetic ---------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let value = &self.values[a.0] + &self.values[b.0];
        self.push(
            value,
            Some(BackEntry {
                parents: vec![a, b],
                run: Box::new(|_, up| vec![Some(up.clone()), Some(up.clone())]),
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let value = &self.values[a.0] - &self.values[b.0];
        self.push(
            value,
            Some(BackEntry {
                parents: vec![a, b],
                run: Box::new(|_, up| vec![Some(up.clone()), Some(-up.clone())]),
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let value = &self.values[a.0] * &self.values[b.0];
        self.push(
            value,
            Some(BackEntry {
                parents: vec![a, b],
                run: Box::new(move |vals, up| {
                    vec![Some(up * &vals[b.0]), Some(up * &vals[a.0])]
                }),
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let value = &self.values[a.0] / &self.values[b.0];
        self.push(
            value,
            Some(BackEntry {
                parents: vec![a, b],
                run: Box::new(move |vals, up| {
                    let denom = &vals[b.0] * &vals[b.0];
                    let db = -(up * &vals[a.0]) / &denom;
                    vec![Some(up / &vals[b.0]), Some(db)]
                }),
            }),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.values[a.0].mapv(|v| v + c);
        self.push(
            value,
            Some(BackEntry { parents: vec![a], run: Box::new(|_, up| vec![Some(up.clone())]) }),
        )
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.values[a.0].mapv(|v| v * c);
        self.push(
            value,
            Some(BackEntry {
                parents: vec![a],
                run: Box::new(move |_, up| vec![Some(up.mapv(|g| g * c))]),
            }),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(|v| v.exp());
        let out_id = self.values.len();
        self.push(
            value,
            Some(BackEntry {
                parents: vec![a],
                run: Box::new(move |vals, up| vec![Some(up * &vals[out_id])]),
            }),
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(|v| v.ln());
        self.push(
            value,
            Some(BackEntry {
                parents: vec![a],
                run: Box::new(move |vals, up| vec![Some(up / &vals[a.0])]),
            }),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(|v| v.abs());
        self.push(
            value,
            Some(BackEntry {
                parents: vec![a],
                run: Box::new(move |vals, up| {
                    let sign = vals[a.0].mapv(|v| {
                        if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    });
                    vec![Some(up * &sign)]
                }),
            }),
        )
    }

    /// max(x, c) elementwise; the gradient passes only where x > c.
    pub fn clamp_min(&mut self, a: Var, c: T) -> Var {
        let value = self.values[a.0].mapv(|v| v.max(c));
        self.push(
            value,
            Some(BackEntry {
                parents: vec![a],
                run: Box::new(move |vals, up| {
                    let mask = vals[a.0].mapv(|v| if v > c { T::one() } else { T::zero() });
                    vec![Some(up * &mask)]
                }),
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        let out_id = self.values.len();
        self.push(
            value,
            Some(BackEntry {
                parents: vec![a],
                run: Box::new(move |vals, up| {
                    let y = &vals[out_id];
                    let dy = y.mapv(|v| v * (T::one() - v));
                    vec![Some(up * &dy)]
                }),
            }),
        )
    }

    /// Per-channel parametric ReLU. `alpha` has shape (C,), `x` has channel
    /// axis 1 and any rank >= 2.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Var {
        let xs = self.values[x.0].clone();
        let al = &self.values[alpha.0];
        assert_eq!(al.ndim(), 1);
        assert_eq!(al.shape()[0], xs.shape()[1], "alpha per channel");
        let mut value = xs.clone();
        for (mut lane, &a) in value.axis_iter_mut(Axis(1)).zip(al.iter()) {
            lane.mapv_inplace(|v| if v >= T::zero() { v } else { a * v });
        }
        self.push(
            value,
            Some(BackEntry {
                parents: vec![x, alpha],
                run: Box::new(move |vals, up| {
                    // dx = up where x >= 0 else up * alpha_c;
                    // dalpha_c = sum(up * x over entries with x < 0).
                    let xv = &vals[x.0];
                    let av = &vals[alpha.0];
                    let mut dx = up.clone();
                    let c = xv.shape()[1];
                    let mut dalpha = Array1::<T>::zeros(c);
                    for ch in 0..c {
                        let a = av[ch];
                        let xs = xv.index_axis(Axis(1), ch);
                        let us = up.index_axis(Axis(1), ch);
                        let mut ds = dx.index_axis_mut(Axis(1), ch);
                        let mut acc = T::zero();
                        ndarray::Zip::from(&mut ds).and(&xs).and(&us).for_each(|d, &xe, &ue| {
                            if xe >= T::zero() {
                                *d = ue;
                            } else {
                                *d = ue * a;
                                acc += ue * xe;
                            }
                        });
                        dalpha[ch] = acc;
                    }
                    vec![Some(dx), Some(dalpha.into_dyn())]
                }),
            }),
        )
    }

    // -- reductions ----------------------------------------------------------

    /// Sum of all entries, as a rank-0 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: T = self.values[a.0].iter().cloned().sum();
        let shape = self.values[a.0].raw_dim();
        let value = ArrayD::from_elem(IxDyn(&[]), total);
        self.push(
            value,
            Some(BackEntry {
                parents: vec![a],
                run: Box::new(move |_, up| {
                    let g = *up.iter().next().unwrap();
                    vec![Some(ArrayD::from_elem(shape.clone(), g))]
                }),
            }),
        )
    }

    /// Mean of all entries, as a rank-0 node.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.values[a.0].len() as f64);
        let s = self.sum(a);
        self.mul_scalar(s, T::one() / n)
    }

    /// Inner product with a constant array, as a rank-0 node.
    pub fn dot_const(&mut self, a: Var, weights: ArrayD<T>) -> Var {
        assert_eq!(self.values[a.0].shape(), weights.shape());
        let total: T =
            self.values[a.0].iter().zip(weights.iter()).map(|(&x, &w)| x * w).sum();
        let value = ArrayD::from_elem(IxDyn(&[]), total);
        self.push(
            value,
            Some(BackEntry {
                parents: vec![a],
                run: Box::new(move |_, up| {
                    let g = *up.iter().next().unwrap();
                    vec![Some(weights.mapv(|w| w * g))]
                }),
            }),
        )
    }

    /// Divides a tensor by a rank-0 scalar node, with gradient to both.
    pub fn div_by_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.values[s.0].len(), 1);
        let sv = *self.values[s.0].iter().next().unwrap();
        let value = self.values[a.0].mapv(|v| v / sv);
        self.push(
            value,
            Some(BackEntry {
                parents: vec![a, s],
                run: Box::new(move |vals, up| {
                    let sv = *vals[s.0].iter().next().unwrap();
                    let da = up.mapv(|g| g / sv);
                    let ds: T = up
                        .iter()
                        .zip(vals[a.0].iter())
                        .map(|(&g, &x)| -g * x / (sv * sv))
                        .sum();
                    vec![Some(da), Some(ArrayD::from_elem(IxDyn(&[]), ds))]
                }),
            }),
        )
    }

    // -- shape surgery -------------------------------------------------------

    /// Concatenation along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.values[v.0].view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let sizes: Vec<usize> = parts.iter().map(|v| self.values[v.0].shape()[axis]).collect();
        self.push(
            value,
            Some(BackEntry {
                parents: parts.to_vec(),
                run: Box::new(move |_, up| {
                    let mut out = Vec::with_capacity(sizes.len());
                    let mut start = 0;
                    for &sz in &sizes {
                        let sl = up
                            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + sz))
                            .to_owned();
                        out.push(Some(sl));
                        start += sz;
                    }
                    out
                }),
            }),
        )
    }

    /// Splits along `axis` at `at`, returning the two halves.
    pub fn split2(&mut self, a: Var, axis: usize, at: usize) -> (Var, Var) {
        let total = self.values[a.0].shape()[axis];
        assert!(at > 0 && at < total, "split point inside the axis");
        let make = |g: &mut Self, lo: usize, hi: usize| -> Var {
            let value =
                g.values[a.0].slice_axis(Axis(axis), ndarray::Slice::from(lo..hi)).to_owned();
            let shape_src = g.values[a.0].raw_dim();
            g.push(
                value,
                Some(BackEntry {
                    parents: vec![a],
                    run: Box::new(move |_, up| {
                        let mut full = ArrayD::<T>::zeros(shape_src.clone());
                        full.slice_axis_mut(Axis(axis), ndarray::Slice::from(lo..hi))
                            .assign(up);
                        vec![Some(full)]
                    }),
                }),
            )
        };
        let first = make(self, 0, at);
        let second = make(self, at, total);
        (first, second)
    }

    // -- dense and convolutional layers ---------------------------------------

    /// Fully connected layer: `x (B, In) . w (Out, In)^T + b (Out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = as2(&self.values[x.0]);
        let wv = as2(&self.values[w.0]);
        let bv = self.values[b.0].clone();
        assert_eq!(xv.shape()[1], wv.shape()[1]);
        assert_eq!(bv.len(), wv.shape()[0]);
        let mut out = xv.dot(&wv.t());
        for mut row in out.rows_mut() {
            for (o, &bb) in row.iter_mut().zip(bv.iter()) {
                *o += bb;
            }
        }
        self.push(
            out.into_dyn(),
            Some(BackEntry {
                parents: vec![x, w, b],
                run: Box::new(move |vals, up| {
                    let g = as2(up);
                    let xv = as2(&vals[x.0]);
                    let wv = as2(&vals[w.0]);
                    let dx = g.dot(&wv);
                    let dw = g.t().dot(&xv);
                    let db = g.sum_axis(Axis(0));
                    vec![Some(dx.into_dyn()), Some(dw.into_dyn()), Some(db.into_dyn())]
                }),
            }),
        )
    }

    /// 2-D convolution, NCHW layout, odd square kernels, zero "same"
    /// padding, stride 1 or 2. `w (Cout, Cin, k, k)`, `b (Cout)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        assert!(stride == 1 || stride == 2);
        let xv = as4(&self.values[x.0]);
        let wv = as4(&self.values[w.0]);
        let bv = self.values[b.0].clone();
        let (batch, cin, h, wdt) = xv.dim();
        let (cout, cin_w, kh, kw) = wv.dim();
        assert_eq!(cin, cin_w, "conv input channels");
        assert_eq!(kh, kw, "square kernels");
        assert_eq!(kh % 2, 1, "odd kernels");
        assert_eq!(bv.len(), cout);
        if stride == 2 {
            assert!(h % 2 == 0 && wdt % 2 == 0, "stride-2 conv needs even input");
        }
        let (oh, ow) = (h.div_ceil(stride), wdt.div_ceil(stride));
        let pad = kh / 2;
        let wmat = flatten_filter(&wv.to_owned());
        let mut out = Array4::<T>::zeros((batch, cout, oh, ow));
        let items: Vec<Array2<T>> = maybe_par_map(batch, |bi| {
            let cols = im2col(&xv.index_axis(Axis(0), bi).to_owned(), kh, pad, stride, oh, ow);
            wmat.dot(&cols)
        });
        for (bi, y) in items.into_iter().enumerate() {
            let mut dst = out.index_axis_mut(Axis(0), bi);
            for c in 0..cout {
                let bias = bv[c];
                let src = y.row(c);
                let mut plane = dst.index_axis_mut(Axis(0), c);
                for (p, &v) in plane.iter_mut().zip(src.iter()) {
                    *p = v + bias;
                }
            }
        }
        let need_dx = self.needs[x.0];
        self.push(
            out.into_dyn(),
            Some(BackEntry {
                parents: vec![x, w, b],
                run: Box::new(move |vals, up| {
                    let g = as4(up).to_owned();
                    let xv = as4(&vals[x.0]).to_owned();
                    let wv = as4(&vals[w.0]).to_owned();
                    let (batch, _cin, h, wdt) = xv.dim();
                    let (cout, cin, kh, _) = wv.dim();
                    let (oh, ow) = (g.dim().2, g.dim().3);
                    let pad = kh / 2;
                    let wmat = flatten_filter(&wv);
                    // dW accumulates over the batch in index order so the
                    // reduction is identical at any thread count.
                    let partials: Vec<Array2<T>> = maybe_par_map(batch, |bi| {
                        let cols = im2col(
                            &xv.index_axis(Axis(0), bi).to_owned(),
                            kh,
                            pad,
                            stride,
                            oh,
                            ow,
                        );
                        let gmat = plane_mat(&g, bi, cout, oh * ow);
                        gmat.dot(&cols.t())
                    });
                    let mut dw_mat = Array2::<T>::zeros((cout, cin * kh * kh));
                    for p in partials {
                        dw_mat += &p;
                    }
                    let dw = dw_mat
                        .into_shape_with_order((cout, cin, kh, kh))
                        .expect("filter shape");
                    let mut db = Array1::<T>::zeros(cout);
                    for c in 0..cout {
                        db[c] = g.index_axis(Axis(1), c).iter().cloned().sum();
                    }
                    let dx = if need_dx {
                        let planes: Vec<ndarray::Array3<T>> = maybe_par_map(batch, |bi| {
                            let gmat = plane_mat(&g, bi, cout, oh * ow);
                            let cols_grad = wmat.t().dot(&gmat);
                            col2im(&cols_grad, cin, h, wdt, kh, pad, stride, oh, ow)
                        });
                        let mut dx = Array4::<T>::zeros(xv.dim());
                        for (bi, p) in planes.into_iter().enumerate() {
                            dx.index_axis_mut(Axis(0), bi).assign(&p);
                        }
                        Some(dx.into_dyn())
                    } else {
                        None
                    };
                    vec![dx, Some(dw.into_dyn()), Some(db.into_dyn())]
                }),
            }),
        )
    }

    /// Double the spatial resolution by bilinear interpolation (pixel-area
    /// convention: output pixel o samples input at (o + 0.5)/2 - 0.5, edges
    /// clamped).
    pub fn bilinear_upsample(&mut self, x: Var) -> Var {
        let xv = as4(&self.values[x.0]).to_owned();
        let (b, c, h, w) = xv.dim();
        let mut out = Array4::<T>::zeros((b, c, 2 * h, 2 * w));
        let (wts_h, wts_w) = (up2_weights(h), up2_weights(w));
        for bi in 0..b {
            for ci in 0..c {
                let src = xv.index_axis(Axis(0), bi);
                let src = src.index_axis(Axis(0), ci);
                let mut dst = out.index_axis_mut(Axis(0), bi);
                let mut dst = dst.index_axis_mut(Axis(0), ci);
                for oi in 0..2 * h {
                    let (i0, i1, fi) = wts_h[oi];
                    for oj in 0..2 * w {
                        let (j0, j1, fj) = wts_w[oj];
                        let one = T::one();
                        dst[[oi, oj]] = src[[i0, j0]] * (one - fi) * (one - fj)
                            + src[[i0, j1]] * (one - fi) * fj
                            + src[[i1, j0]] * fi * (one - fj)
                            + src[[i1, j1]] * fi * fj;
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(BackEntry {
                parents: vec![x],
                run: Box::new(move |_, up| {
                    let g = as4(up);
                    let (b, c, oh, ow) = g.dim();
                    let (h, w) = (oh / 2, ow / 2);
                    let (wts_h, wts_w) = (up2_weights(h), up2_weights(w));
                    let mut dx = Array4::<T>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            let gp = g.index_axis(Axis(0), bi);
                            let gp = gp.index_axis(Axis(0), ci);
                            let mut dp = dx.index_axis_mut(Axis(0), bi);
                            let mut dp = dp.index_axis_mut(Axis(0), ci);
                            for oi in 0..oh {
                                let (i0, i1, fi) = wts_h[oi];
                                for oj in 0..ow {
                                    let (j0, j1, fj) = wts_w[oj];
                                    let gv = gp[[oi, oj]];
                                    let one = T::one();
                                    dp[[i0, j0]] += gv * (one - fi) * (one - fj);
                                    dp[[i0, j1]] += gv * (one - fi) * fj;
                                    dp[[i1, j0]] += gv * fi * (one - fj);
                                    dp[[i1, j1]] += gv * fi * fj;
                                }
                            }
                        }
                    }
                    vec![Some(dx.into_dyn())]
                }),
            }),
        )
    }

    /// Global average pool: (B, C, H, W) -> (B, C).
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = as4(&self.values[x.0]);
        let (b, c, h, w) = xv.dim();
        let inv = T::one() / T::from_f64((h * w) as f64);
        let mut out = Array2::<T>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                let p = xv.index_axis(Axis(0), bi);
                out[[bi, ci]] = p.index_axis(Axis(0), ci).iter().cloned().sum::<T>() * inv;
            }
        }
        self.push(
            out.into_dyn(),
            Some(BackEntry {
                parents: vec![x],
                run: Box::new(move |_, up| {
                    let g = as2(up);
                    let mut dx = Array4::<T>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for ci in 0..c {
                            let gv = g[[bi, ci]] * inv;
                            let mut dp = dx.index_axis_mut(Axis(0), bi);
                            dp.index_axis_mut(Axis(0), ci).fill(gv);
                        }
                    }
                    vec![Some(dx.into_dyn())]
                }),
            }),
        )
    }

    /// Multiplies each channel plane of `x (B, C, H, W)` by the matching
    /// gate in `s (B, C)`.
    pub fn scale_channels(&mut self, x: Var, gates: Var) -> Var {
        let xv = as4(&self.values[x.0]).to_owned();
        let sv = as2(&self.values[gates.0]).to_owned();
        let (b, c, _, _) = xv.dim();
        assert_eq!(sv.dim(), (b, c));
        let mut out = xv.clone();
        for bi in 0..b {
            for ci in 0..c {
                let gate = sv[[bi, ci]];
                let mut plane = out.index_axis_mut(Axis(0), bi);
                plane.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v * gate);
            }
        }
        self.push(
            out.into_dyn(),
            Some(BackEntry {
                parents: vec![x, gates],
                run: Box::new(move |vals, up| {
                    let g = as4(up);
                    let xv = as4(&vals[x.0]);
                    let sv = as2(&vals[gates.0]);
                    let (b, c, h, w) = xv.dim();
                    let mut dx = Array4::<T>::zeros((b, c, h, w));
                    let mut ds = Array2::<T>::zeros((b, c));
                    for bi in 0..b {
                        for ci in 0..c {
                            let gate = sv[[bi, ci]];
                            let gp = g.index_axis(Axis(0), bi);
                            let gp = gp.index_axis(Axis(0), ci);
                            let xp = xv.index_axis(Axis(0), bi);
                            let xp = xp.index_axis(Axis(0), ci);
                            let mut dp = dx.index_axis_mut(Axis(0), bi);
                            let mut dp = dp.index_axis_mut(Axis(0), ci);
                            let mut acc = T::zero();
                            ndarray::Zip::from(&mut dp).and(&gp).and(&xp).for_each(
                                |d, &gg, &xx| {
                                    *d = gg * gate;
                                    acc += gg * xx;
                                },
                            );
                            ds[[bi, ci]] = acc;
                        }
                    }
                    vec![Some(dx.into_dyn()), Some(ds.into_dyn())]
                }),
            }),
        )
    }

    // -- tomography nodes ------------------------------------------------------

    /// Forward projection of every (batch, channel) plane:
    /// (B, C, N, N) -> (B, C, A, D). The reverse pass is the exact adjoint.
    pub fn radon_forward(&mut self, x: Var, projector: Arc<Projector>) -> Var {
        let xv = as4(&self.values[x.0]).to_owned();
        let (b, c, h, w) = xv.dim();
        let geom = *projector.geometry();
        assert_eq!((h, w), (geom.image_size(), geom.image_size()));
        let (na, nd) = (geom.n_angles(), geom.n_detectors());
        let proj = projector.clone();
        let planes: Vec<Array2<T>> = maybe_par_map(b * c, |idx| {
            let (bi, ci) = (idx / c, idx % c);
            let plane = xv.slice(s![bi, ci, .., ..]).to_owned();
            proj.forward_array(&plane)
        });
        let mut out = Array4::<T>::zeros((b, c, na, nd));
        for (idx, p) in planes.into_iter().enumerate() {
            out.slice_mut(s![idx / c, idx % c, .., ..]).assign(&p);
        }
        self.push(
            out.into_dyn(),
            Some(BackEntry {
                parents: vec![x],
                run: Box::new(move |_, up| {
                    let g = as4(up).to_owned();
                    let (b, c, _, _) = g.dim();
                    let n = projector.geometry().image_size();
                    let planes: Vec<Array2<T>> = maybe_par_map(b * c, |idx| {
                        let plane = g.slice(s![idx / c, idx % c, .., ..]).to_owned();
                        projector.backproject_array(&plane)
                    });
                    let mut dx = Array4::<T>::zeros((b, c, n, n));
                    for (idx, p) in planes.into_iter().enumerate() {
                        dx.slice_mut(s![idx / c, idx % c, .., ..]).assign(&p);
                    }
                    vec![Some(dx.into_dyn())]
                }),
            }),
        )
    }

    /// Back-projection of every (batch, channel) sinogram:
    /// (B, C, A, D) -> (B, C, N, N). The reverse pass applies the forward
    /// projection, making the pair exactly adjoint on the tape too.
    pub fn radon_backproject(&mut self, x: Var, projector: Arc<Projector>) -> Var {
        let xv = as4(&self.values[x.0]).to_owned();
        let (b, c, na, nd) = xv.dim();
        let geom = *projector.geometry();
        assert_eq!((na, nd), (geom.n_angles(), geom.n_detectors()));
        let n = geom.image_size();
        let proj = projector.clone();
        let planes: Vec<Array2<T>> = maybe_par_map(b * c, |idx| {
            let plane = xv.slice(s![idx / c, idx % c, .., ..]).to_owned();
            proj.backproject_array(&plane)
        });
        let mut out = Array4::<T>::zeros((b, c, n, n));
        for (idx, p) in planes.into_iter().enumerate() {
            out.slice_mut(s![idx / c, idx % c, .., ..]).assign(&p);
        }
        self.push(
            out.into_dyn(),
            Some(BackEntry {
                parents: vec![x],
                run: Box::new(move |_, up| {
                    let g = as4(up).to_owned();
                    let (b, c, _, _) = g.dim();
                    let (na, nd) =
                        (projector.geometry().n_angles(), projector.geometry().n_detectors());
                    let planes: Vec<Array2<T>> = maybe_par_map(b * c, |idx| {
                        let plane = g.slice(s![idx / c, idx % c, .., ..]).to_owned();
                        projector.forward_array(&plane)
                    });
                    let mut dx = Array4::<T>::zeros((b, c, na, nd));
                    for (idx, p) in planes.into_iter().enumerate() {
                        dx.slice_mut(s![idx / c, idx % c, .., ..]).assign(&p);
                    }
                    vec![Some(dx.into_dyn())]
                }),
            }),
        )
    }
}

// -- helpers ------------------------------------------------------------------

fn as2<T: Real>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view().into_dimensionality().expect("rank-2 tensor")
}

fn as4<T: Real>(a: &ArrayD<T>) -> ndarray::ArrayView4<'_, T> {
    a.view().into_dimensionality().expect("rank-4 tensor")
}

/// (Cout, Cin, k, k) -> (Cout, Cin*k*k) row-major.
fn flatten_filter<T: Real>(w: &Array4<T>) -> Array2<T> {
    let (cout, cin, kh, kw) = w.dim();
    let flat: Vec<T> = w.iter().cloned().collect();
    Array2::from_shape_vec((cout, cin * kh * kw), flat).expect("contiguous filter")
}

/// One batch item of the upstream gradient as a (Cout, OH*OW) matrix.
fn plane_mat<T: Real>(g: &Array4<T>, bi: usize, cout: usize, hw: usize) -> Array2<T> {
    let item = g.index_axis(Axis(0), bi);
    let flat: Vec<T> = item.iter().cloned().collect();
    Array2::from_shape_vec((cout, hw), flat).expect("contiguous gradient")
}

/// Lowers one image (C, H, W) into the (C*k*k, OH*OW) patch matrix.
fn im2col<T: Real>(
    x: &ndarray::Array3<T>,
    k: usize,
    pad: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Array2<T> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<T>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for di in 0..k {
            for dj in 0..k {
                let row = ci * k * k + di * k + dj;
                let mut dst = cols.row_mut(row);
                for oi in 0..oh {
                    let ii = (oi * stride + di) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + dj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dst[oi * ow + oj] = plane[[ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatters patch-matrix gradients back onto the image.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &Array2<T>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<T> {
    let mut x = ndarray::Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        let mut plane = x.index_axis_mut(Axis(0), ci);
        for di in 0..k {
            for dj in 0..k {
                let row = ci * k * k + di * k + dj;
                let src = cols.row(row);
                for oi in 0..oh {
                    let ii = (oi * stride + di) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + dj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        plane[[ii as usize, jj as usize]] += src[oi * ow + oj];
                    }
                }
            }
        }
    }
    x
}

/// Source indices and fraction for doubling one axis of length `n`.
fn up2_weights<T: Real>(n: usize) -> Vec<(usize, usize, T)> {
    let mut w = Vec::with_capacity(2 * n);
    for o in 0..2 * n {
        let srcf = (o as f64 + 0.5) / 2.0 - 0.5;
        let lo = srcf.floor();
        let frac = srcf - lo;
        let i0 = (lo.max(0.0) as usize).min(n - 1);
        let i1 = ((lo as isize + 1).clamp(0, n as isize - 1)) as usize;
        w.push((i0, i1, T::from_f64(frac)));
    }
    w
}

/// Maps `f` over `0..n`, in parallel when the global rayon pool has more
/// than one thread. Results are collected in index order, so the output is
/// identical at any thread count.
fn maybe_par_map<R: Send, F: Fn(usize) -> R + Sync + Send>(n: usize, f: F) -> Vec<R> {
    if rayon::current_num_threads() > 1 && n > 1 {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

// -- numeric gradient checking -------------------------------------------------

/// Central-difference gradient check: builds the graph twice per probed
/// coordinate and compares numeric and reverse-mode derivatives of the
/// scalar loss. `build` receives the perturbed copies of every input and
/// returns (graph, loss, vars-in-input-order).
pub fn gradcheck<F>(inputs: &[ArrayD<f64>], build: F, eps: f64, tol: f64) -> f64
where
    F: Fn(&mut Graph<f64>, &[ArrayD<f64>]) -> (Var, Vec<Var>),
{
    let mut g = Graph::checked();
    let (loss, vars) = build(&mut g, inputs);
    g.backward(loss);
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .map(|v| g.grad(*v).cloned().unwrap_or_else(|| ArrayD::zeros(g.value(*v).raw_dim())))
        .collect();
    let mut worst = 0.0f64;
    for (ti, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[ti].as_slice_memory_order_mut().unwrap()[idx] += eps;
            let mut minus = inputs.to_vec();
            minus[ti].as_slice_memory_order_mut().unwrap()[idx] -= eps;
            let lp = eval_loss(&plus, &build);
            let lm = eval_loss(&minus, &build);
            let numeric = (lp - lm) / (2.0 * eps);
            let got = analytic[ti].as_slice_memory_order().unwrap()[idx];
            let rel = (got - numeric).abs() / (got.abs() + numeric.abs()).max(1.0);
            assert!(
                rel < tol,
                "gradcheck failed: tensor {ti} coord {idx}: analytic {got} numeric {numeric} rel {rel}"
            );
            worst = worst.max(rel);
        }
    }
    worst
}

fn eval_loss<F>(inputs: &[ArrayD<f64>], build: &F) -> f64
where
    F: Fn(&mut Graph<f64>, &[ArrayD<f64>]) -> (Var, Vec<Var>),
{
    let mut g = Graph::new();
    let (loss, _) = build(&mut g, inputs);
    g.scalar(loss)
}

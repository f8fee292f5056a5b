use std::rc::Rc;

use super::{BackwardFn, Var};
use crate::scalar::{gemm, MatMut, MatRef, Scalar};
use crate::tensor::Tensor;

fn check_same(a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: operand shapes differ");
}

fn boxed<T: Scalar>(f: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static) -> BackwardFn<T> {
    Box::new(f)
}

impl<'t, T: Scalar> Var<'t, T> {
    fn unary(
        self,
        value: Tensor<T>,
        backward: impl FnOnce() -> Box<dyn Fn(&Tensor<T>) -> Tensor<T>>,
    ) -> Var<'t, T> {
        self.tape.push_op(value, &[self], || {
            let f = backward();
            boxed(move |g| vec![Some(f(g))])
        })
    }

    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        check_same(&a, &b, "add");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(a.shape(), data).expect("shape");
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        self.tape.push_op(out, &[self, other], move || {
            boxed(move |g| vec![ra.then(|| g.clone()), rb.then(|| g.clone())])
        })
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        check_same(&a, &b, "sub");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_vec(a.shape(), data).expect("shape");
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        self.tape.push_op(out, &[self, other], move || {
            boxed(move |g| vec![ra.then(|| g.clone()), rb.then(|| g.map(|v: T| -v))])
        })
    }

    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        check_same(&a, &b, "mul");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(a.shape(), data).expect("shape");
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        self.tape.push_op(out, &[self, other], move || {
            boxed(move |g| {
                let ga = ra.then(|| {
                    let d = g.data().iter().zip(b.data()).map(|(&g, &y)| g * y).collect();
                    Tensor::from_vec(g.shape(), d).expect("shape")
                });
                let gb = rb.then(|| {
                    let d = g.data().iter().zip(a.data()).map(|(&g, &x)| g * x).collect();
                    Tensor::from_vec(g.shape(), d).expect("shape")
                });
                vec![ga, gb]
            })
        })
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * s);
        self.unary(out, move || Box::new(move |g| g.map(|v| v * s)))
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        let out = self.value().map(|v| v + s);
        self.unary(out, || Box::new(|g| g.clone()))
    }

    /// `x + bias` with `bias` of shape `[C]` broadcast over rows.
    pub fn add_bias(self, bias: Var<'t, T>) -> Var<'t, T> {
        let (x, b) = (self.value(), bias.value());
        let c = x.last_dim();
        assert_eq!(b.numel(), c, "add_bias: bias length");
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        let (rx, rb) = (self.requires_grad(), bias.requires_grad());
        self.tape.push_op(out, &[self, bias], move || {
            boxed(move |g| {
                let gb = rb.then(|| column_sums(g));
                vec![rx.then(|| g.clone()), gb]
            })
        })
    }

    /// Scales every row (trailing-axis vector) by one entry of `s`, where
    /// `s.numel()` equals the row count.
    pub fn mul_rows(self, s: Var<'t, T>) -> Var<'t, T> {
        let (x, sv) = (self.value(), s.value());
        let c = x.last_dim();
        assert_eq!(sv.numel(), x.rows(), "mul_rows: one factor per row");
        let mut out = (*x).clone();
        for (row, &f) in out.data_mut().chunks_mut(c).zip(sv.data()) {
            for v in row {
                *v *= f;
            }
        }
        let (rx, rs) = (self.requires_grad(), s.requires_grad());
        self.tape.push_op(out, &[self, s], move || {
            boxed(move |g| {
                let gx = rx.then(|| {
                    let mut gx = g.clone();
                    for (row, &f) in gx.data_mut().chunks_mut(c).zip(sv.data()) {
                        for v in row {
                            *v *= f;
                        }
                    }
                    gx
                });
                let gs = rs.then(|| {
                    let d = g
                        .data()
                        .chunks(c)
                        .zip(x.data().chunks(c))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                        .collect();
                    Tensor::from_vec(sv.shape(), d).expect("shape")
                });
                vec![gx, gs]
            })
        })
    }

    /// Affine map over the trailing axis: `x [.., Cin] * w [Cin, Cout] + b`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Var<'t, T> {
        let (x, w) = (self.value(), weight.value());
        let (cin, cout) = (w.shape()[0], w.shape()[1]);
        assert_eq!(x.last_dim(), cin, "linear: input width {} vs weight {:?}", x.last_dim(), w.shape());
        let rows = x.rows();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = cout;
        let mut out = Tensor::zeros(&shape);
        gemm(
            T::one(),
            MatRef::row_major(x.data(), 0, rows, cin),
            MatRef::row_major(w.data(), 0, cin, cout),
            T::zero(),
            MatMut::row_major(out.data_mut(), 0, rows, cout),
        );
        let (rx, rw) = (self.requires_grad(), weight.requires_grad());
        let y = self.tape.push_op(out, &[self, weight], move || {
            boxed(move |g| {
                let gx = rx.then(|| {
                    let mut gx = Tensor::zeros(x.shape());
                    gemm(
                        T::one(),
                        MatRef::row_major(g.data(), 0, rows, cout),
                        MatRef::row_major(w.data(), 0, cin, cout).t(),
                        T::zero(),
                        MatMut::row_major(gx.data_mut(), 0, rows, cin),
                    );
                    gx
                });
                let gw = rw.then(|| {
                    let mut gw = Tensor::zeros(w.shape());
                    gemm(
                        T::one(),
                        MatRef::row_major(x.data(), 0, rows, cin).t(),
                        MatRef::row_major(g.data(), 0, rows, cout),
                        T::zero(),
                        MatMut::row_major(gw.data_mut(), 0, cin, cout),
                    );
                    gw
                });
                vec![gx, gw]
            })
        });
        match bias {
            Some(b) => y.add_bias(b),
            None => y,
        }
    }

    /// `a [M, K] * b[N, K]^T -> [M, N]`.
    pub fn matmul_nt(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        assert!(a.rank() == 2 && b.rank() == 2, "matmul_nt expects matrices");
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
        assert_eq!(b.shape()[1], k, "matmul_nt inner dimension");
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            T::one(),
            MatRef::row_major(a.data(), 0, m, k),
            MatRef::row_major(b.data(), 0, n, k).t(),
            T::zero(),
            MatMut::row_major(out.data_mut(), 0, m, n),
        );
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        self.tape.push_op(out, &[self, other], move || {
            boxed(move |g| {
                let ga = ra.then(|| {
                    let mut ga = Tensor::zeros(&[m, k]);
                    gemm(
                        T::one(),
                        MatRef::row_major(g.data(), 0, m, n),
                        MatRef::row_major(b.data(), 0, n, k),
                        T::zero(),
                        MatMut::row_major(ga.data_mut(), 0, m, k),
                    );
                    ga
                });
                let gb = rb.then(|| {
                    let mut gb = Tensor::zeros(&[n, k]);
                    gemm(
                        T::one(),
                        MatRef::row_major(g.data(), 0, m, n).t(),
                        MatRef::row_major(a.data(), 0, m, k),
                        T::zero(),
                        MatMut::row_major(gb.data_mut(), 0, n, k),
                    );
                    gb
                });
                vec![ga, gb]
            })
        })
    }

    /// Layer normalization over the trailing axis.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: T) -> Var<'t, T> {
        let x = self.value();
        let c = x.last_dim();
        let cf = T::from_usize_lossy(c);
        let rows = x.rows();
        let gv = gain.value();
        let bv = bias.value();
        assert!(gv.numel() == c && bv.numel() == c, "layer_norm parameter width");
        let mut xhat = vec![T::zero(); x.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = Tensor::zeros(x.shape());
        for r in 0..rows {
            let xr = &x.data()[r * c..(r + 1) * c];
            let mean = xr.iter().copied().sum::<T>() / cf;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let orow = &mut out.data_mut()[r * c..(r + 1) * c];
            for i in 0..c {
                let h = (xr[i] - mean) * rs;
                xhat[r * c + i] = h;
                orow[i] = h * gv.data()[i] + bv.data()[i];
            }
        }
        let (rx, rg, rb) = (self.requires_grad(), gain.requires_grad(), bias.requires_grad());
        self.tape.push_op(out, &[self, gain, bias], move || {
            boxed(move |g| {
                let gd = g.data();
                let gg = rg.then(|| {
                    let mut acc = vec![T::zero(); c];
                    for (gr, hr) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for i in 0..c {
                            acc[i] += gr[i] * hr[i];
                        }
                    }
                    Tensor::from_vec(&[c], acc).expect("shape")
                });
                let gb = rb.then(|| column_sums(g).reshaped(&[c]).expect("shape"));
                let gx = rx.then(|| {
                    let mut gx = vec![T::zero(); gd.len()];
                    for r in 0..rows {
                        let gr = &gd[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for i in 0..c {
                            let dh = gr[i] * gv.data()[i];
                            s1 += dh;
                            s2 += dh * hr[i];
                        }
                        s1 = s1 / cf;
                        s2 = s2 / cf;
                        for i in 0..c {
                            let dh = gr[i] * gv.data()[i];
                            gx[r * c + i] = rstd[r] * (dh - s1 - hr[i] * s2);
                        }
                    }
                    Tensor::from_vec(g.shape(), gx).expect("shape")
                });
                vec![gx, gg, gb]
            })
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        let x = self.value();
        let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let a = T::lit(0.044715);
        let half = T::lit(0.5);
        let out = x.map(|v| half * v * (T::one() + (k * (v + a * v * v * v)).tanh()));
        self.unary(out, move || {
            Box::new(move |g| {
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| {
                        let t = (k * (v + a * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * k * (T::one() + T::lit(3.0) * a * v * v);
                        g * (half * (T::one() + t) + half * v * dt)
                    })
                    .collect();
                Tensor::from_vec(g.shape(), d).expect("shape")
            })
        })
    }

    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v.max(T::zero()));
        self.unary(out, move || {
            Box::new(move |g| {
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                Tensor::from_vec(g.shape(), d).expect("shape")
            })
        })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let y = Rc::new(self.value().map(sigmoid));
        let out = (*y).clone();
        self.unary(out, move || {
            Box::new(move |g| {
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                Tensor::from_vec(g.shape(), d).expect("shape")
            })
        })
    }

    /// Softmax over the trailing axis.
    pub fn softmax_last(self) -> Var<'t, T> {
        let x = self.value();
        let c = x.last_dim();
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let y = Rc::new(out.clone());
        self.unary(out, move || {
            Box::new(move |g| {
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (gv, &yv) in gr.iter_mut().zip(yr) {
                        *gv = yv * (*gv - dot);
                    }
                }
                gx
            })
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshaped(shape).expect("reshape element count");
        self.unary(out, move || Box::new(move |g| g.clone().reshaped(&old).expect("shape")))
    }

    /// Space-to-depth: `[N, H, W, C] -> [N, H/p, W/p, p*p*C]`, each output
    /// vector ordered (row in patch, column in patch, channel).
    pub fn patchify(self, p: usize) -> Var<'t, T> {
        let x = self.value();
        let out = space_to_depth(&x, p);
        self.unary(out, move || Box::new(move |g| depth_to_space(g, p)))
    }

    /// Depth-to-space, the inverse of [`Var::patchify`].
    pub fn unpatchify(self, p: usize) -> Var<'t, T> {
        let x = self.value();
        let out = depth_to_space(&x, p);
        self.unary(out, move || Box::new(move |g| space_to_depth(g, p)))
    }

    /// Bilinear resampling of `[N, H, W, C]` to `[N, oh, ow, C]` using
    /// half-pixel centers (no corner alignment).
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Var<'t, T> {
        let x = self.value();
        let out = resize_bilinear(&x, oh, ow);
        let in_shape = x.shape().to_vec();
        self.unary(out, move || Box::new(move |g| resize_bilinear_adjoint(g, &in_shape)))
    }

    /// Concatenates along the trailing axis.
    pub fn concat_last(parts: &[Var<'t, T>]) -> Var<'t, T> {
        let tape = parts.first().expect("concat of nothing").tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows();
        let widths: Vec<usize> = values.iter().map(|v| v.last_dim()).collect();
        for v in &values {
            assert_eq!(v.rows(), rows, "concat_last: row counts differ");
        }
        let total: usize = widths.iter().sum();
        let mut shape = values[0].shape().to_vec();
        *shape.last_mut().expect("rank") = total;
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_vec(&shape, out).expect("shape");
        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        let part_shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        tape.push_op(out, parts, move || {
            boxed(move |g| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for ((&w, &need), shape) in widths.iter().zip(&needs).zip(&part_shapes) {
                    grads.push(need.then(|| {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        Tensor::from_vec(shape, d).expect("shape")
                    }));
                    offset += w;
                }
                grads
            })
        })
    }

    /// Concatenates along the leading axis.
    pub fn concat_leading(parts: &[Var<'t, T>]) -> Var<'t, T> {
        let tape = parts.first().expect("concat of nothing").tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::cat_leading(&refs).expect("concat_leading shapes");
        let bounds: Vec<(usize, usize)> = {
            let mut start = 0;
            values
                .iter()
                .map(|v| {
                    let b = (start, start + v.shape()[0]);
                    start = b.1;
                    b
                })
                .collect()
        };
        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        tape.push_op(out, parts, move || {
            boxed(move |g| {
                bounds
                    .iter()
                    .zip(&needs)
                    .map(|(&(s, e), &need)| need.then(|| g.slice_leading(s, e)))
                    .collect()
            })
        })
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_leading(self, start: usize, end: usize) -> Var<'t, T> {
        let x = self.value();
        let out = x.slice_leading(start, end);
        let shape = x.shape().to_vec();
        self.unary(out, move || {
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&shape);
                let inner = g.numel() / (end - start).max(1);
                gx.data_mut()[start * inner..end * inner].copy_from_slice(g.data());
                gx
            })
        })
    }

    /// Gathers leading-axis entries by index (repeats allowed).
    pub fn select_leading(self, indices: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let lead = x.shape()[0];
        let inner = if lead == 0 { 0 } else { x.numel() / lead };
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            assert!(i < lead, "select_leading index {i} of {lead}");
            data.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        let out = Tensor::from_vec(&shape, data).expect("shape");
        let indices = indices.to_vec();
        let in_shape = x.shape().to_vec();
        self.unary(out, move || {
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&in_shape);
                for (k, &i) in indices.iter().enumerate() {
                    let src = &g.data()[k * inner..(k + 1) * inner];
                    for (d, &s) in gx.data_mut()[i * inner..(i + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                gx
            })
        })
    }

    /// Mean over everything between the leading and trailing axes:
    /// `[N, .., C] -> [N, C]`.
    pub fn mean_inner(self) -> Var<'t, T> {
        let x = self.value();
        let n = x.shape()[0];
        let c = x.last_dim();
        let l = x.numel() / (n * c).max(1);
        let lf = T::from_usize_lossy(l);
        let mut out = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let acc = &mut out.data_mut()[i * c..(i + 1) * c];
            for row in x.data()[i * l * c..(i + 1) * l * c].chunks(c) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            for a in acc {
                *a = *a / lf;
            }
        }
        let shape = x.shape().to_vec();
        self.unary(out, move || {
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&shape);
                for i in 0..n {
                    let gr = &g.data()[i * c..(i + 1) * c];
                    for row in gx.data_mut()[i * l * c..(i + 1) * l * c].chunks_mut(c) {
                        for (d, &gv) in row.iter_mut().zip(gr) {
                            *d = gv / lf;
                        }
                    }
                }
                gx
            })
        })
    }

    /// Divides each trailing-axis vector by `max(||v||, eps)`.
    pub fn l2_normalize(self, eps: T) -> Var<'t, T> {
        let x = self.value();
        let c = x.last_dim();
        let norms: Vec<T> = x
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let mut out = (*x).clone();
        for (row, &nrm) in out.data_mut().chunks_mut(c).zip(&norms) {
            let d = nrm.max(eps);
            for v in row {
                *v = *v / d;
            }
        }
        let y = Rc::new(out.clone());
        self.unary(out, move || {
            Box::new(move |g| {
                let mut gx = g.clone();
                for ((gr, yr), &nrm) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)).zip(&norms) {
                    if nrm > eps {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for (gv, &yv) in gr.iter_mut().zip(yr) {
                            *gv = (*gv - yv * dot) / nrm;
                        }
                    } else {
                        for gv in gr {
                            *gv = *gv / eps;
                        }
                    }
                }
                gx
            })
        })
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.unary(out, move || Box::new(move |g| Tensor::full(&shape, g.data()[0])))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::from_usize_lossy(self.value().numel().max(1));
        self.sum().scale(T::one() / n)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [N, L, C]`, `k, v: [N, Lk, C]`; each head sees a contiguous
    /// `C / heads` slice of the channels. Returns `[N, L, C]`.
    pub fn attention(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>, heads: usize) -> Var<'t, T> {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        assert!(qv.rank() == 3 && kv.rank() == 3, "attention expects [N, L, C]");
        let (n, l, c) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let lk = kv.shape()[1];
        assert_eq!(kv.shape(), &[n, lk, c], "attention key shape");
        assert_eq!(vv.shape(), &[n, lk, c], "attention value shape");
        assert!(heads >= 1 && c % heads == 0, "channels {c} not divisible by {heads} heads");
        let d = c / heads;
        let scale = T::one() / T::from_usize_lossy(d).sqrt();
        let mut probs = vec![T::zero(); n * heads * l * lk];
        let mut out = Tensor::zeros(&[n, l, c]);
        for b in 0..n {
            for h in 0..heads {
                let p_off = (b * heads + h) * l * lk;
                let q_off = b * l * c + h * d;
                let k_off = b * lk * c + h * d;
                gemm(
                    scale,
                    MatRef::strided(qv.data(), q_off, l, d, c, 1),
                    MatRef::strided(kv.data(), k_off, lk, d, c, 1).t(),
                    T::zero(),
                    MatMut::row_major(&mut probs, p_off, l, lk),
                );
                for row in probs[p_off..p_off + l * lk].chunks_mut(lk) {
                    softmax_in_place(row);
                }
                gemm(
                    T::one(),
                    MatRef::row_major(&probs, p_off, l, lk),
                    MatRef::strided(vv.data(), k_off, lk, d, c, 1),
                    T::zero(),
                    MatMut::strided(out.data_mut(), q_off, l, d, c, 1),
                );
            }
        }
        let tape = q.tape;
        let needs = [q.requires_grad(), k.requires_grad(), v.requires_grad()];
        tape.push_op(out, &[q, k, v], move || {
            boxed(move |g| {
                let mut gq = Tensor::zeros(&[n, l, c]);
                let mut gk = Tensor::zeros(&[n, lk, c]);
                let mut gv = Tensor::zeros(&[n, lk, c]);
                let mut dp = vec![T::zero(); l * lk];
                for b in 0..n {
                    for h in 0..heads {
                        let p_off = (b * heads + h) * l * lk;
                        let q_off = b * l * c + h * d;
                        let k_off = b * lk * c + h * d;
                        let p = MatRef::row_major(&probs, p_off, l, lk);
                        let go = MatRef::strided(g.data(), q_off, l, d, c, 1);
                        if needs[2] {
                            gemm(T::one(), p.t(), go, T::zero(), MatMut::strided(gv.data_mut(), k_off, lk, d, c, 1));
                        }
                        if !(needs[0] || needs[1]) {
                            continue;
                        }
                        gemm(
                            T::one(),
                            go,
                            MatRef::strided(vv.data(), k_off, lk, d, c, 1).t(),
                            T::zero(),
                            MatMut::row_major(&mut dp, 0, l, lk),
                        );
                        for (dr, pr) in dp.chunks_mut(lk).zip(probs[p_off..p_off + l * lk].chunks(lk)) {
                            let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                            for (dv, &pv) in dr.iter_mut().zip(pr) {
                                *dv = pv * (*dv - dot) * scale;
                            }
                        }
                        let ds = MatRef::row_major(&dp, 0, l, lk);
                        if needs[0] {
                            gemm(
                                T::one(),
                                ds,
                                MatRef::strided(kv.data(), k_off, lk, d, c, 1),
                                T::zero(),
                                MatMut::strided(gq.data_mut(), q_off, l, d, c, 1),
                            );
                        }
                        if needs[1] {
                            gemm(
                                T::one(),
                                ds.t(),
                                MatRef::strided(qv.data(), q_off, l, d, c, 1),
                                T::zero(),
                                MatMut::strided(gk.data_mut(), k_off, lk, d, c, 1),
                            );
                        }
                    }
                }
                vec![needs[0].then_some(gq), needs[1].then_some(gk), needs[2].then_some(gv)]
            })
        })
    }

    /// For a square affinity matrix over `images * positions` locations,
    /// returns for each location the mean over the *other* images of the
    /// best-matching affinity inside that image. With a single image the
    /// maximum over the image itself is used instead.
    pub fn cross_image_max_mean(self, images: usize, positions: usize) -> Var<'t, T> {
        let a = self.value();
        let m = images * positions;
        assert_eq!(a.shape(), &[m, m], "affinity must be square over all locations");
        let others = if images > 1 { images - 1 } else { 1 };
        let inv = T::one() / T::from_usize_lossy(others);
        let mut out = vec![T::zero(); m];
        let mut argmax: Vec<(usize, usize)> = Vec::with_capacity(m * others);
        for p in 0..m {
            let own = p / positions;
            let row = &a.data()[p * m..(p + 1) * m];
            let mut acc = T::zero();
            for j in 0..images {
                if j == own && images > 1 {
                    continue;
                }
                let seg = &row[j * positions..(j + 1) * positions];
                let (mut best, mut best_i) = (seg[0], 0);
                for (i, &v) in seg.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                acc += best;
                argmax.push((p, j * positions + best_i));
            }
            out[p] = acc * inv;
        }
        let out = Tensor::from_vec(&[m], out).expect("shape");
        self.unary(out, move || {
            Box::new(move |g| {
                let mut ga = Tensor::zeros(&[m, m]);
                let gd = ga.data_mut();
                for &(p, q) in &argmax {
                    gd[p * m + q] += g.data()[p] * inv;
                }
                ga
            })
        })
    }
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let c = g.last_dim();
    let mut acc = vec![T::zero(); c];
    for row in g.data().chunks(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    Tensor::from_vec(&[c], acc).expect("shape")
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn dims4<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected [N, H, W, C], got {s:?}");
    (s[0], s[1], s[2], s[3])
}

pub(crate) fn space_to_depth<T: Scalar>(x: &Tensor<T>, p: usize) -> Tensor<T> {
    let (n, h, w, c) = dims4(x);
    assert!(p >= 1 && h % p == 0 && w % p == 0, "grid {h}x{w} not divisible by patch {p}");
    let (oh, ow) = (h / p, w / p);
    let mut out = Vec::with_capacity(x.numel());
    let xd = x.data();
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for py in 0..p {
                    let y = oy * p + py;
                    let start = ((b * h + y) * w + ox * p) * c;
                    out.extend_from_slice(&xd[start..start + p * c]);
                }
            }
        }
    }
    Tensor::from_vec(&[n, oh, ow, p * p * c], out).expect("shape")
}

pub(crate) fn depth_to_space<T: Scalar>(x: &Tensor<T>, p: usize) -> Tensor<T> {
    let (n, h, w, pc) = dims4(x);
    assert!(p >= 1 && pc % (p * p) == 0, "depth {pc} not divisible by {p}^2");
    let c = pc / (p * p);
    let (oh, ow) = (h * p, w * p);
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let src = ((b * h + y) * w + xx) * pc;
                for py in 0..p {
                    let dst = ((b * oh + y * p + py) * ow + xx * p) * c;
                    out[dst..dst + p * c].copy_from_slice(&xd[src + py * p * c..src + (py + 1) * p * c]);
                }
            }
        }
    }
    Tensor::from_vec(&[n, oh, ow, c], out).expect("shape")
}

/// Source taps `(i0, i1, w0, w1)` for half-pixel bilinear sampling.
pub(crate) fn bilinear_taps<T: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, T, T)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            let l1 = src - i0 as f64;
            let l1 = if i1 == i0 { 0.0 } else { l1 };
            (i0, i1, T::lit(1.0 - l1), T::lit(l1))
        })
        .collect()
}

pub(crate) fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (n, h, w, c) = dims4(x);
    if (oh, ow) == (h, w) {
        return x.clone();
    }
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let xd = x.data();
    let mut out = vec![T::zero(); n * oh * ow * c];
    for b in 0..n {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let dst = ((b * oh + oy) * ow + ox) * c;
                let taps = [
                    (y0, x0, wy0 * wx0),
                    (y0, x1, wy0 * wx1),
                    (y1, x0, wy1 * wx0),
                    (y1, x1, wy1 * wx1),
                ];
                for (yy, xx, wt) in taps {
                    if wt == T::zero() {
                        continue;
                    }
                    let src = ((b * h + yy) * w + xx) * c;
                    for ch in 0..c {
                        out[dst + ch] += wt * xd[src + ch];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, oh, ow, c], out).expect("shape")
}

fn resize_bilinear_adjoint<T: Scalar>(g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (n, oh, ow, c) = dims4(g);
    let (h, w) = (in_shape[1], in_shape[2]);
    if (oh, ow) == (h, w) {
        return g.clone();
    }
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let gd = g.data();
    let mut out = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let src = ((b * oh + oy) * ow + ox) * c;
                let taps = [
                    (y0, x0, wy0 * wx0),
                    (y0, x1, wy0 * wx1),
                    (y1, x0, wy1 * wx0),
                    (y1, x1, wy1 * wx1),
                ];
                for (yy, xx, wt) in taps {
                    if wt == T::zero() {
                        continue;
                    }
                    let dst = ((b * h + yy) * w + xx) * c;
                    for ch in 0..c {
                        out[dst + ch] += wt * gd[src + ch];
                    }
                }
            }
        }
    }
    Tensor::from_vec(in_shape, out).expect("shape")
}

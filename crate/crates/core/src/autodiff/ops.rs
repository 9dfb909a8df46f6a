//! Differentiable primitives.
//!
//! Row-oriented ops view a tensor as `[rows, C]` where `C` is the last extent.
//! Index lists are shared through `Arc` so that backward closures stay cheap.

use std::sync::Arc;

use super::tape::Var;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Additive surrogate for `-inf` in masked softmax.
pub const MASK_NEG: f64 = -1e9;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn rows_of<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    let c = t.last_dim();
    t.numel().checked_div(c).map_or((0, 0), |r| (r, c))
}

fn map_data<T: Scalar>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Vec<T> {
    t.data().iter().map(|&v| f(v)).collect()
}

fn tensor<T: Scalar>(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("op produced consistent shape")
}

impl<'t, T: Scalar> Var<'t, T> {
    fn same_tape(&self, other: &Var<'t, T>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let out = {
            let (a, b) = (self.value(), other.value());
            same_shape("add", &a, &b)?;
            tensor(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect())
        };
        Ok(self.tape.push(out, &[self.id, other.id], |c| {
            vec![c.needs[0].then(|| c.grad.to_vec()), c.needs[1].then(|| c.grad.to_vec())]
        }))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let out = {
            let (a, b) = (self.value(), other.value());
            same_shape("sub", &a, &b)?;
            tensor(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect())
        };
        Ok(self.tape.push(out, &[self.id, other.id], |c| {
            vec![c.needs[0].then(|| c.grad.to_vec()), c.needs[1].then(|| c.grad.iter().map(|&g| -g).collect())]
        }))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let out = {
            let (a, b) = (self.value(), other.value());
            same_shape("mul", &a, &b)?;
            tensor(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect())
        };
        Ok(self.tape.push(out, &[self.id, other.id], |c| {
            let (a, b) = (c.inputs[0].data(), c.inputs[1].data());
            vec![
                c.needs[0].then(|| c.grad.iter().zip(b).map(|(&g, &y)| g * y).collect()),
                c.needs[1].then(|| c.grad.iter().zip(a).map(|(&g, &x)| g * x).collect()),
            ]
        }))
    }

    /// Elementwise quotient.
    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let out = {
            let (a, b) = (self.value(), other.value());
            same_shape("div", &a, &b)?;
            tensor(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| x / y).collect())
        };
        Ok(self.tape.push(out, &[self.id, other.id], |c| {
            let (a, b) = (c.inputs[0].data(), c.inputs[1].data());
            vec![
                c.needs[0].then(|| c.grad.iter().zip(b).map(|(&g, &y)| g / y).collect()),
                c.needs[1].then(|| c.grad.iter().zip(a.iter().zip(b)).map(|(&g, (&x, &y))| -g * x / (y * y)).collect()),
            ]
        }))
    }

    pub fn scale(self, s: f64) -> Result<Var<'t, T>> {
        let s = T::of(s);
        let out = {
            let a = self.value();
            tensor(a.shape().to_vec(), map_data(&a, |v| v * s))
        };
        Ok(self.tape.push(out, &[self.id], move |c| vec![Some(c.grad.iter().map(|&g| g * s).collect())]))
    }

    /// Adds a constant tensor of the same number of elements.
    pub fn add_const(self, k: &[T]) -> Result<Var<'t, T>> {
        let out = {
            let a = self.value();
            if k.len() != a.numel() {
                return Err(Error::shape("add_const", format!("{} constants for {} elements", k.len(), a.numel())));
            }
            tensor(a.shape().to_vec(), a.data().iter().zip(k).map(|(&x, &y)| x + y).collect())
        };
        Ok(self.tape.push(out, &[self.id], |c| vec![Some(c.grad.to_vec())]))
    }

    /// Multiplies by a constant tensor of the same number of elements.
    pub fn mul_const(self, k: &[T]) -> Result<Var<'t, T>> {
        let out = {
            let a = self.value();
            if k.len() != a.numel() {
                return Err(Error::shape("mul_const", format!("{} constants for {} elements", k.len(), a.numel())));
            }
            tensor(a.shape().to_vec(), a.data().iter().zip(k).map(|(&x, &y)| x * y).collect())
        };
        let k = k.to_vec();
        Ok(self.tape.push(out, &[self.id], move |c| vec![Some(c.grad.iter().zip(&k).map(|(&g, &y)| g * y).collect())]))
    }

    /// `x[.., C] + b[C]`, broadcasting the bias over rows.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&bias);
        let out = {
            let (x, b) = (self.value(), bias.value());
            let (_, cols) = rows_of(&x);
            if b.numel() != cols {
                return Err(Error::shape("add_bias", format!("bias {:?} for input {:?}", b.shape(), x.shape())));
            }
            let bd = b.data();
            let data = x.data().iter().enumerate().map(|(i, &v)| v + bd[i % cols]).collect();
            tensor(x.shape().to_vec(), data)
        };
        Ok(self.tape.push(out, &[self.id, bias.id], |c| {
            let cols = c.inputs[1].numel();
            let gb = c.needs[1].then(|| {
                let mut gb = vec![T::zero(); cols];
                for row in c.grad.chunks(cols) {
                    gb.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                }
                gb
            });
            vec![c.needs[0].then(|| c.grad.to_vec()), gb]
        }))
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        let out = {
            let a = self.value();
            tensor(a.shape().to_vec(), map_data(&a, T::exp))
        };
        Ok(self
            .tape
            .push(out, &[self.id], |c| vec![Some(c.grad.iter().zip(c.output.data()).map(|(&g, &y)| g * y).collect())]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Var<'t, T>> {
        let (k, cc, half) = (T::of(GELU_K), T::of(GELU_C), T::of(0.5));
        let out = {
            let a = self.value();
            tensor(a.shape().to_vec(), map_data(&a, |x| half * x * (T::one() + (k * (x + cc * x * x * x)).tanh())))
        };
        Ok(self.tape.push(out, &[self.id], move |c| {
            let three = T::of(3.0);
            let g = c
                .grad
                .iter()
                .zip(c.inputs[0].data())
                .map(|(&g, &x)| {
                    let t = (k * (x + cc * x * x * x)).tanh();
                    let d = half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * cc * x * x);
                    g * d
                })
                .collect();
            vec![Some(g)]
        }))
    }

    /// `max(x, floor)`; gradient passes where `x > floor`.
    pub fn clamp_min(self, floor: f64) -> Result<Var<'t, T>> {
        let m = T::of(floor);
        let out = {
            let a = self.value();
            tensor(a.shape().to_vec(), map_data(&a, |v| if v > m { v } else { m }))
        };
        Ok(self.tape.push(out, &[self.id], move |c| {
            let g = c.grad.iter().zip(c.inputs[0].data()).map(|(&g, &x)| if x > m { g } else { T::zero() }).collect();
            vec![Some(g)]
        }))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let shape = shape.into();
        let out = self.to_tensor().reshape(shape)?;
        Ok(self.tape.push(out, &[self.id], |c| vec![Some(c.grad.to_vec())]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (m, k, n);
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            tensor(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
        };
        Ok(self.tape.push(out, &[self.id, other.id], move |c| {
            let (a, b, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad);
            let ga = c.needs[0].then(|| {
                // dA = dC . B^T
                let mut ga = vec![T::zero(); m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &b[p * n..(p + 1) * n];
                        ga[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                    }
                }
                ga
            });
            let gb = c.needs[1].then(|| {
                // dB = A^T . dC
                let mut gb = vec![T::zero(); k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a[i * k + p];
                        if av == T::zero() {
                            continue;
                        }
                        gb[p * n..(p + 1) * n].iter_mut().zip(grow).for_each(|(o, &x)| *o += av * x);
                    }
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let (r, cols);
        let out = {
            let a = self.value();
            if a.rank() != 2 {
                return Err(Error::shape("transpose", format!("expected rank 2, got {:?}", a.shape())));
            }
            (r, cols) = (a.shape()[0], a.shape()[1]);
            tensor(vec![cols, r], transpose_raw(a.data(), r, cols))
        };
        Ok(self.tape.push(out, &[self.id], move |c| vec![Some(transpose_raw(c.grad, cols, r))]))
    }

    pub fn sum_all(self) -> Result<Var<'t, T>> {
        let out = Tensor::scalar(self.value().data().iter().copied().sum());
        Ok(self.tape.push(out, &[self.id], |c| vec![Some(vec![c.grad[0]; c.inputs[0].numel()])]))
    }

    pub fn mean_all(self) -> Result<Var<'t, T>> {
        let n = self.value().numel();
        if n == 0 {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let inv = T::one() / T::of(n as f64);
        let out = Tensor::scalar(self.value().data().iter().copied().sum::<T>() * inv);
        Ok(self.tape.push(out, &[self.id], move |c| vec![Some(vec![c.grad[0] * inv; n])]))
    }

    /// Sums the last axis away: `[.., C] -> [..]`.
    pub fn sum_last(self) -> Result<Var<'t, T>> {
        let out = {
            let a = self.value();
            let (_, cols) = rows_of(&a);
            let shape = a.shape()[..a.rank().saturating_sub(1)].to_vec();
            tensor(shape, a.data().chunks(cols.max(1)).map(|r| r.iter().copied().sum()).collect())
        };
        Ok(self.tape.push(out, &[self.id], |c| {
            let cols = c.inputs[0].last_dim();
            vec![Some(c.grad.iter().flat_map(|&g| std::iter::repeat_n(g, cols)).collect())]
        }))
    }

    /// Softmax along `axis` with max subtraction.
    ///
    /// `mask[i] == false` adds [`MASK_NEG`] to element `i` before normalizing.
    /// Any non-finite input is rejected.
    pub fn softmax(self, axis: usize, mask: Option<&[bool]>) -> Result<Var<'t, T>> {
        let (outer, n, inner);
        let out = {
            let a = self.value();
            if axis >= a.rank() {
                return Err(Error::shape("softmax", format!("axis {axis} for shape {:?}", a.shape())));
            }
            if !a.all_finite() {
                return Err(Error::NonFinite { op: "softmax" });
            }
            if let Some(m) = mask {
                if m.len() != a.numel() {
                    return Err(Error::shape("softmax", format!("mask of {} for {} elements", m.len(), a.numel())));
                }
            }
            outer = a.shape()[..axis].iter().product::<usize>();
            n = a.shape()[axis];
            inner = a.shape()[axis + 1..].iter().product::<usize>();
            let neg = T::of(MASK_NEG);
            let x: Vec<T> = match mask {
                Some(m) => a.data().iter().zip(m).map(|(&v, &ok)| if ok { v } else { v + neg }).collect(),
                None => a.data().to_vec(),
            };
            let mut y = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * n * inner + k * inner + i;
                    let mx = (0..n).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for k in 0..n {
                        let e = (x[at(k)] - mx).exp();
                        y[at(k)] = e;
                        z += e;
                    }
                    for k in 0..n {
                        y[at(k)] = y[at(k)] / z;
                    }
                }
            }
            tensor(a.shape().to_vec(), y)
        };
        Ok(self.tape.push(out, &[self.id], move |c| {
            let (y, g) = (c.output.data(), c.grad);
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * n * inner + k * inner + i;
                    let s: T = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                    for k in 0..n {
                        gx[at(k)] = y[at(k)] * (g[at(k)] - s);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `out[r] = x[idx[r]]` over rows.
    pub fn gather_rows(self, idx: Arc<[u32]>) -> Result<Var<'t, T>> {
        let (rows, cols);
        let out = {
            let x = self.value();
            (rows, cols) = rows_of(&x);
            if let Some(&bad) = idx.iter().find(|&&i| i as usize >= rows) {
                return Err(Error::shape("gather_rows", format!("row {bad} out of {rows}")));
            }
            let xd = x.data();
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &i in idx.iter() {
                let i = i as usize;
                data.extend_from_slice(&xd[i * cols..(i + 1) * cols]);
            }
            tensor(vec![idx.len(), cols], data)
        };
        Ok(self.tape.push(out, &[self.id], move |c| vec![Some(scatter_rows_raw(c.grad, &idx, rows, cols))]))
    }

    /// `out[idx[r]] += x[r]` over rows, producing `n_out` rows.
    pub fn scatter_add_rows(self, idx: Arc<[u32]>, n_out: usize) -> Result<Var<'t, T>> {
        let cols;
        let out = {
            let x = self.value();
            let rows;
            (rows, cols) = rows_of(&x);
            if rows != idx.len() {
                return Err(Error::shape("scatter_add_rows", format!("{} indices for {rows} rows", idx.len())));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i as usize >= n_out) {
                return Err(Error::shape("scatter_add_rows", format!("target {bad} out of {n_out}")));
            }
            tensor(vec![n_out, cols], scatter_rows_raw(x.data(), &idx, n_out, cols))
        };
        Ok(self.tape.push(out, &[self.id], move |c| {
            let mut g = Vec::with_capacity(idx.len() * cols);
            for &i in idx.iter() {
                let i = i as usize;
                g.extend_from_slice(&c.grad[i * cols..(i + 1) * cols]);
            }
            vec![Some(g)]
        }))
    }

    /// Columns `[start, start + len)` of a `[N, C]` view.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let (rows, cols);
        let out = {
            let x = self.value();
            (rows, cols) = rows_of(&x);
            if start + len > cols {
                return Err(Error::shape("slice_cols", format!("[{start}, {}) of {cols} columns", start + len)));
            }
            let data = x.data().chunks(cols).flat_map(|r| r[start..start + len].iter().copied()).collect();
            tensor(vec![rows, len], data)
        };
        Ok(self.tape.push(out, &[self.id], move |c| {
            let mut g = vec![T::zero(); rows * cols];
            for (r, gr) in c.grad.chunks(len).enumerate() {
                g[r * cols + start..r * cols + start + len].copy_from_slice(gr);
            }
            vec![Some(g)]
        }))
    }

    /// Row-wise dot products against `L` slots: `a[N, C] . b[N*L, C] -> [N, L]`.
    pub fn slot_dot(self, slots: Var<'t, T>, l: usize) -> Result<Var<'t, T>> {
        self.same_tape(&slots);
        let out = {
            let (a, b) = (self.value(), slots.value());
            let (n, ca) = rows_of(&a);
            let (nb, cb) = rows_of(&b);
            if ca != cb || nb != n * l {
                return Err(Error::shape("slot_dot", format!("{:?} with {:?} and L={l}", a.shape(), b.shape())));
            }
            let (ad, bd) = (a.data(), b.data());
            let mut data = Vec::with_capacity(n * l);
            for p in 0..n {
                let ar = &ad[p * ca..(p + 1) * ca];
                for s in 0..l {
                    let br = &bd[(p * l + s) * ca..(p * l + s + 1) * ca];
                    data.push(ar.iter().zip(br).map(|(&x, &y)| x * y).sum());
                }
            }
            tensor(vec![n, l], data)
        };
        Ok(self.tape.push(out, &[self.id, slots.id], move |c| {
            let (a, b, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad);
            let cols = c.inputs[0].last_dim();
            let n = g.len() / l;
            let mut ga = c.needs[0].then(|| vec![T::zero(); a.len()]);
            let mut gb = c.needs[1].then(|| vec![T::zero(); b.len()]);
            for p in 0..n {
                for s in 0..l {
                    let gv = g[p * l + s];
                    let row = p * l + s;
                    if let Some(ga) = ga.as_mut() {
                        let br = &b[row * cols..(row + 1) * cols];
                        ga[p * cols..(p + 1) * cols].iter_mut().zip(br).for_each(|(o, &y)| *o += gv * y);
                    }
                    if let Some(gb) = gb.as_mut() {
                        let ar = &a[p * cols..(p + 1) * cols];
                        gb[row * cols..(row + 1) * cols].iter_mut().zip(ar).for_each(|(o, &x)| *o += gv * x);
                    }
                }
            }
            vec![ga, gb]
        }))
    }

    /// Weighted slot sum: `w[N, L], v[N*L, C] -> [N, C]` with `out[n] = sum_l w[n,l] v[n*L+l]`.
    pub fn slot_combine(self, values: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&values);
        let out = {
            let (w, v) = (self.value(), values.value());
            let (n, l) = rows_of(&w);
            let (nv, cols) = rows_of(&v);
            if nv != n * l {
                return Err(Error::shape("slot_combine", format!("weights {:?} values {:?}", w.shape(), v.shape())));
            }
            let (wd, vd) = (w.data(), v.data());
            let mut data = vec![T::zero(); n * cols];
            for p in 0..n {
                let o = &mut data[p * cols..(p + 1) * cols];
                for s in 0..l {
                    let ws = wd[p * l + s];
                    if ws == T::zero() {
                        continue;
                    }
                    let row = p * l + s;
                    o.iter_mut().zip(&vd[row * cols..(row + 1) * cols]).for_each(|(a, &b)| *a += ws * b);
                }
            }
            tensor(vec![n, cols], data)
        };
        Ok(self.tape.push(out, &[self.id, values.id], |c| {
            let (w, v, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad);
            let l = c.inputs[0].last_dim();
            let cols = c.inputs[1].last_dim();
            let n = w.len() / l.max(1);
            let gw = c.needs[0].then(|| {
                let mut gw = vec![T::zero(); w.len()];
                for p in 0..n {
                    let gr = &g[p * cols..(p + 1) * cols];
                    for s in 0..l {
                        let row = p * l + s;
                        gw[row] = gr.iter().zip(&v[row * cols..(row + 1) * cols]).map(|(&x, &y)| x * y).sum();
                    }
                }
                gw
            });
            let gv = c.needs[1].then(|| {
                let mut gv = vec![T::zero(); v.len()];
                for p in 0..n {
                    let gr = &g[p * cols..(p + 1) * cols];
                    for s in 0..l {
                        let row = p * l + s;
                        let ws = w[row];
                        gv[row * cols..(row + 1) * cols].iter_mut().zip(gr).for_each(|(o, &x)| *o = ws * x);
                    }
                }
                gv
            });
            vec![gw, gv]
        }))
    }

    /// Per-row softmax cross-entropy against integer labels: `[N, K] -> [N]`.
    ///
    /// Rows whose label is `>= K` (e.g. the ignore id) contribute zero loss and zero gradient.
    pub fn cross_entropy_rows(self, labels: Arc<[u32]>) -> Result<Var<'t, T>> {
        let out = {
            let x = self.value();
            let (n, k) = rows_of(&x);
            if labels.len() != n {
                return Err(Error::shape("cross_entropy_rows", format!("{} labels for {n} rows", labels.len())));
            }
            if !x.all_finite() {
                return Err(Error::NonFinite { op: "cross_entropy_rows" });
            }
            let data = x
                .data()
                .chunks(k)
                .zip(labels.iter())
                .map(|(row, &lbl)| {
                    if lbl as usize >= k {
                        return T::zero();
                    }
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
                    lse - row[lbl as usize]
                })
                .collect();
            tensor(vec![n], data)
        };
        Ok(self.tape.push(out, &[self.id], move |c| {
            let x = c.inputs[0];
            let k = x.last_dim();
            let mut g = vec![T::zero(); x.numel()];
            for (r, (row, &lbl)) in x.data().chunks(k).zip(labels.iter()).enumerate() {
                if lbl as usize >= k {
                    continue;
                }
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
                let gr = c.grad[r];
                for (j, &v) in row.iter().enumerate() {
                    let p = (v - mx).exp() / z;
                    let t = if j == lbl as usize { T::one() } else { T::zero() };
                    g[r * k + j] = gr * (p - t);
                }
            }
            vec![Some(g)]
        }))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let eps = T::of(eps);
        let out = {
            let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
            let (_, cols) = rows_of(&x);
            if gm.numel() != cols || bt.numel() != cols {
                return Err(Error::shape("layer_norm", format!("affine {:?} for input {:?}", gm.shape(), x.shape())));
            }
            let mut data = Vec::with_capacity(x.numel());
            for row in x.data().chunks(cols) {
                let (mu, rstd) = moments(row, eps);
                for j in 0..cols {
                    data.push((row[j] - mu) * rstd * gm.data()[j] + bt.data()[j]);
                }
            }
            tensor(x.shape().to_vec(), data)
        };
        Ok(self.tape.push(out, &[self.id, gamma.id, beta.id], move |c| {
            let (x, gm) = (c.inputs[0], c.inputs[1].data());
            let cols = x.last_dim();
            let inv_n = T::one() / T::of(cols as f64);
            let mut gx = c.needs[0].then(|| vec![T::zero(); x.numel()]);
            let mut gg = vec![T::zero(); cols];
            let mut gb = vec![T::zero(); cols];
            let mut xhat = vec![T::zero(); cols];
            let mut gxhat = vec![T::zero(); cols];
            for (r, row) in x.data().chunks(cols).enumerate() {
                let (mu, rstd) = moments(row, eps);
                let grow = &c.grad[r * cols..(r + 1) * cols];
                for j in 0..cols {
                    xhat[j] = (row[j] - mu) * rstd;
                    gxhat[j] = grow[j] * gm[j];
                    gg[j] += grow[j] * xhat[j];
                    gb[j] += grow[j];
                }
                if let Some(gx) = gx.as_mut() {
                    let m1: T = gxhat.iter().copied().sum::<T>() * inv_n;
                    let m2: T = gxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                    for j in 0..cols {
                        gx[r * cols + j] = rstd * (gxhat[j] - m1 - xhat[j] * m2);
                    }
                }
            }
            vec![gx, c.needs[1].then_some(gg), c.needs[2].then_some(gb)]
        }))
    }

    /// 2-D convolution over an `[H, W, Cin]` map with an `[K, K, Cin, Cout]` kernel and zero padding.
    pub fn conv2d(self, weight: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        self.same_tape(&weight);
        let geom;
        let out = {
            let (x, w) = (self.value(), weight.value());
            if x.rank() != 3 || w.rank() != 4 || w.shape()[0] != w.shape()[1] || w.shape()[2] != x.shape()[2] {
                return Err(Error::shape("conv2d", format!("input {:?} kernel {:?}", x.shape(), w.shape())));
            }
            if stride == 0 {
                return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
            }
            let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (k, cout) = (w.shape()[0], w.shape()[3]);
            if h + 2 * pad < k || wd + 2 * pad < k {
                return Err(Error::shape("conv2d", format!("kernel {k} larger than padded input {:?}", x.shape())));
            }
            geom = ConvGeom {
                h,
                w: wd,
                cin,
                k,
                cout,
                stride,
                pad,
                ho: (h + 2 * pad - k) / stride + 1,
                wo: (wd + 2 * pad - k) / stride + 1,
            };
            tensor(vec![geom.ho, geom.wo, cout], conv_forward(x.data(), w.data(), &geom))
        };
        Ok(self.tape.push(out, &[self.id, weight.id], move |c| {
            let (gx, gw) = conv_backward(c.inputs[0].data(), c.inputs[1].data(), c.grad, &geom, c.needs[0], c.needs[1]);
            vec![gx, gw]
        }))
    }

    /// Applies a fixed sparse linear map to rows: `out[j] = sum_k w_jk x[src_jk]`.
    pub fn resample(self, map: Arc<SparseMap>, out_shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let out_shape = out_shape.into();
        let cols;
        let out = {
            let x = self.value();
            let rows;
            (rows, cols) = rows_of(&x);
            if rows != map.in_rows || out_shape.iter().product::<usize>() != map.out_rows() * cols {
                return Err(Error::shape(
                    "resample",
                    format!(
                        "map {}->{} rows, input {:?}, output {out_shape:?}",
                        map.in_rows,
                        map.out_rows(),
                        x.shape()
                    ),
                ));
            }
            tensor(out_shape, map.apply(x.data(), cols))
        };
        Ok(self.tape.push(out, &[self.id], move |c| vec![Some(map.apply_transpose(c.grad, cols))]))
    }
}

/// Concatenates `[N, C_i]` tensors along columns.
pub fn concat_cols<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat_cols of nothing".into()))?;
    let tape = first.tape;
    let widths: Vec<usize> = parts.iter().map(|p| p.value().last_dim()).collect();
    let rows = first.value().numel() / widths[0].max(1);
    let total: usize = widths.iter().sum();
    let mut data = vec![T::zero(); rows * total];
    let mut off = 0;
    for (p, &wdt) in parts.iter().zip(&widths) {
        let v = p.value();
        if v.numel() != rows * wdt {
            return Err(Error::shape("concat_cols", format!("part {:?} does not have {rows} rows", v.shape())));
        }
        for (r, src) in v.data().chunks(wdt).enumerate() {
            data[r * total + off..r * total + off + wdt].copy_from_slice(src);
        }
        off += wdt;
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(tape.push(tensor(vec![rows, total], data), &ids, move |c| {
        let mut off = 0;
        widths
            .iter()
            .enumerate()
            .map(|(i, &wdt)| {
                let g =
                    c.needs[i].then(|| c.grad.chunks(total).flat_map(|r| r[off..off + wdt].iter().copied()).collect());
                off += wdt;
                g
            })
            .collect()
    }))
}

fn moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mu = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
    (mu, T::one() / (var + eps).sqrt())
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            orow.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(o, &bv)| *o += av * bv);
        }
    }
    out
}

fn transpose_raw<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn scatter_rows_raw<T: Scalar>(x: &[T], idx: &[u32], n_out: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n_out * cols];
    for (r, &i) in idx.iter().enumerate() {
        let i = i as usize;
        out[i * cols..(i + 1) * cols].iter_mut().zip(&x[r * cols..(r + 1) * cols]).for_each(|(o, &v)| *o += v);
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Input pixel for output `(oy, ox)` and tap `(ky, kx)`, if inside the image.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then(|| iy * self.w + ix)
    }
}

fn conv_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.ho * g.wo * g.cout];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let orow = &mut out[(oy * g.wo + ox) * g.cout..(oy * g.wo + ox + 1) * g.cout];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let Some(src) = g.src(oy, ox, ky, kx) else { continue };
                    let xin = &x[src * g.cin..(src + 1) * g.cin];
                    let wtap = &w[(ky * g.k + kx) * g.cin * g.cout..(ky * g.k + kx + 1) * g.cin * g.cout];
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        let wrow = &wtap[ci * g.cout..(ci + 1) * g.cout];
                        orow.iter_mut().zip(wrow).for_each(|(o, &wv)| *o += xv * wv);
                    }
                }
            }
        }
    }
    out
}

fn conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let grow = &gy[(oy * g.wo + ox) * g.cout..(oy * g.wo + ox + 1) * g.cout];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let Some(src) = g.src(oy, ox, ky, kx) else { continue };
                    let tap = (ky * g.k + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let wrow = tap + ci * g.cout;
                        if let Some(gx) = gx.as_mut() {
                            let d: T = grow.iter().zip(&w[wrow..wrow + g.cout]).map(|(&a, &b)| a * b).sum();
                            gx[src * g.cin + ci] += d;
                        }
                        if let Some(gw) = gw.as_mut() {
                            let xv = x[src * g.cin + ci];
                            if xv != T::zero() {
                                gw[wrow..wrow + g.cout].iter_mut().zip(grow).for_each(|(o, &gv)| *o += xv * gv);
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Fixed sparse row map (CSR layout). Weights are stored in `f64` and cast on use.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap {
    pub in_rows: usize,
    offsets: Vec<usize>,
    src: Vec<u32>,
    weight: Vec<f64>,
}

impl SparseMap {
    pub fn new(in_rows: usize) -> Self {
        SparseMap { in_rows, offsets: vec![0], src: Vec::new(), weight: Vec::new() }
    }

    /// Appends one output row as a list of `(source row, weight)` pairs.
    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (s, w) in entries {
            debug_assert!(s < self.in_rows);
            self.src.push(s as u32);
            self.weight.push(w);
        }
        self.offsets.push(self.src.len());
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.offsets[j]..self.offsets[j + 1]).map(move |e| (self.src[e] as usize, self.weight[e]))
    }

    pub fn apply<T: Scalar>(&self, x: &[T], cols: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.out_rows() * cols];
        for j in 0..self.out_rows() {
            let o = &mut out[j * cols..(j + 1) * cols];
            for (s, w) in self.row(j) {
                let w = T::of(w);
                o.iter_mut().zip(&x[s * cols..(s + 1) * cols]).for_each(|(a, &b)| *a += w * b);
            }
        }
        out
    }

    pub fn apply_transpose<T: Scalar>(&self, g: &[T], cols: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.in_rows * cols];
        for j in 0..self.out_rows() {
            let gr = &g[j * cols..(j + 1) * cols];
            for (s, w) in self.row(j) {
                let w = T::of(w);
                out[s * cols..(s + 1) * cols].iter_mut().zip(gr).for_each(|(a, &b)| *a += w * b);
            }
        }
        out
    }
}

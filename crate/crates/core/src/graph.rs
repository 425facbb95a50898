//! Minimal reverse-mode automatic differentiation on `ndarray` tensors.
//!
//! A [`Graph`] is an append-only tape of nodes built per forward pass. Every
//! op records a closure that, given the upstream gradient, scatters gradient
//! contributions to its parents. [`Graph::backward`] walks the tape in
//! reverse and returns gradients for named parameter leaves (and any other
//! leaf, on request).
//!
//! The tape is deliberately small: only the ops the model needs, each with a
//! hand-derived adjoint that is finite-difference tested below.

use std::cell::RefCell;
use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, IxDyn};

use crate::geometry::AlignmentMap;
use crate::scalar::Scalar;

/// Gradient sink passed to backward closures.
pub struct GradSink<'a, T: Scalar> {
    grads: &'a mut Vec<Option<ArrayD<T>>>,
    fixed: &'a [bool],
}

impl<T: Scalar> GradSink<'_, T> {
    fn add(&mut self, node: usize, delta: ArrayD<T>) {
        if self.fixed[node] {
            return;
        }
        match &mut self.grads[node] {
            Some(acc) => *acc += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

type BackFn<T> = Box<dyn Fn(&[ArrayD<T>], &ArrayD<T>, &mut GradSink<T>)>;

enum BackStep<T: Scalar> {
    /// Leaf tracked for gradients (named parameters and inputs).
    Leaf,
    /// Constant; gradients stop here.
    Fixed,
    Op(BackFn<T>),
}

struct Inner<T: Scalar> {
    values: Vec<ArrayD<T>>,
    backs: Vec<BackStep<T>>,
    params: BTreeMap<String, usize>,
}

/// Append-only autodiff tape.
pub struct Graph<T: Scalar> {
    inner: RefCell<Inner<T>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    pub id: usize,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    by_node: Vec<Option<ArrayD<T>>>,
    params: BTreeMap<String, usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a named parameter, if it
    /// participated in the computation.
    pub fn param(&self, name: &str) -> Option<&ArrayD<T>> {
        self.params
            .get(name)
            .and_then(|id| self.by_node.get(*id))
            .and_then(|g| g.as_ref())
    }

    /// Gradient for an arbitrary leaf node (e.g. an input image).
    pub fn node(&self, var_id: usize) -> Option<&ArrayD<T>> {
        self.by_node.get(var_id).and_then(|g| g.as_ref())
    }

    /// All named parameter gradients, ordered by name.
    pub fn into_param_map(mut self) -> BTreeMap<String, ArrayD<T>> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            if let Some(g) = self.by_node[*id].take() {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            inner: RefCell::new(Inner {
                values: Vec::new(),
                backs: Vec::new(),
                params: BTreeMap::new(),
            }),
        }
    }

    fn push(&self, value: ArrayD<T>, back: BackStep<T>) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.backs.push(back);
        Var {
            graph: self,
            id: inner.values.len() - 1,
        }
    }

    /// Named parameter leaf. Repeated lookups of the same name return the
    /// same node so gradients accumulate correctly across uses.
    pub fn param(&self, name: &str, value: ArrayD<T>) -> Var<'_, T> {
        if let Some(&id) = self.inner.borrow().params.get(name) {
            return Var { graph: self, id };
        }
        let var = self.push(value, BackStep::Leaf);
        self.inner
            .borrow_mut()
            .params
            .insert(name.to_string(), var.id);
        var
    }

    /// Anonymous leaf that still receives a gradient (e.g. input images).
    pub fn input(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push(value, BackStep::Leaf)
    }

    /// Constant; no gradient flows into it.
    pub fn constant(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push(value, BackStep::Fixed)
    }

    pub fn value(&self, var: Var<'_, T>) -> ArrayD<T> {
        self.inner.borrow().values[var.id].clone()
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let inner = self.inner.borrow();
        assert_eq!(
            inner.values[loss.id].len(),
            1,
            "backward expects a scalar loss"
        );
        let fixed: Vec<bool> = inner
            .backs
            .iter()
            .take(loss.id + 1)
            .map(|b| matches!(b, BackStep::Fixed))
            .collect();
        let mut grads: Vec<Option<ArrayD<T>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(ArrayD::ones(inner.values[loss.id].raw_dim()));
        for id in (0..=loss.id).rev() {
            if grads[id].is_none() {
                continue;
            }
            if let BackStep::Op(f) = &inner.backs[id] {
                let g = grads[id].take().expect("checked above");
                let mut sink = GradSink {
                    grads: &mut grads,
                    fixed: &fixed,
                };
                f(&inner.values, &g, &mut sink);
            }
            // Leaf grads stay in place for later retrieval.
        }
        Gradients {
            by_node: grads,
            params: inner.params.clone(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().values.len()
    }
}

fn with_value<T: Scalar, R>(g: &Graph<T>, id: usize, f: impl FnOnce(&ArrayD<T>) -> R) -> R {
    let inner = g.inner.borrow();
    f(&inner.values[id])
}

fn with_two<T: Scalar, R>(
    g: &Graph<T>,
    a: usize,
    b: usize,
    f: impl FnOnce(&ArrayD<T>, &ArrayD<T>) -> R,
) -> R {
    let inner = g.inner.borrow();
    f(&inner.values[a], &inner.values[b])
}

fn sum_rows<T: Scalar>(m: &ArrayViewD<'_, T>) -> ArrayD<T> {
    // M x K -> 1 x K
    let m2 = m.view().into_dimensionality::<Ix2>().expect("2-d");
    m2.sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn()
}

fn sum_cols<T: Scalar>(m: &ArrayViewD<'_, T>) -> ArrayD<T> {
    // M x K -> M x 1
    let m2 = m.view().into_dimensionality::<Ix2>().expect("2-d");
    m2.sum_axis(Axis(1)).insert_axis(Axis(1)).into_dyn()
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn shape(&self) -> Vec<usize> {
        with_value(self.graph, self.id, |v| v.shape().to_vec())
    }

    /// Owned copy of this node's value.
    pub fn eval(&self) -> ArrayD<T> {
        self.graph.value(*self)
    }

    pub fn scalar_value(&self) -> T {
        with_value(self.graph, self.id, |v| {
            assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
            v.iter().copied().next().expect("non-empty")
        })
    }

    fn unary(
        &self,
        value: ArrayD<T>,
        back: impl Fn(&ArrayD<T>, &ArrayD<T>) -> ArrayD<T> + 'static,
    ) -> Var<'g, T> {
        let pid = self.id;
        self.graph.push(
            value,
            BackStep::Op(Box::new(move |values, g, sink| {
                // Own value is at pid's child; closures capture the child id
                // lazily via the node they were installed on, so pass the
                // parent value and let the op recompute what it needs.
                sink.add(pid, back(g, &values[pid]));
            })),
        )
    }

    /// Elementwise add (same shape).
    pub fn add(&self, rhs: Var<'g, T>) -> Var<'g, T> {
        let v = with_two(self.graph, self.id, rhs.id, |a, b| a + b);
        let (pa, pb) = (self.id, rhs.id);
        self.graph.push(
            v,
            BackStep::Op(Box::new(move |_, g, sink| {
                sink.add(pa, g.clone());
                sink.add(pb, g.clone());
            })),
        )
    }

    /// Elementwise subtract (same shape).
    pub fn sub(&self, rhs: Var<'g, T>) -> Var<'g, T> {
        let v = with_two(self.graph, self.id, rhs.id, |a, b| a - b);
        let (pa, pb) = (self.id, rhs.id);
        self.graph.push(
            v,
            BackStep::Op(Box::new(move |_, g, sink| {
                sink.add(pa, g.clone());
                sink.add(pb, g.mapv(|x| -x));
            })),
        )
    }

    /// Elementwise multiply (same shape).
    pub fn mul(&self, rhs: Var<'g, T>) -> Var<'g, T> {
        let v = with_two(self.graph, self.id, rhs.id, |a, b| a * b);
        let (pa, pb) = (self.id, rhs.id);
        self.graph.push(
            v,
            BackStep::Op(Box::new(move |values, g, sink| {
                sink.add(pa, g * &values[pb]);
                sink.add(pb, g * &values[pa]);
            })),
        )
    }

    /// Elementwise multiply by a constant array (no gradient to it).
    pub fn mul_const(&self, c: &ArrayD<T>) -> Var<'g, T> {
        let v = with_value(self.graph, self.id, |a| a * c);
        let cc = c.clone();
        self.unary(v, move |g, _| g * &cc)
    }

    /// `alpha * x + beta`, constants.
    pub fn affine(&self, alpha: T, beta: T) -> Var<'g, T> {
        let v = with_value(self.graph, self.id, |a| a.mapv(|x| alpha * x + beta));
        self.unary(v, move |g, _| g.mapv(|x| alpha * x))
    }

    pub fn scale(&self, alpha: T) -> Var<'g, T> {
        self.affine(alpha, T::zero())
    }

    /// Broadcast add of a `1 x K` row vector onto an `M x K` matrix.
    pub fn add_rowvec(&self, row: Var<'g, T>) -> Var<'g, T> {
        let v = with_two(self.graph, self.id, row.id, |m, r| m + r);
        let (pm, pr) = (self.id, row.id);
        self.graph.push(
            v,
            BackStep::Op(Box::new(move |_, g, sink| {
                sink.add(pm, g.clone());
                sink.add(pr, sum_rows(&g.view()));
            })),
        )
    }

    /// Broadcast multiply of a `1 x K` row vector onto an `M x K` matrix.
    pub fn mul_rowvec(&self, row: Var<'g, T>) -> Var<'g, T> {
        let v = with_two(self.graph, self.id, row.id, |m, r| m * r);
        let (pm, pr) = (self.id, row.id);
        self.graph.push(
            v,
            BackStep::Op(Box::new(move |values, g, sink| {
                sink.add(pm, g * &values[pr]);
                sink.add(pr, sum_rows(&(g * &values[pm]).view()));
            })),
        )
    }

    /// Broadcast subtract of an `M x 1` column vector from an `M x K` matrix.
    pub fn sub_colvec(&self, col: Var<'g, T>) -> Var<'g, T> {
        let v = with_two(self.graph, self.id, col.id, |m, c| m - c);
        let (pm, pc) = (self.id, col.id);
        self.graph.push(
            v,
            BackStep::Op(Box::new(move |_, g, sink| {
                sink.add(pm, g.clone());
                sink.add(pc, sum_cols(&g.view()).mapv(|x| -x));
            })),
        )
    }

    /// Broadcast multiply by an `M x 1` column vector.
    pub fn mul_colvec(&self, col: Var<'g, T>) -> Var<'g, T> {
        let v = with_two(self.graph, self.id, col.id, |m, c| m * c);
        let (pm, pc) = (self.id, col.id);
        self.graph.push(
            v,
            BackStep::Op(Box::new(move |values, g, sink| {
                sink.add(pm, g * &values[pc]);
                sink.add(pc, sum_cols(&(g * &values[pm]).view()));
            })),
        )
    }

    /// Broadcast divide by an `M x 1` column vector.
    pub fn div_colvec(&self, col: Var<'g, T>) -> Var<'g, T> {
        let v = with_two(self.graph, self.id, col.id, |m, c| m / c);
        let (pm, pc) = (self.id, col.id);
        let own = v.clone();
        self.graph.push(
            v,
            BackStep::Op(Box::new(move |values, g, sink| {
                let c = &values[pc];
                sink.add(pm, g / c);
                sink.add(pc, sum_cols(&(g * &own).view()).mapv(|x| -x) / c);
            })),
        )
    }

    /// Matrix product of `M x K` and `K x P`.
    pub fn matmul(&self, rhs: Var<'g, T>) -> Var<'g, T> {
        let v = with_two(self.graph, self.id, rhs.id, |a, b| {
            let a2 = a.view().into_dimensionality::<Ix2>().expect("lhs 2-d");
            let b2 = b.view().into_dimensionality::<Ix2>().expect("rhs 2-d");
            a2.dot(&b2).into_dyn()
        });
        let (pa, pb) = (self.id, rhs.id);
        self.graph.push(
            v,
            BackStep::Op(Box::new(move |values, g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
                let a2 = values[pa]
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("2-d");
                let b2 = values[pb]
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("2-d");
                sink.add(pa, g2.dot(&b2.t()).into_dyn());
                sink.add(pb, a2.t().dot(&g2).into_dyn());
            })),
        )
    }

    pub fn transpose(&self) -> Var<'g, T> {
        let v = with_value(self.graph, self.id, |a| {
            a.view()
                .into_dimensionality::<Ix2>()
                .expect("2-d")
                .t()
                .to_owned()
                .into_dyn()
        });
        self.unary(v, |g, _| {
            g.view()
                .into_dimensionality::<Ix2>()
                .expect("2-d")
                .t()
                .to_owned()
                .into_dyn()
        })
    }

    pub fn exp(&self) -> Var<'g, T> {
        let v = with_value(self.graph, self.id, |a| a.mapv(|x| x.exp()));
        let own = v.clone();
        self.unary(v, move |g, _| g * &own)
    }

    pub fn sqrt(&self) -> Var<'g, T> {
        let v = with_value(self.graph, self.id, |a| a.mapv(|x| x.sqrt()));
        let own = v.clone();
        let half = T::from_f64(0.5);
        self.unary(v, move |g, _| {
            let mut out = g / &own;
            out.mapv_inplace(|x| x * half);
            out
        })
    }

    pub fn rsqrt(&self) -> Var<'g, T> {
        let v = with_value(self.graph, self.id, |a| a.mapv(|x| x.sqrt().recip()));
        let own = v.clone();
        let half = T::from_f64(-0.5);
        self.unary(v, move |g, _| {
            let mut out = own.mapv(|y| y * y * y);
            out *= g;
            out.mapv_inplace(|x| x * half);
            out
        })
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        let one = T::one();
        let v = with_value(self.graph, self.id, |a| {
            a.mapv(|x| one / (one + (-x).exp()))
        });
        let own = v.clone();
        self.unary(v, move |g, _| {
            let mut out = own.mapv(|y| y * (one - y));
            out *= g;
            out
        })
    }

    pub fn tanh(&self) -> Var<'g, T> {
        let v = with_value(self.graph, self.id, |a| a.mapv(|x| x.tanh()));
        let own = v.clone();
        let one = T::one();
        self.unary(v, move |g, _| {
            let mut out = own.mapv(|y| one - y * y);
            out *= g;
            out
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'g, T> {
        let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let a3 = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let one = T::one();
        let three = T::from_f64(3.0);
        let v = with_value(self.graph, self.id, |arr| {
            arr.mapv(|x| half * x * (one + (c * (x + a3 * x * x * x)).tanh()))
        });
        self.unary(v, move |g, x| {
            let mut out = x.mapv(|x| {
                let t = (c * (x + a3 * x * x * x)).tanh();
                let sech2 = one - t * t;
                half * (one + t) + half * x * sech2 * c * (one + three * a3 * x * x)
            });
            out *= g;
            out
        })
    }

    /// Row-wise (`axis = 1`) or column-wise (`axis = 0`) softmax on a matrix.
    pub fn softmax(&self, axis: usize) -> Var<'g, T> {
        let v = with_value(self.graph, self.id, |a| {
            softmax_array(&a.view().into_dimensionality::<Ix2>().expect("2-d"), axis).into_dyn()
        });
        let own = v.clone();
        self.unary(v, move |g, _| {
            let y = own.view().into_dimensionality::<Ix2>().expect("2-d");
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
            let gy = &g2 * &y;
            let s = gy.sum_axis(Axis(axis)).insert_axis(Axis(axis));
            ((&g2 - &s) * &y).into_dyn()
        })
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&self) -> Var<'g, T> {
        let v = with_value(self.graph, self.id, |a| {
            let a2 = a.view().into_dimensionality::<Ix2>().expect("2-d");
            let mut out = a2.to_owned();
            for mut row in out.axis_iter_mut(Axis(0)) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
                row.mapv_inplace(|x| x - lse);
            }
            out.into_dyn()
        });
        let own = v.clone();
        self.unary(v, move |g, _| {
            let y = own.view().into_dimensionality::<Ix2>().expect("2-d");
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
            let rowsum = g2.sum_axis(Axis(1)).insert_axis(Axis(1));
            let softmax = y.mapv(|x| x.exp());
            (&g2 - &(&softmax * &rowsum)).into_dyn()
        })
    }

    pub fn sum_all(&self) -> Var<'g, T> {
        let v = with_value(self.graph, self.id, |a| {
            ArrayD::from_elem(IxDyn(&[1]), a.sum())
        });
        self.unary(v, |g, x| {
            let g0 = g.iter().copied().next().expect("scalar");
            ArrayD::from_elem(x.raw_dim(), g0)
        })
    }

    pub fn mean_all(&self) -> Var<'g, T> {
        let n = with_value(self.graph, self.id, |a| a.len());
        self.sum_all().scale(T::from_f64(1.0 / n as f64))
    }

    /// Sum over `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis_keep(&self, axis: usize) -> Var<'g, T> {
        let v = with_value(self.graph, self.id, |a| {
            let a2 = a.view().into_dimensionality::<Ix2>().expect("2-d");
            a2.sum_axis(Axis(axis)).insert_axis(Axis(axis)).into_dyn()
        });
        self.unary(v, move |g, x| {
            let shape = x.shape().to_vec();
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
            g2.broadcast((shape[0], shape[1]))
                .expect("broadcast")
                .to_owned()
                .into_dyn()
        })
    }

    /// Rows `r0..r1` of a matrix.
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Var<'g, T> {
        let v = with_value(self.graph, self.id, |a| {
            let a2 = a.view().into_dimensionality::<Ix2>().expect("2-d");
            a2.slice(ndarray::s![r0..r1, ..]).to_owned().into_dyn()
        });
        self.unary(v, move |g, x| {
            let mut out = ArrayD::zeros(x.raw_dim());
            let mut o2 = out
                .view_mut()
                .into_dimensionality::<Ix2>()
                .expect("2-d");
            o2.slice_mut(ndarray::s![r0..r1, ..])
                .assign(&g.view().into_dimensionality::<Ix2>().expect("2-d"));
            out
        })
    }

    /// Columns `c0..c1` of a matrix.
    pub fn slice_cols(&self, c0: usize, c1: usize) -> Var<'g, T> {
        let v = with_value(self.graph, self.id, |a| {
            let a2 = a.view().into_dimensionality::<Ix2>().expect("2-d");
            a2.slice(ndarray::s![.., c0..c1]).to_owned().into_dyn()
        });
        self.unary(v, move |g, x| {
            let mut out = ArrayD::zeros(x.raw_dim());
            let mut o2 = out
                .view_mut()
                .into_dimensionality::<Ix2>()
                .expect("2-d");
            o2.slice_mut(ndarray::s![.., c0..c1])
                .assign(&g.view().into_dimensionality::<Ix2>().expect("2-d"));
            out
        })
    }

    /// Tile a `1 x K` row into an `M x K` matrix.
    pub fn broadcast_rows(&self, m: usize) -> Var<'g, T> {
        let v = with_value(self.graph, self.id, |a| {
            let a2 = a.view().into_dimensionality::<Ix2>().expect("2-d");
            a2.broadcast((m, a2.ncols()))
                .expect("broadcast")
                .to_owned()
                .into_dyn()
        });
        self.unary(v, |g, _| sum_rows(&g.view()))
    }

    /// Resample grid-shaped rows through an [`AlignmentMap`]; linear in the
    /// input features.
    pub fn apply_alignment(&self, map: &AlignmentMap) -> Var<'g, T> {
        let v = with_value(self.graph, self.id, |a| {
            let a2 = a.view().into_dimensionality::<Ix2>().expect("2-d");
            crate::geometry::resample_features(&a2, map).into_dyn()
        });
        let map = map.clone();
        self.unary(v, move |g, x| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
            let mut out = ndarray::Array2::<T>::zeros((x.shape()[0], x.shape()[1]));
            for (t, entry) in map.entries.iter().enumerate() {
                for &(src, w) in &entry.taps {
                    let w = T::from_f64(w);
                    let grow = g2.row(t);
                    let mut orow = out.row_mut(src);
                    orow.zip_mut_with(&grow, |o, &gv| *o = *o + w * gv);
                }
            }
            out.into_dyn()
        })
    }
}

/// Concatenate matrices along rows.
pub fn concat_rows<'g, T: Scalar>(graph: &'g Graph<T>, parts: &[Var<'g, T>]) -> Var<'g, T> {
    assert!(!parts.is_empty());
    let (value, splits) = {
        let inner = graph.inner.borrow();
        let views: Vec<_> = parts
            .iter()
            .map(|p| {
                inner.values[p.id]
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("2-d")
            })
            .collect();
        let splits: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
        let value = ndarray::concatenate(
            Axis(0),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat rows")
        .into_dyn();
        (value, splits)
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    graph.push(
        value,
        BackStep::Op(Box::new(move |_, g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
            let mut r = 0;
            for (&id, &rows) in ids.iter().zip(&splits) {
                sink.add(
                    id,
                    g2.slice(ndarray::s![r..r + rows, ..]).to_owned().into_dyn(),
                );
                r += rows;
            }
        })),
    )
}

/// Concatenate matrices along columns.
pub fn concat_cols<'g, T: Scalar>(graph: &'g Graph<T>, parts: &[Var<'g, T>]) -> Var<'g, T> {
    assert!(!parts.is_empty());
    let (value, splits) = {
        let inner = graph.inner.borrow();
        let views: Vec<_> = parts
            .iter()
            .map(|p| {
                inner.values[p.id]
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("2-d")
            })
            .collect();
        let splits: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
        let value = ndarray::concatenate(
            Axis(1),
            &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
        )
        .expect("concat cols")
        .into_dyn();
        (value, splits)
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    graph.push(
        value,
        BackStep::Op(Box::new(move |_, g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
            let mut c = 0;
            for (&id, &cols) in ids.iter().zip(&splits) {
                sink.add(
                    id,
                    g2.slice(ndarray::s![.., c..c + cols]).to_owned().into_dyn(),
                );
                c += cols;
            }
        })),
    )
}

/// Flatten non-overlapping `p x p` patches of an `H x W x C` image into an
/// `N x (p*p*C)` matrix, rows in row-major patch order.
pub fn im2col<'g, T: Scalar>(image: Var<'g, T>, patch: usize) -> Var<'g, T> {
    let graph = image.graph;
    let v = with_value(graph, image.id, |a| {
        let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (gr, gc) = (h / patch, w / patch);
        let mut out = ndarray::Array2::<T>::zeros((gr * gc, patch * patch * c));
        for pr in 0..gr {
            for pc in 0..gc {
                let mut k = 0;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..c {
                            out[[pr * gc + pc, k]] = a[[pr * patch + dy, pc * patch + dx, ch]];
                            k += 1;
                        }
                    }
                }
            }
        }
        out.into_dyn()
    });
    image.unary(v, move |g, x| {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (gr, gc) = (h / patch, w / patch);
        let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d");
        let mut out = ArrayD::zeros(x.raw_dim());
        for pr in 0..gr {
            for pc in 0..gc {
                let mut k = 0;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..c {
                            out[[pr * patch + dy, pc * patch + dx, ch]] = g2[[pr * gc + pc, k]];
                            k += 1;
                        }
                    }
                }
            }
        }
        out
    })
}

/// Plain (non-tape) 2-d softmax used by inference-side code.
pub fn softmax_array<T: Scalar>(a: &ndarray::ArrayView2<'_, T>, axis: usize) -> ndarray::Array2<T> {
    let mut out = a.to_owned();
    let lanes = Axis(1 - axis);
    for mut lane in out.axis_iter_mut(lanes) {
        let max = lane.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        lane.mapv_inplace(|x| {
            let e = (x - max).exp();
            sum += e;
            e
        });
        lane.mapv_inplace(|x| x / sum);
    }
    out
}

/// Row vector (1-d) helpers for building leaves.
pub fn arr1d<T: Scalar>(v: &[T]) -> ArrayD<T> {
    ndarray::Array1::from_vec(v.to_vec()).into_dyn()
}

pub fn row<T: Scalar>(v: &[T]) -> ArrayD<T> {
    ndarray::Array2::from_shape_vec((1, v.len()), v.to_vec())
        .expect("row shape")
        .into_dyn()
}

/// Layer norm over the last axis of a matrix, composed from primitive ops.
pub fn layer_norm<'g, T: Scalar>(
    x: Var<'g, T>,
    gain: Var<'g, T>,
    bias: Var<'g, T>,
) -> Var<'g, T> {
    let k = x.shape()[1];
    let inv_k = T::from_f64(1.0 / k as f64);
    let eps = T::from_f64(1e-5);
    let mean = x.sum_axis_keep(1).scale(inv_k);
    let centered = x.sub_colvec(mean);
    let var = centered.mul(centered).sum_axis_keep(1).scale(inv_k);
    let rstd = var.affine(T::one(), eps).rsqrt();
    centered.mul_colvec(rstd).mul_rowvec(gain).add_rowvec(bias)
}

/// Rows scaled to unit L2 norm (`eps`-regularized).
pub fn l2_normalize_rows<'g, T: Scalar>(x: Var<'g, T>) -> Var<'g, T> {
    let eps = T::from_f64(1e-12);
    let norm = x.mul(x).sum_axis_keep(1).affine(T::one(), eps).sqrt();
    x.div_colvec(norm)
}

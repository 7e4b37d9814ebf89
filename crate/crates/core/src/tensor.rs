//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Define-by-run: every operation whose inputs require gradients records its
//! parents and a backward closure in the produced tensor. Calling
//! [`Tensor::backward`] on a scalar walks that graph in reverse topological
//! order, streaming gradient flow through the closures and accumulating the
//! result into the `grad` buffer of every leaf that requires it. The graph
//! is rebuilt on each forward pass and freed when the last handle to it
//! drops. Graphs are single-threaded by construction (`Rc` + `RefCell`).
//!
//! Every completed operation checks its output for NaN/Inf and reports
//! [`TensorError::NonFinite`] instead of storing the value, so a finite
//! tensor is an invariant the rest of the crate can lean on.

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::ops::Range;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::linalg::{dgemm_nn, dgemm_nt, dgemm_tn};

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape { op: &'static str, expected: &'static str, got: Vec<usize> },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Gradient flow buffers for one backward pass, keyed by tensor id.
///
/// Intermediate flow is transient; only leaves keep their accumulated
/// gradient across passes.
pub(crate) struct Flows {
    map: HashMap<u64, Vec<f64>>,
}

impl Flows {
    /// Mutable flow buffer for `t`, zero-initialized on first touch.
    pub(crate) fn buf(&mut self, t: &Tensor) -> &mut [f64] {
        self.map.entry(t.inner.id).or_insert_with(|| vec![0.0; t.len()])
    }
}

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[Tensor], &mut Flows) -> Result<(), TensorError>>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// Dense row-major `f64` tensor participating in a define-by-run graph.
///
/// Cloning is cheap (shared handle). Scalars are shape `[1]`.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Numerically stable `softplus`: `max(x, 0) + ln(1 + exp(-|x|))`.
///
/// Exact to f64 working precision for |x| up to at least 700.
pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable `log sigma(x) = -softplus(-x)`.
pub fn log_sigmoid_scalar(x: f64) -> f64 {
    -softplus_scalar(-x)
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn make(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward_fn: Option<BackwardFn>,
    ) -> Result<Tensor, TensorError> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(TensorError::DataLength { len: data.len(), shape });
        }
        check_finite(op, &data)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward_fn,
            }),
        })
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        Tensor::make("from_vec", shape.to_vec(), data, false, Vec::new(), None)
    }

    /// Crate-internal constructor for fused operations with handwritten
    /// backward rules (likelihood kernels).
    pub(crate) fn custom(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward_fn: BackwardFn,
    ) -> Result<Tensor, TensorError> {
        if parents.iter().any(|p| p.requires_grad()) {
            Tensor::make(op, shape, data, true, parents, Some(backward_fn))
        } else {
            Tensor::make(op, shape, data, false, Vec::new(), None)
        }
    }

    /// Leaf parameter: gradients accumulate into it across backward passes.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        Tensor::make("param", shape.to_vec(), data, true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::make("zeros", shape.to_vec(), vec![0.0; n], false, Vec::new(), None).unwrap()
    }

    pub fn scalar(v: f64) -> Result<Tensor, TensorError> {
        Tensor::from_vec(&[1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrow of the raw row-major data.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a scalar tensor.
    pub fn value(&self) -> f64 {
        assert_eq!(self.len(), 1, "value() on non-scalar shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    /// Detached constant copy sharing no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(&self.inner.shape, self.to_vec()).unwrap()
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Multiplies the accumulated gradient in place; a missing gradient
    /// stays missing.
    pub fn scale_grad(&self, c: f64) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    /// Replaces the data of a leaf in place (optimizer update).
    ///
    /// Any graph built from the old value is stale afterwards; run backward
    /// before stepping parameters.
    pub fn set_data(&self, v: &[f64]) -> Result<(), TensorError> {
        if v.len() != self.len() {
            return Err(TensorError::DataLength { len: v.len(), shape: self.inner.shape.clone() });
        }
        check_finite("set_data", v)?;
        self.inner.data.borrow_mut().copy_from_slice(v);
        Ok(())
    }

    fn add_grad(&self, flow: &[f64]) -> Result<(), TensorError> {
        check_finite("backward", flow)?;
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (b, f) in buf.iter_mut().zip(flow) {
                    *b += f;
                }
            }
            None => *g = Some(flow.to_vec()),
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar root.
    ///
    /// Repeated calls without `zero_grad` accumulate into leaf gradients.
    pub fn backward(&self) -> Result<(), TensorError> {
        self.backward_impl(None)
    }

    /// Backward pass that deposits gradients only into the listed leaves;
    /// every other leaf the graph reaches is left untouched. Lets a caller
    /// differentiate a shared graph with respect to a scratch parameter
    /// without polluting model gradients.
    pub fn backward_into(&self, only: &[Tensor]) -> Result<(), TensorError> {
        let allow: HashSet<u64> = only.iter().map(|t| t.inner.id).collect();
        self.backward_impl(Some(&allow))
    }

    fn backward_impl(&self, allow: Option<&HashSet<u64>>) -> Result<(), TensorError> {
        if self.len() != 1 {
            return Err(TensorError::NonScalarRoot(self.inner.shape.clone()));
        }
        // Post-order DFS over the requires-grad subgraph.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id, ());
        while let Some((node, pi)) = stack.pop() {
            let parents = &node.inner.parents;
            if pi < parents.len() {
                stack.push((node.clone(), pi + 1));
                let p = &parents[pi];
                if p.inner.requires_grad && !visited.contains_key(&p.inner.id) {
                    visited.insert(p.inner.id, ());
                    stack.push((p.clone(), 0));
                }
            } else {
                order.push(node);
            }
        }
        let mut flows = Flows { map: HashMap::new() };
        flows.map.insert(self.inner.id, vec![1.0]);
        for node in order.iter().rev() {
            let Some(dy) = flows.map.remove(&node.inner.id) else {
                continue;
            };
            match &node.inner.backward_fn {
                Some(f) => f(&dy, &node.inner.parents, &mut flows)?,
                None => {
                    if allow.map_or(true, |set| set.contains(&node.inner.id)) {
                        node.add_grad(&dy)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        dfdx: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor, TensorError> {
        let x = self.data();
        let out: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        drop(x);
        let (parents, backward): (Vec<Tensor>, Option<BackwardFn>) = if self.requires_grad() {
            let bf: BackwardFn = Box::new(move |dy, parents, flows| {
                let p = &parents[0];
                let x = p.data();
                let buf = flows.buf(p);
                for i in 0..dy.len() {
                    buf[i] += dy[i] * dfdx(x[i], 0.0);
                }
                Ok(())
            });
            (vec![self.clone()], Some(bf))
        } else {
            (Vec::new(), None)
        };
        Tensor::make(op, self.inner.shape.clone(), out, self.requires_grad(), parents, backward)
    }

    pub fn relu(&self) -> Result<Tensor, TensorError> {
        self.unary("relu", |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn softplus(&self) -> Result<Tensor, TensorError> {
        self.unary("softplus", softplus_scalar, |x, _| sigmoid_scalar(x))
    }

    pub fn log_sigmoid(&self) -> Result<Tensor, TensorError> {
        self.unary("log_sigmoid", log_sigmoid_scalar, |x, _| sigmoid_scalar(-x))
    }

    pub fn exp(&self) -> Result<Tensor, TensorError> {
        self.unary("exp", f64::exp, |x, _| x.exp())
    }

    pub fn tanh(&self) -> Result<Tensor, TensorError> {
        self.unary("tanh", f64::tanh, |x, _| {
            let t = x.tanh();
            1.0 - t * t
        })
    }

    /// Elementwise `x^p`; the domain must keep the result and `p x^(p-1)` finite.
    pub fn powf(&self, p: f64) -> Result<Tensor, TensorError> {
        self.unary("powf", move |v| v.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor, TensorError> {
        self.unary("scale", move |v| c * v, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor, TensorError> {
        self.unary("add_scalar", move |v| v + c, |_, _| 1.0)
    }

    pub fn neg(&self) -> Result<Tensor, TensorError> {
        self.scale(-1.0)
    }

    fn require_same_shape(&self, rhs: &Tensor, op: &'static str) -> Result<(), TensorError> {
        if self.inner.shape != rhs.inner.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.inner.shape.clone(),
                rhs: rhs.inner.shape.clone(),
            });
        }
        Ok(())
    }

    /// Elementwise sum. `rhs` may also be a vector `[n]` broadcast across the
    /// rows of an `[m, n]` left operand (bias addition).
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        let broadcast_rows = self.inner.shape.len() == 2
            && rhs.inner.shape.len() == 1
            && rhs.inner.shape[0] == self.inner.shape[1];
        if !broadcast_rows {
            self.require_same_shape(rhs, "add")?;
        }
        let a = self.data();
        let b = rhs.data();
        let out: Vec<f64> = if broadcast_rows {
            let n = rhs.len();
            a.iter().enumerate().map(|(i, &v)| v + b[i % n]).collect()
        } else {
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        drop(a);
        drop(b);
        let rg = self.requires_grad() || rhs.requires_grad();
        let (parents, backward): (Vec<Tensor>, Option<BackwardFn>) = if rg {
            let bf: BackwardFn = Box::new(move |dy, parents, flows| {
                let (a, b) = (&parents[0], &parents[1]);
                if a.requires_grad() {
                    let buf = flows.buf(a);
                    for i in 0..dy.len() {
                        buf[i] += dy[i];
                    }
                }
                if b.requires_grad() {
                    let n = b.len();
                    let buf = flows.buf(b);
                    if broadcast_rows {
                        for (i, &g) in dy.iter().enumerate() {
                            buf[i % n] += g;
                        }
                    } else {
                        for i in 0..dy.len() {
                            buf[i] += dy[i];
                        }
                    }
                }
                Ok(())
            });
            (vec![self.clone(), rhs.clone()], Some(bf))
        } else {
            (Vec::new(), None)
        };
        Tensor::make("add", self.inner.shape.clone(), out, rg, parents, backward)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.add(&rhs.neg()?)
    }

    /// Elementwise product; either operand may be a scalar `[1]` broadcast.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        let scalar_lhs = self.len() == 1 && rhs.len() != 1;
        let scalar_rhs = rhs.len() == 1 && self.len() != 1;
        if !scalar_lhs && !scalar_rhs {
            self.require_same_shape(rhs, "mul")?;
        }
        let a = self.data();
        let b = rhs.data();
        let out: Vec<f64> = if scalar_lhs {
            b.iter().map(|y| a[0] * y).collect()
        } else if scalar_rhs {
            a.iter().map(|x| x * b[0]).collect()
        } else {
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        drop(a);
        drop(b);
        let shape = if scalar_lhs { rhs.inner.shape.clone() } else { self.inner.shape.clone() };
        let rg = self.requires_grad() || rhs.requires_grad();
        let (parents, backward): (Vec<Tensor>, Option<BackwardFn>) = if rg {
            let bf: BackwardFn = Box::new(move |dy, parents, flows| {
                let (a, b) = (&parents[0], &parents[1]);
                // d(a*b) = b da + a db, with a dot-reduction on a scalar side.
                if a.requires_grad() {
                    let bd = b.data();
                    let buf = flows.buf(a);
                    if scalar_lhs {
                        buf[0] += dy.iter().zip(bd.iter()).map(|(g, y)| g * y).sum::<f64>();
                    } else if scalar_rhs {
                        for i in 0..dy.len() {
                            buf[i] += dy[i] * bd[0];
                        }
                    } else {
                        for i in 0..dy.len() {
                            buf[i] += dy[i] * bd[i];
                        }
                    }
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let buf = flows.buf(b);
                    if scalar_rhs {
                        buf[0] += dy.iter().zip(ad.iter()).map(|(g, x)| g * x).sum::<f64>();
                    } else if scalar_lhs {
                        for i in 0..dy.len() {
                            buf[i] += dy[i] * ad[0];
                        }
                    } else {
                        for i in 0..dy.len() {
                            buf[i] += dy[i] * ad[i];
                        }
                    }
                }
                Ok(())
            });
            (vec![self.clone(), rhs.clone()], Some(bf))
        } else {
            (Vec::new(), None)
        };
        Tensor::make("mul", shape, out, rg, parents, backward)
    }

    /// Elementwise product of a `[m, n]` matrix with a `[n]` row factor
    /// broadcast down the rows.
    pub fn mul_row(&self, row: &Tensor) -> Result<Tensor, TensorError> {
        if self.inner.shape.len() != 2
            || row.inner.shape.len() != 1
            || row.inner.shape[0] != self.inner.shape[1]
        {
            return Err(TensorError::ShapeMismatch {
                op: "mul_row",
                lhs: self.inner.shape.clone(),
                rhs: row.inner.shape.clone(),
            });
        }
        let (m, n) = (self.inner.shape[0], self.inner.shape[1]);
        let a = self.data();
        let r = row.data();
        let out: Vec<f64> = (0..m * n).map(|k| a[k] * r[k % n]).collect();
        drop(a);
        drop(r);
        let rg = self.requires_grad() || row.requires_grad();
        let (parents, backward): (Vec<Tensor>, Option<BackwardFn>) = if rg {
            let bf: BackwardFn = Box::new(move |dy, parents, flows| {
                let (a, r) = (&parents[0], &parents[1]);
                if a.requires_grad() {
                    let rd = r.data();
                    let buf = flows.buf(a);
                    for k in 0..m * n {
                        buf[k] += dy[k] * rd[k % n];
                    }
                }
                if r.requires_grad() {
                    let ad = a.data();
                    let buf = flows.buf(r);
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += dy[i * n + j] * ad[i * n + j];
                        }
                    }
                }
                Ok(())
            });
            (vec![self.clone(), row.clone()], Some(bf))
        } else {
            (Vec::new(), None)
        };
        Tensor::make("mul_row", vec![m, n], out, rg, parents, backward)
    }

    fn matmul_dims(
        &self,
        rhs: &Tensor,
        op: &'static str,
        rhs_transposed: bool,
    ) -> Result<(usize, usize, usize), TensorError> {
        if self.inner.shape.len() != 2 || rhs.inner.shape.len() != 2 {
            return Err(TensorError::BadShape {
                op,
                expected: "two rank-2 operands",
                got: if self.inner.shape.len() == 2 {
                    rhs.inner.shape.clone()
                } else {
                    self.inner.shape.clone()
                },
            });
        }
        let (m, k) = (self.inner.shape[0], self.inner.shape[1]);
        let (rk, n) = if rhs_transposed {
            (rhs.inner.shape[1], rhs.inner.shape[0])
        } else {
            (rhs.inner.shape[0], rhs.inner.shape[1])
        };
        if k != rk {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.inner.shape.clone(),
                rhs: rhs.inner.shape.clone(),
            });
        }
        Ok((m, k, n))
    }

    /// Matrix product `self (m x k) * rhs (k x n)`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k, n) = self.matmul_dims(rhs, "matmul", false)?;
        let mut out = vec![0.0; m * n];
        dgemm_nn(m, k, n, &self.data(), &rhs.data(), 0.0, &mut out);
        let rg = self.requires_grad() || rhs.requires_grad();
        let (parents, backward): (Vec<Tensor>, Option<BackwardFn>) = if rg {
            let bf: BackwardFn = Box::new(move |dy, parents, flows| {
                let (a, b) = (&parents[0], &parents[1]);
                if a.requires_grad() {
                    let bd = b.data().clone();
                    dgemm_nt(m, n, k, dy, &bd, 1.0, flows.buf(a));
                }
                if b.requires_grad() {
                    let ad = a.data().clone();
                    dgemm_tn(k, m, n, &ad, dy, 1.0, flows.buf(b));
                }
                Ok(())
            });
            (vec![self.clone(), rhs.clone()], Some(bf))
        } else {
            (Vec::new(), None)
        };
        Tensor::make("matmul", vec![m, n], out, rg, parents, backward)
    }

    /// Matrix product against a transposed right operand:
    /// `self (m x k) * rhs^T` with `rhs` stored as `(n x k)`.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k, n) = self.matmul_dims(rhs, "matmul_nt", true)?;
        let mut out = vec![0.0; m * n];
        dgemm_nt(m, k, n, &self.data(), &rhs.data(), 0.0, &mut out);
        let rg = self.requires_grad() || rhs.requires_grad();
        let (parents, backward): (Vec<Tensor>, Option<BackwardFn>) = if rg {
            let bf: BackwardFn = Box::new(move |dy, parents, flows| {
                let (a, b) = (&parents[0], &parents[1]);
                if a.requires_grad() {
                    // dA = dY * B
                    let bd = b.data().clone();
                    dgemm_nn(m, n, k, dy, &bd, 1.0, flows.buf(a));
                }
                if b.requires_grad() {
                    // dB = dY^T * A
                    let ad = a.data().clone();
                    dgemm_tn(n, m, k, dy, &ad, 1.0, flows.buf(b));
                }
                Ok(())
            });
            (vec![self.clone(), rhs.clone()], Some(bf))
        } else {
            (Vec::new(), None)
        };
        Tensor::make("matmul_nt", vec![m, n], out, rg, parents, backward)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> Result<Tensor, TensorError> {
        let s: f64 = self.data().iter().sum();
        let rg = self.requires_grad();
        let (parents, backward): (Vec<Tensor>, Option<BackwardFn>) = if rg {
            let bf: BackwardFn = Box::new(|dy, parents, flows| {
                let p = &parents[0];
                let buf = flows.buf(p);
                for b in buf.iter_mut() {
                    *b += dy[0];
                }
                Ok(())
            });
            (vec![self.clone()], Some(bf))
        } else {
            (Vec::new(), None)
        };
        Tensor::make("sum", vec![1], vec![s], rg, parents, backward)
    }

    /// Per-row sum of an `[m, n]` tensor, shape `[m]`.
    pub fn row_sum(&self) -> Result<Tensor, TensorError> {
        if self.inner.shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "row_sum",
                expected: "rank-2 operand",
                got: self.inner.shape.clone(),
            });
        }
        let (m, n) = (self.inner.shape[0], self.inner.shape[1]);
        let d = self.data();
        let out: Vec<f64> = (0..m).map(|i| d[i * n..(i + 1) * n].iter().sum()).collect();
        drop(d);
        let rg = self.requires_grad();
        let (parents, backward): (Vec<Tensor>, Option<BackwardFn>) = if rg {
            let bf: BackwardFn = Box::new(move |dy, parents, flows| {
                let buf = flows.buf(&parents[0]);
                for i in 0..m {
                    for j in 0..n {
                        buf[i * n + j] += dy[i];
                    }
                }
                Ok(())
            });
            (vec![self.clone()], Some(bf))
        } else {
            (Vec::new(), None)
        };
        Tensor::make("row_sum", vec![m], out, rg, parents, backward)
    }

    /// Column slice `[m, n] -> [m, cols.len()]`.
    pub fn slice_cols(&self, cols: Range<usize>) -> Result<Tensor, TensorError> {
        if self.inner.shape.len() != 2 || cols.end > self.inner.shape[1] || cols.start >= cols.end {
            return Err(TensorError::BadShape {
                op: "slice_cols",
                expected: "rank-2 operand and a non-empty in-range column span",
                got: self.inner.shape.clone(),
            });
        }
        let (m, n) = (self.inner.shape[0], self.inner.shape[1]);
        let w = cols.end - cols.start;
        let d = self.data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&d[i * n + cols.start..i * n + cols.end]);
        }
        drop(d);
        let rg = self.requires_grad();
        let start = cols.start;
        let (parents, backward): (Vec<Tensor>, Option<BackwardFn>) = if rg {
            let bf: BackwardFn = Box::new(move |dy, parents, flows| {
                let buf = flows.buf(&parents[0]);
                for i in 0..m {
                    for j in 0..w {
                        buf[i * n + start + j] += dy[i * w + j];
                    }
                }
                Ok(())
            });
            (vec![self.clone()], Some(bf))
        } else {
            (Vec::new(), None)
        };
        Tensor::make("slice_cols", vec![m, w], out, rg, parents, backward)
    }

    /// Horizontal concatenation of `[m, w_i]` tensors into `[m, sum w_i]`.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::BadShape {
                op: "concat_cols",
                expected: "at least one operand",
                got: vec![],
            });
        }
        let m = if parts[0].inner.shape.len() == 2 { parts[0].inner.shape[0] } else { 0 };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            if p.inner.shape.len() != 2 || p.inner.shape[0] != m || m == 0 {
                return Err(TensorError::BadShape {
                    op: "concat_cols",
                    expected: "rank-2 operands with a common row count",
                    got: p.inner.shape.clone(),
                });
            }
            widths.push(p.inner.shape[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                let w = p.inner.shape[1];
                out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let widths_bk = widths.clone();
        let (parents, backward): (Vec<Tensor>, Option<BackwardFn>) = if rg {
            let bf: BackwardFn = Box::new(move |dy, parents, flows| {
                let mut offset = 0;
                for (p, &w) in parents.iter().zip(&widths_bk) {
                    if p.requires_grad() {
                        let buf = flows.buf(p);
                        for i in 0..m {
                            for j in 0..w {
                                buf[i * w + j] += dy[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
                Ok(())
            });
            (parts.to_vec(), Some(bf))
        } else {
            (Vec::new(), None)
        };
        Tensor::make("concat_cols", vec![m, total], out, rg, parents, backward)
    }

    /// Row-wise layer normalization with affine parameters:
    /// `gain * (x - mean) / sqrt(var + eps) + bias`, statistics per row.
    ///
    /// Rows must have at least two entries for the variance to be meaningful.
    pub fn layer_norm(
        &self,
        gain: &Tensor,
        bias: &Tensor,
        eps: f64,
    ) -> Result<Tensor, TensorError> {
        if self.inner.shape.len() != 2 || self.inner.shape[1] < 2 {
            return Err(TensorError::BadShape {
                op: "layer_norm",
                expected: "rank-2 operand with row width >= 2",
                got: self.inner.shape.clone(),
            });
        }
        let (m, n) = (self.inner.shape[0], self.inner.shape[1]);
        if gain.shape() != [n] || bias.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.inner.shape.clone(),
                rhs: gain.shape().to_vec(),
            });
        }
        let x = self.data();
        let g = gain.data();
        let b = bias.data();
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[i * n + j] = xh;
                out[i * n + j] = g[j] * xh + b[j];
            }
        }
        drop(x);
        drop(g);
        drop(b);
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        let (parents, backward): (Vec<Tensor>, Option<BackwardFn>) = if rg {
            let bf: BackwardFn = Box::new(move |dy, parents, flows| {
                let (x, gain, bias) = (&parents[0], &parents[1], &parents[2]);
                if bias.requires_grad() {
                    let buf = flows.buf(bias);
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += dy[i * n + j];
                        }
                    }
                }
                if gain.requires_grad() {
                    let buf = flows.buf(gain);
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += dy[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if x.requires_grad() {
                    let gd = gain.data().clone();
                    let buf = flows.buf(x);
                    for i in 0..m {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let dxh = dy[i * n + j] * gd[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[i * n + j];
                        }
                        let nf = n as f64;
                        for j in 0..n {
                            let dxh = dy[i * n + j] * gd[j];
                            buf[i * n + j] += inv_std[i] / nf
                                * (nf * dxh - sum_dxhat - xhat[i * n + j] * sum_dxhat_xhat);
                        }
                    }
                }
                Ok(())
            });
            (vec![self.clone(), gain.clone(), bias.clone()], Some(bf))
        } else {
            (Vec::new(), None)
        };
        Tensor::make("layer_norm", vec![m, n], out, rg, parents, backward)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("data", &self.inner.data.borrow())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` with respect to `param`'s entries.
    pub(crate) fn finite_diff(param: &Tensor, mut f: impl FnMut() -> f64, h: f64) -> Vec<f64> {
        let base = param.to_vec();
        let mut grad = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut bumped = base.clone();
            bumped[i] = base[i] + h;
            param.set_data(&bumped).unwrap();
            let up = f();
            bumped[i] = base[i] - h;
            param.set_data(&bumped).unwrap();
            let down = f();
            grad[i] = (up - down) / (2.0 * h);
        }
        param.set_data(&base).unwrap();
        grad
    }

    pub(crate) fn assert_close(got: f64, want: f64, tol: f64, what: &str) {
        let denom = want.abs().max(1.0);
        assert!((got - want).abs() / denom < tol, "{what}: got {got}, want {want} (tol {tol})");
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&eye).unwrap().to_vec(), a.to_vec());
        let ones = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&ones).unwrap().to_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let a = Tensor::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences_tightly() {
        let a = Tensor::param(&[2, 3], vec![0.3, -1.2, 0.7, 0.05, 2.0, -0.4]).unwrap();
        let b = Tensor::param(&[3, 2], vec![1.0, 0.2, -0.7, 0.9, 0.4, -1.1]).unwrap();
        let loss = || {
            let a = a.clone();
            let b = b.clone();
            move || a.matmul(&b).unwrap().sum().unwrap().value()
        };
        a.zero_grad();
        b.zero_grad();
        a.matmul(&b).unwrap().sum().unwrap().backward().unwrap();
        for (t, name) in [(&a, "a"), (&b, "b")] {
            let fd = finite_diff(t, loss(), 1e-5);
            for (g, f) in t.grad().unwrap().iter().zip(&fd) {
                assert_close(*g, *f, 1e-6, &format!("matmul grad {name}"));
            }
        }
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = Tensor::param(&[2, 3], vec![0.3, -1.2, 0.7, 0.05, 2.0, -0.4]).unwrap();
        let b = Tensor::from_vec(&[4, 3], (0..12).map(|v| 0.1 * v as f64 - 0.5).collect()).unwrap();
        let bt = Tensor::from_vec(&[3, 4], {
            let d = b.to_vec();
            let mut t = vec![0.0; 12];
            for i in 0..4 {
                for j in 0..3 {
                    t[j * 4 + i] = d[i * 3 + j];
                }
            }
            t
        })
        .unwrap();
        let via_nt = a.matmul_nt(&b).unwrap();
        let via_nn = a.matmul(&bt).unwrap();
        for (x, y) in via_nt.to_vec().iter().zip(via_nn.to_vec()) {
            assert!((x - y).abs() < 1e-14);
        }
        via_nt.sum().unwrap().backward().unwrap();
        let g_nt = a.grad().unwrap();
        a.zero_grad();
        via_nn.sum().unwrap().backward().unwrap();
        for (x, y) in g_nt.iter().zip(a.grad().unwrap()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_values_at_reference_points() {
        let x = Tensor::from_vec(&[3], vec![0.0, -3.0, 5.0]).unwrap();
        let sp = x.softplus().unwrap().to_vec();
        assert!((sp[0] - 2.0f64.ln()).abs() < 1e-15);
        let r = x.relu().unwrap().to_vec();
        assert_eq!(r, vec![0.0, 0.0, 5.0]);
        let ls = Tensor::from_vec(&[1], vec![-50.0]).unwrap().log_sigmoid().unwrap().value();
        // log sigma(-50) = -50 - log1p(e^-50); the correction is below f64 eps at 50.
        assert!((ls + 50.0).abs() < 1e-12);
    }

    #[test]
    fn softplus_and_log_sigmoid_are_stable_to_700() {
        for &x in &[-700.0, -100.0, 0.0, 100.0, 700.0] {
            let sp = softplus_scalar(x);
            assert!(sp.is_finite());
            assert!(sp >= 0.0);
            let ls = log_sigmoid_scalar(x);
            assert!(ls.is_finite());
            assert!(ls <= 0.0);
            // softplus(x) - softplus(-x) == x exactly in exact arithmetic
            assert!((sp - softplus_scalar(-x) - x).abs() < 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn exp_overflow_is_reported_not_stored() {
        let x = Tensor::from_vec(&[1], vec![1000.0]).unwrap();
        assert!(matches!(x.exp(), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        // Points away from the relu kink.
        let x = Tensor::param(&[5], vec![0.7, -1.3, 2.1, -0.2, 0.45]).unwrap();
        type OpPair = (&'static str, fn(&Tensor) -> Result<Tensor, TensorError>);
        let ops: Vec<OpPair> = vec![
            ("relu", |t| t.relu()),
            ("softplus", |t| t.softplus()),
            ("log_sigmoid", |t| t.log_sigmoid()),
            ("exp", |t| t.exp()),
            ("tanh", |t| t.tanh()),
        ];
        for (name, op) in ops {
            x.zero_grad();
            op(&x).unwrap().sum().unwrap().backward().unwrap();
            let got = x.grad().unwrap();
            let fd = finite_diff(&x, || op(&x).unwrap().sum().unwrap().value(), 1e-5);
            for (g, f) in got.iter().zip(&fd) {
                assert_close(*g, *f, 1e-4, name);
            }
        }
    }

    #[test]
    fn sum_backward_is_ones_and_quadratic_grad_is_x() {
        let x = Tensor::param(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        x.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
        x.zero_grad();
        // 0.5 * ||x||^2 -> gradient x
        x.mul(&x).unwrap().sum().unwrap().scale(0.5).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), x.to_vec());
    }

    #[test]
    fn scalar_leaf_backward_yields_unit_gradient() {
        let x = Tensor::param(&[1], vec![3.5]).unwrap();
        x.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.mul(&x).unwrap().sum().unwrap();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn backward_is_linear_over_roots() {
        let x = Tensor::param(&[3], vec![0.4, -0.9, 1.7]).unwrap();
        let root_a = x.tanh().unwrap().sum().unwrap();
        let root_b = x.mul(&x).unwrap().sum().unwrap();
        root_a.add(&root_b).unwrap().backward().unwrap();
        let combined = x.grad().unwrap();
        x.zero_grad();
        root_a.backward().unwrap();
        root_b.backward().unwrap();
        for (c, s) in combined.iter().zip(x.grad().unwrap()) {
            assert!((c - s).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_backward_root_is_rejected() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.backward(), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn broadcast_add_and_slice_concat_gradients() {
        let x = Tensor::param(&[2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let b = Tensor::param(&[3], vec![1.0, -1.0, 0.5]).unwrap();
        let f = || {
            let y = x.add(&b).unwrap();
            let left = y.slice_cols(0..2).unwrap();
            let right = y.slice_cols(2..3).unwrap();
            Tensor::concat_cols(&[right, left])
                .unwrap()
                .mul(&Tensor::scalar(2.0).unwrap())
                .unwrap()
                .sum()
                .unwrap()
        };
        f().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 6]);
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 4.0]);
    }

    #[test]
    fn mul_row_broadcast_gradients_match_fd() {
        let x = Tensor::param(&[2, 3], vec![0.4, -0.2, 1.1, 0.9, 0.3, -0.7]).unwrap();
        let r = Tensor::param(&[3], vec![1.5, -0.5, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2], vec![1.0, 3.0]).unwrap();
        let f = || x.mul_row(&r).unwrap().row_sum().unwrap().mul(&w).unwrap().sum().unwrap();
        f().backward().unwrap();
        for (t, label) in [(&x, "matrix"), (&r, "row factor")] {
            let fd = finite_diff(t, || f().value(), 1e-6);
            for (g, d) in t.grad().unwrap().iter().zip(&fd) {
                assert_close(*g, *d, 1e-6, label);
            }
        }
        let bad = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.mul_row(&bad), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn filtered_backward_only_touches_listed_leaves() {
        let a = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::param(&[2], vec![3.0, 4.0]).unwrap();
        let loss = a.mul(&b).unwrap().sum().unwrap();
        loss.backward_into(std::slice::from_ref(&a)).unwrap();
        assert_eq!(a.grad().unwrap(), vec![3.0, 4.0]);
        assert!(b.grad().is_none());
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![6.0, 8.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn scale_grad_rescales_in_place() {
        let x = Tensor::param(&[2], vec![3.0, -1.0]).unwrap();
        x.mul(&x).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, -2.0]);
        x.scale_grad(0.5);
        assert_eq!(x.grad().unwrap(), vec![3.0, -1.0]);
        let untouched = Tensor::param(&[1], vec![1.0]).unwrap();
        untouched.scale_grad(2.0);
        assert!(untouched.grad().is_none());
    }

    #[test]
    fn row_sum_and_powf_gradients_match_fd() {
        let x = Tensor::param(&[2, 2], vec![0.5, 1.5, 2.0, 0.8]).unwrap();
        let f = || {
            x.powf(1.7)
                .unwrap()
                .row_sum()
                .unwrap()
                .mul(&Tensor::from_vec(&[2], vec![1.0, 3.0]).unwrap())
                .unwrap()
                .sum()
                .unwrap()
        };
        f().backward().unwrap();
        let fd = finite_diff(&x, || f().value(), 1e-6);
        for (g, d) in x.grad().unwrap().iter().zip(&fd) {
            assert_close(*g, *d, 1e-5, "row_sum/powf");
        }
    }

    #[test]
    fn layer_norm_constant_row_maps_to_bias() {
        let x = Tensor::from_vec(&[1, 4], vec![3.0; 4]).unwrap();
        let gain = Tensor::from_vec(&[4], vec![1.0; 4]).unwrap();
        let bias = Tensor::from_vec(&[4], vec![0.25; 4]).unwrap();
        let y = x.layer_norm(&gain, &bias, 1e-5).unwrap();
        for v in y.to_vec() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_two_point_row_has_unit_magnitude() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap();
        let gain = Tensor::from_vec(&[2], vec![1.0; 2]).unwrap();
        let bias = Tensor::from_vec(&[2], vec![0.0; 2]).unwrap();
        let y = x.layer_norm(&gain, &bias, 1e-5).unwrap().to_vec();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y[0] - expect).abs() < 1e-12);
        assert!((y[1] + expect).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rejects_width_one_rows() {
        let x = Tensor::from_vec(&[2, 1], vec![1.0, 2.0]).unwrap();
        let gain = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let bias = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        assert!(matches!(x.layer_norm(&gain, &bias, 1e-5), Err(TensorError::BadShape { .. })));
    }

    #[test]
    fn layer_norm_gradients_match_fd() {
        let x = Tensor::param(&[2, 3], vec![0.3, -0.8, 1.2, 2.0, 0.1, -0.4]).unwrap();
        let gain = Tensor::param(&[3], vec![1.1, 0.9, 1.3]).unwrap();
        let bias = Tensor::param(&[3], vec![0.0, 0.2, -0.1]).unwrap();
        let weights = Tensor::from_vec(&[2, 3], vec![0.7, -1.0, 0.4, 0.2, 1.5, -0.6]).unwrap();
        let f = || x.layer_norm(&gain, &bias, 1e-5).unwrap().mul(&weights).unwrap().sum().unwrap();
        f().backward().unwrap();
        for (t, name) in [(&x, "x"), (&gain, "gain"), (&bias, "bias")] {
            let fd = finite_diff(t, || f().value(), 1e-6);
            for (g, d) in t.grad().unwrap().iter().zip(&fd) {
                assert_close(*g, *d, 1e-4, &format!("layer_norm {name}"));
            }
        }
    }

    #[test]
    fn three_layer_mlp_gradients_match_fd() {
        // x -> tanh(W1 x) -> softplus(W2 h) -> sum, checked for every parameter.
        let x = Tensor::from_vec(&[2, 3], vec![0.5, -0.2, 0.8, -1.1, 0.3, 0.9]).unwrap();
        let w1 = Tensor::param(&[4, 3], (0..12).map(|i| 0.2 * (i as f64) - 1.0).collect()).unwrap();
        let b1 = Tensor::param(&[4], vec![0.1, -0.2, 0.05, 0.3]).unwrap();
        let w2 = Tensor::param(&[2, 4], (0..8).map(|i| 0.3 - 0.1 * (i as f64)).collect()).unwrap();
        let b2 = Tensor::param(&[2], vec![-0.4, 0.6]).unwrap();
        let w3 = Tensor::param(&[1, 2], vec![0.8, -0.5]).unwrap();
        let f = || {
            let h1 = x.matmul_nt(&w1).unwrap().add(&b1).unwrap().tanh().unwrap();
            let h2 = h1.matmul_nt(&w2).unwrap().add(&b2).unwrap().softplus().unwrap();
            h2.matmul_nt(&w3).unwrap().sum().unwrap()
        };
        f().backward().unwrap();
        for (t, name) in [(&w1, "w1"), (&b1, "b1"), (&w2, "w2"), (&b2, "b2"), (&w3, "w3")] {
            let fd = finite_diff(t, || f().value(), 1e-5);
            for (g, d) in t.grad().unwrap().iter().zip(&fd) {
                assert_close(*g, *d, 1e-4, &format!("mlp {name}"));
            }
        }
    }

    #[test]
    fn constants_record_no_graph() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0; 4]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![2.0; 4]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert!(!c.requires_grad());
        assert!(c.inner.parents.is_empty());
    }
}

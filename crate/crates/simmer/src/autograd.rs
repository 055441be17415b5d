//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The engine is deliberately small: dynamically built computation graphs
//! over the fixed set of operations the model needs, eager evaluation, and a
//! tape-free backward pass that walks the graph in reverse topological order.
//! Matrix products are delegated to `matrixmultiply`; everything else is
//! straightforward loops.
//!
//! Graph construction can be suspended with [`no_grad`] for inference, in
//! which case operations produce plain value nodes with no parents.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Result, SimmerError};
use crate::rng::RngState;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` with graph construction disabled on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn = Box<dyn Fn(&Node)>;

pub(crate) struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    /// Leaf flag: gradients accumulate here and the optimizer may update it.
    requires_grad: bool,
    /// True when this node or any ancestor requires gradients.
    needs_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    id: u64,
}

/// Dense n-dimensional array with value and gradient slots.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Node>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(shape: Vec<usize>, values: Vec<f64>, parents: Vec<Tensor>, backward: Option<BackwardFn>) -> Tensor {
        debug_assert_eq!(numel(&shape), values.len());
        let tracking = grad_enabled();
        let needs_grad = tracking && parents.iter().any(|p| p.inner.borrow().needs_grad);
        let (parents, backward) = if needs_grad {
            (parents, backward)
        } else {
            (Vec::new(), None)
        };
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                shape,
                values,
                grad: None,
                requires_grad: false,
                needs_grad,
                parents,
                backward,
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            })),
        }
    }

    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != values.len() {
            return Err(shape_err("from_vec", format!("{} values for shape {shape:?}", numel(shape)), &[values.len()]));
        }
        Ok(Tensor::make(shape.to_vec(), values, vec![], None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::make(shape.to_vec(), vec![0.0; numel(shape)], vec![], None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::make(shape.to_vec(), vec![value; numel(shape)], vec![], None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::make(vec![1], vec![value], vec![], None)
    }

    /// Standard-normal samples drawn from the given deterministic stream.
    pub fn randn(shape: &[usize], rng: &mut RngState) -> Tensor {
        let mut v = vec![0.0; numel(shape)];
        rng.fill_normal(&mut v);
        Tensor::make(shape.to_vec(), v, vec![], None)
    }

    /// Mark this leaf as a gradient sink (used by `Parameter`).
    pub fn set_requires_grad(&self, on: bool) {
        let mut n = self.inner.borrow_mut();
        n.requires_grad = on;
        n.needs_grad = on;
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row/column extents, treating rank-1 tensors as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        let n = self.inner.borrow();
        match n.shape.len() {
            1 => (1, n.shape[0]),
            2 => (n.shape[0], n.shape[1]),
            _ => panic!("dims2 on rank-{} tensor", n.shape.len()),
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    pub fn value_at(&self, i: usize) -> f64 {
        self.inner.borrow().values[i]
    }

    pub fn scalar_value(&self) -> f64 {
        let n = self.inner.borrow();
        assert_eq!(n.values.len(), 1, "scalar_value on non-scalar");
        n.values[0]
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn clear_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().values.iter().all(|v| v.is_finite())
    }

    /// Overwrite leaf values in place (optimizer updates, checkpoint loads).
    pub fn set_values(&self, values: &[f64]) {
        let mut n = self.inner.borrow_mut();
        assert_eq!(n.values.len(), values.len(), "set_values length mismatch");
        n.values.copy_from_slice(values);
    }

    pub fn map_values(&self, f: impl FnMut(&mut f64)) {
        self.inner.borrow_mut().values.iter_mut().for_each(f);
    }

    /// Value-only copy that is detached from the graph.
    pub fn detach(&self) -> Tensor {
        let n = self.inner.borrow();
        Tensor::make(n.shape.clone(), n.values.clone(), vec![], None)
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        let mut n = self.inner.borrow_mut();
        if !n.needs_grad {
            return;
        }
        let len = n.values.len();
        let g = n.grad.get_or_insert_with(|| vec![0.0; len]);
        for (a, b) in g.iter_mut().zip(delta) {
            *a += *b;
        }
    }

    /// Gradient buffer for in-place accumulation, created on demand.
    fn with_grad_mut(&self, f: impl FnOnce(&mut [f64])) {
        let mut n = self.inner.borrow_mut();
        if !n.needs_grad {
            return;
        }
        let len = n.values.len();
        let g = n.grad.get_or_insert_with(|| vec![0.0; len]);
        f(g);
    }

    fn needs_grad(&self) -> bool {
        self.inner.borrow().needs_grad
    }

    /// Reverse-mode pass from a scalar output.
    pub fn backward(&self) -> Result<()> {
        {
            let n = self.inner.borrow();
            if n.values.len() != 1 {
                return Err(shape_err("backward", "scalar output", &n.shape));
            }
            if !n.values[0].is_finite() {
                return Err(SimmerError::NonFinite("backward seed"));
            }
        }
        // Iterative post-order DFS for the topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let id = t.inner.borrow().id;
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(id) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.inner.borrow().parents.iter() {
                if p.needs_grad() {
                    stack.push((p.clone(), false));
                }
            }
        }
        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            let n = t.inner.borrow();
            if n.grad.is_some() {
                if let Some(back) = &n.backward {
                    back(&n);
                }
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for Tensor {
    fmt_impl_placeholder!();
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(shape_err(op, format!("{sa:?}"), &sb));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let (a, b) = (self.clone(), other.clone());
        let v: Vec<f64> = {
            let (na, nb) = (a.inner.borrow(), b.inner.borrow());
            na.values.iter().zip(&nb.values).map(|(x, y)| x + y).collect()
        };
        let shape = self.shape();
        let (pa, pb) = (a.clone(), b.clone());
        Ok(Tensor::make(shape, v, vec![a, b], Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            pa.accumulate_grad(g);
            pb.accumulate_grad(g);
        }))))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let (a, b) = (self.clone(), other.clone());
        let v: Vec<f64> = {
            let (na, nb) = (a.inner.borrow(), b.inner.borrow());
            na.values.iter().zip(&nb.values).map(|(x, y)| x - y).collect()
        };
        let shape = self.shape();
        let (pa, pb) = (a.clone(), b.clone());
        Ok(Tensor::make(shape, v, vec![a, b], Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            pa.accumulate_grad(g);
            pb.with_grad_mut(|gb| {
                for (x, d) in gb.iter_mut().zip(g) {
                    *x -= *d;
                }
            });
        }))))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let (a, b) = (self.clone(), other.clone());
        let v: Vec<f64> = {
            let (na, nb) = (a.inner.borrow(), b.inner.borrow());
            na.values.iter().zip(&nb.values).map(|(x, y)| x * y).collect()
        };
        let shape = self.shape();
        let (pa, pb) = (a.clone(), b.clone());
        Ok(Tensor::make(shape, v, vec![a, b], Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            let bv = pb.inner.borrow().values.clone();
            pa.with_grad_mut(|ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * bv[i];
                }
            });
            let av = pa.inner.borrow().values.clone();
            pb.with_grad_mut(|gb| {
                for i in 0..gb.len() {
                    gb[i] += g[i] * av[i];
                }
            });
        }))))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("div", self, other)?;
        let (a, b) = (self.clone(), other.clone());
        let v: Vec<f64> = {
            let (na, nb) = (a.inner.borrow(), b.inner.borrow());
            na.values.iter().zip(&nb.values).map(|(x, y)| x / y).collect()
        };
        let shape = self.shape();
        let (pa, pb) = (a.clone(), b.clone());
        Ok(Tensor::make(shape, v, vec![a, b], Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            let av = pa.inner.borrow().values.clone();
            let bv = pb.inner.borrow().values.clone();
            pa.with_grad_mut(|ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] / bv[i];
                }
            });
            pb.with_grad_mut(|gb| {
                for i in 0..gb.len() {
                    gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            });
        }))))
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let a = self.clone();
        let v: Vec<f64> = a.inner.borrow().values.iter().map(|x| x + s).collect();
        let shape = self.shape();
        let pa = a.clone();
        Tensor::make(shape, v, vec![a], Some(Box::new(move |out| {
            pa.accumulate_grad(out.grad.as_ref().unwrap());
        })))
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let a = self.clone();
        let v: Vec<f64> = a.inner.borrow().values.iter().map(|x| x * s).collect();
        let shape = self.shape();
        let pa = a.clone();
        Tensor::make(shape, v, vec![a], Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            pa.with_grad_mut(|ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * s;
                }
            });
        })))
    }

    /// Scale by a learnable scalar gate of shape [1].
    pub fn mul_gate(&self, gate: &Tensor) -> Result<Tensor> {
        if gate.len() != 1 {
            return Err(shape_err("mul_gate", "[1]", &gate.shape()));
        }
        let (a, g) = (self.clone(), gate.clone());
        let gv = g.scalar_value();
        let v: Vec<f64> = a.inner.borrow().values.iter().map(|x| x * gv).collect();
        let shape = self.shape();
        let (pa, pg) = (a.clone(), g.clone());
        Ok(Tensor::make(shape, v, vec![a, g], Some(Box::new(move |out| {
            let grad = out.grad.as_ref().unwrap();
            let gv = pg.scalar_value();
            pa.with_grad_mut(|ga| {
                for i in 0..ga.len() {
                    ga[i] += grad[i] * gv;
                }
            });
            let av = pa.inner.borrow().values.clone();
            let dot: f64 = grad.iter().zip(&av).map(|(d, x)| d * x).sum();
            pg.accumulate_grad(&[dot]);
        }))))
    }

    /// Broadcast-add a row vector [c] onto every row of [r, c].
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2();
        if row.shape() != vec![c] {
            return Err(shape_err("add_row", format!("[{c}]"), &row.shape()));
        }
        let (a, b) = (self.clone(), row.clone());
        let v: Vec<f64> = {
            let (na, nb) = (a.inner.borrow(), b.inner.borrow());
            let mut v = na.values.clone();
            for i in 0..r {
                for j in 0..c {
                    v[i * c + j] += nb.values[j];
                }
            }
            v
        };
        let shape = self.shape();
        let (pa, pb) = (a.clone(), b.clone());
        Ok(Tensor::make(shape, v, vec![a, b], Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            pa.accumulate_grad(g);
            pb.with_grad_mut(|gb| {
                for i in 0..r {
                    for j in 0..c {
                        gb[j] += g[i * c + j];
                    }
                }
            });
        }))))
    }

    /// Broadcast-multiply a row vector [c] onto every row of [r, c].
    pub fn mul_row(&self, row: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2();
        if row.shape() != vec![c] {
            return Err(shape_err("mul_row", format!("[{c}]"), &row.shape()));
        }
        let (a, b) = (self.clone(), row.clone());
        let v: Vec<f64> = {
            let (na, nb) = (a.inner.borrow(), b.inner.borrow());
            let mut v = na.values.clone();
            for i in 0..r {
                for j in 0..c {
                    v[i * c + j] *= nb.values[j];
                }
            }
            v
        };
        let shape = self.shape();
        let (pa, pb) = (a.clone(), b.clone());
        Ok(Tensor::make(shape, v, vec![a, b], Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            let bv = pb.inner.borrow().values.clone();
            pa.with_grad_mut(|ga| {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[i * c + j] * bv[j];
                    }
                }
            });
            let av = pa.inner.borrow().values.clone();
            pb.with_grad_mut(|gb| {
                for i in 0..r {
                    for j in 0..c {
                        gb[j] += g[i * c + j] * av[i * c + j];
                    }
                }
            });
        }))))
    }

    /// Matrix product [m, k] x [k, n] -> [m, n].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("[{m}, {k}] x [{k}, _]"),
                &other.shape(),
            ));
        }
        let (a, b) = (self.clone(), other.clone());
        let mut v = vec![0.0; m * n];
        {
            let (na, nb) = (a.inner.borrow(), b.inner.borrow());
            gemm(m, k, n, &na.values, false, &nb.values, false, &mut v, 0.0);
        }
        let (pa, pb) = (a.clone(), b.clone());
        Ok(Tensor::make(vec![m, n], v, vec![a, b], Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            // dA += dO . B^T
            if pa.needs_grad() {
                let bv = pb.inner.borrow().values.clone();
                pa.with_grad_mut(|ga| {
                    gemm_nt(m, n, k, g, &bv, ga);
                });
            }
            // dB += A^T . dO
            if pb.needs_grad() {
                let av = pa.inner.borrow().values.clone();
                pb.with_grad_mut(|gb| {
                    gemm_tn(k, m, n, &av, g, gb);
                });
            }
        }))))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2();
        let a = self.clone();
        let v: Vec<f64> = {
            let n = a.inner.borrow();
            let mut v = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    v[j * r + i] = n.values[i * c + j];
                }
            }
            v
        };
        let pa = a.clone();
        Ok(Tensor::make(vec![c, r], v, vec![a], Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            pa.with_grad_mut(|ga| {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            });
        }))))
    }

    /// Numerically stable softmax along `axis` of a rank-1 or rank-2 tensor.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.softmax_masked(axis, None)
    }

    /// Softmax with an optional boolean mask over the reduced axis; `false`
    /// entries are excluded (output exactly 0 there).
    pub fn softmax_masked(&self, axis: usize, mask: Option<&[bool]>) -> Result<Tensor> {
        let rank = self.rank();
        if rank > 2 || axis >= rank.max(1) {
            return Err(shape_err("softmax", "rank 1-2 tensor with valid axis", &self.shape()));
        }
        let (r, c) = self.dims2();
        // Normalize to "reduce over columns of each row": transpose handling
        // is done with strides instead.
        let (outer, inner, ostride, istride) = if rank == 1 || axis == 1 {
            (r, c, c, 1)
        } else {
            (c, r, 1, c)
        };
        if inner == 0 {
            return Err(SimmerError::EmptyInput("softmax axis"));
        }
        if let Some(m) = mask {
            if m.len() != inner {
                return Err(shape_err("softmax mask", format!("[{inner}]"), &[m.len()]));
            }
            if !m.iter().any(|&b| b) {
                return Err(SimmerError::EmptyInput("softmax mask (all positions masked)"));
            }
        }
        let a = self.clone();
        let mask_owned: Option<Vec<bool>> = mask.map(|m| m.to_vec());
        let v: Vec<f64> = {
            let n = a.inner.borrow();
            let mut v = vec![0.0; n.values.len()];
            for o in 0..outer {
                let at = |i: usize| n.values[o * ostride + i * istride];
                let live = |i: usize| mask_owned.as_ref().map_or(true, |m| m[i]);
                let mut mx = f64::NEG_INFINITY;
                for i in 0..inner {
                    if live(i) {
                        mx = mx.max(at(i));
                    }
                }
                let mut denom = 0.0;
                for i in 0..inner {
                    if live(i) {
                        denom += (at(i) - mx).exp();
                    }
                }
                for i in 0..inner {
                    v[o * ostride + i * istride] = if live(i) { (at(i) - mx).exp() / denom } else { 0.0 };
                }
            }
            v
        };
        let shape = self.shape();
        let pa = a.clone();
        Ok(Tensor::make(shape, v, vec![a], Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            let y = &out.values;
            pa.with_grad_mut(|ga| {
                for o in 0..outer {
                    let mut dot = 0.0;
                    for i in 0..inner {
                        let idx = o * ostride + i * istride;
                        dot += g[idx] * y[idx];
                    }
                    for i in 0..inner {
                        let idx = o * ostride + i * istride;
                        ga[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            });
        }))))
    }

    /// Per-row layer normalization over the trailing axis with learned gain
    /// and bias. Zero-variance rows map to the bias (eps keeps the
    /// denominator finite).
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = self.dims2();
        if c == 0 {
            return Err(SimmerError::EmptyInput("layer_norm row"));
        }
        if gain.shape() != vec![c] || bias.shape() != vec![c] {
            return Err(shape_err("layer_norm", format!("gain/bias [{c}]"), &gain.shape()));
        }
        let (x, gn, bs) = (self.clone(), gain.clone(), bias.clone());
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let v: Vec<f64> = {
            let (nx, ng, nb) = (x.inner.borrow(), gn.inner.borrow(), bs.inner.borrow());
            let mut v = vec![0.0; r * c];
            for i in 0..r {
                let row = &nx.values[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[i] = is;
                for j in 0..c {
                    let xh = (row[j] - mean) * is;
                    xhat[i * c + j] = xh;
                    v[i * c + j] = ng.values[j] * xh + nb.values[j];
                }
            }
            v
        };
        let shape = self.shape();
        let (px, pg, pb) = (x.clone(), gn.clone(), bs.clone());
        Ok(Tensor::make(shape, v, vec![x, gn, bs], Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            let gv = pg.inner.borrow().values.clone();
            px.with_grad_mut(|gx| {
                for i in 0..r {
                    // dxhat = g * gain ; dx via the standard layer-norm pullback
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let dxh = g[i * c + j] * gv[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[i * c + j];
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        let dxh = g[i * c + j] * gv[j];
                        gx[i * c + j] += inv_std[i] * (dxh - sum_dxhat / cf - xhat[i * c + j] * sum_dxhat_xhat / cf);
                    }
                }
            });
            pg.with_grad_mut(|gg| {
                for i in 0..r {
                    for j in 0..c {
                        gg[j] += g[i * c + j] * xhat[i * c + j];
                    }
                }
            });
            pb.with_grad_mut(|gb| {
                for i in 0..r {
                    for j in 0..c {
                        gb[j] += g[i * c + j];
                    }
                }
            });
        }))))
    }

    /// Smooth Gaussian-error activation (tanh form).
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let x = self.clone();
        let v: Vec<f64> = x
            .inner
            .borrow()
            .values
            .iter()
            .map(|&t| 0.5 * t * (1.0 + (C * (t + A * t * t * t)).tanh()))
            .collect();
        let shape = self.shape();
        let px = x.clone();
        Tensor::make(shape, v, vec![x], Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            let xv = px.inner.borrow().values.clone();
            px.with_grad_mut(|gx| {
                for i in 0..gx.len() {
                    let t = xv[i];
                    let u = C * (t + A * t * t * t);
                    let th = u.tanh();
                    let sech2 = 1.0 - th * th;
                    let du = C * (1.0 + 3.0 * A * t * t);
                    gx[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * t * sech2 * du);
                }
            });
        })))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if self.inner.borrow().values.iter().any(|&v| v < 0.0) {
            return Err(SimmerError::NonFinite("sqrt of negative value"));
        }
        let x = self.clone();
        let v: Vec<f64> = x.inner.borrow().values.iter().map(|t| t.sqrt()).collect();
        let shape = self.shape();
        let px = x.clone();
        Ok(Tensor::make(shape, v, vec![x], Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            let y = &out.values;
            px.with_grad_mut(|gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * 0.5 / y[i];
                }
            });
        }))))
    }

    pub fn sum_all(&self) -> Tensor {
        let x = self.clone();
        let s: f64 = x.inner.borrow().values.iter().sum();
        let px = x.clone();
        Tensor::make(vec![1], vec![s], vec![x], Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap()[0];
            px.with_grad_mut(|gx| {
                for v in gx.iter_mut() {
                    *v += g;
                }
            });
        })))
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Column sums of a [r, c] tensor -> [c].
    pub fn sum_axis0(&self) -> Result<Tensor> {
        let (r, c) = self.dims2();
        let x = self.clone();
        let v: Vec<f64> = {
            let n = x.inner.borrow();
            let mut v = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    v[j] += n.values[i * c + j];
                }
            }
            v
        };
        let px = x.clone();
        Ok(Tensor::make(vec![c], v, vec![x], Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            px.with_grad_mut(|gx| {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j];
                    }
                }
            });
        }))))
    }

    /// Column means of a [r, c] tensor -> [c].
    pub fn mean_axis0(&self) -> Result<Tensor> {
        let (r, _) = self.dims2();
        Ok(self.sum_axis0()?.mul_scalar(1.0 / r as f64))
    }

    /// Concatenate along axis 0.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(SimmerError::EmptyInput("concat_rows"));
        }
        let (_, c) = parts[0].dims2();
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.dims2();
            if pc != c {
                return Err(shape_err("concat_rows", format!("[_, {c}]"), &p.shape()));
            }
            total += pr;
        }
        let mut v = Vec::with_capacity(total * c);
        for p in parts {
            v.extend_from_slice(&p.inner.borrow().values);
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let handles = owned.clone();
        Ok(Tensor::make(vec![total, c], v, owned, Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            let mut offset = 0;
            for p in &handles {
                let len = p.len();
                p.accumulate_grad(&g[offset..offset + len]);
                offset += len;
            }
        }))))
    }

    /// Rows [start, start+len) of a rank-2 tensor.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2();
        if start + len > r {
            return Err(shape_err("narrow_rows", format!("rows within [0, {r})"), &[start, len]));
        }
        let x = self.clone();
        let v = x.inner.borrow().values[start * c..(start + len) * c].to_vec();
        let px = x.clone();
        Ok(Tensor::make(vec![len, c], v, vec![x], Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            px.with_grad_mut(|gx| {
                for (i, d) in g.iter().enumerate() {
                    gx[start * c + i] += d;
                }
            });
        }))))
    }

    /// Columns [start, start+len) of a rank-2 tensor.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2();
        if start + len > c {
            return Err(shape_err("narrow_cols", format!("cols within [0, {c})"), &[start, len]));
        }
        let x = self.clone();
        let v: Vec<f64> = {
            let n = x.inner.borrow();
            let mut v = Vec::with_capacity(r * len);
            for i in 0..r {
                v.extend_from_slice(&n.values[i * c + start..i * c + start + len]);
            }
            v
        };
        let px = x.clone();
        Ok(Tensor::make(vec![r, len], v, vec![x], Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            px.with_grad_mut(|gx| {
                for i in 0..r {
                    for j in 0..len {
                        gx[i * c + start + j] += g[i * len + j];
                    }
                }
            });
        }))))
    }

    /// Concatenate rank-2 tensors along axis 1.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(SimmerError::EmptyInput("concat_cols"));
        }
        let (r, _) = parts[0].dims2();
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.dims2();
            if pr != r {
                return Err(shape_err("concat_cols", format!("[{r}, _]"), &p.shape()));
            }
            widths.push(pc);
            total += pc;
        }
        let mut v = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let (_, pc) = p.dims2();
                v.extend_from_slice(&p.inner.borrow().values[i * pc..(i + 1) * pc]);
            }
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let handles = owned.clone();
        Ok(Tensor::make(vec![r, total], v, owned, Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            let mut col = 0;
            for (p, w) in handles.iter().zip(&widths) {
                let w = *w;
                p.with_grad_mut(|gp| {
                    for i in 0..r {
                        for j in 0..w {
                            gp[i * w + j] += g[i * total + col + j];
                        }
                    }
                });
                col += w;
            }
        }))))
    }

    /// Rows of an embedding table selected by index; gradients scatter-add
    /// back into the table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2();
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("ids < {r}"), &[bad]));
        }
        let x = self.clone();
        let v: Vec<f64> = {
            let n = x.inner.borrow();
            let mut v = Vec::with_capacity(ids.len() * c);
            for &i in ids {
                v.extend_from_slice(&n.values[i * c..(i + 1) * c]);
            }
            v
        };
        let ids_owned = ids.to_vec();
        let px = x.clone();
        Ok(Tensor::make(vec![ids.len(), c], v, vec![x], Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            px.with_grad_mut(|gx| {
                for (k, &i) in ids_owned.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += g[k * c + j];
                    }
                }
            });
        }))))
    }

    /// Flat-index gather: out[i] = self[idx[i]], reshaped to `new_shape`.
    /// With a bijective index map this is a pure data rearrangement.
    pub fn permute_flat(&self, idx: Rc<Vec<usize>>, new_shape: &[usize]) -> Result<Tensor> {
        if numel(new_shape) != idx.len() {
            return Err(shape_err("permute_flat", format!("{} indices", numel(new_shape)), &[idx.len()]));
        }
        let n = self.len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(shape_err("permute_flat", format!("indices < {n}"), &[bad]));
        }
        let x = self.clone();
        let v: Vec<f64> = {
            let node = x.inner.borrow();
            idx.iter().map(|&i| node.values[i]).collect()
        };
        let px = x.clone();
        let idx_b = idx.clone();
        Ok(Tensor::make(new_shape.to_vec(), v, vec![x], Some(Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            px.with_grad_mut(|gx| {
                for (k, &i) in idx_b.iter().enumerate() {
                    gx[i] += g[k];
                }
            });
        }))))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if numel(new_shape) != self.len() {
            return Err(shape_err("reshape", format!("{} elements", self.len()), new_shape));
        }
        let x = self.clone();
        let v = x.inner.borrow().values.clone();
        let px = x.clone();
        Ok(Tensor::make(new_shape.to_vec(), v, vec![x], Some(Box::new(move |out| {
            px.accumulate_grad(out.grad.as_ref().unwrap());
        }))))
    }
}

// ---------------------------------------------------------------------------
// GEMM kernels (row-major)
// ---------------------------------------------------------------------------

fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(),
            n as isize, 1,
        );
    }
}

/// C[m,k] += A[m,n] . B[k,n]^T
fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0, a.as_ptr(), n as isize, 1, b.as_ptr(), 1, n as isize, 1.0,
            c.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// C[k,n] += A[m,k]^T . B[m,n]
fn gemm_tn(k: usize, m: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0, a.as_ptr(), 1, k as isize, b.as_ptr(), n as isize, 1, 1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

// ---------------------------------------------------------------------------
// Composite neural-net building blocks
// ---------------------------------------------------------------------------

/// y = x . w + b with x [.., d_in], w [d_in, d_out], b [d_out].
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.matmul(w)?.add_row(b)
}

/// Scaled dot-product attention: softmax(q k^T / sqrt(d)) v.
/// `key_mask`, when given, excludes masked key positions.
pub fn sdp_attention(q: &Tensor, k: &Tensor, v: &Tensor, key_mask: Option<&[bool]>) -> Result<Tensor> {
    let (_lq, d) = q.dims2();
    let (lk, dk) = k.dims2();
    let (lv, _dv) = v.dims2();
    if lk == 0 {
        return Err(SimmerError::EmptyInput("sdp_attention keys"));
    }
    if dk != d {
        return Err(shape_err("sdp_attention", format!("k [_, {d}]"), &k.shape()));
    }
    if lv != lk {
        return Err(shape_err("sdp_attention", format!("v [{lk}, _]"), &v.shape()));
    }
    let scores = q.matmul(&k.transpose()?)?.mul_scalar(1.0 / (d as f64).sqrt());
    let attn = scores.softmax_masked(1, key_mask)?;
    attn.matmul(v)
}

/// One-hidden-layer MLP with a smooth nonlinearity.
pub fn mlp(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<Tensor> {
    linear(&linear(x, w1, b1)?.gelu(), w2, b2)
}

/// Mean squared error between two same-shape tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = a.sub(b)?;
    Ok(d.mul(&d)?.mean_all())
}

/// Cosine similarity between two vectors (any shape, flattened).
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape_pub("cosine_similarity", a, b)?;
    let dot = a.mul(b)?.sum_all();
    let na = a.mul(a)?.sum_all().sqrt()?;
    let nb = b.mul(b)?.sum_all().sqrt()?;
    if na.scalar_value() == 0.0 || nb.scalar_value() == 0.0 {
        return Err(SimmerError::EmptyInput("cosine_similarity zero-norm vector"));
    }
    dot.div(&na.mul(&nb)?)
}

fn same_shape_pub(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    same_shape(op, a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "expected {b}, got {a} (tol {tol})");
    }

    #[test]
    fn linear_identity_and_hand_case() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 0.0]);

        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap();
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.to_vec(), vec![3.5, -0.5]);
    }

    #[test]
    fn linear_shape_error_names_shapes() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2]);
        let err = linear(&x, &w, &b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") || err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_symmetry_closed_form_and_shift() {
        let y = Tensor::from_vec(&[3], vec![0.0, 0.0, 0.0]).unwrap().softmax(0).unwrap();
        for v in y.to_vec() {
            assert_close(v, 1.0 / 3.0, 1e-12);
        }

        let y = Tensor::from_vec(&[2], vec![2.0, 6.0]).unwrap().softmax(0).unwrap();
        let e4 = 4.0f64.exp();
        assert_close(y.to_vec()[0], 1.0 / (1.0 + e4), 1e-12);
        assert_close(y.to_vec()[1], e4 / (1.0 + e4), 1e-12);
        assert_close(y.to_vec()[0], 0.01799, 1e-5);
        assert_close(y.to_vec()[1], 0.98201, 1e-5);

        let a = Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap().softmax(0).unwrap();
        let b = Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap().add_scalar(123.0).softmax(0).unwrap();
        for (x, y) in a.to_vec().iter().zip(b.to_vec()) {
            assert_close(*x, y, 1e-12);
        }
    }

    #[test]
    fn softmax_extreme_magnitudes_sum_to_one() {
        let x = Tensor::from_vec(&[3], vec![1e4, -1e4, 0.0]).unwrap();
        let y = x.softmax(0).unwrap();
        let s: f64 = y.to_vec().iter().sum();
        assert!(y.all_finite());
        assert_close(s, 1.0, 1e-6);
    }

    #[test]
    fn softmax_empty_axis_errors() {
        let x = Tensor::zeros(&[0]);
        assert!(x.softmax(0).is_err());
    }

    #[test]
    fn softmax_axis0_columns_sum_to_one() {
        let x = Tensor::from_vec(&[3, 2], vec![1.0, -1.0, 2.0, 0.5, -3.0, 2.5]).unwrap();
        let y = x.softmax(0).unwrap();
        let v = y.to_vec();
        for j in 0..2 {
            let s: f64 = (0..3).map(|i| v[i * 2 + j]).sum();
            assert_close(s, 1.0, 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_and_unit_row() {
        let x = Tensor::from_vec(&[1, 4], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let g = Tensor::full(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let y = x.layer_norm(&g, &b, 1e-5).unwrap();
        for v in y.to_vec() {
            assert_close(v, 0.0, 1e-12);
        }

        let x = Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let y = x.layer_norm(&g, &b, 1e-12).unwrap();
        assert_close(y.to_vec()[0], 1.0, 1e-6);
        assert_close(y.to_vec()[1], -1.0, 1e-6);
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut rng = RngState::new(5);
        let x = Tensor::randn(&[6, 16], &mut rng);
        let g = Tensor::full(&[16], 1.0);
        let b = Tensor::zeros(&[16]);
        let y = x.layer_norm(&g, &b, 1e-8).unwrap();
        let v = y.to_vec();
        for i in 0..6 {
            let row = &v[i * 16..(i + 1) * 16];
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "var {var}");
        }
    }

    #[test]
    fn layer_norm_zero_width_errors() {
        let x = Tensor::zeros(&[2, 0]);
        let g = Tensor::zeros(&[0]);
        let b = Tensor::zeros(&[0]);
        assert!(x.layer_norm(&g, &b, 1e-5).is_err());
    }

    #[test]
    fn sdp_attention_single_key_returns_value() {
        let mut rng = RngState::new(1);
        let q = Tensor::randn(&[3, 4], &mut rng);
        let k = Tensor::randn(&[1, 4], &mut rng);
        let v = Tensor::from_vec(&[1, 2], vec![0.25, -1.5]).unwrap();
        let o = sdp_attention(&q, &k, &v, None).unwrap();
        for i in 0..3 {
            assert_close(o.to_vec()[i * 2], 0.25, 1e-12);
            assert_close(o.to_vec()[i * 2 + 1], -1.5, 1e-12);
        }
    }

    #[test]
    fn sdp_attention_uniform_when_orthogonal() {
        // q orthogonal to all keys -> zero scores -> uniform weights; equal
        // value rows mean the output is that common row.
        let q = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        let k = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5]).unwrap();
        let v = Tensor::from_vec(&[3, 2], vec![2.0, 7.0, 2.0, 7.0, 2.0, 7.0]).unwrap();
        let o = sdp_attention(&q, &k, &v, None).unwrap();
        assert_close(o.to_vec()[0], 2.0, 1e-12);
        assert_close(o.to_vec()[1], 7.0, 1e-12);
    }

    #[test]
    fn sdp_attention_matches_brute_force_2x2() {
        let mut rng = RngState::new(9);
        let q = Tensor::randn(&[2, 2], &mut rng);
        let k = Tensor::randn(&[2, 2], &mut rng);
        let v = Tensor::randn(&[2, 2], &mut rng);
        let o = sdp_attention(&q, &k, &v, None).unwrap();
        // Direct evaluation of the formula.
        let (qv, kv, vv) = (q.to_vec(), k.to_vec(), v.to_vec());
        let scale = 1.0 / 2.0f64.sqrt();
        for i in 0..2 {
            let s0 = (qv[i * 2] * kv[0] + qv[i * 2 + 1] * kv[1]) * scale;
            let s1 = (qv[i * 2] * kv[2] + qv[i * 2 + 1] * kv[3]) * scale;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let z = e0 + e1;
            let (a0, a1) = (e0 / z, e1 / z);
            for j in 0..2 {
                let expect = a0 * vv[j] + a1 * vv[2 + j];
                assert_close(o.to_vec()[i * 2 + j], expect, 1e-10);
            }
        }
    }

    #[test]
    fn sdp_attention_empty_keys_errors() {
        let q = Tensor::zeros(&[1, 2]);
        let k = Tensor::zeros(&[0, 2]);
        let v = Tensor::zeros(&[0, 2]);
        assert!(sdp_attention(&q, &k, &v, None).is_err());
    }

    #[test]
    fn sdp_attention_rows_are_convex_combinations() {
        let mut rng = RngState::new(21);
        let q = Tensor::randn(&[4, 3], &mut rng);
        let k = Tensor::randn(&[5, 3], &mut rng);
        let v = Tensor::randn(&[5, 2], &mut rng);
        let o = sdp_attention(&q, &k, &v, None).unwrap();
        let vv = v.to_vec();
        for j in 0..2 {
            let col: Vec<f64> = (0..5).map(|i| vv[i * 2 + j]).collect();
            let (lo, hi) = (col.iter().cloned().fold(f64::INFINITY, f64::min), col.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            for i in 0..4 {
                let x = o.to_vec()[i * 2 + j];
                assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn masked_softmax_ignores_masked_positions() {
        let x = Tensor::from_vec(&[1, 4], vec![1.0, 100.0, 2.0, 3.0]).unwrap();
        let y = x.softmax_masked(1, Some(&[true, false, true, true])).unwrap();
        let v = y.to_vec();
        assert_eq!(v[1], 0.0);
        assert_close(v.iter().sum::<f64>(), 1.0, 1e-12);
        // Matches softmax over the unmasked entries alone.
        let z = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap().softmax(0).unwrap().to_vec();
        assert_close(v[0], z[0], 1e-12);
        assert_close(v[2], z[1], 1e-12);
        assert_close(v[3], z[2], 1e-12);
    }

    #[test]
    fn mlp_zero_weights_zero_output() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        let w1 = Tensor::zeros(&[3, 5]);
        let b1 = Tensor::zeros(&[5]);
        let w2 = Tensor::zeros(&[5, 3]);
        let b2 = Tensor::zeros(&[3]);
        let y = mlp(&x, &w1, &b1, &w2, &b2).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), vec![2, 3]);
    }

    #[test]
    fn backward_through_simple_graph() {
        // f = sum((x * 2 + 1)^2), df/dx = 2 * (2x + 1) * 2
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        x.set_requires_grad(true);
        let y = x.mul_scalar(2.0).add_scalar(1.0);
        let loss = y.mul(&y).unwrap().sum_all();
        loss.backward().unwrap();
        let g = x.grad_vec().unwrap();
        for (i, xv) in [1.0, -2.0, 0.5].iter().enumerate() {
            assert_close(g[i], 4.0 * (2.0 * xv + 1.0), 1e-12);
        }
    }

    #[test]
    fn grad_accumulates_for_reused_tensor() {
        // f = sum(x * x) -> grad 2x even though x appears twice.
        let x = Tensor::from_vec(&[2], vec![3.0, -1.0]).unwrap();
        x.set_requires_grad(true);
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        let g = x.grad_vec().unwrap();
        assert_close(g[0], 6.0, 1e-12);
        assert_close(g[1], -2.0, 1e-12);
    }

    #[test]
    fn no_grad_builds_no_graph() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        x.set_requires_grad(true);
        let y = no_grad(|| x.mul_scalar(3.0).sum_all());
        assert!(y.backward().is_err() || x.grad_vec().is_none());
    }

    #[test]
    fn frozen_leaf_receives_no_grad() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2], vec![5.0, -3.0]).unwrap();
        x.set_requires_grad(true);
        // w stays requires_grad = false: grad must remain None while the
        // gradient still flows through to x.
        let loss = x.mul(&w).unwrap().sum_all();
        loss.backward().unwrap();
        assert!(w.grad_vec().is_none());
        let g = x.grad_vec().unwrap();
        assert_close(g[0], 5.0, 1e-12);
        assert_close(g[1], -3.0, 1e-12);
    }

    #[test]
    fn matmul_matches_manual() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gather_rows_scatter_adds_grads() {
        let table = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        table.set_requires_grad(true);
        let picked = table.gather_rows(&[1, 1, 2]).unwrap();
        let loss = picked.sum_all();
        loss.backward().unwrap();
        let g = table.grad_vec().unwrap();
        assert_eq!(g, vec![0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn cosine_similarity_extremes() {
        let a = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![2.0, 2.0]).unwrap();
        assert_close(cosine_similarity(&a, &b).unwrap().scalar_value(), 1.0, 1e-12);
        let c = Tensor::from_vec(&[2], vec![-1.0, 1.0]).unwrap();
        assert_close(cosine_similarity(&a, &c).unwrap().scalar_value(), 0.0, 1e-12);
        let d = Tensor::from_vec(&[2], vec![-3.0, -3.0]).unwrap();
        assert_close(cosine_similarity(&a, &d).unwrap().scalar_value(), -1.0, 1e-12);
        let z = Tensor::zeros(&[2]);
        assert!(cosine_similarity(&a, &z).is_err());
    }
}

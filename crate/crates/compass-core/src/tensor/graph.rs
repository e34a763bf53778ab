//! Reverse-mode tape over `ndarray` f64 tensors.
//!
//! Every forward op computes eagerly through the kernels in [`super::ops`], so a
//! graph built with gradients disabled is just a deterministic forward pass —
//! encode, decode, and training all share one code path, which is what makes
//! encoder- and decoder-side reconstructions bit-identical.
//!
//! Nodes that cannot reach a parameter carry no backward closure and are skipped
//! during the sweep; freezing a subnetwork is simply registering its weights as
//! plain inputs.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array2, ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::ops;
use super::resample;

/// Probability floor for the rate model: caps any element at 30 bits.
pub const P_MIN: f64 = 9.313_225_746_154_785e-10; // 2^-30
const LN2: f64 = std::f64::consts::LN_2;

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

type BackFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: Rc<ArrayD<f64>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackFn>,
}

/// Gradients of one scalar with respect to every reachable node.
pub struct Grads {
    slots: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    /// Gradient for `v`, if it received any flow.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.slots.get(v.id).and_then(|s| s.as_ref())
    }
}

/// A dynamically built computation tape.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Graph {
    /// Tape that records backward closures (training / gradient checks).
    pub fn recording() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// Pure forward tape (inference): no closures are stored.
    pub fn inference() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, rg: bool, parents: Vec<usize>, back: Option<BackFn>) -> Var {
        // invariant: every stored value is standard (C) layout, so kernels can
        // reshape and slice views of it freely
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Rc::new(value), requires_grad: rg, parents, backward: back });
        Var { id }
    }

    /// Shared handle to a node's value.
    pub fn value(&self, v: Var) -> Rc<ArrayD<f64>> {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    /// Value of a 0-dim node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.ndim(), 0);
        *val.first().unwrap()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].requires_grad
    }

    /// Whether both recording is on and any input requires gradients.
    fn track(&self, parents: &[Var]) -> bool {
        self.grad_enabled && parents.iter().any(|p| self.rg(*p))
    }

    // ---- leaves -----------------------------------------------------------

    /// Constant leaf: gradients never flow past it.
    pub fn input(&self, value: ArrayD<f64>) -> Var {
        self.push(value, false, Vec::new(), None)
    }

    /// Trainable leaf.
    pub fn param(&self, value: ArrayD<f64>) -> Var {
        let rg = self.grad_enabled;
        self.push(value, rg, Vec::new(), None)
    }

    // ---- elementwise ------------------------------------------------------

    fn binary_same_shape(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>,
        back: impl Fn(&ArrayD<f64>, &ArrayD<f64>, &ArrayD<f64>) -> (ArrayD<f64>, ArrayD<f64>)
            + 'static,
    ) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "shape mismatch in elementwise op");
        let out = f(&va, &vb);
        let bf: Option<BackFn> = if self.track(&[a, b]) {
            Some(Box::new(move |g| {
                let (da, db) = back(g, &va, &vb);
                vec![da, db]
            }))
        } else {
            None
        };
        self.push(out, self.track_flag(&[a, b]), vec![a.id, b.id], bf)
    }

    fn track_flag(&self, parents: &[Var]) -> bool {
        self.track(parents)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x + y, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x - y, |g, _, _| (g.clone(), -g))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, |x, y| x * y, |g, x, y| (g * y, g * x))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| x + c, move |_| 1.0)
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| x * c, move |_| c)
    }

    /// Generic elementwise unary op with derivative as a function of the input.
    fn unary(
        &self,
        a: Var,
        f: impl Fn(f64) -> f64,
        dfdx: impl Fn(f64) -> f64 + 'static,
    ) -> Var {
        let va = self.value(a);
        let out = va.mapv(&f);
        let bf: Option<BackFn> = if self.track(&[a]) {
            Some(Box::new(move |g| {
                let mut d = g.clone();
                d.zip_mut_with(&va, |gv, &xv| *gv *= dfdx(xv));
                vec![d]
            }))
        } else {
            None
        };
        self.push(out, self.track_flag(&[a]), vec![a.id], bf)
    }

    /// Unary op whose derivative is expressed in terms of the output value.
    fn unary_out(
        &self,
        a: Var,
        f: impl Fn(f64) -> f64,
        dfdy: impl Fn(f64) -> f64 + 'static,
    ) -> Var {
        let va = self.value(a);
        let out = va.mapv(&f);
        let out_rc = Rc::new(out.clone());
        let bf: Option<BackFn> = if self.track(&[a]) {
            Some(Box::new(move |g| {
                let mut d = g.clone();
                d.zip_mut_with(&out_rc, |gv, &yv| *gv *= dfdy(yv));
                vec![d]
            }))
        } else {
            None
        };
        self.push(out, self.track_flag(&[a]), vec![a.id], bf)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, ops::softplus, ops::sigmoid)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary_out(a, f64::tanh, |y| 1.0 - y * y)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary_out(a, ops::sigmoid, |y| y * (1.0 - y))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x| 2.0 * x)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary_out(a, f64::sqrt, |y| 0.5 / y)
    }

    /// 1 / sqrt(x).
    pub fn rsqrt(&self, a: Var) -> Var {
        self.unary_out(a, |x| 1.0 / x.sqrt(), |y| -0.5 * y * y * y)
    }

    pub fn log2(&self, a: Var) -> Var {
        self.unary(a, f64::log2, |x| 1.0 / (x * LN2))
    }

    /// max(x, c); gradient passes only where x > c.
    pub fn clamp_min_const(&self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| x.max(c), move |x| if x > c { 1.0 } else { 0.0 })
    }

    /// Clamp to [0, 1]; gradient passes inside the closed interval.
    pub fn clamp01(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.clamp(0.0, 1.0),
            |x| if (0.0..=1.0).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    /// Round half away from zero with a straight-through (identity) gradient.
    pub fn round_ste(&self, a: Var) -> Var {
        self.unary(a, f64::round, |_| 1.0)
    }

    /// Add i.i.d. uniform noise drawn from the open interval (-0.5, 0.5).
    ///
    /// The noise is data (sampled at build time), so the gradient is identity.
    pub fn add_noise(&self, a: Var, rng: &mut ChaCha20Rng) -> Var {
        let va = self.value(a);
        let mut out = (*va).clone();
        for v in out.iter_mut() {
            let mut u = rng.gen::<f64>();
            while u == 0.0 {
                u = rng.gen::<f64>();
            }
            *v += u - 0.5;
        }
        let bf: Option<BackFn> =
            if self.track(&[a]) { Some(Box::new(move |g| vec![g.clone()])) } else { None };
        self.push(out, self.track_flag(&[a]), vec![a.id], bf)
    }

    // ---- shape ops --------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let in_shape: Vec<usize> = va.shape().to_vec();
        let out = va.to_shape(IxDyn(shape)).expect("reshape size mismatch").to_owned();
        let bf: Option<BackFn> = if self.track(&[a]) {
            Some(Box::new(move |g| {
                vec![g.to_shape(IxDyn(&in_shape)).unwrap().to_owned()]
            }))
        } else {
            None
        };
        self.push(out, self.track_flag(&[a]), vec![a.id], bf)
    }

    /// Concatenate along the last axis.
    pub fn concat_last(&self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let vals: Vec<Rc<ArrayD<f64>>> = xs.iter().map(|v| self.value(*v)).collect();
        let views: Vec<ArrayViewD<f64>> = vals.iter().map(|v| v.view()).collect();
        let axis = Axis(views[0].ndim() - 1);
        let out = ndarray::concatenate(axis, &views).expect("concat shape mismatch");
        let widths: Vec<usize> = vals.iter().map(|v| *v.shape().last().unwrap()).collect();
        let bf: Option<BackFn> = if self.track(xs) {
            Some(Box::new(move |g| {
                let axis = Axis(g.ndim() - 1);
                let mut parts = Vec::with_capacity(widths.len());
                let mut at = 0;
                for &w in &widths {
                    parts.push(g.slice_axis(axis, (at..at + w).into()).to_owned());
                    at += w;
                }
                parts
            }))
        } else {
            None
        };
        self.push(out, self.track_flag(xs), xs.iter().map(|v| v.id).collect(), bf)
    }

    /// Slice `[from, to)` of the last axis.
    pub fn slice_last(&self, a: Var, from: usize, to: usize) -> Var {
        let va = self.value(a);
        let axis = Axis(va.ndim() - 1);
        let out = va.slice_axis(axis, (from..to).into()).to_owned();
        let full: Vec<usize> = va.shape().to_vec();
        let bf: Option<BackFn> = if self.track(&[a]) {
            Some(Box::new(move |g| {
                let mut d = ArrayD::zeros(IxDyn(&full));
                let axis = Axis(d.ndim() - 1);
                d.slice_axis_mut(axis, (from..to).into()).assign(g);
                vec![d]
            }))
        } else {
            None
        };
        self.push(out, self.track_flag(&[a]), vec![a.id], bf)
    }

    /// Select index `i` of the first axis (shape loses that axis).
    pub fn index_axis0(&self, a: Var, i: usize) -> Var {
        let va = self.value(a);
        let out = va.index_axis(Axis(0), i).to_owned();
        let full: Vec<usize> = va.shape().to_vec();
        let bf: Option<BackFn> = if self.track(&[a]) {
            Some(Box::new(move |g| {
                let mut d = ArrayD::zeros(IxDyn(&full));
                d.index_axis_mut(Axis(0), i).assign(g);
                vec![d]
            }))
        } else {
            None
        };
        self.push(out, self.track_flag(&[a]), vec![a.id], bf)
    }

    // ---- linear algebra ---------------------------------------------------

    /// `(n, k) x (k, m)` matrix product.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let a2 = va.view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-d");
        let b2 = vb.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-d");
        let out = a2.dot(&b2).into_dyn();
        let bf: Option<BackFn> = if self.track(&[a, b]) {
            let (va, vb) = (va.clone(), vb.clone());
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
                vec![g2.dot(&b2.t()).into_dyn(), a2.t().dot(&g2).into_dyn()]
            }))
        } else {
            None
        };
        self.push(out, self.track_flag(&[a, b]), vec![a.id, b.id], bf)
    }

    /// Broadcast-add a length-`m` row vector to every row of `(n, m)`.
    pub fn add_row(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let a2 = va.view().into_dimensionality::<Ix2>().expect("add_row lhs must be 2-d");
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("add_row rhs must be 1-d");
        let out = (&a2 + &b1.insert_axis(Axis(0))).into_dyn();
        let bf: Option<BackFn> = if self.track(&[a, b]) {
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
            }))
        } else {
            None
        };
        self.push(out, self.track_flag(&[a, b]), vec![a.id, b.id], bf)
    }

    /// Broadcast-multiply every row of `(n, m)` by a length-`m` vector.
    pub fn mul_row(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let a2 = va.view().into_dimensionality::<Ix2>().expect("mul_row lhs must be 2-d");
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("mul_row rhs must be 1-d");
        let out = (&a2 * &b1.insert_axis(Axis(0))).into_dyn();
        let bf: Option<BackFn> = if self.track(&[a, b]) {
            let (va, vb) = (va.clone(), vb.clone());
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
                let b1 = vb.view().into_dimensionality::<Ix1>().unwrap();
                let da = (&g2 * &b1.insert_axis(Axis(0))).into_dyn();
                let db = (&g2 * &a2).sum_axis(Axis(0)).into_dyn();
                vec![da, db]
            }))
        } else {
            None
        };
        self.push(out, self.track_flag(&[a, b]), vec![a.id, b.id], bf)
    }

    // ---- convolutions and spatial ops -------------------------------------

    /// Channels-last conv; `w` is `(out, kh, kw, in)`, optional bias `(out)`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let x3 = vx.view().into_dimensionality::<Ix3>().expect("conv input must be 3-d");
        let w4 = vw.view().into_dimensionality::<Ix4>().expect("conv kernel must be 4-d");
        let vb = b.map(|b| self.value(b));
        let b1 = vb
            .as_ref()
            .map(|v| v.view().into_dimensionality::<Ix1>().unwrap().to_owned());
        let out = ops::conv2d(x3, w4, b1.as_ref(), stride, pad).into_dyn();
        let mut parents = vec![x, w];
        if let Some(bv) = b {
            parents.push(bv);
        }
        let track = self.track(&parents);
        let bf: Option<BackFn> = if track {
            let (vx, vw) = (vx.clone(), vw.clone());
            let has_bias = b.is_some();
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
                let w4 = vw.view().into_dimensionality::<Ix4>().unwrap();
                let (h, wd, _) = x3.dim();
                let (_, kh, kw, _) = w4.dim();
                let dx = ops::conv2d_grad_input(g3, w4, h, wd, stride, pad).into_dyn();
                let dw = ops::conv2d_grad_kernel(x3, g3, kh, kw, stride, pad).into_dyn();
                let mut out = vec![dx, dw];
                if has_bias {
                    out.push(g3.sum_axis(Axis(0)).sum_axis(Axis(0)).into_dyn());
                }
                out
            }))
        } else {
            None
        };
        self.push(out, track, parents.iter().map(|v| v.id).collect(), bf)
    }

    /// Transposed conv; `wm` is the mirrored conv's kernel `(in, kh, kw, out)`.
    pub fn conv2d_transpose(
        &self,
        x: Var,
        wm: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let (vx, vw) = (self.value(x), self.value(wm));
        let x3 = vx.view().into_dimensionality::<Ix3>().expect("deconv input must be 3-d");
        let w4 = vw.view().into_dimensionality::<Ix4>().expect("deconv kernel must be 4-d");
        let vb = b.map(|b| self.value(b));
        let b1 = vb
            .as_ref()
            .map(|v| v.view().into_dimensionality::<Ix1>().unwrap().to_owned());
        let out = ops::conv2d_transpose(x3, w4, b1.as_ref(), stride, pad, out_pad).into_dyn();
        let mut parents = vec![x, wm];
        if let Some(bv) = b {
            parents.push(bv);
        }
        let track = self.track(&parents);
        let bf: Option<BackFn> = if track {
            let (vx, vw) = (vx.clone(), vw.clone());
            let has_bias = b.is_some();
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
                let w4 = vw.view().into_dimensionality::<Ix4>().unwrap();
                let (_, kh, kw, _) = w4.dim();
                // d/dx: forward pass of the mirrored conv applied to the output grad.
                let dx = ops::conv2d(g3, w4, None, stride, pad).into_dyn();
                // d/dw: kernel grad of the mirrored conv with roles swapped
                // (the output grad acts as that conv's input, x as its output grad).
                let dw = ops::conv2d_grad_kernel(g3, x3, kh, kw, stride, pad).into_dyn();
                let mut out = vec![dx, dw];
                if has_bias {
                    out.push(g3.sum_axis(Axis(0)).sum_axis(Axis(0)).into_dyn());
                }
                out
            }))
        } else {
            None
        };
        self.push(out, track, parents.iter().map(|v| v.id).collect(), bf)
    }

    /// Replicate-pad bottom/right.
    pub fn replicate_pad_br(&self, x: Var, pb: usize, pr: usize) -> Var {
        if pb == 0 && pr == 0 {
            return x;
        }
        let vx = self.value(x);
        let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
        let (h, w, _) = x3.dim();
        let out = ops::replicate_pad_br(x3, pb, pr).into_dyn();
        let bf: Option<BackFn> = if self.track(&[x]) {
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let c = g3.dim().2;
                let mut dx = ndarray::Array3::<f64>::zeros((h, w, c));
                // every padded cell replicates a clamped source index
                for i in 0..h + pb {
                    let si = i.min(h - 1);
                    for j in 0..w + pr {
                        let sj = j.min(w - 1);
                        for ch in 0..c {
                            dx[(si, sj, ch)] += g3[(i, j, ch)];
                        }
                    }
                }
                vec![dx.into_dyn()]
            }))
        } else {
            None
        };
        self.push(out, self.track_flag(&[x]), vec![x.id], bf)
    }

    /// Drop `cb` rows from the bottom and `cr` columns from the right.
    pub fn crop_br(&self, x: Var, cb: usize, cr: usize) -> Var {
        if cb == 0 && cr == 0 {
            return x;
        }
        let vx = self.value(x);
        let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
        let (h, w, _) = x3.dim();
        let out = x3.slice(ndarray::s![..h - cb, ..w - cr, ..]).to_owned().into_dyn();
        let bf: Option<BackFn> = if self.track(&[x]) {
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let c = g3.dim().2;
                let mut dx = ndarray::Array3::<f64>::zeros((h, w, c));
                dx.slice_mut(ndarray::s![..h - cb, ..w - cr, ..]).assign(&g3);
                vec![dx.into_dyn()]
            }))
        } else {
            None
        };
        self.push(out, self.track_flag(&[x]), vec![x.id], bf)
    }

    /// 3x3 neighborhood concatenation (channels expand 9x), zero border.
    pub fn unfold3(&self, x: Var) -> Var {
        let vx = self.value(x);
        let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
        let (h, w, c) = x3.dim();
        let out = ops::unfold3(x3).into_dyn();
        let bf: Option<BackFn> = if self.track(&[x]) {
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                vec![ops::unfold3_grad(g3, h, w, c).into_dyn()]
            }))
        } else {
            None
        };
        self.push(out, self.track_flag(&[x]), vec![x.id], bf)
    }

    /// Nearest-neighbor gather via per-axis source index maps.
    pub fn upsample_nearest(&self, x: Var, rows: Vec<usize>, cols: Vec<usize>) -> Var {
        let vx = self.value(x);
        let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
        let (h, w, _) = x3.dim();
        let out = ops::upsample_nearest(x3, &rows, &cols).into_dyn();
        let bf: Option<BackFn> = if self.track(&[x]) {
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                vec![ops::upsample_nearest_grad(g3, &rows, &cols, h, w).into_dyn()]
            }))
        } else {
            None
        };
        self.push(out, self.track_flag(&[x]), vec![x.id], bf)
    }

    /// Differentiable Catmull-Rom bicubic resize to `(oh, ow)`.
    pub fn resize_bicubic(&self, x: Var, oh: usize, ow: usize) -> Var {
        let vx = self.value(x);
        let x3 = vx.view().into_dimensionality::<Ix3>().unwrap();
        let (h, w, _) = x3.dim();
        let out = resample::resize(x3, oh, ow).into_dyn();
        let bf: Option<BackFn> = if self.track(&[x]) {
            Some(Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                vec![resample::resize_adjoint(g3, h, w).into_dyn()]
            }))
        } else {
            None
        };
        self.push(out, self.track_flag(&[x]), vec![x.id], bf)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.sum();
        let shape: Vec<usize> = va.shape().to_vec();
        let out = ArrayD::from_elem(IxDyn(&[]), s);
        let bf: Option<BackFn> = if self.track(&[a]) {
            Some(Box::new(move |g| {
                let gv = *g.first().unwrap();
                vec![ArrayD::from_elem(IxDyn(&shape), gv)]
            }))
        } else {
            None
        };
        self.push(out, self.track_flag(&[a]), vec![a.id], bf)
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Mean squared error between same-shape tensors (0-dim output).
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    // ---- rate model -------------------------------------------------------

    /// Per-element code length in bits of integer-ish values `v` under a
    /// Gaussian bin model: `-log2(max(Phi(hi) - Phi(lo), 2^-30))` with
    /// `hi = (v - mu + 0.5) / sigma`, `lo = (v - mu - 0.5) / sigma`.
    pub fn gaussian_bits(&self, v: Var, mu: Var, sigma: Var) -> Var {
        let (vv, vm, vs) = (self.value(v), self.value(mu), self.value(sigma));
        assert_eq!(vv.shape(), vm.shape());
        assert_eq!(vv.shape(), vs.shape());
        let mut out = ArrayD::zeros(vv.raw_dim());
        {
            let o = out.as_slice_mut().unwrap();
            let (x, m, s) = (
                vv.as_slice().unwrap(),
                vm.as_slice().unwrap(),
                vs.as_slice().unwrap(),
            );
            for i in 0..o.len() {
                let hi = (x[i] - m[i] + 0.5) / s[i];
                let lo = (x[i] - m[i] - 0.5) / s[i];
                let p = (ops::normal_cdf(hi) - ops::normal_cdf(lo)).max(P_MIN);
                o[i] = -p.log2();
            }
        }
        let track = self.track(&[v, mu, sigma]);
        let bf: Option<BackFn> = if track {
            let (vv, vm, vs) = (vv.clone(), vm.clone(), vs.clone());
            Some(Box::new(move |g| {
                let mut dv = ArrayD::zeros(vv.raw_dim());
                let mut dm = ArrayD::zeros(vv.raw_dim());
                let mut ds = ArrayD::zeros(vv.raw_dim());
                {
                    let (gd, dvs, dms, dss) = (
                        g.as_slice().unwrap(),
                        dv.as_slice_mut().unwrap(),
                        dm.as_slice_mut().unwrap(),
                        ds.as_slice_mut().unwrap(),
                    );
                    let (x, m, s) = (
                        vv.as_slice().unwrap(),
                        vm.as_slice().unwrap(),
                        vs.as_slice().unwrap(),
                    );
                    for i in 0..gd.len() {
                        let hi = (x[i] - m[i] + 0.5) / s[i];
                        let lo = (x[i] - m[i] - 0.5) / s[i];
                        let p = ops::normal_cdf(hi) - ops::normal_cdf(lo);
                        if p <= P_MIN {
                            continue; // flat region: floored probability
                        }
                        let (phi_hi, phi_lo) = (ops::normal_pdf(hi), ops::normal_pdf(lo));
                        let c = 1.0 / (p * LN2);
                        // d(-log2 p)/dv = -(phi_hi - phi_lo) / (sigma * p * ln2)
                        let gv = gd[i];
                        dvs[i] = gv * (-(phi_hi - phi_lo) / s[i] * c);
                        dms[i] = -dvs[i];
                        dss[i] = gv * ((phi_hi * hi - phi_lo * lo) / s[i] * c);
                    }
                }
                vec![dv, dm, ds]
            }))
        } else {
            None
        };
        self.push(out, track, vec![v.id, mu.id, sigma.id], bf)
    }

    /// Per-pixel filtering: `out[n, k] = sum_c feat[n, c] * filt[n, c*3 + k]`.
    ///
    /// `feat` is `(n, c)`, `filt` is `(n, 3c)` (per-pixel `c x 3` matrices with
    /// the RGB axis fastest); output is `(n, 3)`.
    pub fn pixelwise_filter(&self, feat: Var, filt: Var) -> Var {
        let (vf, vw) = (self.value(feat), self.value(filt));
        let f2 = vf.view().into_dimensionality::<Ix2>().expect("feat must be 2-d");
        let w2 = vw.view().into_dimensionality::<Ix2>().expect("filters must be 2-d");
        let (n, c) = f2.dim();
        assert_eq!(w2.dim(), (n, c * 3), "filter shape mismatch");
        let mut out = Array2::<f64>::zeros((n, 3));
        for i in 0..n {
            for k in 0..3 {
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += f2[(i, ch)] * w2[(i, ch * 3 + k)];
                }
                out[(i, k)] = acc;
            }
        }
        let track = self.track(&[feat, filt]);
        let bf: Option<BackFn> = if track {
            let (vf, vw) = (vf.clone(), vw.clone());
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let f2 = vf.view().into_dimensionality::<Ix2>().unwrap();
                let w2 = vw.view().into_dimensionality::<Ix2>().unwrap();
                let (n, c) = f2.dim();
                let mut df = Array2::<f64>::zeros((n, c));
                let mut dw = Array2::<f64>::zeros((n, c * 3));
                for i in 0..n {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for k in 0..3 {
                            let gv = g2[(i, k)];
                            acc += gv * w2[(i, ch * 3 + k)];
                            dw[(i, ch * 3 + k)] = f2[(i, ch)] * gv;
                        }
                        df[(i, ch)] = acc;
                    }
                }
                vec![df.into_dyn(), dw.into_dyn()]
            }))
        } else {
            None
        };
        self.push(out.into_dyn(), track, vec![feat.id, filt.id], bf)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a 0-dim `loss`. Gradients accumulate only into nodes
    /// that require them; interior gradients are freed as soon as they have
    /// been distributed.
    pub fn backward(&self, loss: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert!(
            nodes[loss.id].value.ndim() == 0,
            "backward expects a scalar loss"
        );
        let mut slots: Vec<Option<ArrayD<f64>>> = (0..nodes.len()).map(|_| None).collect();
        slots[loss.id] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));
        for id in (0..=loss.id).rev() {
            if slots[id].is_none() {
                continue;
            }
            let node = &nodes[id];
            let Some(back) = &node.backward else { continue };
            let g = slots[id].take().unwrap();
            let contribs = back(&g);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (pid, contrib) in node.parents.iter().zip(contribs) {
                if !nodes[*pid].requires_grad {
                    continue;
                }
                match &mut slots[*pid] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            }
            // interior node: value retained, gradient no longer needed
            if id != loss.id {
                slots[id] = None;
            }
        }
        Grads { slots }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, Array3, Array4};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    /// Central-difference gradient of `f` at `x0`, one element at a time.
    fn finite_diff(
        x0: &ArrayD<f64>,
        eps: f64,
        mut f: impl FnMut(&ArrayD<f64>) -> f64,
    ) -> ArrayD<f64> {
        let mut g = ArrayD::zeros(x0.raw_dim());
        let mut x = x0.clone();
        for idx in 0..x0.len() {
            let orig = x.as_slice().unwrap()[idx];
            x.as_slice_mut().unwrap()[idx] = orig + eps;
            let hi = f(&x);
            x.as_slice_mut().unwrap()[idx] = orig - eps;
            let lo = f(&x);
            x.as_slice_mut().unwrap()[idx] = orig;
            g.as_slice_mut().unwrap()[idx] = (hi - lo) / (2.0 * eps);
        }
        g
    }

    fn assert_close(a: &ArrayD<f64>, b: &ArrayD<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!(
                (x - y).abs() / denom < tol,
                "gradient mismatch: analytic {x} vs numeric {y}"
            );
        }
    }

    /// Weighted-sum scalarization so every output element is exercised.
    fn project(g: &Graph, v: Var, w: &ArrayD<f64>) -> Var {
        let wv = g.input(w.clone());
        let p = g.mul(v, wv);
        g.sum_all(p)
    }

    #[test]
    fn elementwise_op_gradients_match_finite_differences() {
        let mut r = rng(11);
        let x0 = Array::from_shape_fn(IxDyn(&[4, 5]), |_| r.gen::<f64>() * 2.0 - 1.0);
        let w = Array::from_shape_fn(IxDyn(&[4, 5]), |_| r.gen::<f64>() + 0.5);

        type OpFn = Box<dyn Fn(&Graph, Var) -> Var>;
        let cases: Vec<(&str, OpFn)> = vec![
            ("relu", Box::new(|g: &Graph, v| g.relu(v))),
            ("leaky", Box::new(|g: &Graph, v| g.leaky_relu(v, 0.1))),
            ("softplus", Box::new(|g: &Graph, v| g.softplus(v))),
            ("tanh", Box::new(|g: &Graph, v| g.tanh(v))),
            ("sigmoid", Box::new(|g: &Graph, v| g.sigmoid(v))),
            ("square", Box::new(|g: &Graph, v| g.square(v))),
            ("scale", Box::new(|g: &Graph, v| g.mul_scalar(v, -2.5))),
            ("shift", Box::new(|g: &Graph, v| g.add_scalar(v, 0.7))),
        ];
        for (name, op) in cases {
            let g = Graph::recording();
            let v = g.param(x0.clone());
            let y = op(&g, v);
            let loss = project(&g, y, &w);
            let grads = g.backward(loss);
            let analytic = grads.get(v).unwrap().clone();
            let numeric = finite_diff(&x0, 1e-6, |x| {
                let g = Graph::recording();
                let v = g.param(x.clone());
                let y = op(&g, v);
                g.scalar(project(&g, y, &w))
            });
            assert_close(&analytic, &numeric, 1e-5);
            let _ = name;
        }
    }

    #[test]
    fn positive_domain_op_gradients() {
        let mut r = rng(12);
        let x0 = Array::from_shape_fn(IxDyn(&[3, 4]), |_| r.gen::<f64>() + 0.5);
        let w = Array::from_shape_fn(IxDyn(&[3, 4]), |_| r.gen::<f64>() + 0.5);
        type OpFn = Box<dyn Fn(&Graph, Var) -> Var>;
        let cases: Vec<OpFn> = vec![
            Box::new(|g: &Graph, v| g.sqrt(v)),
            Box::new(|g: &Graph, v| g.rsqrt(v)),
            Box::new(|g: &Graph, v| g.log2(v)),
        ];
        for op in cases {
            let g = Graph::recording();
            let v = g.param(x0.clone());
            let loss = project(&g, op(&g, v), &w);
            let analytic = g.backward(loss).get(v).unwrap().clone();
            let numeric = finite_diff(&x0, 1e-7, |x| {
                let g = Graph::recording();
                let v = g.param(x.clone());
                g.scalar(project(&g, op(&g, v), &w))
            });
            assert_close(&analytic, &numeric, 1e-5);
        }
    }

    #[test]
    fn matmul_and_row_op_gradients() {
        let mut r = rng(13);
        let a0 = Array::from_shape_fn(IxDyn(&[4, 3]), |_| r.gen::<f64>() - 0.5);
        let b0 = Array::from_shape_fn(IxDyn(&[3, 5]), |_| r.gen::<f64>() - 0.5);
        let bias0 = Array::from_shape_fn(IxDyn(&[5]), |_| r.gen::<f64>() - 0.5);
        let w = Array::from_shape_fn(IxDyn(&[4, 5]), |_| r.gen::<f64>() + 0.1);

        let build = |a: &ArrayD<f64>, b: &ArrayD<f64>, bias: &ArrayD<f64>| {
            let g = Graph::recording();
            let (va, vb, vbias) = (g.param(a.clone()), g.param(b.clone()), g.param(bias.clone()));
            let mm = g.matmul(va, vb);
            let shifted = g.add_row(mm, vbias);
            let scaled = g.mul_row(shifted, vbias);
            (g, va, vb, vbias, shifted, scaled)
        };
        let (g, va, vb, vbias, _, out) = build(&a0, &b0, &bias0);
        let loss = project(&g, out, &w);
        let grads = g.backward(loss);

        let na = finite_diff(&a0, 1e-6, |x| {
            let (g, _, _, _, _, out) = build(x, &b0, &bias0);
            g.scalar(project(&g, out, &w))
        });
        assert_close(grads.get(va).unwrap(), &na, 1e-5);
        let nb = finite_diff(&b0, 1e-6, |x| {
            let (g, _, _, _, _, out) = build(&a0, x, &bias0);
            g.scalar(project(&g, out, &w))
        });
        assert_close(grads.get(vb).unwrap(), &nb, 1e-5);
        let nbias = finite_diff(&bias0, 1e-6, |x| {
            let (g, _, _, _, _, out) = build(&a0, &b0, x);
            g.scalar(project(&g, out, &w))
        });
        assert_close(grads.get(vbias).unwrap(), &nbias, 1e-5);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = rng(14);
        let x0 = Array3::from_shape_fn((6, 5, 2), |_| r.gen::<f64>() - 0.5).into_dyn();
        let w0 = Array4::from_shape_fn((3, 5, 5, 2), |_| r.gen::<f64>() - 0.5).into_dyn();
        let b0 = Array::from_shape_fn(IxDyn(&[3]), |_| r.gen::<f64>() - 0.5);
        let proj = Array::from_shape_fn(IxDyn(&[3, 3, 3]), |_| r.gen::<f64>() + 0.1);

        let run = |x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| {
            let g = Graph::recording();
            let (vx, vw, vb) = (g.param(x.clone()), g.param(w.clone()), g.param(b.clone()));
            let y = g.conv2d(vx, vw, Some(vb), 2, 2);
            (g, vx, vw, vb, y)
        };
        let (g, vx, vw, vb, y) = run(&x0, &w0, &b0);
        let loss = project(&g, y, &proj);
        let grads = g.backward(loss);
        for (var, arr) in [(vx, &x0), (vw, &w0), (vb, &b0)] {
            let numeric = finite_diff(arr, 1e-6, |t| {
                let (g, _, _, _, y) = match var {
                    v if v == vx => run(t, &w0, &b0),
                    v if v == vw => run(&x0, t, &b0),
                    _ => run(&x0, &w0, t),
                };
                g.scalar(project(&g, y, &proj))
            });
            assert_close(grads.get(var).unwrap(), &numeric, 1e-5);
        }
    }

    #[test]
    fn deconv_gradients_match_finite_differences() {
        let mut r = rng(15);
        let x0 = Array3::from_shape_fn((3, 4, 2), |_| r.gen::<f64>() - 0.5).into_dyn();
        let w0 = Array4::from_shape_fn((2, 5, 5, 3), |_| r.gen::<f64>() - 0.5).into_dyn();
        let proj = Array::from_shape_fn(IxDyn(&[6, 8, 3]), |_| r.gen::<f64>() + 0.1);

        let run = |x: &ArrayD<f64>, w: &ArrayD<f64>| {
            let g = Graph::recording();
            let (vx, vw) = (g.param(x.clone()), g.param(w.clone()));
            let y = g.conv2d_transpose(vx, vw, None, 2, 2, 1);
            (g, vx, vw, y)
        };
        let (g, vx, vw, y) = run(&x0, &w0);
        let loss = project(&g, y, &proj);
        let grads = g.backward(loss);
        let nx = finite_diff(&x0, 1e-6, |t| {
            let (g, _, _, y) = run(t, &w0);
            g.scalar(project(&g, y, &proj))
        });
        assert_close(grads.get(vx).unwrap(), &nx, 1e-5);
        let nw = finite_diff(&w0, 1e-6, |t| {
            let (g, _, _, y) = run(&x0, t);
            g.scalar(project(&g, y, &proj))
        });
        assert_close(grads.get(vw).unwrap(), &nw, 1e-5);
    }

    #[test]
    fn spatial_op_gradients() {
        let mut r = rng(16);
        let x0 = Array3::from_shape_fn((4, 4, 2), |_| r.gen::<f64>() - 0.5).into_dyn();
        type OpFn = Box<dyn Fn(&Graph, Var) -> Var>;
        let cases: Vec<(OpFn, Vec<usize>)> = vec![
            (Box::new(|g: &Graph, v| g.replicate_pad_br(v, 1, 1)), vec![5, 5, 2]),
            (Box::new(|g: &Graph, v| g.crop_br(v, 1, 2)), vec![3, 2, 2]),
            (Box::new(|g: &Graph, v| g.unfold3(v)), vec![4, 4, 18]),
            (
                Box::new(|g: &Graph, v| {
                    g.upsample_nearest(v, vec![0, 0, 1, 2, 3, 3], vec![0, 1, 1, 2, 3])
                }),
                vec![6, 5, 2],
            ),
            (Box::new(|g: &Graph, v| g.resize_bicubic(v, 7, 5)), vec![7, 5, 2]),
            (Box::new(|g: &Graph, v| g.reshape(v, &[8, 4])), vec![8, 4]),
            (Box::new(|g: &Graph, v| g.slice_last(v, 0, 1)), vec![4, 4, 1]),
        ];
        for (op, out_shape) in cases {
            let proj = Array::from_shape_fn(IxDyn(&out_shape), |_| r.gen::<f64>() + 0.1);
            let g = Graph::recording();
            let v = g.param(x0.clone());
            let y = op(&g, v);
            assert_eq!(g.shape(y), out_shape);
            let loss = project(&g, y, &proj);
            let analytic = g.backward(loss).get(v).unwrap().clone();
            let numeric = finite_diff(&x0, 1e-6, |x| {
                let g = Graph::recording();
                let v = g.param(x.clone());
                g.scalar(project(&g, op(&g, v), &proj))
            });
            assert_close(&analytic, &numeric, 1e-5);
        }
    }

    #[test]
    fn gaussian_bits_gradients_match_finite_differences() {
        let mut r = rng(17);
        let v0 = Array::from_shape_fn(IxDyn(&[8]), |_| (r.gen::<f64>() * 4.0 - 2.0).round());
        let m0 = Array::from_shape_fn(IxDyn(&[8]), |_| r.gen::<f64>() * 2.0 - 1.0);
        let s0 = Array::from_shape_fn(IxDyn(&[8]), |_| 0.3 + r.gen::<f64>());
        let w = Array::from_shape_fn(IxDyn(&[8]), |_| r.gen::<f64>() + 0.1);

        let run = |v: &ArrayD<f64>, m: &ArrayD<f64>, s: &ArrayD<f64>| {
            let g = Graph::recording();
            let (vv, vm, vs) = (g.param(v.clone()), g.param(m.clone()), g.param(s.clone()));
            let bits = g.gaussian_bits(vv, vm, vs);
            (g, vv, vm, vs, bits)
        };
        let (g, vv, vm, vs, bits) = run(&v0, &m0, &s0);
        let loss = project(&g, bits, &w);
        let grads = g.backward(loss);

        let nv = finite_diff(&v0, 1e-6, |t| {
            let (g, _, _, _, b) = run(t, &m0, &s0);
            g.scalar(project(&g, b, &w))
        });
        assert_close(grads.get(vv).unwrap(), &nv, 1e-4);
        let nm = finite_diff(&m0, 1e-6, |t| {
            let (g, _, _, _, b) = run(&v0, t, &s0);
            g.scalar(project(&g, b, &w))
        });
        assert_close(grads.get(vm).unwrap(), &nm, 1e-4);
        let ns = finite_diff(&s0, 1e-6, |t| {
            let (g, _, _, _, b) = run(&v0, &m0, t);
            g.scalar(project(&g, b, &w))
        });
        assert_close(grads.get(vs).unwrap(), &ns, 1e-4);
    }

    #[test]
    fn pixelwise_filter_gradients() {
        let mut r = rng(18);
        let f0 = Array::from_shape_fn(IxDyn(&[6, 4]), |_| r.gen::<f64>() - 0.5);
        let w0 = Array::from_shape_fn(IxDyn(&[6, 12]), |_| r.gen::<f64>() - 0.5);
        let proj = Array::from_shape_fn(IxDyn(&[6, 3]), |_| r.gen::<f64>() + 0.1);
        let run = |f: &ArrayD<f64>, w: &ArrayD<f64>| {
            let g = Graph::recording();
            let (vf, vw) = (g.param(f.clone()), g.param(w.clone()));
            let y = g.pixelwise_filter(vf, vw);
            (g, vf, vw, y)
        };
        let (g, vf, vw, y) = run(&f0, &w0);
        let loss = project(&g, y, &proj);
        let grads = g.backward(loss);
        let nf = finite_diff(&f0, 1e-6, |t| {
            let (g, _, _, y) = run(t, &w0);
            g.scalar(project(&g, y, &proj))
        });
        assert_close(grads.get(vf).unwrap(), &nf, 1e-5);
        let nw = finite_diff(&w0, 1e-6, |t| {
            let (g, _, _, y) = run(&f0, t);
            g.scalar(project(&g, y, &proj))
        });
        assert_close(grads.get(vw).unwrap(), &nw, 1e-5);
    }

    #[test]
    fn round_ste_has_identity_gradient() {
        let x0 = Array::from_shape_fn(IxDyn(&[5]), |i| i[0] as f64 * 0.3 - 0.7);
        let g = Graph::recording();
        let v = g.param(x0);
        let y = g.round_ste(v);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        for gv in grads.get(v).unwrap().iter() {
            assert_eq!(*gv, 1.0);
        }
    }

    #[test]
    fn noise_gradient_is_identity_and_bounded() {
        let x0 = Array::from_shape_fn(IxDyn(&[64]), |_| 0.0);
        let g = Graph::recording();
        let v = g.param(x0);
        let mut r = rng(19);
        let y = g.add_noise(v, &mut r);
        let yv = g.value(y);
        for n in yv.iter() {
            assert!(*n > -0.5 && *n < 0.5);
        }
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        for gv in grads.get(v).unwrap().iter() {
            assert_eq!(*gv, 1.0);
        }
    }

    #[test]
    fn constant_subgraphs_receive_no_gradient() {
        let g = Graph::recording();
        let frozen = g.input(Array::from_elem(IxDyn(&[3]), 1.0));
        let train = g.param(Array::from_elem(IxDyn(&[3]), 2.0));
        let prod = g.mul(frozen, train);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);
        assert!(grads.get(frozen).is_none());
        assert!(grads.get(train).is_some());
    }

    #[test]
    fn inference_graph_stores_no_closures() {
        let g = Graph::inference();
        let a = g.param(Array::from_elem(IxDyn(&[4]), 1.5));
        let b = g.relu(a);
        let c = g.sum_all(b);
        assert_eq!(g.scalar(c), 6.0);
        let nodes = g.nodes.borrow();
        assert!(nodes.iter().all(|n| n.backward.is_none()));
    }
}

//! A small tape-based reverse-mode differentiation engine over 2-D arrays.
//!
//! Every value is an `Array2` (sequences are `T x channels`). Nodes are appended to a
//! [`Graph`] as operations are applied; [`Graph::backward`] walks the tape in reverse.
//! Parameters are bound by name from a [`ParamStore`] so gradients come back keyed the
//! same way the optimizer and checkpoints see them.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::{sigmoid, silu, softplus, Real};
use crate::ssm::scan::{
    selective_scan_backward, selective_scan_sequential, ssd_scan_chunked, ScanParams, StateMatrix,
};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

/// 1-D convolution geometry over the time axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
}

impl ConvSpec {
    pub fn same(kernel: usize) -> Self {
        ConvSpec {
            kernel,
            stride: 1,
            pad: kernel / 2,
            pad_mode: PadMode::Zero,
        }
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        let padded = t_in + 2 * self.pad;
        if padded < self.kernel {
            0
        } else {
            (padded - self.kernel) / self.stride + 1
        }
    }

    /// Source frame for output `o`, tap `j`, or `None` for a zero pad.
    #[inline]
    fn source(&self, o: usize, j: usize, t_in: usize) -> Option<usize> {
        let pos = (o * self.stride + j) as isize - self.pad as isize;
        if pos >= 0 && (pos as usize) < t_in {
            Some(pos as usize)
        } else {
            match self.pad_mode {
                PadMode::Zero => None,
                PadMode::Replicate => Some(pos.clamp(0, t_in as isize - 1) as usize),
            }
        }
    }
}

/// Which kernel evaluates the forward of a scan node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanKernel {
    Sequential,
    Chunked(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AScheme {
    /// `a_log` node is `d_inner x d_state`
    Diagonal,
    /// `a_log` node is `n_heads x 1`
    PerHead { head_dim: usize },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    ScaleShift(Var, Var, Var),
    Silu(Var),
    Softplus(Var),
    LayerNorm(Var),
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    CausalDepthwise {
        x: Var,
        w: Var,
        bias: Var,
    },
    Scan {
        x: Var,
        delta: Var,
        b: Var,
        c: Var,
        a_log: Var,
        d: Var,
        scheme: AScheme,
    },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    BroadcastRows(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    RepeatCols(Var, usize),
    MeanRows(Var),
    Mse(Var, Var),
    WeightedSum(Var, Var),
}

struct Node<F> {
    value: Array2<F>,
    op: Op,
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    params: BTreeMap<String, Var>,
    grad_enabled: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<F>(a: &Array2<F>, b: &Array2<F>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that will never be differentiated; some ops skip bookkeeping.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&mut self, value: Array2<F>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&self, v: Var) -> Array2<F> {
        self.nodes[v.0].value.clone()
    }

    pub fn constant(&mut self, a: Array2<F>) -> Var {
        self.push(a, Op::Leaf)
    }

    pub fn row_constant(&mut self, a: Array1<F>) -> Var {
        let n = a.len();
        self.constant(a.into_shape_with_order((1, n)).expect("row"))
    }

    /// Bind a named parameter; repeated lookups return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?
            .clone();
        let v = self.push(value, Op::Leaf);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (av, wv) = (self.value(a), self.value(w));
        if av.ncols() != wv.nrows() {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                av.dim(),
                wv.dim()
            )));
        }
        let out = av.dot(wv);
        Ok(self.push(out, Op::MatMul(a, w)))
    }

    /// `a + b` with a `1 x C` row broadcast over rows.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.nrows() != 1 || bv.ncols() != av.ncols() {
            return Err(Error::shape(format!(
                "bias {:?} for {:?}",
                bv.dim(),
                av.dim()
            )));
        }
        let out = av + bv;
        Ok(self.push(out, Op::AddBias(a, b)))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x * (1 + gamma) + beta`
    pub fn scale_shift(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        same_shape(self.value(x), self.value(gamma), "scale")?;
        same_shape(self.value(x), self.value(beta), "shift")?;
        let mut out = self.value(x).clone();
        Zip::from(&mut out)
            .and(self.value(gamma))
            .and(self.value(beta))
            .for_each(|o, &g, &b| *o = *o * (F::one() + g) + b);
        Ok(self.push(out, Op::ScaleShift(x, gamma, beta)))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(silu);
        self.push(out, Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(softplus);
        self.push(out, Op::Softplus(x))
    }

    /// Per-row layer normalization without a learned affine.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let out = layer_norm_rows(self.value(x));
        self.push(out, Op::LayerNorm(x))
    }

    /// `x: T x C_in`, `w: (kernel * C_in) x C_out` with tap-major rows, optional `1 x C_out` bias.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let c_in = xv.ncols();
        if wv.nrows() != spec.kernel * c_in {
            return Err(Error::shape(format!(
                "conv weight {:?} for kernel {} over {} channels",
                wv.dim(),
                spec.kernel,
                c_in
            )));
        }
        if spec.stride == 0 || spec.out_len(xv.nrows()) == 0 {
            return Err(Error::shape(format!(
                "conv of length {} produces no output",
                xv.nrows()
            )));
        }
        let cols = im2col(xv, spec);
        let mut out = cols.dot(wv);
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.dim() != (1, out.ncols()) {
                return Err(Error::shape("conv bias"));
            }
            out += bv;
        }
        Ok(self.push(out, Op::Conv1d { x, w, bias, spec }))
    }

    /// Depthwise convolution with `kernel - 1` frames of left zero padding.
    /// `w: kernel x C`, `bias: 1 x C`.
    pub fn causal_depthwise_conv(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(bias));
        let (t_len, ch) = xv.dim();
        let k = wv.nrows();
        if wv.ncols() != ch || bv.dim() != (1, ch) || k == 0 {
            return Err(Error::shape("depthwise conv weights"));
        }
        let mut out = Array2::zeros((t_len, ch));
        for t in 0..t_len {
            for c in 0..ch {
                let mut acc = bv[[0, c]];
                for j in 0..k {
                    let src = t as isize + j as isize - (k as isize - 1);
                    if src >= 0 {
                        acc += wv[[j, c]] * xv[[src as usize, c]];
                    }
                }
                out[[t, c]] = acc;
            }
        }
        Ok(self.push(out, Op::CausalDepthwise { x, w, bias }))
    }

    fn scan_params(&self, delta: Var, b: Var, c: Var, a_log: Var, d: Var, scheme: AScheme) -> ScanParams<F> {
        let a = self.value(a_log);
        let a_log = match scheme {
            AScheme::Diagonal => StateMatrix::Diagonal(a.clone()),
            AScheme::PerHead { head_dim } => StateMatrix::ScalarPerHead {
                a_log: a.column(0).to_owned(),
                head_dim,
            },
        };
        ScanParams {
            delta: self.value(delta).clone(),
            a_log,
            b_in: self.value(b).clone(),
            c_out: self.value(c).clone(),
            d_skip: self.value(d).row(0).to_owned(),
        }
    }

    /// Selective scan node. `d` is a `1 x d_inner` row.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        b: Var,
        c: Var,
        a_log: Var,
        d: Var,
        scheme: AScheme,
        kernel: ScanKernel,
    ) -> Result<Var> {
        if self.value(d).nrows() != 1 {
            return Err(Error::shape("d_skip must be a row"));
        }
        let params = self.scan_params(delta, b, c, a_log, d, scheme);
        let xv = self.value(x).view();
        let (y, _) = match kernel {
            ScanKernel::Sequential => selective_scan_sequential(xv, &params)?,
            ScanKernel::Chunked(q) => ssd_scan_chunked(xv, &params, q)?,
        };
        Ok(self.push(
            y,
            Op::Scan {
                x,
                delta,
                b,
                c,
                a_log,
                d,
                scheme,
            },
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.nrows() != bv.nrows() {
            return Err(Error::shape(format!(
                "concat rows {} vs {}",
                av.nrows(),
                bv.nrows()
            )));
        }
        let out = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).expect("concat");
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(Error::shape(format!(
                "concat cols {} vs {}",
                av.ncols(),
                bv.ncols()
            )));
        }
        let out = ndarray::concatenate(Axis(0), &[av.view(), bv.view()]).expect("concat");
        Ok(self.push(out, Op::ConcatRows(a, b)))
    }

    /// Repeat a `1 x C` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let av = self.value(a);
        if av.nrows() != 1 {
            return Err(Error::shape("broadcast_rows expects a single row"));
        }
        let out = av
            .broadcast((rows, av.ncols()))
            .expect("broadcast")
            .to_owned();
        Ok(self.push(out, Op::BroadcastRows(a)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.nrows() || len == 0 {
            return Err(Error::shape(format!(
                "rows {start}..{} of {}",
                start + len,
                av.nrows()
            )));
        }
        let out = av.slice(s![start..start + len, ..]).to_owned();
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.ncols() || len == 0 {
            return Err(Error::shape(format!(
                "cols {start}..{} of {}",
                start + len,
                av.ncols()
            )));
        }
        let out = av.slice(s![.., start..start + len]).to_owned();
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Column `h` of the input fills output columns `h*factor .. (h+1)*factor`.
    pub fn repeat_cols(&mut self, a: Var, factor: usize) -> Var {
        let av = self.value(a);
        let mut out = Array2::zeros((av.nrows(), av.ncols() * factor));
        for ((t, c), v) in out.indexed_iter_mut() {
            *v = av[[t, c / factor]];
        }
        self.push(out, Op::RepeatCols(a, factor))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = F::of(av.nrows() as f64);
        let out = av.sum_axis(Axis(0)).mapv(|v| v / n).insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a))
    }

    /// Mean squared error, `1 x 1`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_shape(self.value(pred), self.value(target), "mse")?;
        let n = F::of(self.value(pred).len() as f64);
        let sum: F = Zip::from(self.value(pred))
            .and(self.value(target))
            .fold(F::zero(), |acc, &p, &t| acc + (p - t) * (p - t));
        Ok(self.push(Array2::from_elem((1, 1), sum / n), Op::Mse(pred, target)))
    }

    /// `sum(a * w)`, `1 x 1`.
    pub fn weighted_sum(&mut self, a: Var, w: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(w), "weighted_sum")?;
        let sum: F = Zip::from(self.value(a))
            .and(self.value(w))
            .fold(F::zero(), |acc, &x, &y| acc + x * y);
        Ok(self.push(Array2::from_elem((1, 1), sum), Op::WeightedSum(a, w)))
    }

    /// Reverse sweep from a `1 x 1` node.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        if !self.grad_enabled {
            return Err(Error::InvalidArgument("graph built without gradients".into()));
        }
        if self.value(root).dim() != (1, 1) {
            return Err(Error::shape("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Array2<F>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::from_elem((1, 1), F::one()));

        fn acc<F: Real>(grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, w) => {
                    let da = dy.dot(&self.value(*w).t());
                    let dw = self.value(*a).t().dot(&dy);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *w, dw);
                }
                Op::AddBias(a, b) => {
                    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *b, db);
                    acc(&mut grads, *a, dy.clone());
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy.clone());
                }
                Op::Mul(a, b) => {
                    let da = &dy * self.value(*b);
                    let db = &dy * self.value(*a);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::ScaleShift(x, g, b) => {
                    let mut dx = dy.clone();
                    Zip::from(&mut dx)
                        .and(self.value(*g))
                        .for_each(|d, &gv| *d *= F::one() + gv);
                    let dg = &dy * self.value(*x);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *g, dg);
                    acc(&mut grads, *b, dy.clone());
                }
                Op::Silu(x) => {
                    let mut dx = dy.clone();
                    Zip::from(&mut dx).and(self.value(*x)).for_each(|d, &xv| {
                        let sg = sigmoid(xv);
                        *d *= sg * (F::one() + xv * (F::one() - sg));
                    });
                    acc(&mut grads, *x, dx);
                }
                Op::Softplus(x) => {
                    let mut dx = dy.clone();
                    Zip::from(&mut dx)
                        .and(self.value(*x))
                        .for_each(|d, &xv| *d *= sigmoid(xv));
                    acc(&mut grads, *x, dx);
                }
                Op::LayerNorm(x) => {
                    let dx = layer_norm_backward(self.value(*x), &node.value, &dy);
                    acc(&mut grads, *x, dx);
                }
                Op::Conv1d { x, w, bias, spec } => {
                    let xv = self.value(*x);
                    let cols = im2col(xv, *spec);
                    let dw = cols.t().dot(&dy);
                    let dcols = dy.dot(&self.value(*w).t());
                    let dx = col2im(&dcols, xv.dim(), *spec);
                    if let Some(b) = bias {
                        acc(&mut grads, *b, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *x, dx);
                }
                Op::CausalDepthwise { x, w, bias } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (t_len, ch) = xv.dim();
                    let k = wv.nrows();
                    let mut dx = Array2::zeros((t_len, ch));
                    let mut dw = Array2::zeros((k, ch));
                    for t in 0..t_len {
                        for c in 0..ch {
                            let g = dy[[t, c]];
                            for j in 0..k {
                                let src = t as isize + j as isize - (k as isize - 1);
                                if src >= 0 {
                                    dw[[j, c]] += g * xv[[src as usize, c]];
                                    dx[[src as usize, c]] += g * wv[[j, c]];
                                }
                            }
                        }
                    }
                    acc(&mut grads, *bias, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *x, dx);
                }
                Op::Scan {
                    x,
                    delta,
                    b,
                    c,
                    a_log,
                    d,
                    scheme,
                } => {
                    let params = self.scan_params(*delta, *b, *c, *a_log, *d, *scheme);
                    let sg = selective_scan_backward(self.value(*x).view(), &params, dy.view())?;
                    acc(&mut grads, *x, sg.dx);
                    acc(&mut grads, *delta, sg.ddelta);
                    acc(&mut grads, *b, sg.db_in);
                    acc(&mut grads, *c, sg.dc_out);
                    acc(&mut grads, *a_log, sg.da_log);
                    acc(&mut grads, *d, sg.dd_skip.insert_axis(Axis(0)));
                }
                Op::ConcatCols(a, b) => {
                    let na = self.value(*a).ncols();
                    acc(&mut grads, *a, dy.slice(s![.., ..na]).to_owned());
                    acc(&mut grads, *b, dy.slice(s![.., na..]).to_owned());
                }
                Op::ConcatRows(a, b) => {
                    let na = self.value(*a).nrows();
                    acc(&mut grads, *a, dy.slice(s![..na, ..]).to_owned());
                    acc(&mut grads, *b, dy.slice(s![na.., ..]).to_owned());
                }
                Op::BroadcastRows(a) => {
                    acc(&mut grads, *a, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::SliceRows(a, start) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    da.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(&dy);
                    acc(&mut grads, *a, da);
                }
                Op::SliceCols(a, start) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    da.slice_mut(s![.., *start..*start + dy.ncols()]).assign(&dy);
                    acc(&mut grads, *a, da);
                }
                Op::RepeatCols(a, factor) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    for ((t, c), v) in dy.indexed_iter() {
                        da[[t, c / factor]] += *v;
                    }
                    acc(&mut grads, *a, da);
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).nrows();
                    let n = F::of(rows as f64);
                    let row = dy.mapv(|v| v / n);
                    let da = row.broadcast((rows, row.ncols())).expect("broadcast").to_owned();
                    acc(&mut grads, *a, da);
                }
                Op::Mse(p, t) => {
                    let (pv, tv) = (self.value(*p), self.value(*t));
                    let scale = dy[[0, 0]] * F::of(2.0) / F::of(pv.len() as f64);
                    let diff = (pv - tv).mapv(|v| v * scale);
                    acc(&mut grads, *t, diff.mapv(|v| -v));
                    acc(&mut grads, *p, diff);
                }
                Op::WeightedSum(a, w) => {
                    let g = dy[[0, 0]];
                    acc(&mut grads, *a, self.value(*w).mapv(|v| v * g));
                    acc(&mut grads, *w, self.value(*a).mapv(|v| v * g));
                }
            }
            grads[idx] = Some(dy);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }
}

pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
    params: BTreeMap<String, Var>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every bound parameter; unreached parameters get zeros.
    pub fn into_params(self, store: &ParamStore<F>) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for (name, value) in store.iter() {
            let g = self
                .params
                .get(name)
                .and_then(|v| self.grads.get(v.0).cloned().flatten())
                .unwrap_or_else(|| Array2::zeros(value.dim()));
            out.insert(name, g);
        }
        out
    }
}

pub(crate) fn layer_norm_rows<F: Real>(x: &Array2<F>) -> Array2<F> {
    let n = F::of(x.ncols() as f64);
    let eps = F::of(LN_EPS);
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let inv = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

fn layer_norm_backward<F: Real>(x: &Array2<F>, y: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let n = F::of(x.ncols() as f64);
    let eps = F::of(LN_EPS);
    let mut dx = Array2::zeros(x.dim());
    for r in 0..x.nrows() {
        let xr = x.row(r);
        let mean = xr.iter().copied().sum::<F>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let inv = F::one() / (var + eps).sqrt();
        let (yr, dyr) = (y.row(r), dy.row(r));
        let mean_dy = dyr.iter().copied().sum::<F>() / n;
        let mean_dyy = dyr.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum::<F>() / n;
        for c in 0..x.ncols() {
            dx[[r, c]] = inv * (dyr[c] - mean_dy - yr[c] * mean_dyy);
        }
    }
    dx
}

fn im2col<F: Real>(x: &Array2<F>, spec: ConvSpec) -> Array2<F> {
    let (t_in, c_in) = x.dim();
    let t_out = spec.out_len(t_in);
    let mut cols = Array2::zeros((t_out, spec.kernel * c_in));
    for o in 0..t_out {
        for j in 0..spec.kernel {
            if let Some(src) = spec.source(o, j, t_in) {
                cols.slice_mut(s![o, j * c_in..(j + 1) * c_in])
                    .assign(&x.row(src));
            }
        }
    }
    cols
}

fn col2im<F: Real>(dcols: &Array2<F>, (t_in, c_in): (usize, usize), spec: ConvSpec) -> Array2<F> {
    let mut dx = Array2::zeros((t_in, c_in));
    for o in 0..dcols.nrows() {
        for j in 0..spec.kernel {
            if let Some(src) = spec.source(o, j, t_in) {
                let mut row = dx.row_mut(src);
                row += &dcols.slice(s![o, j * c_in..(j + 1) * c_in]);
            }
        }
    }
    dx
}

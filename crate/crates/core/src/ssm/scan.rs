//! Selective state-space scan kernels.
//!
//! Every kernel evaluates, per inner channel `c` and state index `n`,
//!
//! ```text
//! h[t, c, n] = exp(delta[t, c] * A[c, n]) * h[t-1, c, n] + delta[t, c] * b_in[t, n] * x[t, c]
//! y[t, c]    = sum_n c_out[t, n] * h[t, c, n] + d_skip[c] * x[t, c]
//! ```
//!
//! with `A = -exp(a_log)`. `B` and `C` are shared across channels. The sequential
//! kernel is the reference; the chunked kernel computes the same map through its
//! dense intra-chunk form and is restricted to one scalar `A` per channel.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;

/// Work (T * d_inner * d_state) above which channels are scanned in parallel.
const PAR_WORK: usize = 1 << 18;

/// State matrix parameterization.
#[derive(Clone, Debug, PartialEq)]
pub enum StateMatrix<F> {
    /// Mamba-1: one log-magnitude per (channel, state) pair, `d_inner x d_state`.
    Diagonal(Array2<F>),
    /// Mamba-2: one scalar log-magnitude per head; heads own `head_dim` consecutive channels.
    ScalarPerHead { a_log: Array1<F>, head_dim: usize },
}

impl<F: Real> StateMatrix<F> {
    /// Decay rate `A[c, n]` (negative).
    #[inline]
    fn rate(&self, c: usize, n: usize) -> F {
        match self {
            StateMatrix::Diagonal(a) => -a[[c, n]].exp(),
            StateMatrix::ScalarPerHead { a_log, head_dim } => -a_log[c / head_dim].exp(),
        }
    }

    /// Scalar decay rate of channel `c`, if the layout has one.
    #[inline]
    fn scalar_rate(&self, c: usize) -> Option<F> {
        match self {
            StateMatrix::Diagonal(_) => None,
            StateMatrix::ScalarPerHead { a_log, head_dim } => Some(-a_log[c / head_dim].exp()),
        }
    }

    fn check(&self, d_inner: usize, d_state: usize) -> Result<()> {
        match self {
            StateMatrix::Diagonal(a) => {
                if a.dim() != (d_inner, d_state) {
                    return Err(Error::shape(format!(
                        "a_log is {:?}, expected ({d_inner}, {d_state})",
                        a.dim()
                    )));
                }
            }
            StateMatrix::ScalarPerHead { a_log, head_dim } => {
                if *head_dim == 0 || d_inner % head_dim != 0 || a_log.len() != d_inner / head_dim {
                    return Err(Error::shape(format!(
                        "{} heads of dim {head_dim} do not tile d_inner = {d_inner}",
                        a_log.len()
                    )));
                }
            }
        }
        Ok(())
    }

    fn values(&self) -> Box<dyn Iterator<Item = &F> + '_> {
        match self {
            StateMatrix::Diagonal(a) => Box::new(a.iter()),
            StateMatrix::ScalarPerHead { a_log, .. } => Box::new(a_log.iter()),
        }
    }
}

/// Input-dependent parameters of one scan.
#[derive(Clone, Debug)]
pub struct ScanParams<F> {
    /// `T x d_inner`, strictly positive step sizes.
    pub delta: Array2<F>,
    pub a_log: StateMatrix<F>,
    /// `T x d_state`
    pub b_in: Array2<F>,
    /// `T x d_state`
    pub c_out: Array2<F>,
    /// `d_inner`
    pub d_skip: Array1<F>,
}

impl<F: Real> ScanParams<F> {
    pub fn d_state(&self) -> usize {
        self.b_in.ncols()
    }

    fn validate(&self, x: &ArrayView2<F>) -> Result<()> {
        let (t, d_inner) = x.dim();
        let d_state = self.b_in.ncols();
        if self.delta.dim() != (t, d_inner) {
            return Err(Error::shape(format!(
                "delta is {:?}, x is {:?}",
                self.delta.dim(),
                x.dim()
            )));
        }
        if self.b_in.nrows() != t || self.c_out.dim() != (t, d_state) {
            return Err(Error::shape(format!(
                "b_in {:?} / c_out {:?} do not match length {t}",
                self.b_in.dim(),
                self.c_out.dim()
            )));
        }
        if self.d_skip.len() != d_inner {
            return Err(Error::shape(format!(
                "d_skip has {} entries, expected {d_inner}",
                self.d_skip.len()
            )));
        }
        self.a_log.check(d_inner, d_state)?;
        let finite = x.iter().all(|v| v.is_finite())
            && self.b_in.iter().all(|v| v.is_finite())
            && self.c_out.iter().all(|v| v.is_finite())
            && self.d_skip.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric("non-finite scan input".into()));
        }
        // +inf / -inf a_log are the degenerate "no memory" / "no decay" limits
        if self.a_log.values().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN in a_log".into()));
        }
        if self.delta.iter().any(|&d| !(d > F::zero()) || !d.is_finite()) {
            return Err(Error::Numeric("delta must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// Running state `h`, `d_inner x d_state`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanState<F> {
    pub h: Array2<F>,
}

impl<F: Real> ScanState<F> {
    pub fn zeros(d_inner: usize, d_state: usize) -> Self {
        ScanState {
            h: Array2::zeros((d_inner, d_state)),
        }
    }
}

/// Decay `exp(delta * A)`, treating the `A = -inf` limit as exactly zero memory.
#[inline]
fn decay<F: Real>(delta: F, rate: F) -> F {
    if rate == F::neg_infinity() {
        F::zero()
    } else {
        (delta * rate).exp()
    }
}

fn scan_channel<F: Real>(x: &ArrayView2<F>, p: &ScanParams<F>, c: usize) -> (Vec<F>, Vec<F>) {
    let (t_len, _) = x.dim();
    let n_state = p.d_state();
    let rates: Vec<F> = (0..n_state).map(|n| p.a_log.rate(c, n)).collect();
    let mut h = vec![F::zero(); n_state];
    let mut y = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let dt = p.delta[[t, c]];
        let xt = x[[t, c]];
        let u = dt * xt;
        let b = p.b_in.row(t);
        let cc = p.c_out.row(t);
        let mut acc = F::zero();
        for n in 0..n_state {
            h[n] = decay(dt, rates[n]) * h[n] + u * b[n];
            acc += cc[n] * h[n];
        }
        y.push(acc + p.d_skip[c] * xt);
    }
    (y, h)
}

fn assemble<F: Real>(
    t_len: usize,
    n_state: usize,
    columns: Vec<(Vec<F>, Vec<F>)>,
) -> (Array2<F>, ScanState<F>) {
    let d_inner = columns.len();
    let mut y = Array2::zeros((t_len, d_inner));
    let mut h = Array2::zeros((d_inner, n_state));
    for (c, (ycol, hrow)) in columns.into_iter().enumerate() {
        for (t, v) in ycol.into_iter().enumerate() {
            y[[t, c]] = v;
        }
        for (n, v) in hrow.into_iter().enumerate() {
            h[[c, n]] = v;
        }
    }
    (y, ScanState { h })
}

/// Reference recurrence, one time step at a time.
pub fn selective_scan_sequential<F: Real>(
    x: ArrayView2<F>,
    p: &ScanParams<F>,
) -> Result<(Array2<F>, ScanState<F>)> {
    p.validate(&x)?;
    let (t_len, d_inner) = x.dim();
    let n_state = p.d_state();
    let columns: Vec<_> = if t_len * d_inner * n_state >= PAR_WORK {
        (0..d_inner)
            .into_par_iter()
            .map(|c| scan_channel(&x, p, c))
            .collect()
    } else {
        (0..d_inner).map(|c| scan_channel(&x, p, c)).collect()
    };
    Ok(assemble(t_len, n_state, columns))
}

/// Chunked state-space-dual evaluation of the same recurrence.
///
/// Inside a chunk the outputs are a masked, decay-weighted product of the `C B^T`
/// Gram matrix with the inputs; between chunks only the `d_inner x d_state` state is
/// carried. `chunk_len == 1` degenerates to the step recurrence.
pub fn ssd_scan_chunked<F: Real>(
    x: ArrayView2<F>,
    p: &ScanParams<F>,
    chunk_len: usize,
) -> Result<(Array2<F>, ScanState<F>)> {
    if chunk_len == 0 {
        return Err(Error::InvalidArgument("chunk_len must be >= 1".into()));
    }
    if matches!(p.a_log, StateMatrix::Diagonal(_)) {
        return Err(Error::InvalidArgument(
            "chunked scan needs one scalar A per head".into(),
        ));
    }
    if chunk_len == 1 {
        return selective_scan_sequential(x, p);
    }
    p.validate(&x)?;
    let (t_len, d_inner) = x.dim();
    let n_state = p.d_state();
    let rates: Vec<F> = (0..d_inner)
        .map(|c| p.a_log.scalar_rate(c).expect("scalar layout"))
        .collect();

    let mut y = Array2::<F>::zeros((t_len, d_inner));
    let mut h = Array2::<F>::zeros((d_inner, n_state));
    let mut start = 0;
    while start < t_len {
        let end = (start + chunk_len).min(t_len);
        let q = end - start;
        let b = p.b_in.slice(s![start..end, ..]);
        let cm = p.c_out.slice(s![start..end, ..]);
        // gram[i, j] = C_i . B_j
        let gram = cm.dot(&b.t());
        // carried[i, c] = C_i . h_prev[c]
        let carried = cm.dot(&h.t());

        let per_channel = |c: usize| -> (Vec<F>, Vec<F>) {
            let rate = rates[c];
            let mut cum = Vec::with_capacity(q);
            let mut u = Vec::with_capacity(q);
            let mut acc = F::zero();
            for i in 0..q {
                let dt = p.delta[[start + i, c]];
                acc += dt * rate;
                cum.push(acc);
                u.push(dt * x[[start + i, c]]);
            }
            let mut out = Vec::with_capacity(q);
            for i in 0..q {
                let mut v = cum[i].exp() * carried[[i, c]];
                for j in 0..=i {
                    v += (cum[i] - cum[j]).exp() * gram[[i, j]] * u[j];
                }
                out.push(v + p.d_skip[c] * x[[start + i, c]]);
            }
            let last = cum[q - 1];
            let weights: Vec<F> = (0..q).map(|j| (last - cum[j]).exp() * u[j]).collect();
            let mut hrow: Vec<F> = h.row(c).iter().map(|&v| last.exp() * v).collect();
            for (j, w) in weights.iter().enumerate() {
                for n in 0..n_state {
                    hrow[n] += *w * b[[j, n]];
                }
            }
            (out, hrow)
        };

        let cols: Vec<_> = if q * q * d_inner >= PAR_WORK {
            (0..d_inner).into_par_iter().map(per_channel).collect()
        } else {
            (0..d_inner).map(per_channel).collect()
        };
        for (c, (out, hrow)) in cols.into_iter().enumerate() {
            for (i, v) in out.into_iter().enumerate() {
                y[[start + i, c]] = v;
            }
            for (n, v) in hrow.into_iter().enumerate() {
                h[[c, n]] = v;
            }
        }
        start = end;
    }
    Ok((y, ScanState { h }))
}

/// Gradients of a scan with respect to all of its inputs.
#[derive(Clone, Debug)]
pub struct ScanGrads<F> {
    pub dx: Array2<F>,
    pub ddelta: Array2<F>,
    /// Same layout as the `a_log` it differentiates (`d_inner x d_state`, or `n_heads x 1`).
    pub da_log: Array2<F>,
    pub db_in: Array2<F>,
    pub dc_out: Array2<F>,
    pub dd_skip: Array1<F>,
}

/// Adjoint of the recurrence. States are recomputed rather than stored by the forward.
pub fn selective_scan_backward<F: Real>(
    x: ArrayView2<F>,
    p: &ScanParams<F>,
    dy: ArrayView2<F>,
) -> Result<ScanGrads<F>> {
    p.validate(&x)?;
    let (t_len, d_inner) = x.dim();
    if dy.dim() != (t_len, d_inner) {
        return Err(Error::shape("dy does not match scan output"));
    }
    let n_state = p.d_state();

    let mut dx = Array2::zeros((t_len, d_inner));
    let mut ddelta = Array2::zeros((t_len, d_inner));
    let mut db = Array2::zeros((t_len, n_state));
    let mut dc = Array2::zeros((t_len, n_state));
    let mut drate = Array2::<F>::zeros((d_inner, n_state));
    let mut dd = Array1::zeros(d_inner);

    let mut hist = vec![F::zero(); (t_len + 1) * n_state];
    let mut g = vec![F::zero(); n_state];
    for c in 0..d_inner {
        let rates: Vec<F> = (0..n_state).map(|n| p.a_log.rate(c, n)).collect();
        // hist[t + 1] holds h after step t
        hist[..n_state].fill(F::zero());
        for t in 0..t_len {
            let dt = p.delta[[t, c]];
            let u = dt * x[[t, c]];
            for n in 0..n_state {
                let prev = hist[t * n_state + n];
                hist[(t + 1) * n_state + n] = decay(dt, rates[n]) * prev + u * p.b_in[[t, n]];
            }
        }
        g.fill(F::zero());
        for t in (0..t_len).rev() {
            let dt = p.delta[[t, c]];
            let xt = x[[t, c]];
            let dyt = dy[[t, c]];
            dd[c] += dyt * xt;
            let mut dxt = dyt * p.d_skip[c];
            let mut ddt = F::zero();
            for n in 0..n_state {
                let h_t = hist[(t + 1) * n_state + n];
                let h_prev = hist[t * n_state + n];
                let a = decay(dt, rates[n]);
                dc[[t, n]] += dyt * h_t;
                let gn = g[n] + dyt * p.c_out[[t, n]];
                let bn = p.b_in[[t, n]];
                dxt += gn * dt * bn;
                db[[t, n]] += gn * dt * xt;
                let da = gn * h_prev;
                if a != F::zero() {
                    ddt += gn * xt * bn + da * a * rates[n];
                    drate[[c, n]] += da * a * dt;
                } else {
                    ddt += gn * xt * bn;
                }
                g[n] = a * gn;
            }
            dx[[t, c]] = dxt;
            ddelta[[t, c]] = ddt;
        }
    }

    // A = -exp(a_log)  =>  d a_log = dA * A
    let da_log = match &p.a_log {
        StateMatrix::Diagonal(a_log) => {
            let mut out = Array2::zeros(a_log.dim());
            for ((c, n), v) in out.indexed_iter_mut() {
                let rate = -a_log[[c, n]].exp();
                *v = if rate.is_finite() { drate[[c, n]] * rate } else { F::zero() };
            }
            out
        }
        StateMatrix::ScalarPerHead { a_log, head_dim } => {
            let mut out = Array2::zeros((a_log.len(), 1));
            let per_channel = drate.sum_axis(Axis(1));
            for (c, v) in per_channel.iter().enumerate() {
                out[[c / head_dim, 0]] += *v;
            }
            for (hd, v) in out.column_mut(0).iter_mut().enumerate() {
                *v *= -a_log[hd].exp();
            }
            out
        }
    };

    Ok(ScanGrads {
        dx,
        ddelta,
        da_log,
        db_in: db,
        dc_out: dc,
        dd_skip: dd,
    })
}

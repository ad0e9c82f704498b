//! Tape-based reverse-mode differentiation over 2-D arrays.
//!
//! Every value on the tape is a dense row-major matrix. A batch of token
//! sequences is laid out as `(batch * tokens) x features`; operations that
//! need the per-example grouping (attention) take the number of segments
//! explicitly.
//!
//! The tape records a backward closure per node. Nodes that do not depend on
//! any trainable leaf record nothing, so frozen sub-networks cost one forward
//! pass only.

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::Param;

/// Floating point type the models can be instantiated with (`f32` for
/// training and checkpoints, `f64` for gradient checks).
pub trait Real: NdFloat + Default + Sum + Debug + Display + 'static {
    fn lift(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32;
    fn lift32(x: f32) -> Self;
    const NAME: &'static str;
}

impl Real for f32 {
    fn lift(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn as_f32(self) -> f32 {
        self
    }
    fn lift32(x: f32) -> Self {
        x
    }
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    fn lift(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
    fn lift32(x: f32) -> Self {
        x as f64
    }
    const NAME: &'static str = "f64";
}

#[inline]
pub(crate) fn c<F: Real>(x: f64) -> F {
    F::lift(x)
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Backward<F> = Box<dyn Fn(&Array2<F>, &[bool]) -> Vec<Option<Array2<F>>>>;

struct Node<F: Real> {
    value: Rc<Array2<F>>,
    requires_grad: bool,
    inputs: Vec<Var>,
    backward: Option<Backward<F>>,
}

/// Records a forward computation so it can be differentiated.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    params: HashMap<u64, Var>,
    /// Enables dropout and other train-only behaviour.
    pub training: bool,
    /// Source of randomness for stochastic layers evaluated on this tape.
    pub rng: ChaCha8Rng,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<Array2<F>>>,
    params: HashMap<u64, Var>,
}

impl<F: Real> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&Array2<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, p: &Param<F>) -> Option<&Array2<F>> {
        self.params.get(&p.uid()).and_then(|v| self.wrt(*v))
    }
}

impl<F: Real> Tape<F> {
    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// An evaluation tape: no dropout, fixed rng.
    pub fn eval() -> Self {
        Self::new(false, 0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<F>, inputs: Vec<Var>, backward: Backward<F>) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: if requires_grad { Some(backward) } else { None },
            inputs,
        });
        Var(self.nodes.len() - 1)
    }

    fn rc(&self, v: Var) -> Rc<Array2<F>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn leaf(&mut self, value: Array2<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            inputs: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.leaf(value, false)
    }

    /// Places a parameter on the tape. Frozen parameters become constants.
    /// Repeated calls for the same parameter return the same node.
    pub fn param(&mut self, p: &Param<F>) -> Var {
        if let Some(v) = self.params.get(&p.uid()) {
            return *v;
        }
        let v = self.leaf(p.value.clone(), p.trainable);
        self.params.insert(p.uid(), v);
        v
    }

    /// Reverse sweep from a scalar (1x1) output.
    pub fn backward(&self, out: Var) -> Gradients<F> {
        assert_eq!(self.shape(out), (1, 1), "backward expects a scalar output");
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::from_elem((1, 1), F::one()));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
            let input_grads = bw(&g, &needs);
            for ((inp, need), ig) in node.inputs.iter().zip(&needs).zip(input_grads) {
                if !*need {
                    continue;
                }
                if let Some(ig) = ig {
                    match &mut grads[inp.0] {
                        Some(acc) => *acc += &ig,
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    // ---------------------------------------------------------------------
    // linear algebra

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dimension mismatch");
        let out = av.dot(&*bv);
        self.push(
            out,
            vec![a, b],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.dot(&bv.t())),
                    needs[1].then(|| av.t().dot(g)),
                ]
            }),
        )
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        assert_eq!(av.ncols(), bv.ncols(), "matmul_t inner dimension mismatch");
        let out = av.dot(&bv.t());
        self.push(
            out,
            vec![a, b],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.dot(&*bv)),
                    needs[1].then(|| g.t().dot(&*av)),
                ]
            }),
        )
    }

    // ---------------------------------------------------------------------
    // elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &*self.rc(a) + &*self.rc(b);
        self.push(out, vec![a, b], Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = &*self.rc(a) - &*self.rc(b);
        self.push(out, vec![a, b], Box::new(|g, _| vec![Some(g.clone()), Some(g.mapv(|x| -x))]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        let out = &*av * &*bv;
        self.push(
            out,
            vec![a, b],
            Box::new(move |g, needs| vec![needs[0].then(|| g * &*bv), needs[1].then(|| g * &*av)]),
        )
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let rv = self.rc(row);
        assert_eq!(rv.nrows(), 1, "add_row expects a single row");
        let out = &*self.rc(a) + &*rv;
        self.push(
            out,
            vec![a, row],
            Box::new(|g, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let out = &*self.rc(a) * k;
        self.push(out, vec![a], Box::new(move |g, _| vec![Some(g * k)]))
    }

    /// Multiplies `a` by a learnable `1 x 1` value.
    pub fn scale_by(&mut self, a: Var, k: Var) -> Var {
        let (av, kv) = (self.rc(a), self.rc(k));
        assert_eq!(kv.dim(), (1, 1), "scale_by expects a 1x1 factor");
        let kk = kv[[0, 0]];
        let out = &*av * kk;
        self.push(
            out,
            vec![a, k],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g * kk),
                    needs[1].then(|| Array2::from_elem((1, 1), (g * &*av).sum())),
                ]
            }),
        )
    }

    pub fn add_scalar(&mut self, a: Var, k: F) -> Var {
        let out = &*self.rc(a) + k;
        self.push(out, vec![a], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.mapv(|x| x * x);
        self.push(out, vec![a], Box::new(move |g, _| vec![Some(g * &*av * c::<F>(2.0))]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.rc(a).mapv(sigmoid);
        let ov = Rc::new(out.clone());
        self.push(
            out,
            vec![a],
            Box::new(move |g, _| {
                let d = ov.mapv(|s| s * (F::one() - s));
                vec![Some(g * &d)]
            }),
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        // 0.5·x·(1 + tanh(u)) = x·σ(2u); keep σ for the backward pass
        let sig = av.mapv(|x| sigmoid(c::<F>(2.0) * gelu_inner(x)));
        let out = &*av * &sig;
        self.push(
            out,
            vec![a],
            Box::new(move |g, _| {
                let k2 = c::<F>(2.0 * GELU_K);
                let a3 = c::<F>(3.0 * GELU_A);
                let mut d = sig.clone();
                ndarray::Zip::from(&mut d).and(&*av).for_each(|s, &x| {
                    let sv = *s;
                    *s = sv + x * sv * (F::one() - sv) * k2 * (F::one() + a3 * x * x);
                });
                vec![Some(g * &d)]
            }),
        )
    }

    // ---------------------------------------------------------------------
    // reductions

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let dim = av.dim();
        let out = Array2::from_elem((1, 1), av.sum());
        self.push(out, vec![a], Box::new(move |g, _| vec![Some(Array2::from_elem(dim, g[[0, 0]]))]))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.rc(a).len();
        let s = self.sum_all(a);
        self.scale(s, F::one() / c::<F>(n as f64))
    }

    // ---------------------------------------------------------------------
    // structure

    /// Row gather: `out[r] = a[idx[r]]`. Indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.rc(a);
        let rows = av.nrows();
        let idx: Rc<Vec<usize>> = Rc::new(idx.to_vec());
        let out = av.select(Axis(0), &idx);
        let ncols = av.ncols();
        self.push(
            out,
            vec![a],
            Box::new(move |g, _| {
                let mut da = Array2::zeros((rows, ncols));
                for (r, &src) in idx.iter().enumerate() {
                    let mut dst = da.row_mut(src);
                    dst += &g.row(r);
                }
                vec![Some(da)]
            }),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let values: Vec<Rc<Array2<F>>> = parts.iter().map(|p| self.rc(*p)).collect();
        let views: Vec<ArrayView2<F>> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        let sizes: Vec<usize> = values.iter().map(|v| v.nrows()).collect();
        self.push(
            out,
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&n, &need)| {
                        let piece = need.then(|| g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                        piece
                    })
                    .collect()
            }),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let values: Vec<Rc<Array2<F>>> = parts.iter().map(|p| self.rc(*p)).collect();
        let views: Vec<ArrayView2<F>> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let sizes: Vec<usize> = values.iter().map(|v| v.ncols()).collect();
        self.push(
            out,
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&n, &need)| {
                        let piece = need.then(|| g.slice(s![.., start..start + n]).to_owned());
                        start += n;
                        piece
                    })
                    .collect()
            }),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.rc(a);
        let dim = av.dim();
        let out = av.slice(s![.., start..start + len]).to_owned();
        self.push(
            out,
            vec![a],
            Box::new(move |g, _| {
                let mut da = Array2::zeros(dim);
                da.slice_mut(s![.., start..start + len]).assign(g);
                vec![Some(da)]
            }),
        )
    }

    // ---------------------------------------------------------------------
    // fused layers

    /// Row-wise layer normalization with affine `gain` and `bias` (`1 x n`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (xv, gv, bv) = (self.rc(x), self.rc(gain), self.rc(bias));
        let n = xv.ncols();
        let nf = c::<F>(n as f64);
        let eps = c::<F>(eps);
        let mut xhat = Array2::zeros(xv.dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                xhat[[r, j]] = (v - mean) * is;
            }
        }
        let out = &(&xhat * &*gv) + &*bv;
        let xhat = Rc::new(xhat);
        self.push(
            out,
            vec![x, gain, bias],
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let dxhat = g * &*gv;
                    let mut dx = Array2::zeros(dxhat.dim());
                    for r in 0..dxhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let m1 = dh.sum() / nf;
                        let m2 = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / nf;
                        for j in 0..n {
                            dx[[r, j]] = inv_std[r] * (dh[j] - m1 - xh[j] * m2);
                        }
                    }
                    dx
                });
                let dg = needs[1].then(|| (g * &*xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let db = needs[2].then(|| g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                vec![dx, dg, db]
            }),
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` has `segments * tq` rows and `k`, `v` have `segments * tk` rows;
    /// segment `s` of the queries attends only to segment `s` of the keys.
    /// Columns are split into `heads` equal blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: usize) -> Var {
        let (qv, kv, vv) = (self.rc(q), self.rc(k), self.rc(v));
        let (out, probs) = attention_forward(&qv, &kv, &vv, heads, segments);
        let probs = Rc::new(probs);
        self.push(
            out,
            vec![q, k, v],
            Box::new(move |g, _| {
                let (dq, dk, dv) = attention_backward(&qv, &kv, &vv, &probs, g, heads, segments);
                vec![Some(dq), Some(dk), Some(dv)]
            }),
        )
    }

    /// Row-normalizes to unit L2 norm (norm floored at `1e-12`).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let floor = c::<F>(1e-12);
        let norms: Vec<F> = av
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&x| x * x).sum::<F>().sqrt().max(floor))
            .collect();
        let mut out = av.as_ref().clone();
        for (mut row, &n) in out.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|x| x / n);
        }
        let ov = Rc::new(out.clone());
        self.push(
            out,
            vec![a],
            Box::new(move |g, _| {
                let mut da = Array2::zeros(g.dim());
                for r in 0..g.nrows() {
                    let y = ov.row(r);
                    let gr = g.row(r);
                    let dot = y.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum::<F>();
                    for j in 0..g.ncols() {
                        da[[r, j]] = (gr[j] - y[j] * dot) / norms[r];
                    }
                }
                vec![Some(da)]
            }),
        )
    }

    /// Weighted softmax cross-entropy over rows of `logits`.
    ///
    /// Returns `Σ_i w_i (logsumexp_i − logits[i, t_i]) / Σ_i w_i`. With
    /// `exclude_diag`, column `i` is left out of row `i`'s normalizer.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        row_weights: Option<&[F]>,
        exclude_diag: bool,
    ) -> Var {
        let lv = self.rc(logits);
        let (rows, cols) = lv.dim();
        assert_eq!(targets.len(), rows, "one target per row");
        let weights: Vec<F> = match row_weights {
            Some(w) => w.to_vec(),
            None => vec![F::one(); rows],
        };
        let wsum: F = weights.iter().copied().sum();
        let mut probs = Array2::zeros((rows, cols));
        let mut loss = F::zero();
        for r in 0..rows {
            let row = lv.row(r);
            let keep = |j: usize| !(exclude_diag && j == r);
            let max = (0..cols).filter(|&j| keep(j)).map(|j| row[j]).fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for j in (0..cols).filter(|&j| keep(j)) {
                let e = (row[j] - max).exp();
                probs[[r, j]] = e;
                z += e;
            }
            for j in 0..cols {
                probs[[r, j]] = probs[[r, j]] / z;
            }
            let lse = max + z.ln();
            loss += weights[r] * (lse - row[targets[r]]);
        }
        let out = Array2::from_elem((1, 1), loss / wsum);
        let targets = targets.to_vec();
        self.push(
            out,
            vec![logits],
            Box::new(move |g, _| {
                let scale = g[[0, 0]] / wsum;
                let mut d = probs.clone();
                for r in 0..rows {
                    d[[r, targets[r]]] -= F::one();
                    let w = weights[r] * scale;
                    d.row_mut(r).mapv_inplace(|x| x * w);
                }
                vec![Some(d)]
            }),
        )
    }
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu_inner<F: Real>(x: F) -> F {
    c::<F>(GELU_K) * (x + c::<F>(GELU_A) * x * x * x)
}

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    x * sigmoid(c::<F>(2.0) * gelu_inner(x))
}

/// Forward pass of segmented multi-head attention; also returns the
/// softmax maps, one `tq x tk` block per (segment, head), stacked
/// segment-major.
pub fn attention_forward<F: Real>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    heads: usize,
    segments: usize,
) -> (Array2<F>, Vec<Array2<F>>) {
    let d = q.ncols();
    assert_eq!(k.ncols(), d, "query/key width mismatch");
    assert_eq!(v.ncols(), d, "query/value width mismatch");
    assert_eq!(d % heads, 0, "width not divisible by heads");
    assert!(q.nrows() % segments == 0 && k.nrows() % segments == 0, "rows not divisible by segments");
    assert_eq!(k.nrows(), v.nrows());
    let dh = d / heads;
    let tq = q.nrows() / segments;
    let tk = k.nrows() / segments;
    let scale = F::one() / c::<F>(dh as f64).sqrt();
    let mut out = Array2::zeros(q.dim());
    let mut probs = Vec::with_capacity(segments * heads);
    for sg in 0..segments {
        for h in 0..heads {
            let qs = q.slice(s![sg * tq..(sg + 1) * tq, h * dh..(h + 1) * dh]);
            let ks = k.slice(s![sg * tk..(sg + 1) * tk, h * dh..(h + 1) * dh]);
            let vs = v.slice(s![sg * tk..(sg + 1) * tk, h * dh..(h + 1) * dh]);
            let mut sc = qs.dot(&ks.t());
            sc.mapv_inplace(|x| x * scale);
            softmax_rows_inplace(&mut sc);
            out.slice_mut(s![sg * tq..(sg + 1) * tq, h * dh..(h + 1) * dh]).assign(&sc.dot(&vs));
            probs.push(sc);
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<F: Real>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    probs: &[Array2<F>],
    g: &Array2<F>,
    heads: usize,
    segments: usize,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let d = q.ncols();
    let dh = d / heads;
    let tq = q.nrows() / segments;
    let tk = k.nrows() / segments;
    let scale = F::one() / c::<F>(dh as f64).sqrt();
    let mut dq = Array2::zeros(q.dim());
    let mut dk = Array2::zeros(k.dim());
    let mut dv = Array2::zeros(v.dim());
    for sg in 0..segments {
        for h in 0..heads {
            let p = &probs[sg * heads + h];
            let qr = s![sg * tq..(sg + 1) * tq, h * dh..(h + 1) * dh];
            let kr = s![sg * tk..(sg + 1) * tk, h * dh..(h + 1) * dh];
            let qs = q.slice(qr);
            let ks = k.slice(kr);
            let vs = v.slice(kr);
            let go = g.slice(qr);
            dv.slice_mut(kr).assign(&p.t().dot(&go));
            let dp = go.dot(&vs.t());
            let mut ds = &dp * p;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot: F = row.iter().copied().sum();
                for (x, &pv) in row.iter_mut().zip(prow.iter()) {
                    *x = *x - pv * dot;
                }
            }
            ds.mapv_inplace(|x| x * scale);
            dq.slice_mut(qr).assign(&ds.dot(&ks));
            dk.slice_mut(kr).assign(&ds.t().dot(&qs));
        }
    }
    (dq, dk, dv)
}

pub(crate) fn softmax_rows_inplace<F: Real>(a: &mut Array2<F>) {
    for mut row in a.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut z = F::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        row.mapv_inplace(|x| x / z);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(w ⊙ f(x)))/dx for every input.
    fn check_op(inputs: Vec<Array2<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |xs: &[Array2<f64>], w: Option<&Array2<f64>>| -> (f64, Option<Vec<Array2<f64>>>, Array2<f64>) {
            let mut t = Tape::<f64>::eval();
            let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), true)).collect();
            let out = f(&mut t, &vars);
            let ov = t.value(out).clone();
            match w {
                None => (0.0, None, ov),
                Some(w) => {
                    let wv = t.constant(w.clone());
                    let prod = t.mul(out, wv);
                    let s = t.sum_all(prod);
                    let g = t.backward(s);
                    let grads = vars.iter().map(|v| g.wrt(*v).cloned().unwrap_or_else(|| Array2::zeros(t.shape(*v)))).collect();
                    (t.scalar(s), Some(grads), ov)
                }
            }
        };
        let (_, _, out) = eval(&inputs, None);
        let w = rand_mat(&mut rng, out.nrows(), out.ncols());
        let (_, grads, _) = eval(&inputs, Some(&w));
        let grads = grads.unwrap();
        let h = 1e-5;
        for (i, x) in inputs.iter().enumerate() {
            for idx in 0..x.len() {
                let (r, cc) = (idx / x.ncols(), idx % x.ncols());
                let mut plus = inputs.clone();
                plus[i][[r, cc]] += h;
                let mut minus = inputs.clone();
                minus[i][[r, cc]] -= h;
                let fp = eval(&plus, Some(&w)).0;
                let fm = eval(&minus, Some(&w)).0;
                let num = (fp - fm) / (2.0 * h);
                let ana = grads[i][[r, cc]];
                assert!(
                    (num - ana).abs() <= 1e-6 * (1.0 + num.abs().max(ana.abs())),
                    "input {i} [{r},{cc}]: numeric {num} vs analytic {ana}"
                );
            }
        }
    }

    #[test]
    fn matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check_op(vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 2)], |t, v| t.matmul(v[0], v[1]));
        check_op(vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 5, 4)], |t, v| t.matmul_t(v[0], v[1]));
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 3, 4);
        check_op(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
        check_op(vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
        check_op(vec![a.clone(), rand_mat(&mut rng, 1, 4)], |t, v| t.add_row(v[0], v[1]));
        check_op(vec![a.clone()], |t, v| t.gelu(v[0]));
        check_op(vec![a.clone()], |t, v| t.sigmoid(v[0]));
        check_op(vec![a.clone()], |t, v| t.square(v[0]));
        check_op(vec![a.clone(), rand_mat(&mut rng, 1, 1)], |t, v| t.scale_by(v[0], v[1]));
        check_op(vec![a], |t, v| t.l2_normalize_rows(v[0]));
    }

    #[test]
    fn structural_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 4, 3);
        let b = rand_mat(&mut rng, 2, 3);
        check_op(vec![a.clone()], |t, v| t.gather_rows(v[0], &[3, 0, 0, 2, 1]));
        check_op(vec![a.clone(), b], |t, v| t.concat_rows(&[v[0], v[1]]));
        check_op(vec![a.clone(), rand_mat(&mut rng, 4, 2)], |t, v| t.concat_cols(&[v[0], v[1]]));
        check_op(vec![a], |t, v| t.slice_cols(v[0], 1, 2));
    }

    #[test]
    fn layer_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check_op(
            vec![rand_mat(&mut rng, 3, 5), rand_mat(&mut rng, 1, 5), rand_mat(&mut rng, 1, 5)],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        );
    }

    #[test]
    fn attention_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check_op(
            vec![rand_mat(&mut rng, 6, 4), rand_mat(&mut rng, 4, 4), rand_mat(&mut rng, 4, 4)],
            |t, v| t.attention(v[0], v[1], v[2], 2, 2),
        );
    }

    #[test]
    fn cross_entropy_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check_op(vec![rand_mat(&mut rng, 4, 3)], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2], Some(&[1.0, 2.0, 0.5, 1.0]), false));
        check_op(vec![rand_mat(&mut rng, 4, 4)], |t, v| t.cross_entropy(v[0], &[1, 0, 3, 2], None, true));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = rand_mat(&mut rng, 6, 8);
        let k = rand_mat(&mut rng, 10, 8);
        let v = rand_mat(&mut rng, 10, 8);
        let (_, probs) = attention_forward(&q, &k, &v, 4, 2);
        assert_eq!(probs.len(), 8);
        for p in probs {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_leaves_record_nothing() {
        let mut t = Tape::<f64>::eval();
        let a = t.constant(array![[1.0, 2.0]]);
        let b = t.constant(array![[3.0], [4.0]]);
        let m = t.matmul(a, b);
        assert!(!t.requires_grad(m));
        assert_eq!(t.scalar(m), 11.0);
    }
}

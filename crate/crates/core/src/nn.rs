//! Parameters and the transformer building blocks shared by both stages.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::adapters::LoraAdapter;
use crate::tape::{c, Real, Tape, Var};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

/// Std of the Gaussian used for weights, positional tables and CLS tokens.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// A named trainable (or frozen) matrix.
///
/// Every instance, including clones, gets its own identity on a [`Tape`].
#[derive(Debug)]
pub struct Param<F: Real> {
    pub name: String,
    pub value: Array2<F>,
    pub trainable: bool,
    uid: u64,
}

impl<F: Real> Clone for Param<F> {
    fn clone(&self) -> Self {
        Param::new(self.name.clone(), self.value.clone())
            .with_trainable(self.trainable)
    }
}

impl<F: Real> Param<F> {
    pub fn new(name: impl Into<String>, value: Array2<F>) -> Self {
        Self {
            name: name.into(),
            value,
            trainable: true,
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn with_trainable(mut self, trainable: bool) -> Self {
        self.trainable = trainable;
        self
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }
}

/// Seeded initializer. Draws in `f64` so `f32` and `f64` instantiations
/// from the same seed agree up to rounding.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn seeded(seed: u64) -> Self {
        use rand::SeedableRng;
        Self::new(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn normal<F: Real>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<F> {
        Array2::from_shape_fn((rows, cols), |_| {
            let z: f64 = self.rng.sample(StandardNormal);
            c::<F>(z * std)
        })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Anything that owns parameters.
pub trait Module<F: Real> {
    fn params(&self) -> Vec<&Param<F>>;
    fn params_mut(&mut self) -> Vec<&mut Param<F>>;
    /// Linear maps that may host a low-rank adapter.
    fn linears_mut(&mut self) -> Vec<&mut Linear<F>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.trainable = trainable;
        }
    }
}

/// Implements [`Module`] by concatenating the listed fields in order.
#[macro_export]
macro_rules! module_fields {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<F: $crate::tape::Real> $crate::nn::Module<F> for $ty<F> {
            fn params(&self) -> Vec<&$crate::nn::Param<F>> {
                let mut out = Vec::new();
                $( out.extend($crate::nn::Module::params(&self.$field)); )*
                out
            }
            fn params_mut(&mut self) -> Vec<&mut $crate::nn::Param<F>> {
                let mut out = Vec::new();
                $( out.extend($crate::nn::Module::params_mut(&mut self.$field)); )*
                out
            }
            fn linears_mut(&mut self) -> Vec<&mut $crate::nn::Linear<F>> {
                let mut out = Vec::new();
                $( out.extend($crate::nn::Module::linears_mut(&mut self.$field)); )*
                out
            }
        }
    };
}

impl<F: Real> Module<F> for Param<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![self]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![self]
    }
    fn linears_mut(&mut self) -> Vec<&mut Linear<F>> {
        Vec::new()
    }
}

impl<F: Real, M: Module<F>> Module<F> for Vec<M> {
    fn params(&self) -> Vec<&Param<F>> {
        self.iter().flat_map(|m| m.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.iter_mut().flat_map(|m| m.params_mut()).collect()
    }
    fn linears_mut(&mut self) -> Vec<&mut Linear<F>> {
        self.iter_mut().flat_map(|m| m.linears_mut()).collect()
    }
}

impl<F: Real, M: Module<F>> Module<F> for Option<M> {
    fn params(&self) -> Vec<&Param<F>> {
        self.iter().flat_map(|m| m.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.iter_mut().flat_map(|m| m.params_mut()).collect()
    }
    fn linears_mut(&mut self) -> Vec<&mut Linear<F>> {
        self.iter_mut().flat_map(|m| m.linears_mut()).collect()
    }
}

/// SHA-256 over parameter names, shapes and values, in visit order.
pub fn param_digest<'a, F: Real + 'a>(params: impl IntoIterator<Item = &'a Param<F>>) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name.as_bytes());
        h.update((p.value.nrows() as u64).to_le_bytes());
        h.update((p.value.ncols() as u64).to_le_bytes());
        for &x in p.value.iter() {
            h.update(x.as_f64().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// What a linear map does inside its block; adapter presets select by role.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinearRole {
    Query,
    Key,
    Value,
    Output,
    Mlp,
    Other,
}

impl LinearRole {
    pub fn is_attention(self) -> bool {
        matches!(self, Self::Query | Self::Key | Self::Value | Self::Output)
    }
}

/// `y = x · W + b`, with `W` stored `in x out`.
#[derive(Clone, Debug)]
pub struct Linear<F: Real> {
    pub name: String,
    pub role: LinearRole,
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    pub lora: Option<LoraAdapter<F>>,
}

impl<F: Real> Linear<F> {
    pub fn new(name: &str, role: LinearRole, in_dim: usize, out_dim: usize, bias: bool, init: &mut Init) -> Self {
        Self {
            name: name.to_string(),
            role,
            weight: Param::new(format!("{name}.weight"), init.normal(in_dim, out_dim, INIT_STD)),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Array2::zeros((1, out_dim)))),
            lora: None,
        }
    }

    pub fn zeros(name: &str, role: LinearRole, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.to_string(),
            role,
            weight: Param::new(format!("{name}.weight"), Array2::zeros((in_dim, out_dim))),
            bias: Some(Param::new(format!("{name}.bias"), Array2::zeros((1, out_dim)))),
            lora: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, t: &mut Tape<F>, x: Var) -> Var {
        let w = t.param(&self.weight);
        let mut y = t.matmul(x, w);
        if let Some(b) = &self.bias {
            let b = t.param(b);
            y = t.add_row(y, b);
        }
        if let Some(lora) = &self.lora {
            y = lora.forward(t, y, x);
        }
        y
    }
}

impl<F: Real> Module<F> for Linear<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut out = vec![&self.weight];
        out.extend(self.bias.iter());
        out.extend(self.lora.iter().flat_map(|l| l.params()));
        out
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = vec![&mut self.weight];
        out.extend(self.bias.iter_mut());
        out.extend(self.lora.iter_mut().flat_map(|l| l.params_mut()));
        out
    }
    fn linears_mut(&mut self) -> Vec<&mut Linear<F>> {
        vec![self]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<F: Real> {
    pub gain: Param<F>,
    pub bias: Param<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gain: Param::new(format!("{name}.gain"), Array2::ones((1, dim))),
            bias: Param::new(format!("{name}.bias"), Array2::zeros((1, dim))),
        }
    }

    pub fn forward(&self, t: &mut Tape<F>, x: Var) -> Var {
        let g = t.param(&self.gain);
        let b = t.param(&self.bias);
        t.layer_norm(x, g, b, LN_EPS)
    }
}

module_fields!(LayerNorm { gain, bias });

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct FeedForward<F: Real> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

impl<F: Real> FeedForward<F> {
    pub fn new(name: &str, dim: usize, hidden: usize, out: usize, init: &mut Init) -> Self {
        Self {
            fc1: Linear::new(&format!("{name}.fc1"), LinearRole::Mlp, dim, hidden, true, init),
            fc2: Linear::new(&format!("{name}.fc2"), LinearRole::Mlp, hidden, out, true, init),
        }
    }

    pub fn forward(&self, t: &mut Tape<F>, x: Var) -> Var {
        let h = self.fc1.forward(t, x);
        let h = t.gelu(h);
        self.fc2.forward(t, h)
    }
}

module_fields!(FeedForward { fc1, fc2 });

/// Multi-head attention projections. Used for both self- and
/// cross-attention: queries come from `target`, keys/values from `source`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention<F: Real> {
    pub q: Linear<F>,
    pub k: Linear<F>,
    pub v: Linear<F>,
    pub o: Linear<F>,
    pub heads: usize,
}

impl<F: Real> MultiHeadAttention<F> {
    pub fn new(name: &str, dim: usize, heads: usize, init: &mut Init) -> Self {
        assert_eq!(dim % heads, 0, "{name}: width {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(&format!("{name}.q"), LinearRole::Query, dim, dim, true, init),
            k: Linear::new(&format!("{name}.k"), LinearRole::Key, dim, dim, true, init),
            v: Linear::new(&format!("{name}.v"), LinearRole::Value, dim, dim, true, init),
            o: Linear::new(&format!("{name}.o"), LinearRole::Output, dim, dim, true, init),
            heads,
        }
    }

    /// Concatenated per-head attention output, before the output projection.
    pub fn attend(&self, t: &mut Tape<F>, target: Var, source: Var, segments: usize) -> Var {
        let q = self.q.forward(t, target);
        let k = self.k.forward(t, source);
        let v = self.v.forward(t, source);
        t.attention(q, k, v, self.heads, segments)
    }

    pub fn forward(&self, t: &mut Tape<F>, target: Var, source: Var, segments: usize) -> Var {
        let a = self.attend(t, target, source, segments);
        self.o.forward(t, a)
    }
}

module_fields!(MultiHeadAttention { q, k, v, o });

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock<F: Real> {
    pub ln1: LayerNorm<F>,
    pub attn: MultiHeadAttention<F>,
    pub ln2: LayerNorm<F>,
    pub ff: FeedForward<F>,
}

impl<F: Real> TransformerBlock<F> {
    pub fn new(name: &str, dim: usize, heads: usize, mlp_hidden: usize, init: &mut Init) -> Self {
        Self {
            ln1: LayerNorm::new(&format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, heads, init),
            ln2: LayerNorm::new(&format!("{name}.ln2"), dim),
            ff: FeedForward::new(&format!("{name}.ff"), dim, mlp_hidden, dim, init),
        }
    }

    /// `x` holds `segments` sequences of equal length stacked by rows.
    pub fn forward(&self, t: &mut Tape<F>, x: Var, segments: usize) -> Var {
        let h = self.ln1.forward(t, x);
        let a = self.attn.forward(t, h, h, segments);
        let x = t.add(x, a);
        let h = self.ln2.forward(t, x);
        let f = self.ff.forward(t, h);
        t.add(x, f)
    }
}

module_fields!(TransformerBlock { ln1, attn, ln2, ff });

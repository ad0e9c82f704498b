//! Low-rank adapters on frozen linear maps.
//!
//! An adapter adds `(alpha / rank) · B · A · drop(x)` to the output of the
//! linear map it wraps. `B` starts at zero so the wrapped map is unchanged
//! until training moves it. Adapter tensors live under the `lora.` name
//! prefix so checkpoints can load base and adapter weights independently.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, Linear, Module, Param};
use crate::tape::{c, Real, Tape, Var};

pub const LORA_PREFIX: &str = "lora.";

/// Adapter hyperparameters and placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Also adapt feed-forward layers, not only attention projections.
    pub include_mlp: bool,
}

impl LoraConfig {
    /// Stage-2 pretraining: Q/K/V and output projections, r=8, alpha=16.
    pub fn stage2() -> Self {
        Self { rank: 8, alpha: 16.0, dropout: 0.05, include_mlp: false }
    }

    /// Fine-tuning: attention projections and MLP layers, r=64, alpha=128.
    pub fn finetune() -> Self {
        Self { rank: 64, alpha: 128.0, dropout: 0.05, include_mlp: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidConfig("lora.rank must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("lora.dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LoraAdapter<F: Real> {
    /// `rank x in_dim`
    pub a: Param<F>,
    /// `out_dim x rank`
    pub b: Param<F>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    /// Name of the wrapped linear map.
    pub target: String,
}

impl<F: Real> LoraAdapter<F> {
    pub fn new(target: &str, in_dim: usize, out_dim: usize, cfg: &LoraConfig, init: &mut Init) -> Self {
        let a = init.normal(cfg.rank, in_dim, 1.0 / (in_dim as f64).sqrt());
        Self {
            a: Param::new(format!("{LORA_PREFIX}{target}.A"), a),
            b: Param::new(format!("{LORA_PREFIX}{target}.B"), Array2::zeros((out_dim, cfg.rank))),
            rank: cfg.rank,
            alpha: cfg.alpha,
            dropout_p: cfg.dropout,
            target: target.to_string(),
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `ΔW = (alpha / rank) · B · A`, shaped `out x in`.
    pub fn delta(&self) -> Array2<F> {
        self.b.value.dot(&self.a.value) * c::<F>(self.scaling())
    }

    pub fn forward(&self, t: &mut Tape<F>, base_out: Var, x: Var) -> Var {
        let mut input = x;
        if t.training && self.dropout_p > 0.0 {
            let keep = 1.0 - self.dropout_p;
            let (r, cols) = t.shape(x);
            let inv = c::<F>(1.0 / keep);
            let mask = Array2::from_shape_fn((r, cols), |_| {
                if t.rng.random::<f64>() < keep { inv } else { F::zero() }
            });
            let m = t.constant(mask);
            input = t.mul(x, m);
        }
        let a = t.param(&self.a);
        let b = t.param(&self.b);
        let h = t.matmul_t(input, a);
        let d = t.matmul_t(h, b);
        let d = t.scale(d, c::<F>(self.scaling()));
        t.add(base_out, d)
    }

    /// Single-vector form: `base_out + (alpha/r)·B·(A·drop(x))`.
    pub fn apply(&self, base_out: ArrayView1<F>, x: ArrayView1<F>, training: bool, rng: &mut impl Rng) -> Result<Array1<F>> {
        if x.len() != self.a.value.ncols() || base_out.len() != self.b.value.nrows() {
            return Err(Error::Shape(format!(
                "adapter {} expects in {} / out {}, got {} / {}",
                self.target,
                self.a.value.ncols(),
                self.b.value.nrows(),
                x.len(),
                base_out.len()
            )));
        }
        let input: Array1<F> = if training && self.dropout_p > 0.0 {
            let keep = 1.0 - self.dropout_p;
            x.mapv(|v| if rng.random::<f64>() < keep { v / c::<F>(keep) } else { F::zero() })
        } else {
            x.to_owned()
        };
        let h = self.a.value.dot(&input);
        let d = self.b.value.dot(&h);
        Ok(&base_out + &(d * c::<F>(self.scaling())))
    }
}

impl<F: Real> Module<F> for LoraAdapter<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.a, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.a, &mut self.b]
    }
    fn linears_mut(&mut self) -> Vec<&mut Linear<F>> {
        Vec::new()
    }
}

pub fn is_adapter_param(name: &str) -> bool {
    name.starts_with(LORA_PREFIX)
}

/// Attaches adapters to every eligible linear map of `module` (attention
/// projections, plus MLP layers when `cfg.include_mlp`). Existing adapters
/// are replaced. Returns the wrapped map names.
pub fn attach<F: Real, M: Module<F> + ?Sized>(module: &mut M, cfg: &LoraConfig, init: &mut Init) -> Vec<String> {
    let mut names = Vec::new();
    for lin in module.linears_mut() {
        let eligible = lin.role.is_attention() || (cfg.include_mlp && lin.role == crate::nn::LinearRole::Mlp);
        if eligible {
            lin.lora = Some(LoraAdapter::new(&lin.name, lin.in_dim(), lin.out_dim(), cfg, init));
            names.push(lin.name.clone());
        }
    }
    names
}

/// Attaches adapters to the named linear maps only.
pub fn attach_named<F: Real, M: Module<F> + ?Sized>(
    module: &mut M,
    targets: &[String],
    cfg: &LoraConfig,
    init: &mut Init,
) -> Result<()> {
    let mut linears = module.linears_mut();
    for target in targets {
        let lin = linears
            .iter_mut()
            .find(|l| &l.name == target)
            .ok_or_else(|| Error::Lookup(format!("no linear map named {target}")))?;
        lin.lora = Some(LoraAdapter::new(&lin.name, lin.in_dim(), lin.out_dim(), cfg, init));
    }
    Ok(())
}

/// Which parameters an optimizer may update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamPartition {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

/// Freezes every parameter of `module` except the adapters wrapping the
/// `targets` maps. Fails if a target has no attached adapter.
pub fn mark_trainable<F: Real, M: Module<F> + ?Sized>(module: &mut M, targets: &[String]) -> Result<ParamPartition> {
    {
        let mut linears = module.linears_mut();
        for target in targets {
            let found = linears.iter_mut().any(|l| &l.name == target && l.lora.is_some());
            if !found {
                return Err(Error::Lookup(format!("adapter target {target} is not attached")));
            }
        }
    }
    let keep: Vec<String> = targets.iter().map(|t| format!("{LORA_PREFIX}{t}.")).collect();
    let mut part = ParamPartition::default();
    for p in module.params_mut() {
        p.trainable = keep.iter().any(|k| p.name.starts_with(k));
        if p.trainable {
            part.trainable.push(p.name.clone());
        } else {
            part.frozen.push(p.name.clone());
        }
    }
    Ok(part)
}

/// Freezes everything except attached adapters.
pub fn freeze_base<F: Real, M: Module<F> + ?Sized>(module: &mut M) -> ParamPartition {
    let mut part = ParamPartition::default();
    for p in module.params_mut() {
        p.trainable = is_adapter_param(&p.name);
        if p.trainable {
            part.trainable.push(p.name.clone());
        } else {
            part.frozen.push(p.name.clone());
        }
    }
    part
}

/// Folds each adapter into its base weight and removes it.
pub fn merge_and_strip<F: Real, M: Module<F> + ?Sized>(module: &mut M) -> usize {
    let mut merged = 0;
    for lin in module.linears_mut() {
        if let Some(lora) = lin.lora.take() {
            // stored weights are in x out, the update is out x in
            let delta = lora.delta();
            lin.weight.value += &delta.t();
            merged += 1;
        }
    }
    merged
}

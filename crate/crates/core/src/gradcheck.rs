//! Central finite differences against the tape's analytic gradients.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crossmodal::{stage2_objective, CrossConfig, CrossModalModel, Stage2Batch};
use crate::error::Result;
use crate::nn::{Init, Module};
use crate::signal::{Epoch, SessionStats};
use crate::tape::{Tape, Var};
use crate::unimodal::{stage1_objective, EncoderConfig, NoisePolicy, Stage1Batch, UnimodalModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Random entries checked per parameter tensor, on top of its largest
    /// gradient entry.
    pub entries_per_param: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-3, tolerance: 1e-4, entries_per_param: 3, batch_size: 4, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub suite: String,
    pub checks: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub worst: String,
    pub passed: bool,
    #[serde(skip)]
    pub seconds: f64,
}

/// `|a - n| / max(|a| + |n|, 1e-6)`. The floor keeps round-off on
/// gradients that are exactly zero (softmax shift invariance of key biases)
/// from reading as a relative error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Checks every trainable parameter of `model` against `loss`.
pub fn check_module<M: Module<f64>>(
    suite: &str,
    model: &mut M,
    loss: impl Fn(&mut Tape<f64>, &M) -> Result<Var>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let start = Instant::now();
    let mut t = Tape::eval();
    let out = loss(&mut t, model)?;
    let grads = t.backward(out);
    let analytic: Vec<Option<ndarray::Array2<f64>>> = model.params().iter().map(|p| grads.param(p).cloned()).collect();
    drop(t);
    let eval = |m: &M| -> Result<f64> {
        let mut t = Tape::eval();
        let v = loss(&mut t, m)?;
        Ok(t.scalar(v))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::new();
    let n = analytic.len();
    for i in 0..n {
        let (name, trainable, dim) = {
            let p = &model.params()[i];
            (p.name.clone(), p.trainable, p.value.dim())
        };
        if !trainable {
            continue;
        }
        let g = analytic[i].clone().unwrap_or_else(|| ndarray::Array2::zeros(dim));
        let mut picks: Vec<(usize, usize)> =
            (0..cfg.entries_per_param).map(|_| (rng.random_range(0..dim.0), rng.random_range(0..dim.1))).collect();
        let top = g.indexed_iter().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).map(|(ix, _)| ix);
        picks.extend(top);
        picks.sort_unstable();
        picks.dedup();
        let mut worst: f64 = 0.0;
        for &(r, c) in &picks {
            let orig = model.params()[i].value[[r, c]];
            model.params_mut()[i].value[[r, c]] = orig + cfg.step;
            let up = eval(model)?;
            model.params_mut()[i].value[[r, c]] = orig - cfg.step;
            let down = eval(model)?;
            model.params_mut()[i].value[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            worst = worst.max(rel_err(g[[r, c]], numeric));
        }
        checks.push(ParamCheck {
            name,
            entries: picks.len(),
            max_rel_err: worst,
            max_abs_grad: g.iter().fold(0.0f64, |m, x| m.max(x.abs())),
        });
    }
    let (max_rel_err, worst) = checks
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .map_or((0.0, String::new()), |c| (c.max_rel_err, c.name.clone()));
    Ok(GradCheckReport {
        suite: suite.into(),
        passed: !checks.is_empty() && max_rel_err <= cfg.tolerance,
        checks,
        max_rel_err,
        worst,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn random_windows(n: usize, m: usize, len: usize, seed: u64) -> Vec<Vec<Epoch>> {
    let mut init = Init::seeded(seed);
    (0..n)
        .map(|i| {
            (0..m)
                .map(|k| Epoch::new(k, init.normal::<f32>(1, len, 1.0).into_raw_vec_and_offset().0, (i % 3) as u32, 7 * i))
                .collect()
        })
        .collect()
}

/// Moves every parameter off its initialization. At init the projections
/// are tiny, so cosine similarity is badly conditioned against a 1e-3 step;
/// zero-initialized tensors (adapter up-projections, time gates) would also
/// hide whole paths from the check.
fn jitter<M: Module<f64>>(model: &mut M, seed: u64) {
    let mut init = Init::seeded(seed);
    for p in model.params_mut() {
        let (r, c) = p.value.dim();
        p.value = &p.value + &init.normal::<f64>(r, c, JITTER_STD);
    }
}

const JITTER_STD: f64 = 0.1;

/// Full Stage-1 objective (reconstruction plus contrastive term).
pub fn stage1_suite(enc: &EncoderConfig, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut model = UnimodalModel::<f64>::new("eeg", enc, cfg.seed)?;
    jitter(&mut model, cfg.seed ^ 7);
    let groups = random_windows(cfg.batch_size, 1, enc.epoch_len, cfg.seed ^ 1);
    let picks: Vec<&Epoch> = groups.iter().map(|g| &g[0]).collect();
    let policy = NoisePolicy { sigma: vec![0.05] };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 2);
    let batch = Stage1Batch::<f64>::sample(&picks, enc, &policy, &mut rng)?;
    check_module("stage1", &mut model, |t, m| Ok(stage1_objective(t, m, &batch, 1.0).total), cfg)
}

/// Full Stage-2 objective on a time-aware model.
pub fn stage2_suite(enc: &EncoderConfig, cross: &CrossConfig, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let names: Vec<String> = ["eeg", "spo2", "resp"].iter().map(|s| s.to_string()).collect();
    let stage1 = names
        .iter()
        .enumerate()
        .map(|(i, n)| UnimodalModel::<f64>::new(n, enc, cfg.seed + i as u64).map(Some))
        .collect::<Result<Vec<_>>>()?;
    let cross = CrossConfig { time_aware: true, ..cross.clone() };
    let mut model = CrossModalModel::from_stage1(&cross, names, stage1, cfg.seed ^ 3)?;
    jitter(&mut model, cfg.seed ^ 4);
    let groups = random_windows(cfg.batch_size, 3, enc.epoch_len, cfg.seed ^ 5);
    let refs: Vec<&[Epoch]> = groups.iter().map(|g| g.as_slice()).collect();
    let stats = SessionStats { mean_len: 10.0, std_len: 4.0 };
    let policy = NoisePolicy { sigma: vec![0.05, 0.05, 0.0] };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 6);
    let batch = Stage2Batch::<f64>::sample(&refs, (0, 2), enc, cross.mask_ratio, &stats, &policy, &mut rng)?;
    check_module("stage2", &mut model, |t, m| Ok(stage2_objective(t, m, &batch, 1.0)?.total), cfg)
}

pub fn run_all(enc: &EncoderConfig, cross: &CrossConfig, cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    Ok(vec![stage1_suite(enc, cfg)?, stage2_suite(enc, cross, cfg)?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::LoraConfig;

    fn tiny_enc() -> EncoderConfig {
        EncoderConfig {
            epoch_len: 32,
            patch_size: 4,
            embed_dim: 8,
            enc_layers: 1,
            enc_heads: 2,
            dec_dim: 8,
            dec_layers: 1,
            dec_heads: 2,
            mask_ratio: 0.5,
            mlp_ratio: 2,
            proj_dim: 4,
            temperature: 0.5,
        }
    }

    #[test]
    fn rel_err_examples() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(1.0, 3.0) - 0.5).abs() < 1e-15);
        assert_eq!(rel_err(0.0, 0.0), 0.0);
    }

    #[test]
    fn desk_stage1_passes() {
        let r = stage1_suite(&EncoderConfig::desk(), &GradCheckConfig::default()).unwrap();
        assert!(r.passed, "worst {} at {:e}", r.worst, r.max_rel_err);
        assert!(r.checks.iter().any(|c| c.name.ends_with(".cls")));
    }

    // a toy width keeps the projection small, so a finer step is needed
    #[test]
    fn toy_stage2_with_mlp_adapters_passes() {
        let cfg = GradCheckConfig { step: 1e-4, ..Default::default() };
        let cross = CrossConfig {
            layers: 1,
            heads: 2,
            dec_dim: 8,
            dec_heads: 2,
            film_hidden: 6,
            lora: LoraConfig { rank: 2, alpha: 4.0, dropout: 0.0, include_mlp: true },
            ..CrossConfig::desk()
        };
        let r = stage2_suite(&tiny_enc(), &cross, &cfg).unwrap();
        assert!(r.passed, "worst {} at {:e}", r.worst, r.max_rel_err);
        for part in ["fuse.film.", "gate", "lora.", ".ff.fc1"] {
            assert!(r.checks.iter().any(|c| c.name.contains(part) && c.max_abs_grad > 0.0), "{part}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let enc = tiny_enc();
        let mut model = UnimodalModel::<f64>::new("eeg", &enc, 0).unwrap();
        let groups = random_windows(2, 1, enc.epoch_len, 1);
        let picks: Vec<&Epoch> = groups.iter().map(|g| &g[0]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = Stage1Batch::<f64>::sample(&picks, &enc, &NoisePolicy { sigma: vec![0.0] }, &mut rng).unwrap();
        // the extra term reads a weight as a constant: the finite difference
        // sees it, the tape does not
        let r = check_module(
            "broken",
            &mut model,
            |t, m| {
                let l = stage1_objective(t, m, &batch, 1.0).total;
                let w = t.constant(m.head.params()[0].value.clone());
                let sq = t.square(w);
                let extra = t.sum_all(sq);
                Ok(t.add(l, extra))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst, model.head.params()[0].name);
    }
}

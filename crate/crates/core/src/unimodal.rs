//! Stage-1: per-modality masked autoencoder with a contrastive CLS head.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::module_fields;
use crate::nn::{Init, LayerNorm, Linear, LinearRole, Module, Param, TransformerBlock, INIT_STD};
use crate::optim::{lambda_ramp, Adam, AdamConfig};
use crate::signal::{sample_mask, Epoch, MaskPlan, PatchSequence};
use crate::tape::{c, Real, Tape, Var};

pub use crate::optim::lr_schedule;

/// Architecture of one unimodal encoder/decoder pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Samples per window.
    pub epoch_len: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub mask_ratio: f64,
    /// Feed-forward hidden width as a multiple of the model width.
    pub mlp_ratio: usize,
    pub proj_dim: usize,
    pub temperature: f64,
}

impl EncoderConfig {
    /// Full-size model: 30 s at 128 Hz, 8-sample patches, D=512.
    pub fn paper_scale() -> Self {
        Self {
            epoch_len: 3840,
            patch_size: 8,
            embed_dim: 512,
            enc_layers: 6,
            enc_heads: 8,
            dec_dim: 512,
            dec_layers: 4,
            dec_heads: 4,
            mask_ratio: 0.5,
            mlp_ratio: 4,
            proj_dim: 128,
            temperature: 0.5,
        }
    }

    /// CPU-sized model used for tests and the ablation.
    pub fn desk() -> Self {
        Self {
            epoch_len: 128,
            patch_size: 8,
            embed_dim: 64,
            enc_layers: 2,
            enc_heads: 4,
            dec_dim: 64,
            dec_layers: 1,
            dec_heads: 4,
            mask_ratio: 0.5,
            mlp_ratio: 2,
            proj_dim: 32,
            temperature: 0.5,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.epoch_len / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.patch_size == 0 || self.epoch_len == 0 || self.epoch_len % self.patch_size != 0 {
            return bad(format!("epoch_len {} must be a positive multiple of patch_size {}", self.epoch_len, self.patch_size));
        }
        if self.enc_heads == 0 || self.embed_dim % self.enc_heads != 0 {
            return bad(format!("embed_dim {} not divisible by enc_heads {}", self.embed_dim, self.enc_heads));
        }
        if self.dec_heads == 0 || self.dec_dim % self.dec_heads != 0 {
            return bad(format!("dec_dim {} not divisible by dec_heads {}", self.dec_dim, self.dec_heads));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio {} must lie in (0, 1)", self.mask_ratio));
        }
        if self.temperature <= 0.0 {
            return bad("temperature must be positive".into());
        }
        if self.mlp_ratio == 0 || self.proj_dim == 0 {
            return bad("mlp_ratio and proj_dim must be positive".into());
        }
        Ok(())
    }
}

/// Patch embedder + transformer encoder.
#[derive(Clone, Debug)]
pub struct UnimodalEncoder<F: Real> {
    pub patch_embed: Linear<F>,
    /// One learned row per patch position.
    pub token_pos: Param<F>,
    pub cls: Param<F>,
    pub blocks: Vec<TransformerBlock<F>>,
    pub norm: LayerNorm<F>,
    pub num_patches: usize,
}

module_fields!(UnimodalEncoder { patch_embed, token_pos, cls, blocks, norm });

impl<F: Real> UnimodalEncoder<F> {
    pub fn new(prefix: &str, cfg: &EncoderConfig, init: &mut Init) -> Self {
        let d = cfg.embed_dim;
        let p = cfg.num_patches();
        Self {
            patch_embed: Linear::new(&format!("{prefix}.patch_embed"), LinearRole::Other, cfg.patch_size, d, true, init),
            token_pos: Param::new(format!("{prefix}.token_pos"), init.normal(p, d, INIT_STD)),
            cls: Param::new(format!("{prefix}.cls"), init.normal(1, d, INIT_STD)),
            blocks: (0..cfg.enc_layers)
                .map(|i| TransformerBlock::new(&format!("{prefix}.blocks.{i}"), d, cfg.enc_heads, d * cfg.mlp_ratio, init))
                .collect(),
            norm: LayerNorm::new(&format!("{prefix}.norm"), d),
            num_patches: p,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.cls.value.ncols()
    }

    /// Encodes the visible patches of a batch.
    ///
    /// `x` stacks `B` windows as `(B * P) x patch_size`. Every plan must keep
    /// the same number `V` of visible patches. The result stacks, per window,
    /// the CLS row followed by the visible patches in plan order:
    /// `(B * (V + 1)) x D`.
    pub fn encode(&self, t: &mut Tape<F>, x: Var, plans: &[MaskPlan]) -> Var {
        let b = plans.len();
        let p = self.num_patches;
        assert_eq!(t.shape(x).0, b * p, "patch rows do not match the plans");
        let v = plans[0].num_visible();
        assert!(plans.iter().all(|pl| pl.num_visible() == v && pl.num_patches == p), "plans must share P and V");

        let emb = self.patch_embed.forward(t, x);
        let pos = t.param(&self.token_pos);
        let pos_idx: Vec<usize> = (0..b * p).map(|r| r % p).collect();
        let pos = t.gather_rows(pos, &pos_idx);
        let emb = t.add(emb, pos);

        let cls = t.param(&self.cls);
        let both = t.concat_rows(&[emb, cls]);
        let cls_row = b * p;
        let mut order = Vec::with_capacity(b * (v + 1));
        for (bi, plan) in plans.iter().enumerate() {
            order.push(cls_row);
            order.extend(plan.visible.iter().map(|&pi| bi * p + pi));
        }
        let mut h = t.gather_rows(both, &order);
        for blk in &self.blocks {
            h = blk.forward(t, h, b);
        }
        self.norm.forward(t, h)
    }
}

/// CLS rows of an encoded batch with `tokens` rows per window.
pub fn cls_rows<F: Real>(t: &mut Tape<F>, latent: Var, batch: usize, tokens: usize) -> Var {
    let idx: Vec<usize> = (0..batch).map(|b| b * tokens).collect();
    t.gather_rows(latent, &idx)
}

/// Lightweight decoder that rebuilds all `P` patches from the visible latent.
#[derive(Clone, Debug)]
pub struct ReconDecoder<F: Real> {
    pub embed: Linear<F>,
    pub mask_token: Param<F>,
    /// Row 0 is the CLS position, rows `1..=P` the patch positions.
    pub pos: Param<F>,
    pub blocks: Vec<TransformerBlock<F>>,
    pub norm: LayerNorm<F>,
    pub head: Linear<F>,
    pub num_patches: usize,
}

module_fields!(ReconDecoder { embed, mask_token, pos, blocks, norm, head });

impl<F: Real> ReconDecoder<F> {
    pub fn new(prefix: &str, in_dim: usize, cfg: &EncoderConfig, init: &mut Init) -> Self {
        let dd = cfg.dec_dim;
        let p = cfg.num_patches();
        Self {
            embed: Linear::new(&format!("{prefix}.embed"), LinearRole::Other, in_dim, dd, true, init),
            mask_token: Param::new(format!("{prefix}.mask_token"), init.normal(1, dd, INIT_STD)),
            pos: Param::new(format!("{prefix}.pos"), init.normal(p + 1, dd, INIT_STD)),
            blocks: (0..cfg.dec_layers)
                .map(|i| TransformerBlock::new(&format!("{prefix}.blocks.{i}"), dd, cfg.dec_heads, dd * cfg.mlp_ratio, init))
                .collect(),
            norm: LayerNorm::new(&format!("{prefix}.norm"), dd),
            head: Linear::new(&format!("{prefix}.head"), LinearRole::Other, dd, cfg.patch_size, true, init),
            num_patches: p,
        }
    }

    /// `latent` is `(B * (V + 1)) x D` as produced by an encoder; the output
    /// is `(B * P) x patch_size`. `extra`, when given, is a `B x dec_dim`
    /// (or `1 x dec_dim`) conditioning row added to every token of a window.
    pub fn forward(&self, t: &mut Tape<F>, latent: Var, plans: &[MaskPlan], extra: Option<Var>) -> Var {
        let b = plans.len();
        let p = self.num_patches;
        let v = plans[0].num_visible();
        assert_eq!(t.shape(latent).0, b * (v + 1), "latent rows do not match the plans");
        let h = self.embed.forward(t, latent);
        let mask = t.param(&self.mask_token);
        let both = t.concat_rows(&[h, mask]);
        let mask_row = b * (v + 1);
        let mut order = Vec::with_capacity(b * (p + 1));
        for (bi, plan) in plans.iter().enumerate() {
            let base = bi * (v + 1);
            let mut full = vec![mask_row; p];
            for (i, &pi) in plan.visible.iter().enumerate() {
                full[pi] = base + 1 + i;
            }
            order.push(base);
            order.extend(full);
        }
        let mut x = t.gather_rows(both, &order);
        let pos = t.param(&self.pos);
        let pos_idx: Vec<usize> = (0..b * (p + 1)).map(|r| r % (p + 1)).collect();
        let pos = t.gather_rows(pos, &pos_idx);
        x = t.add(x, pos);
        if let Some(e) = extra {
            let rows = t.shape(e).0;
            let idx: Vec<usize> = (0..b * (p + 1)).map(|r| if rows == 1 { 0 } else { r / (p + 1) }).collect();
            let e = t.gather_rows(e, &idx);
            x = t.add(x, e);
        }
        for blk in &self.blocks {
            x = blk.forward(t, x, b);
        }
        let x = self.norm.forward(t, x);
        let y = self.head.forward(t, x);
        let keep: Vec<usize> = (0..b).flat_map(|bi| (1..=p).map(move |pi| bi * (p + 1) + pi)).collect();
        t.gather_rows(y, &keep)
    }
}

/// Two-layer projection into the contrastive space, followed by L2 normalization.
#[derive(Clone, Debug)]
pub struct ContrastiveHead<F: Real> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

module_fields!(ContrastiveHead { fc1, fc2 });

impl<F: Real> ContrastiveHead<F> {
    pub fn new(prefix: &str, in_dim: usize, hidden: usize, proj_dim: usize, init: &mut Init) -> Self {
        Self {
            fc1: Linear::new(&format!("{prefix}.fc1"), LinearRole::Other, in_dim, hidden, true, init),
            fc2: Linear::new(&format!("{prefix}.fc2"), LinearRole::Other, hidden, proj_dim, true, init),
        }
    }

    pub fn forward(&self, t: &mut Tape<F>, x: Var) -> Var {
        let h = self.fc1.forward(t, x);
        let h = t.gelu(h);
        let z = self.fc2.forward(t, h);
        t.l2_normalize_rows(z)
    }
}

// -------------------------------------------------------------------------
// losses

/// Mean squared error over the masked patches of a batch.
///
/// `pred` and `target` are `(B * P) x patch_size`. Predictions for visible
/// patches do not enter the loss.
pub fn masked_recon_loss_on<F: Real>(t: &mut Tape<F>, pred: Var, target: Var, plans: &[MaskPlan]) -> Var {
    let p = plans[0].num_patches;
    let rows: Vec<usize> = plans
        .iter()
        .enumerate()
        .flat_map(|(b, plan)| plan.masked.iter().map(move |&m| b * p + m))
        .collect();
    assert!(!rows.is_empty(), "masked reconstruction loss needs at least one masked patch");
    let pm = t.gather_rows(pred, &rows);
    let tm = t.gather_rows(target, &rows);
    let d = t.sub(pm, tm);
    let sq = t.square(d);
    t.mean_all(sq)
}

pub fn masked_recon_loss<F: Real>(pred: &PatchSequence<F>, target: &PatchSequence<F>, plan: &MaskPlan) -> Result<F> {
    if pred.patches.dim() != target.patches.dim() || plan.num_patches != pred.num_patches() {
        return shape_err("prediction, target and plan disagree on shape");
    }
    if plan.masked.is_empty() {
        return invalid("no masked patches");
    }
    // summed in index order; the tape form may differ in the last ulp
    let mut sum = F::zero();
    for &p in &plan.masked {
        for (a, b) in pred.patches.row(p).iter().zip(target.patches.row(p)) {
            let d = *a - *b;
            sum += d * d;
        }
    }
    Ok(sum / c::<F>((plan.masked.len() * pred.patch_size()) as f64))
}

/// NT-Xent over `2N` L2-normalized projections `[z_a; z_b]`, where row `i`
/// of `z_a` and row `i` of `z_b` are positives.
pub fn nt_xent_on<F: Real>(t: &mut Tape<F>, za: Var, zb: Var, temperature: f64) -> Var {
    let n = t.shape(za).0;
    let z = t.concat_rows(&[za, zb]);
    let sim = t.matmul_t(z, z);
    let logits = t.scale(sim, c::<F>(1.0 / temperature));
    let targets: Vec<usize> = (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect();
    t.cross_entropy(logits, &targets, None, true)
}

/// NT-Xent with cosine similarity on two batches of views.
pub fn nt_xent<F: Real>(za: &Array2<F>, zb: &Array2<F>, temperature: f64) -> Result<F> {
    if temperature <= 0.0 {
        return invalid("temperature must be positive");
    }
    if za.dim() != zb.dim() || za.nrows() == 0 {
        return shape_err("view matrices must be non-empty and equally shaped");
    }
    let mut t = Tape::eval();
    let a = t.constant(za.clone());
    let b = t.constant(zb.clone());
    let a = t.l2_normalize_rows(a);
    let b = t.l2_normalize_rows(b);
    let l = nt_xent_on(&mut t, a, b, temperature);
    Ok(t.scalar(l))
}

pub fn stage1_loss(recon: f64, contrast: f64, lambda_con: f64) -> f64 {
    recon + lambda_con * contrast
}

// -------------------------------------------------------------------------
// augmentation

/// Additive Gaussian noise per modality, `sigma` relative to the window's
/// own standard deviation. Zero means the view is left untouched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePolicy {
    pub sigma: Vec<f64>,
}

impl NoisePolicy {
    pub fn sigma_for(&self, modality: usize) -> f64 {
        self.sigma.get(modality).copied().unwrap_or(0.0)
    }
}

pub fn augment_samples(samples: &[f32], sigma: f64, rng: &mut impl Rng) -> Vec<f32> {
    if sigma == 0.0 {
        return samples.to_vec();
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|&x| x as f64).sum::<f64>() / n;
    let sd = (samples.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = sigma * if sd > 0.0 { sd } else { 1.0 };
    samples
        .iter()
        .map(|&x| {
            let z: f64 = rng.sample(StandardNormal);
            (x as f64 + scale * z) as f32
        })
        .collect()
}

/// A lightly perturbed copy of `epoch` according to `policy`.
pub fn augment_view(epoch: &Epoch, policy: &NoisePolicy, rng: &mut impl Rng) -> Epoch {
    let mut out = epoch.clone();
    out.samples = augment_samples(&epoch.samples, policy.sigma_for(epoch.modality), rng);
    out
}

// -------------------------------------------------------------------------
// model + training

/// Encoder, decoder and projection head for one modality.
#[derive(Clone, Debug)]
pub struct UnimodalModel<F: Real> {
    pub cfg: EncoderConfig,
    pub modality: String,
    pub encoder: UnimodalEncoder<F>,
    pub decoder: ReconDecoder<F>,
    pub head: ContrastiveHead<F>,
}

module_fields!(UnimodalModel { encoder, decoder, head });

impl<F: Real> UnimodalModel<F> {
    pub fn new(modality: &str, cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::seeded(seed);
        let prefix = format!("enc.{modality}");
        let d = cfg.embed_dim;
        Ok(Self {
            cfg: cfg.clone(),
            modality: modality.to_string(),
            encoder: UnimodalEncoder::new(&prefix, cfg, &mut init),
            decoder: ReconDecoder::new(&format!("dec.{modality}"), d, cfg, &mut init),
            head: ContrastiveHead::new(&format!("proj.{modality}"), d, d, cfg.proj_dim, &mut init),
        })
    }
}

/// Encodes one window's visible patches: `(V + 1) x D`, CLS first.
pub fn encode_visible<F: Real>(enc: &UnimodalEncoder<F>, seq: &PatchSequence<F>, plan: &MaskPlan) -> Result<Array2<F>> {
    if seq.num_patches() != enc.num_patches || plan.num_patches != seq.num_patches() {
        return shape_err(format!(
            "encoder expects {} patches; sequence has {}, plan covers {}",
            enc.num_patches,
            seq.num_patches(),
            plan.num_patches
        ));
    }
    if seq.patch_size() != enc.patch_embed.in_dim() {
        return shape_err("patch size does not match the encoder");
    }
    let mut t = Tape::eval();
    let x = t.constant(seq.patches.clone());
    let h = enc.encode(&mut t, x, std::slice::from_ref(plan));
    Ok(t.value(h).clone())
}

/// Rebuilds all patches of one window from its encoded visible latent.
pub fn reconstruct<F: Real>(dec: &ReconDecoder<F>, latent: &Array2<F>, plan: &MaskPlan) -> Result<PatchSequence<F>> {
    if latent.nrows() != plan.num_visible() + 1 || plan.num_patches != dec.num_patches {
        return shape_err(format!(
            "latent has {} rows; plan expects {} visible + CLS over {} patches",
            latent.nrows(),
            plan.num_visible(),
            plan.num_patches
        ));
    }
    if latent.ncols() != dec.embed.in_dim() {
        return shape_err("latent width does not match the decoder");
    }
    let mut t = Tape::eval();
    let l = t.constant(latent.clone());
    let y = dec.forward(&mut t, l, std::slice::from_ref(plan), None);
    Ok(PatchSequence { patches: t.value(y).clone() })
}

/// One pre-sampled Stage-1 batch: clean and perturbed windows with
/// independent mask plans.
#[derive(Clone, Debug)]
pub struct Stage1Batch<F: Real> {
    pub clean: Array2<F>,
    pub augmented: Array2<F>,
    pub plans: Vec<MaskPlan>,
    pub aug_plans: Vec<MaskPlan>,
}

impl<F: Real> Stage1Batch<F> {
    pub fn sample(
        epochs: &[&Epoch],
        cfg: &EncoderConfig,
        policy: &NoisePolicy,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if epochs.is_empty() {
            return invalid("empty batch");
        }
        let p = cfg.num_patches();
        let mut clean = Vec::with_capacity(epochs.len() * cfg.epoch_len);
        let mut aug = Vec::with_capacity(epochs.len() * cfg.epoch_len);
        let mut plans = Vec::with_capacity(epochs.len());
        let mut aug_plans = Vec::with_capacity(epochs.len());
        for e in epochs {
            if e.samples.len() != cfg.epoch_len {
                return shape_err(format!("window length {} != {}", e.samples.len(), cfg.epoch_len));
            }
            clean.extend(e.samples.iter().map(|&x| F::lift32(x)));
            let view = augment_view(e, policy, rng);
            aug.extend(view.samples.iter().map(|&x| F::lift32(x)));
            plans.push(sample_mask(p, cfg.mask_ratio, rng)?);
            aug_plans.push(sample_mask(p, cfg.mask_ratio, rng)?);
        }
        let rows = epochs.len() * p;
        Ok(Self {
            clean: Array2::from_shape_vec((rows, cfg.patch_size), clean).expect("sized"),
            augmented: Array2::from_shape_vec((rows, cfg.patch_size), aug).expect("sized"),
            plans,
            aug_plans,
        })
    }

    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }
}

/// Loss parts recorded on the tape.
pub struct Stage1Loss {
    pub total: Var,
    pub recon: Var,
    pub contrast: Var,
}

/// Builds the combined Stage-1 objective for a batch.
pub fn stage1_objective<F: Real>(t: &mut Tape<F>, model: &UnimodalModel<F>, batch: &Stage1Batch<F>, lambda_con: f64) -> Stage1Loss {
    let b = batch.len();
    let v = batch.plans[0].num_visible();
    let x = t.constant(batch.clean.clone());
    let latent = model.encoder.encode(t, x, &batch.plans);
    let pred = model.decoder.forward(t, latent, &batch.plans, None);
    let recon = masked_recon_loss_on(t, pred, x, &batch.plans);

    let xa = t.constant(batch.augmented.clone());
    let va = batch.aug_plans[0].num_visible();
    let latent_a = model.encoder.encode(t, xa, &batch.aug_plans);
    let cls = cls_rows(t, latent, b, v + 1);
    let cls_a = cls_rows(t, latent_a, b, va + 1);
    let za = model.head.forward(t, cls);
    let zb = model.head.forward(t, cls_a);
    let contrast = nt_xent_on(t, za, zb, model.cfg.temperature);
    let weighted = t.scale(contrast, c::<F>(lambda_con));
    let total = t.add(recon, weighted);
    Stage1Loss { total, recon, contrast }
}

/// Iteration-based training schedule shared by both stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iters_per_epoch: usize,
    pub max_epochs: usize,
    pub warmup_epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    /// Contrastive weight reaches 1.0 after this many epochs.
    pub lambda_ramp_epochs: usize,
    /// Windows in the fixed validation batch.
    pub val_size: usize,
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.iters_per_epoch * self.max_epochs
    }

    pub fn warmup_steps(&self) -> usize {
        self.iters_per_epoch * self.warmup_epochs
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2 for the contrastive loss".into()));
        }
        if self.iters_per_epoch == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig("iters_per_epoch and max_epochs must be positive".into()));
        }
        if self.warmup_epochs >= self.max_epochs {
            return Err(Error::InvalidConfig("warmup_epochs must be smaller than max_epochs".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    /// Combined training loss per step.
    pub step_loss: Vec<f64>,
    pub step_recon: Vec<f64>,
    pub step_contrast: Vec<f64>,
    /// Validation loss at the end of each epoch.
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl LossTrace {
    /// Mean training loss over each epoch.
    pub fn epoch_means(&self, iters_per_epoch: usize) -> Vec<f64> {
        self.step_loss
            .chunks(iters_per_epoch)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Restores the best snapshot's parameter values by name.
pub(crate) fn restore_params<F: Real, M: Module<F>>(model: &mut M, snapshot: &[Array2<F>]) {
    for (p, v) in model.params_mut().into_iter().zip(snapshot) {
        p.value.assign(v);
    }
}

pub(crate) fn snapshot_params<F: Real, M: Module<F>>(model: &M) -> Vec<Array2<F>> {
    model.params().iter().map(|p| p.value.clone()).collect()
}

/// Trains one modality's encoder/decoder/head.
pub fn train_stage1<F: Real>(
    model: &mut UnimodalModel<F>,
    train: &[&Epoch],
    val: &[&Epoch],
    hp: &TrainConfig,
    policy: &NoisePolicy,
    seed: u64,
) -> Result<LossTrace> {
    if train.is_empty() {
        return invalid("empty Stage-1 training set");
    }
    hp.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let val_batch = if val.len() >= 2 {
        let mut vrng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a1);
        let k = hp.val_size.clamp(2, val.len());
        let take: Vec<&Epoch> = (0..k).map(|i| val[i * val.len() / k]).collect();
        Some(Stage1Batch::<F>::sample(&take, &model.cfg, policy, &mut vrng)?)
    } else {
        None
    };
    let mut opt = Adam::new(hp.adam);
    let mut trace = LossTrace::default();
    let mut best = f64::INFINITY;
    let mut best_params = snapshot_params(model);
    let mut since_best = 0;
    let total = hp.total_steps();
    let ramp = hp.iters_per_epoch * hp.lambda_ramp_epochs;
    for epoch in 0..hp.max_epochs {
        for it in 0..hp.iters_per_epoch {
            let step = epoch * hp.iters_per_epoch + it;
            let picks: Vec<&Epoch> = (0..hp.batch_size).map(|_| train[rng.random_range(0..train.len())]).collect();
            let batch = Stage1Batch::<F>::sample(&picks, &model.cfg, policy, &mut rng)?;
            let lambda = lambda_ramp(step, ramp);
            let mut t = Tape::new(true, rng.random());
            let loss = stage1_objective(&mut t, model, &batch, lambda);
            trace.step_loss.push(t.scalar(loss.total).as_f64());
            trace.step_recon.push(t.scalar(loss.recon).as_f64());
            trace.step_contrast.push(t.scalar(loss.contrast).as_f64());
            let grads = t.backward(loss.total);
            let lr = lr_schedule(step, hp.warmup_steps(), total, hp.lr);
            opt.step(model.params_mut(), &grads, lr);
        }
        let vl = match &val_batch {
            Some(vb) => {
                let mut t = Tape::eval();
                let l = stage1_objective(&mut t, model, vb, 1.0);
                t.scalar(l.total).as_f64()
            }
            None => trace.step_loss.last().copied().unwrap_or(f64::NAN),
        };
        trace.val_loss.push(vl);
        if vl < best {
            best = vl;
            best_params = snapshot_params(model);
            trace.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if hp.patience > 0 && since_best >= hp.patience {
                trace.stopped_early = true;
                break;
            }
        }
    }
    restore_params(model, &best_params);
    Ok(trace)
}

//! Stage-2: time-aware bimodal fusion over the Stage-1 encoders.
//!
//! A batch always carries one modality pair `(j, k)`. Each window of the
//! pair is encoded by its (frozen, LoRA-adapted) Stage-1 encoder with every
//! patch visible, receives the spatial/temporal/token positional sum, is
//! optionally modulated by the session-position FiLM, masked, and then the
//! two token streams attend to each other through gated cross-attention.
//!
//! Tokens are laid out per slot as `(B * (P + 1)) x D`, CLS first in each
//! window. Slot 0 holds modality `j`, slot 1 modality `k`.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{attach, freeze_base, LoraConfig};
use crate::error::{invalid, shape_err, Error, Result};
use crate::module_fields;
use crate::nn::{param_digest, FeedForward, Init, LayerNorm, Linear, LinearRole, Module, MultiHeadAttention, Param, INIT_STD};
use crate::optim::{lambda_ramp, lr_schedule, Adam};
use crate::signal::{normalize_session_index, sample_mask, Epoch, MaskPlan, PatchSequence, SessionStats};
use crate::tape::{attention_forward, c, Real, Tape, Var};
use crate::unimodal::{
    augment_view, cls_rows, masked_recon_loss, masked_recon_loss_on, nt_xent, nt_xent_on, restore_params,
    snapshot_params, ContrastiveHead, EncoderConfig, LossTrace, NoisePolicy, ReconDecoder, TrainConfig,
    UnimodalEncoder, UnimodalModel,
};

/// Name prefix of the time-conditioning parameters.
pub const FILM_PREFIX: &str = "fuse.film.";

/// Architecture of the fusion model that sits on top of the Stage-1 encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossConfig {
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dec_dim: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub mask_ratio: f64,
    pub proj_dim: usize,
    pub temperature: f64,
    /// Hidden width of the time-conditioning MLP.
    pub film_hidden: usize,
    /// `false` removes the time-conditioning path entirely.
    pub time_aware: bool,
    /// Adapters placed on the Stage-1 encoders.
    pub lora: LoraConfig,
    /// Learning-rate multiplier for the time-conditioning network.
    pub film_lr_scale: f64,
}

impl CrossConfig {
    pub fn paper_scale() -> Self {
        Self {
            layers: 10,
            heads: 8,
            mlp_ratio: 4,
            dec_dim: 512,
            dec_layers: 4,
            dec_heads: 4,
            mask_ratio: 0.5,
            proj_dim: 128,
            temperature: 0.5,
            film_hidden: 512,
            time_aware: true,
            lora: LoraConfig::stage2(),
            film_lr_scale: 1.0,
        }
    }

    pub fn desk() -> Self {
        Self {
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
            dec_dim: 64,
            dec_layers: 1,
            dec_heads: 4,
            mask_ratio: 0.5,
            proj_dim: 32,
            temperature: 0.5,
            film_hidden: 64,
            time_aware: true,
            lora: LoraConfig::stage2(),
            film_lr_scale: 50.0,
        }
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers == 0 {
            return bad("stage2.layers must be positive".into());
        }
        if self.heads == 0 || embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {embed_dim} not divisible by stage2.heads {}", self.heads));
        }
        if self.dec_heads == 0 || self.dec_dim % self.dec_heads != 0 {
            return bad(format!("stage2.dec_dim {} not divisible by stage2.dec_heads {}", self.dec_dim, self.dec_heads));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("stage2.mask_ratio {} must lie in (0, 1)", self.mask_ratio));
        }
        if self.temperature <= 0.0 {
            return bad("stage2.temperature must be positive".into());
        }
        if !(self.film_lr_scale > 0.0) {
            return bad("stage2.film_lr_scale must be positive".into());
        }
        if self.mlp_ratio == 0 || self.proj_dim == 0 || self.film_hidden == 0 {
            return bad("stage2.mlp_ratio, proj_dim and film_hidden must be positive".into());
        }
        self.lora.validate()
    }
}

// -------------------------------------------------------------------------
// positional triplet

/// Spatial (per modality), temporal (per patch) and token (per modality and
/// patch) learned tables. CLS rows receive the spatial row only.
#[derive(Clone, Debug)]
pub struct PositionalTriplet<F: Real> {
    /// `M x D`
    pub spatial: Param<F>,
    /// `P x D`
    pub temporal: Param<F>,
    /// `(M * P) x D`, modality-major.
    pub token: Param<F>,
}

module_fields!(PositionalTriplet { spatial, temporal, token });

impl<F: Real> PositionalTriplet<F> {
    pub fn new(prefix: &str, modalities: usize, patches: usize, dim: usize, init: &mut Init) -> Self {
        Self {
            spatial: Param::new(format!("{prefix}.spatial"), init.normal(modalities, dim, INIT_STD)),
            temporal: Param::new(format!("{prefix}.temporal"), init.normal(patches, dim, INIT_STD)),
            token: Param::new(format!("{prefix}.token"), init.normal(modalities * patches, dim, INIT_STD)),
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.spatial.value.nrows()
    }

    pub fn num_patches(&self) -> usize {
        self.temporal.value.nrows()
    }

    /// Adds the triplet for modality `m` to `b` windows of `P + 1` tokens.
    pub fn apply(&self, t: &mut Tape<F>, h: Var, m: usize, b: usize) -> Result<Var> {
        let (mm, p) = (self.num_modalities(), self.num_patches());
        if m >= mm {
            return Err(Error::Lookup(format!("modality id {m} has no positional row ({mm} registered)")));
        }
        if t.shape(h).0 != b * (p + 1) {
            return shape_err(format!("expected {} token rows, got {}", b * (p + 1), t.shape(h).0));
        }
        let d = self.spatial.value.ncols();
        let zero = t.constant(Array2::zeros((1, d)));
        let sp = t.param(&self.spatial);
        let sp = t.gather_rows(sp, &vec![m; p + 1]);
        let tp = t.param(&self.temporal);
        let tp = t.concat_rows(&[zero, tp]);
        let tok = t.param(&self.token);
        let tok = t.concat_rows(&[zero, tok]);
        let tok_idx: Vec<usize> = (0..=p).map(|r| if r == 0 { 0 } else { 1 + m * p + r - 1 }).collect();
        let tok = t.gather_rows(tok, &tok_idx);
        let per_window = t.add(sp, tp);
        let per_window = t.add(per_window, tok);
        let tiled: Vec<usize> = (0..b * (p + 1)).map(|r| r % (p + 1)).collect();
        let addend = t.gather_rows(per_window, &tiled);
        Ok(t.add(h, addend))
    }
}

// -------------------------------------------------------------------------
// time conditioning

/// Maps the standardized session position to a per-feature scale and shift.
///
/// `γ = 1 + g_γ · LN(raw_γ)`, `β = g_β · LN(raw_β)` with both gates starting
/// at zero, so the modulation is the identity until training opens it.
#[derive(Clone, Debug)]
pub struct TimeConditioner<F: Real> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
    pub ln_gamma: LayerNorm<F>,
    pub ln_beta: LayerNorm<F>,
    pub gate_gamma: Param<F>,
    pub gate_beta: Param<F>,
}

module_fields!(TimeConditioner { fc1, fc2, ln_gamma, ln_beta, gate_gamma, gate_beta });

impl<F: Real> TimeConditioner<F> {
    pub fn new(prefix: &str, hidden: usize, dim: usize, init: &mut Init) -> Self {
        let mut fc1 = Linear::new(&format!("{prefix}.fc1"), LinearRole::Other, 1, hidden, true, init);
        let mut fc2 = Linear::new(&format!("{prefix}.fc2"), LinearRole::Other, hidden, 2 * dim, true, init);
        // fan-in scaled so the layer-normalized outputs are not dominated by eps
        fc1.weight.value = init.normal(1, hidden, 1.0);
        fc2.weight.value = init.normal(hidden, 2 * dim, 1.0 / (hidden as f64).sqrt());
        Self {
            fc1,
            fc2,
            ln_gamma: LayerNorm::new(&format!("{prefix}.ln_gamma"), dim),
            ln_beta: LayerNorm::new(&format!("{prefix}.ln_beta"), dim),
            gate_gamma: Param::new(format!("{prefix}.gate_gamma"), Array2::zeros((1, 1))),
            gate_beta: Param::new(format!("{prefix}.gate_beta"), Array2::zeros((1, 1))),
        }
    }

    pub fn dim(&self) -> usize {
        self.ln_gamma.gain.value.ncols()
    }

    /// `t_hat` is `B x 1`; returns `(γ, β)`, each `B x D`.
    pub fn forward(&self, t: &mut Tape<F>, t_hat: Var) -> (Var, Var) {
        let d = self.dim();
        let h = self.fc1.forward(t, t_hat);
        let h = t.gelu(h);
        let raw = self.fc2.forward(t, h);
        let raw_g = t.slice_cols(raw, 0, d);
        let raw_b = t.slice_cols(raw, d, d);
        let ng = self.ln_gamma.forward(t, raw_g);
        let nb = self.ln_beta.forward(t, raw_b);
        let gg = t.param(&self.gate_gamma);
        let gb = t.param(&self.gate_beta);
        let gamma = t.scale_by(ng, gg);
        let gamma = t.add_scalar(gamma, F::one());
        let beta = t.scale_by(nb, gb);
        (gamma, beta)
    }
}

/// `z ← γ ⊙ z + β` for every token; `gamma`/`beta` hold one row per window
/// (or a single row shared by all windows).
pub fn film_on<F: Real>(t: &mut Tape<F>, h: Var, gamma: Var, beta: Var, tokens_per_window: usize) -> Var {
    let rows = t.shape(h).0;
    let per = t.shape(gamma).0;
    let idx: Vec<usize> = (0..rows).map(|r| if per == 1 { 0 } else { r / tokens_per_window }).collect();
    let g = t.gather_rows(gamma, &idx);
    let b = t.gather_rows(beta, &idx);
    let scaled = t.mul(h, g);
    t.add(scaled, b)
}

// -------------------------------------------------------------------------
// gated cross-attention

/// One direction of cross-modal attention plus the target's feed-forward.
#[derive(Clone, Debug)]
pub struct GatedCrossBlock<F: Real> {
    pub ln_q: LayerNorm<F>,
    pub ln_kv: LayerNorm<F>,
    pub attn: MultiHeadAttention<F>,
    /// Sigmoid gate on the attention output, computed from the query stream.
    pub gate: Linear<F>,
    pub ln_ff: LayerNorm<F>,
    pub ff: FeedForward<F>,
}

module_fields!(GatedCrossBlock { ln_q, ln_kv, attn, gate, ln_ff, ff });

impl<F: Real> GatedCrossBlock<F> {
    pub fn new(prefix: &str, dim: usize, heads: usize, mlp_hidden: usize, init: &mut Init) -> Self {
        Self {
            ln_q: LayerNorm::new(&format!("{prefix}.ln_q"), dim),
            ln_kv: LayerNorm::new(&format!("{prefix}.ln_kv"), dim),
            attn: MultiHeadAttention::new(&format!("{prefix}.attn"), dim, heads, init),
            gate: Linear::zeros(&format!("{prefix}.gate"), LinearRole::Other, dim, dim),
            ln_ff: LayerNorm::new(&format!("{prefix}.ln_ff"), dim),
            ff: FeedForward::new(&format!("{prefix}.ff"), dim, mlp_hidden, dim, init),
        }
    }

    pub fn dim(&self) -> usize {
        self.gate.in_dim()
    }

    /// Gated attention update for `target` reading from `source`:
    /// `(σ(LN(target)·W_g + b_g) ⊙ heads(A·V)) · W_o`.
    pub fn update(&self, t: &mut Tape<F>, target: Var, source: Var, segments: usize) -> Var {
        let q = self.ln_q.forward(t, target);
        let kv = self.ln_kv.forward(t, source);
        let a = self.attn.attend(t, q, kv, segments);
        let g = self.gate.forward(t, q);
        let g = t.sigmoid(g);
        let ga = t.mul(g, a);
        self.attn.o.forward(t, ga)
    }

    /// `x + FFN(LN(x))`
    pub fn feed_forward(&self, t: &mut Tape<F>, x: Var) -> Var {
        let h = self.ln_ff.forward(t, x);
        let f = self.ff.forward(t, h);
        t.add(x, f)
    }

    /// Attention maps (one per head) and gate activations for a single
    /// target/source pair, for inspection.
    pub fn inspect(&self, target: &Array2<F>, source: &Array2<F>) -> Result<(Vec<Array2<F>>, Array2<F>)> {
        check_dims(self.dim(), target, source)?;
        let mut t = Tape::eval();
        let tg = t.constant(target.clone());
        let sc = t.constant(source.clone());
        let q = self.ln_q.forward(&mut t, tg);
        let kv = self.ln_kv.forward(&mut t, sc);
        let qq = self.attn.q.forward(&mut t, q);
        let kk = self.attn.k.forward(&mut t, kv);
        let vv = self.attn.v.forward(&mut t, kv);
        let (_, probs) = attention_forward(t.value(qq), t.value(kk), t.value(vv), self.attn.heads, 1);
        let g = self.gate.forward(&mut t, q);
        let g = t.sigmoid(g);
        Ok((probs, t.value(g).clone()))
    }
}

fn check_dims<F: Real>(d: usize, target: &Array2<F>, source: &Array2<F>) -> Result<()> {
    if target.ncols() != d || source.ncols() != d || target.nrows() == 0 || source.nrows() == 0 {
        return shape_err(format!(
            "cross-attention expects width {d}; target is {:?}, source {:?}",
            target.dim(),
            source.dim()
        ));
    }
    Ok(())
}

/// Applies one direction of the block to a single target/source pair:
/// the gated attention residual followed by the feed-forward residual.
pub fn gated_cross_attention<F: Real>(block: &GatedCrossBlock<F>, target: &Array2<F>, source: &Array2<F>) -> Result<Array2<F>> {
    check_dims(block.dim(), target, source)?;
    let mut t = Tape::eval();
    let tg = t.constant(target.clone());
    let sc = t.constant(source.clone());
    let u = block.update(&mut t, tg, sc, 1);
    let h = t.add(tg, u);
    let out = block.feed_forward(&mut t, h);
    Ok(t.value(out).clone())
}

// -------------------------------------------------------------------------
// model

/// Stage-1 encoders plus the fusion stack, decoder and contrastive head.
#[derive(Clone, Debug)]
pub struct CrossModalModel<F: Real> {
    pub cfg: CrossConfig,
    pub enc_cfg: EncoderConfig,
    pub modalities: Vec<String>,
    /// Indexed by modality id.
    pub encoders: Vec<UnimodalEncoder<F>>,
    pub triplet: PositionalTriplet<F>,
    /// `layers[l][m]` updates modality `m` in layer `l`.
    pub layers: Vec<Vec<GatedCrossBlock<F>>>,
    pub norms: Vec<LayerNorm<F>>,
    pub decoder: ReconDecoder<F>,
    /// `M x dec_dim`, tells the shared decoder which modality it rebuilds.
    pub modality_embed: Param<F>,
    pub head: ContrastiveHead<F>,
    pub conditioner: Option<TimeConditioner<F>>,
}

module_fields!(CrossModalModel { encoders, triplet, layers, norms, decoder, modality_embed, head, conditioner });

impl<F: Real> CrossModalModel<F> {
    /// Wraps trained Stage-1 encoders. Adapters are attached to the encoders
    /// and every other encoder parameter is frozen.
    pub fn new(
        cfg: &CrossConfig,
        enc_cfg: &EncoderConfig,
        modalities: Vec<String>,
        mut encoders: Vec<UnimodalEncoder<F>>,
        seed: u64,
    ) -> Result<Self> {
        enc_cfg.validate()?;
        cfg.validate(enc_cfg.embed_dim)?;
        let m = modalities.len();
        if m < 2 {
            return invalid("stage 2 needs at least two modalities");
        }
        if encoders.len() != m {
            return Err(Error::MissingDependency(format!("{} encoders for {m} modalities", encoders.len())));
        }
        let (d, p) = (enc_cfg.embed_dim, enc_cfg.num_patches());
        for (name, e) in modalities.iter().zip(&encoders) {
            if e.embed_dim() != d || e.num_patches != p || e.patch_embed.in_dim() != enc_cfg.patch_size {
                return shape_err(format!("encoder for {name} does not match the encoder config"));
            }
        }
        let mut init = Init::seeded(seed);
        for e in encoders.iter_mut() {
            attach(e, &cfg.lora, &mut init);
            freeze_base(e);
        }
        let hidden = d * cfg.mlp_ratio;
        let layers = (0..cfg.layers)
            .map(|l| {
                modalities
                    .iter()
                    .map(|name| GatedCrossBlock::new(&format!("fuse.layers.{l}.{name}"), d, cfg.heads, hidden, &mut init))
                    .collect()
            })
            .collect();
        let dec_cfg = EncoderConfig {
            dec_dim: cfg.dec_dim,
            dec_layers: cfg.dec_layers,
            dec_heads: cfg.dec_heads,
            mlp_ratio: cfg.mlp_ratio,
            ..enc_cfg.clone()
        };
        let triplet = PositionalTriplet::new("fuse.pos", m, p, d, &mut init);
        let norms = modalities.iter().map(|name| LayerNorm::new(&format!("fuse.norm.{name}"), d)).collect();
        let decoder = ReconDecoder::new("fuse.dec", d, &dec_cfg, &mut init);
        let modality_embed = Param::new("fuse.modality_embed", init.normal(m, cfg.dec_dim, INIT_STD));
        let head = ContrastiveHead::new("fuse.proj", 2 * d, d, cfg.proj_dim, &mut init);
        // built last so both variants share every other parameter for a seed
        let conditioner = cfg.time_aware.then(|| TimeConditioner::new(FILM_PREFIX.trim_end_matches('.'), cfg.film_hidden, d, &mut init));
        Ok(Self {
            cfg: cfg.clone(),
            enc_cfg: enc_cfg.clone(),
            modalities,
            encoders,
            triplet,
            layers,
            norms,
            decoder,
            modality_embed,
            head,
            conditioner,
        })
    }

    /// Builds from per-modality Stage-1 models; a missing one is an error.
    pub fn from_stage1(
        cfg: &CrossConfig,
        modalities: Vec<String>,
        stage1: Vec<Option<UnimodalModel<F>>>,
        seed: u64,
    ) -> Result<Self> {
        let mut encoders = Vec::with_capacity(stage1.len());
        let mut enc_cfg = None;
        for (name, s) in modalities.iter().zip(stage1) {
            let s = s.ok_or_else(|| Error::MissingDependency(format!("no Stage-1 encoder for modality {name}")))?;
            enc_cfg.get_or_insert_with(|| s.cfg.clone());
            encoders.push(s.encoder);
        }
        let enc_cfg = enc_cfg.ok_or_else(|| Error::MissingDependency("no Stage-1 encoders".into()))?;
        Self::new(cfg, &enc_cfg, modalities, encoders, seed)
    }

    pub fn time_aware(&self) -> bool {
        self.conditioner.is_some()
    }

    /// The same model with the time-conditioning path removed.
    pub fn without_time(&self) -> Self {
        let mut out = self.clone();
        out.conditioner = None;
        out.cfg.time_aware = false;
        out
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.enc_cfg.embed_dim
    }

    pub fn modality_id(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| Error::Lookup(format!("unknown modality {name}")))
    }

    /// Digest of every frozen parameter.
    pub fn frozen_digest(&self) -> String {
        param_digest(self.params().into_iter().filter(|p| !p.trainable))
    }

    fn check_pair(&self, pair: (usize, usize)) -> Result<()> {
        let m = self.num_modalities();
        if pair.0 >= m || pair.1 >= m {
            return Err(Error::Lookup(format!("pair {pair:?} outside the {m} registered modalities")));
        }
        if pair.0 == pair.1 {
            return invalid("a pair needs two distinct modalities");
        }
        Ok(())
    }

    /// Stage-1 encoding with every patch visible: `(B * (P + 1)) x D`.
    pub fn encode_slot(&self, t: &mut Tape<F>, m: usize, patches: &Array2<F>) -> Var {
        let p = self.enc_cfg.num_patches();
        let b = patches.nrows() / p;
        let x = t.constant(patches.clone());
        let plans = vec![MaskPlan::full(p); b];
        self.encoders[m].encode(t, x, &plans)
    }

    /// `(γ, β)` rows for a batch, or `None` for the non-time-aware model.
    pub fn film_rows(&self, t: &mut Tape<F>, t_hat: &[f64]) -> Option<(Var, Var)> {
        let cond = self.conditioner.as_ref()?;
        let col = Array2::from_shape_fn((t_hat.len(), 1), |(i, _)| c::<F>(t_hat[i]));
        let tv = t.constant(col);
        Some(cond.forward(t, tv))
    }

    /// Encoded, position-embedded and (if time-aware) modulated tokens.
    pub fn embed_tokens(&self, t: &mut Tape<F>, input: &PairInput<F>) -> Result<[Var; 2]> {
        self.check_pair(input.pair)?;
        let p = self.enc_cfg.num_patches();
        let b = input.len();
        let mut out = [None, None];
        let film = self.film_rows(t, &input.t_hat);
        for (slot, &m) in [input.pair.0, input.pair.1].iter().enumerate() {
            let x = &input.patches[slot];
            if x.nrows() != b * p || x.ncols() != self.enc_cfg.patch_size {
                return shape_err(format!("slot {slot}: expected {}x{} patches, got {:?}", b * p, self.enc_cfg.patch_size, x.dim()));
            }
            let h = self.encode_slot(t, m, x);
            let mut h = self.triplet.apply(t, h, m, b)?;
            if let Some((g, be)) = film {
                h = film_on(t, h, g, be, p + 1);
            }
            out[slot] = Some(h);
        }
        Ok([out[0].unwrap(), out[1].unwrap()])
    }

    /// Masks (when plans are given), then runs the bidirectional gated
    /// cross-attention stack. Returns `(B * (V + 1)) x D` per slot.
    ///
    /// Both directions of a layer read the layer's input tokens, so swapping
    /// the slots (and the pair) swaps the outputs.
    pub fn fuse(&self, t: &mut Tape<F>, tokens: [Var; 2], pair: (usize, usize), plans: Option<[&[MaskPlan]; 2]>) -> [Var; 2] {
        let p = self.enc_cfg.num_patches();
        let b = t.shape(tokens[0]).0 / (p + 1);
        let (mut h0, mut h1) = match plans {
            Some([p0, p1]) => (select_visible(t, tokens[0], p0, p), select_visible(t, tokens[1], p1, p)),
            None => (tokens[0], tokens[1]),
        };
        let (j, k) = pair;
        for layer in &self.layers {
            let u0 = layer[j].update(t, h0, h1, b);
            let u1 = layer[k].update(t, h1, h0, b);
            h0 = t.add(h0, u0);
            h1 = t.add(h1, u1);
            h0 = layer[j].feed_forward(t, h0);
            h1 = layer[k].feed_forward(t, h1);
        }
        [self.norms[j].forward(t, h0), self.norms[k].forward(t, h1)]
    }

    /// Rebuilds all patches of both slots: `(B * P) x patch_size` each.
    pub fn decode(&self, t: &mut Tape<F>, fused: [Var; 2], pair: (usize, usize), plans: [&[MaskPlan]; 2]) -> [Var; 2] {
        let b = plans[0].len();
        let p = self.enc_cfg.num_patches();
        let latent = t.concat_rows(&fused);
        let all: Vec<MaskPlan> = plans[0].iter().chain(plans[1]).cloned().collect();
        let me = t.param(&self.modality_embed);
        let idx: Vec<usize> = (0..2 * b).map(|w| if w < b { pair.0 } else { pair.1 }).collect();
        let extra = t.gather_rows(me, &idx);
        let pred = self.decoder.forward(t, latent, &all, Some(extra));
        let first: Vec<usize> = (0..b * p).collect();
        let second: Vec<usize> = (b * p..2 * b * p).collect();
        [t.gather_rows(pred, &first), t.gather_rows(pred, &second)]
    }

    /// Concatenated CLS rows, `B x 2D`.
    pub fn cls_pair(&self, t: &mut Tape<F>, fused: [Var; 2], tokens_per_window: usize) -> Var {
        let b = t.shape(fused[0]).0 / tokens_per_window;
        let c0 = cls_rows(t, fused[0], b, tokens_per_window);
        let c1 = cls_rows(t, fused[1], b, tokens_per_window);
        t.concat_cols(&[c0, c1])
    }
}

/// CLS plus the visible patch rows of each window, in plan order.
fn select_visible<F: Real>(t: &mut Tape<F>, h: Var, plans: &[MaskPlan], p: usize) -> Var {
    let mut order = Vec::new();
    for (bi, plan) in plans.iter().enumerate() {
        order.push(bi * (p + 1));
        order.extend(plan.visible.iter().map(|&v| bi * (p + 1) + 1 + v));
    }
    t.gather_rows(h, &order)
}

// -------------------------------------------------------------------------
// single-example state API

/// Two stacked token sets for one aligned window pair.
#[derive(Clone, Debug, PartialEq)]
pub struct BimodalState<F: Real> {
    /// `(P + 1) x D` per slot, CLS first.
    pub tokens: [Array2<F>; 2],
    pub pair: (usize, usize),
    pub t_hat: f64,
    /// Per-slot plans over patch rows; `None` means fully visible.
    pub mask_plans: Option<[MaskPlan; 2]>,
}

impl<F: Real> BimodalState<F> {
    /// Tokens that survive masking, `(V + 1) x D` per slot.
    pub fn visible_tokens(&self) -> [Array2<F>; 2] {
        match &self.mask_plans {
            None => self.tokens.clone(),
            Some(plans) => [0, 1].map(|s| {
                let mut idx = vec![0];
                idx.extend(plans[s].visible.iter().map(|v| v + 1));
                self.tokens[s].select(Axis(0), &idx)
            }),
        }
    }
}

/// Uniform unordered pair of distinct modalities, in random order.
pub fn sample_modality_pair(m: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if m < 2 {
        return invalid(format!("need at least two modalities to form a pair, got {m}"));
    }
    let a = rng.random_range(0..m);
    let mut b = rng.random_range(0..m - 1);
    if b >= a {
        b += 1;
    }
    Ok((a, b))
}

/// Encodes an aligned window pair with its Stage-1 encoders (all patches
/// visible) and attaches the standardized session position.
pub fn stack_bimodal<F: Real>(
    e_j: &Epoch,
    e_k: &Epoch,
    encoders: &[UnimodalEncoder<F>],
    stats: &SessionStats,
) -> Result<BimodalState<F>> {
    if e_j.session_id != e_k.session_id || e_j.segment_index != e_k.segment_index {
        return Err(Error::Alignment(format!(
            "windows from session {} #{} and session {} #{} are not aligned",
            e_j.session_id, e_j.segment_index, e_k.session_id, e_k.segment_index
        )));
    }
    if e_j.modality == e_k.modality {
        return invalid("a pair needs two distinct modalities");
    }
    let mut tokens = Vec::with_capacity(2);
    for e in [e_j, e_k] {
        let enc = encoders
            .get(e.modality)
            .ok_or_else(|| Error::MissingDependency(format!("no encoder for modality id {}", e.modality)))?;
        let seq = crate::signal::patchify::<F>(e, enc.patch_embed.in_dim())?;
        let plan = MaskPlan::full(seq.num_patches());
        tokens.push(crate::unimodal::encode_visible(enc, &seq, &plan)?);
    }
    let k = tokens.pop().unwrap();
    let j = tokens.pop().unwrap();
    Ok(BimodalState {
        tokens: [j, k],
        pair: (e_j.modality, e_k.modality),
        t_hat: normalize_session_index(e_j.segment_index, stats),
        mask_plans: None,
    })
}

pub fn apply_positional_triplet<F: Real>(state: &BimodalState<F>, triplet: &PositionalTriplet<F>) -> Result<BimodalState<F>> {
    let mut out = state.clone();
    let mut t = Tape::eval();
    for (slot, &m) in [state.pair.0, state.pair.1].iter().enumerate() {
        if state.tokens[slot].ncols() != triplet.spatial.value.ncols() {
            return shape_err("token width does not match the positional tables");
        }
        let h = t.constant(state.tokens[slot].clone());
        let h = triplet.apply(&mut t, h, m, 1)?;
        out.tokens[slot] = t.value(h).clone();
    }
    Ok(out)
}

/// `(γ, β)` for one standardized position.
pub fn film_params<F: Real>(cond: &TimeConditioner<F>, t_hat: f64) -> (Array1<F>, Array1<F>) {
    let mut t = Tape::eval();
    let tv = t.constant(Array2::from_elem((1, 1), c::<F>(t_hat)));
    let (g, b) = cond.forward(&mut t, tv);
    (t.value(g).row(0).to_owned(), t.value(b).row(0).to_owned())
}

pub fn apply_time_film<F: Real>(state: &BimodalState<F>, gamma: &Array1<F>, beta: &Array1<F>) -> Result<BimodalState<F>> {
    let d = state.tokens[0].ncols();
    if gamma.len() != d || beta.len() != d {
        return shape_err(format!("FiLM vectors have length {}/{}, tokens have width {d}", gamma.len(), beta.len()));
    }
    let mut out = state.clone();
    let mut t = Tape::eval();
    let g = t.constant(gamma.clone().insert_axis(Axis(0)));
    let b = t.constant(beta.clone().insert_axis(Axis(0)));
    for slot in 0..2 {
        let rows = state.tokens[slot].nrows();
        let h = t.constant(state.tokens[slot].clone());
        let h = film_on(&mut t, h, g, b, rows);
        out.tokens[slot] = t.value(h).clone();
    }
    Ok(out)
}

/// Independent patch-row masks per slot; CLS rows always survive.
pub fn mask_stage2<F: Real>(state: &BimodalState<F>, ratio: f64, rng: &mut impl Rng) -> Result<BimodalState<F>> {
    let p = state.tokens[0].nrows() - 1;
    let plans = [sample_mask(p, ratio, rng)?, sample_mask(p, ratio, rng)?];
    let mut out = state.clone();
    out.mask_plans = Some(plans);
    Ok(out)
}

/// Stacking, positional triplet and (for the time-aware model) FiLM.
pub fn prepare_state<F: Real>(model: &CrossModalModel<F>, e_j: &Epoch, e_k: &Epoch, stats: &SessionStats) -> Result<BimodalState<F>> {
    let state = stack_bimodal(e_j, e_k, &model.encoders, stats)?;
    let state = apply_positional_triplet(&state, &model.triplet)?;
    match &model.conditioner {
        Some(cond) => {
            let (g, b) = film_params(cond, state.t_hat);
            apply_time_film(&state, &g, &b)
        }
        None => Ok(state),
    }
}

/// Result of running the fusion stack on one prepared state.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossOutput<F: Real> {
    /// `(V + 1) x D` per slot.
    pub fused: [Array2<F>; 2],
    pub recon: [PatchSequence<F>; 2],
    /// Projected, L2-normalized concatenated CLS, `1 x proj_dim`.
    pub projection: Array2<F>,
}

/// Runs masking (per the state's plans), fusion, reconstruction and the
/// contrastive projection on a state that already carries its positional
/// and time embeddings.
pub fn crossmodal_forward<F: Real>(model: &CrossModalModel<F>, state: &BimodalState<F>) -> Result<CrossOutput<F>> {
    model.check_pair(state.pair)?;
    let p = model.enc_cfg.num_patches();
    let d = model.embed_dim();
    for tk in &state.tokens {
        if tk.dim() != (p + 1, d) {
            return shape_err(format!("state tokens are {:?}, expected {:?}", tk.dim(), (p + 1, d)));
        }
    }
    let plans = match &state.mask_plans {
        Some(pl) => pl.clone(),
        None => [MaskPlan::full(p), MaskPlan::full(p)],
    };
    if plans[0].num_patches != p || plans[1].num_patches != p || plans[0].num_visible() != plans[1].num_visible() {
        return shape_err("mask plans must cover P patches and keep the same count per slot");
    }
    let mut t = Tape::eval();
    let h0 = t.constant(state.tokens[0].clone());
    let h1 = t.constant(state.tokens[1].clone());
    let pl0 = std::slice::from_ref(&plans[0]);
    let pl1 = std::slice::from_ref(&plans[1]);
    let fused = model.fuse(&mut t, [h0, h1], state.pair, Some([pl0, pl1]));
    let recon = model.decode(&mut t, fused, state.pair, [pl0, pl1]);
    let cls = model.cls_pair(&mut t, fused, plans[0].num_visible() + 1);
    let z = model.head.forward(&mut t, cls);
    Ok(CrossOutput {
        fused: fused.map(|v| t.value(v).clone()),
        recon: recon.map(|v| PatchSequence { patches: t.value(v).clone() }),
        projection: t.value(z).clone(),
    })
}

/// Mean of the two masked reconstruction losses plus `λ` times NT-Xent
/// between the projected CLS pairs of two views.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss<F: Real>(
    recon: [&PatchSequence<F>; 2],
    targets: [&PatchSequence<F>; 2],
    plans: [&MaskPlan; 2],
    z_view1: &Array2<F>,
    z_view2: &Array2<F>,
    temperature: f64,
    lambda: f64,
) -> Result<F> {
    let rj = masked_recon_loss(recon[0], targets[0], plans[0])?;
    let rk = masked_recon_loss(recon[1], targets[1], plans[1])?;
    let con = nt_xent(z_view1, z_view2, temperature)?;
    Ok((rj + rk) * c::<F>(0.5) + con * c::<F>(lambda))
}

// -------------------------------------------------------------------------
// batched training

/// A batch of aligned windows for one modality pair.
#[derive(Clone, Debug)]
pub struct PairInput<F: Real> {
    pub pair: (usize, usize),
    /// `(B * P) x patch_size` per slot.
    pub patches: [Array2<F>; 2],
    pub t_hat: Vec<f64>,
}

impl<F: Real> PairInput<F> {
    pub fn len(&self) -> usize {
        self.t_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_hat.is_empty()
    }

    /// Stacks aligned groups (one window per modality id) for `pair`,
    /// optionally perturbing each window.
    pub fn from_groups(
        groups: &[&[Epoch]],
        pair: (usize, usize),
        cfg: &EncoderConfig,
        stats: &SessionStats,
        mut perturb: Option<(&NoisePolicy, &mut ChaCha8Rng)>,
    ) -> Result<Self> {
        if groups.is_empty() {
            return invalid("empty batch");
        }
        let mut data = [Vec::new(), Vec::new()];
        let mut t_hat = Vec::with_capacity(groups.len());
        for g in groups {
            let (ej, ek) = aligned_pair(g, pair)?;
            for (slot, e) in [ej, ek].into_iter().enumerate() {
                if e.samples.len() != cfg.epoch_len {
                    return shape_err(format!("window length {} != {}", e.samples.len(), cfg.epoch_len));
                }
                match perturb.as_mut() {
                    Some((policy, rng)) => {
                        let v = augment_view(e, policy, *rng);
                        data[slot].extend(v.samples.iter().map(|&x| F::lift32(x)));
                    }
                    None => data[slot].extend(e.samples.iter().map(|&x| F::lift32(x))),
                }
            }
            t_hat.push(normalize_session_index(ej.segment_index, stats));
        }
        let rows = groups.len() * cfg.num_patches();
        let [d0, d1] = data;
        Ok(Self {
            pair,
            patches: [
                Array2::from_shape_vec((rows, cfg.patch_size), d0).expect("sized"),
                Array2::from_shape_vec((rows, cfg.patch_size), d1).expect("sized"),
            ],
            t_hat,
        })
    }
}

/// The two windows of `pair` from an aligned group, checked for alignment.
pub fn aligned_pair(group: &[Epoch], pair: (usize, usize)) -> Result<(&Epoch, &Epoch)> {
    let get = |m: usize| {
        group
            .get(m)
            .filter(|e| e.modality == m)
            .ok_or_else(|| Error::Lookup(format!("aligned group has no window for modality id {m}")))
    };
    let (ej, ek) = (get(pair.0)?, get(pair.1)?);
    if ej.session_id != ek.session_id || ej.segment_index != ek.segment_index {
        return Err(Error::Alignment(format!(
            "modalities {} and {} disagree on session/segment",
            pair.0, pair.1
        )));
    }
    Ok((ej, ek))
}

/// Two perturbed views of the same aligned windows, each with its own masks.
#[derive(Clone, Debug)]
pub struct Stage2Batch<F: Real> {
    pub views: [PairInput<F>; 2],
    /// `plans[view][slot]`, one plan per window.
    pub plans: [[Vec<MaskPlan>; 2]; 2],
}

impl<F: Real> Stage2Batch<F> {
    pub fn sample(
        groups: &[&[Epoch]],
        pair: (usize, usize),
        enc_cfg: &EncoderConfig,
        mask_ratio: f64,
        stats: &SessionStats,
        policy: &NoisePolicy,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let v0 = PairInput::from_groups(groups, pair, enc_cfg, stats, Some((policy, rng)))?;
        let v1 = PairInput::from_groups(groups, pair, enc_cfg, stats, Some((policy, rng)))?;
        let p = enc_cfg.num_patches();
        let draw = |rng: &mut ChaCha8Rng| -> Result<Vec<MaskPlan>> {
            (0..groups.len()).map(|_| sample_mask(p, mask_ratio, rng)).collect()
        };
        let plans = [[draw(rng)?, draw(rng)?], [draw(rng)?, draw(rng)?]];
        Ok(Self { views: [v0, v1], plans })
    }

    pub fn len(&self) -> usize {
        self.views[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.views[0].is_empty()
    }
}

pub struct Stage2Loss {
    pub total: Var,
    pub recon: Var,
    pub contrast: Var,
}

/// Builds the Stage-2 objective: masked reconstruction of view 0 for both
/// slots plus NT-Xent between the two views' projected CLS pairs.
pub fn stage2_objective<F: Real>(t: &mut Tape<F>, model: &CrossModalModel<F>, batch: &Stage2Batch<F>, lambda_con: f64) -> Result<Stage2Loss> {
    let pair = batch.views[0].pair;
    let mut zs = Vec::with_capacity(2);
    let mut recon = None;
    for (vi, view) in batch.views.iter().enumerate() {
        let tokens = model.embed_tokens(t, view)?;
        let plans = [&batch.plans[vi][0][..], &batch.plans[vi][1][..]];
        let fused = model.fuse(t, tokens, pair, Some(plans));
        let tpw = plans[0][0].num_visible() + 1;
        let cls = model.cls_pair(t, fused, tpw);
        zs.push(model.head.forward(t, cls));
        if vi == 0 {
            let preds = model.decode(t, fused, pair, plans);
            let tj = t.constant(view.patches[0].clone());
            let tk = t.constant(view.patches[1].clone());
            let rj = masked_recon_loss_on(t, preds[0], tj, plans[0]);
            let rk = masked_recon_loss_on(t, preds[1], tk, plans[1]);
            let s = t.add(rj, rk);
            recon = Some(t.scale(s, c::<F>(0.5)));
        }
    }
    let recon = recon.expect("view 0 is always reconstructed");
    let contrast = nt_xent_on(t, zs[0], zs[1], model.cfg.temperature);
    let weighted = t.scale(contrast, c::<F>(lambda_con));
    let total = t.add(recon, weighted);
    Ok(Stage2Loss { total, recon, contrast })
}

/// Modality pair drawn for each training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Trace {
    pub loss: LossTrace,
    pub pairs: Vec<(usize, usize)>,
    pub frozen_digest: String,
}

/// Trains the fusion stack (and encoder adapters) with a fresh modality
/// pair for every step. Frozen parameters are verified unchanged.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2<F: Real>(
    model: &mut CrossModalModel<F>,
    train: &[&[Epoch]],
    val: &[&[Epoch]],
    stats: &SessionStats,
    hp: &TrainConfig,
    policy: &NoisePolicy,
    seed: u64,
) -> Result<Stage2Trace> {
    if train.is_empty() {
        return invalid("empty Stage-2 training set");
    }
    hp.validate()?;
    let m = model.num_modalities();
    for g in train.iter().chain(val) {
        if g.len() != m {
            return Err(Error::Alignment(format!("aligned group has {} windows for {m} modalities", g.len())));
        }
    }
    let before = model.frozen_digest();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let val_batch = if val.len() >= 2 {
        let mut vrng = ChaCha8Rng::seed_from_u64(seed ^ 0x0005_7a6e_2000);
        let k = hp.val_size.clamp(2, val.len());
        let take: Vec<&[Epoch]> = (0..k).map(|i| val[i * val.len() / k]).collect();
        let pair = sample_modality_pair(m, &mut vrng)?;
        Some(Stage2Batch::<F>::sample(&take, pair, &model.enc_cfg, model.cfg.mask_ratio, stats, policy, &mut vrng)?)
    } else {
        None
    };
    let mut opt = Adam::new(hp.adam);
    let mut trace = Stage2Trace::default();
    let mut best = f64::INFINITY;
    let mut best_params = snapshot_params(model);
    let mut since_best = 0;
    let total = hp.total_steps();
    let ramp = hp.iters_per_epoch * hp.lambda_ramp_epochs;
    for epoch in 0..hp.max_epochs {
        for it in 0..hp.iters_per_epoch {
            let step = epoch * hp.iters_per_epoch + it;
            let pair = sample_modality_pair(m, &mut rng)?;
            let picks: Vec<&[Epoch]> = (0..hp.batch_size).map(|_| train[rng.random_range(0..train.len())]).collect();
            let batch = Stage2Batch::<F>::sample(&picks, pair, &model.enc_cfg, model.cfg.mask_ratio, stats, policy, &mut rng)?;
            let lambda = lambda_ramp(step, ramp);
            let mut t = Tape::new(true, rng.random());
            let loss = stage2_objective(&mut t, model, &batch, lambda)?;
            trace.pairs.push(pair);
            trace.loss.step_loss.push(t.scalar(loss.total).as_f64());
            trace.loss.step_recon.push(t.scalar(loss.recon).as_f64());
            trace.loss.step_contrast.push(t.scalar(loss.contrast).as_f64());
            let grads = t.backward(loss.total);
            let lr = lr_schedule(step, hp.warmup_steps(), total, hp.lr);
            let film = model.cfg.film_lr_scale;
            opt.step_scaled(model.params_mut(), &grads, lr, |p| if p.name.starts_with(FILM_PREFIX) { film } else { 1.0 });
        }
        let vl = match &val_batch {
            Some(vb) => {
                let mut t = Tape::eval();
                let l = stage2_objective(&mut t, model, vb, 1.0)?;
                t.scalar(l.total).as_f64()
            }
            None => trace.loss.step_loss.last().copied().unwrap_or(f64::NAN),
        };
        trace.loss.val_loss.push(vl);
        if vl < best {
            best = vl;
            best_params = snapshot_params(model);
            trace.loss.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if hp.patience > 0 && since_best >= hp.patience {
                trace.loss.stopped_early = true;
                break;
            }
        }
    }
    restore_params(model, &best_params);
    let after = model.frozen_digest();
    if after != before {
        return Err(Error::InvalidInput("frozen parameters changed during Stage-2 training".into()));
    }
    trace.frozen_digest = after;
    Ok(trace)
}

/// Attaches fine-tuning adapters to the fusion stack and freezes every
/// other parameter, including the encoders' own adapters.
pub fn prepare_finetune<F: Real>(model: &mut CrossModalModel<F>, lora: &LoraConfig, seed: u64) -> Result<Vec<String>> {
    lora.validate()?;
    let mut init = Init::seeded(seed);
    let targets = attach(&mut model.layers, lora, &mut init);
    for p in model.params_mut() {
        p.trainable = false;
    }
    let keep: Vec<String> = targets.iter().map(|t| format!("{}{t}.", crate::adapters::LORA_PREFIX)).collect();
    for p in model.layers.params_mut() {
        p.trainable = keep.iter().any(|k| p.name.starts_with(k));
    }
    Ok(targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::patchify;
    use ndarray::array;

    pub(crate) fn tiny_enc() -> EncoderConfig {
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

    fn tiny_cross() -> CrossConfig {
        CrossConfig {
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            dec_dim: 8,
            dec_layers: 1,
            dec_heads: 2,
            mask_ratio: 0.5,
            proj_dim: 4,
            temperature: 0.5,
            film_hidden: 6,
            time_aware: true,
            lora: LoraConfig { rank: 2, alpha: 4.0, dropout: 0.0, include_mlp: false },
            film_lr_scale: 1.0,
        }
    }

    fn tiny_model(m: usize, seed: u64) -> CrossModalModel<f32> {
        let ec = tiny_enc();
        let names: Vec<String> = (0..m).map(|i| format!("m{i}")).collect();
        let encs = names
            .iter()
            .enumerate()
            .map(|(i, n)| UnimodalModel::<f32>::new(n, &ec, 100 + i as u64).unwrap().encoder)
            .collect();
        CrossModalModel::new(&tiny_cross(), &ec, names, encs, seed).unwrap()
    }

    fn window(modality: usize, seg: usize, seed: u64) -> Epoch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (0..32).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Epoch::new(modality, s, 3, seg)
    }

    fn stats() -> SessionStats {
        SessionStats { mean_len: 20.0, std_len: 5.0 }
    }

    #[test]
    fn pair_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (a, b) = sample_modality_pair(2, &mut rng).unwrap();
            assert!(a != b && a < 2 && b < 2);
        }
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..20000 {
            let (a, b) = sample_modality_pair(16, &mut rng).unwrap();
            seen.insert((a.min(b), a.max(b)));
        }
        assert_eq!(seen.len(), 120);
        assert!(sample_modality_pair(1, &mut rng).is_err());
    }

    #[test]
    fn stacking_shapes_and_alignment() {
        let model = tiny_model(3, 0);
        let s = stack_bimodal(&window(0, 4, 1), &window(2, 4, 2), &model.encoders, &stats()).unwrap();
        assert_eq!(s.tokens[0].dim(), (9, 8));
        assert_eq!(s.pair, (0, 2));
        assert!((s.t_hat + 3.2).abs() < 1e-12);
        let again = stack_bimodal(&window(0, 4, 1), &window(2, 4, 2), &model.encoders, &stats()).unwrap();
        assert_eq!(s, again);
        let err = stack_bimodal(&window(0, 4, 1), &window(2, 5, 2), &model.encoders, &stats());
        assert!(matches!(err, Err(Error::Alignment(_))));
    }

    #[test]
    fn triplet_arithmetic() {
        let mut init = Init::seeded(0);
        let mut tri = PositionalTriplet::<f64>::new("p", 2, 1, 2, &mut init);
        tri.spatial.value = array![[1.0, 0.0], [0.0, 0.0]];
        tri.temporal.value = array![[0.0, 1.0]];
        tri.token.value = array![[1.0, 1.0], [0.0, 0.0]];
        let state = BimodalState {
            tokens: [Array2::zeros((2, 2)), Array2::zeros((2, 2))],
            pair: (0, 1),
            t_hat: 0.0,
            mask_plans: None,
        };
        let out = apply_positional_triplet(&state, &tri).unwrap();
        assert_eq!(out.tokens[0], array![[1.0, 0.0], [2.0, 2.0]]);
        assert_eq!(out.tokens[1], array![[0.0, 0.0], [0.0, 1.0]]);

        let swapped = BimodalState { pair: (1, 0), ..state.clone() };
        let out2 = apply_positional_triplet(&swapped, &tri).unwrap();
        assert_eq!(out2.tokens[0], out.tokens[1]);
        assert_eq!(out2.tokens[1], out.tokens[0]);

        let bad = BimodalState { pair: (0, 5), ..state };
        assert!(matches!(apply_positional_triplet(&bad, &tri), Err(Error::Lookup(_))));
    }

    #[test]
    fn zero_triplet_is_identity() {
        let mut init = Init::seeded(0);
        let mut tri = PositionalTriplet::<f32>::new("p", 2, 3, 4, &mut init);
        for p in tri.params_mut() {
            p.value.fill(0.0);
        }
        let state = BimodalState {
            tokens: [init.normal(4, 4, 1.0), init.normal(4, 4, 1.0)],
            pair: (1, 0),
            t_hat: 0.5,
            mask_plans: None,
        };
        assert_eq!(apply_positional_triplet(&state, &tri).unwrap(), state);
    }

    #[test]
    fn film_identity_at_init_and_arithmetic() {
        let mut init = Init::seeded(3);
        let cond = TimeConditioner::<f32>::new("f", 5, 4, &mut init);
        for th in [-3.0, 0.0, 1.7] {
            let (g, b) = film_params(&cond, th);
            assert!(g.iter().all(|&x| x == 1.0));
            assert!(b.iter().all(|&x| x == 0.0));
        }
        let state = BimodalState {
            tokens: [array![[0.5f32, -0.5]], array![[1.0f32, 2.0]]],
            pair: (0, 1),
            t_hat: 0.0,
            mask_plans: None,
        };
        let out = apply_time_film(&state, &array![2.0, 2.0], &array![1.0, 1.0]).unwrap();
        assert_eq!(out.tokens[0], array![[2.0, 0.0]]);
        let zero = apply_time_film(&state, &array![0.0, 0.0], &array![0.3, -0.1]).unwrap();
        assert_eq!(zero.tokens[1], array![[0.3, -0.1]]);
        assert!(matches!(apply_time_film(&state, &array![1.0], &array![0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn film_hand_evaluated() {
        let mut init = Init::seeded(0);
        let mut cond = TimeConditioner::<f64>::new("f", 2, 2, &mut init);
        cond.fc1.weight.value = array![[1.0, -1.0]];
        cond.fc1.bias.as_mut().unwrap().value = array![[0.0, 0.0]];
        cond.fc2.weight.value = array![[1.0, 0.0, 2.0, 0.0], [0.0, 1.0, 0.0, 3.0]];
        cond.fc2.bias.as_mut().unwrap().value = Array2::zeros((1, 4));
        cond.gate_beta.value[[0, 0]] = 1.0;
        let th = 0.8;
        let (g, b) = film_params(&cond, th);
        assert_eq!(g, array![1.0, 1.0]);
        let h = [crate::tape::gelu(th), crate::tape::gelu(-th)];
        let raw = [2.0 * h[0], 3.0 * h[1]];
        let mean = (raw[0] + raw[1]) / 2.0;
        let var = ((raw[0] - mean).powi(2) + (raw[1] - mean).powi(2)) / 2.0;
        let want = raw.map(|r| (r - mean) / (var + crate::nn::LN_EPS).sqrt());
        assert!((b[0] - want[0]).abs() < 1e-12 && (b[1] - want[1]).abs() < 1e-12);

        cond.gate_gamma.value[[0, 0]] = 0.5;
        let (g0, b0) = film_params(&cond, 0.0);
        let (g1, b1) = film_params(&cond, 1.0);
        assert!(g0 != g1 || b0 != b1);
    }

    #[test]
    fn stage2_masking() {
        let model = tiny_model(2, 0);
        let s = stack_bimodal(&window(0, 1, 1), &window(1, 1, 2), &model.encoders, &stats()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let m = mask_stage2(&s, 0.5, &mut rng).unwrap();
            let plans = m.mask_plans.as_ref().unwrap();
            for pl in plans {
                assert_eq!(pl.num_visible(), 4);
                let mut all: Vec<usize> = pl.masked.iter().chain(&pl.visible).copied().collect();
                all.sort();
                assert_eq!(all, (0..8).collect::<Vec<_>>());
            }
            let vis = m.visible_tokens();
            assert_eq!(vis[0].dim(), (5, 8));
            assert_eq!(vis[0].row(0), s.tokens[0].row(0));
        }
        assert!(mask_stage2(&s, 1.0, &mut rng).is_err());
    }

    #[test]
    fn gate_closed_removes_attention() {
        let mut init = Init::seeded(5);
        let mut blk = GatedCrossBlock::<f64>::new("b", 4, 2, 8, &mut init);
        blk.gate.bias.as_mut().unwrap().value.fill(-30.0);
        let tg = init.normal(3, 4, 1.0);
        let src = init.normal(5, 4, 1.0);
        let out = gated_cross_attention(&blk, &tg, &src).unwrap();
        let mut t = Tape::eval();
        let x = t.constant(tg.clone());
        let ff_only = blk.feed_forward(&mut t, x);
        let diff = (&out - t.value(ff_only)).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-9, "{diff}");
        let (probs, gate) = blk.inspect(&tg, &src).unwrap();
        assert!(gate.iter().all(|&g| g > 0.0 && g < 1.0));
        for p in probs {
            for r in p.rows() {
                assert!((r.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_source_token() {
        let mut init = Init::seeded(6);
        let blk = GatedCrossBlock::<f64>::new("b", 4, 2, 8, &mut init);
        let tg = init.normal(3, 4, 1.0);
        let src = init.normal(1, 4, 1.0);
        let mut t = Tape::eval();
        let tv = t.constant(tg.clone());
        let sv = t.constant(src.clone());
        let u = blk.update(&mut t, tv, sv, 1);
        // gate starts at 0.5 everywhere; the attention output is V of the only token
        let kv = blk.ln_kv.forward(&mut t, sv);
        let v = blk.attn.v.forward(&mut t, kv);
        let vrow = t.value(v).row(0).to_owned();
        let half = Array2::from_shape_fn((3, 4), |(_, j)| 0.5 * vrow[j]);
        let hv = t.constant(half);
        let want = blk.attn.o.forward(&mut t, hv);
        let diff = (t.value(u) - t.value(want)).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-12);
        assert!(gated_cross_attention(&blk, &tg, &Array2::zeros((1, 3))).is_err());
    }

    #[test]
    fn forward_shapes_and_bcnet_identity_at_init() {
        let ta = tiny_model(3, 9);
        let plain = ta.without_time();
        let (ej, ek) = (window(2, 7, 1), window(0, 7, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s_ta = prepare_state(&ta, &ej, &ek, &stats()).unwrap();
        let s_pl = prepare_state(&plain, &ej, &ek, &stats()).unwrap();
        assert_eq!(s_ta, s_pl);
        let s = mask_stage2(&s_ta, 0.5, &mut rng).unwrap();
        let a = crossmodal_forward(&ta, &s).unwrap();
        let b = crossmodal_forward(&plain, &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fused[0].dim(), (5, 8));
        assert_eq!(a.recon[1].patches.dim(), (8, 4));
        assert_eq!(a.projection.dim(), (1, 4));
    }

    #[test]
    fn swap_equivariance() {
        let model = tiny_model(3, 2);
        let (ej, ek) = (window(0, 3, 1), window(1, 3, 2));
        let s = prepare_state(&model, &ej, &ek, &stats()).unwrap();
        let sw = prepare_state(&model, &ek, &ej, &stats()).unwrap();
        assert_eq!(s.tokens[0], sw.tokens[1]);
        let a = crossmodal_forward(&model, &s).unwrap();
        let b = crossmodal_forward(&model, &sw).unwrap();
        for slot in 0..2 {
            let d = (&a.fused[slot] - &b.fused[1 - slot]).mapv(f32::abs).fold(0.0f32, |x, &y| x.max(y));
            assert!(d < 1e-6, "{d}");
        }
    }

    #[test]
    fn batched_path_matches_state_path() {
        let model = tiny_model(2, 4);
        let groups: Vec<Vec<Epoch>> = (0..3).map(|i| vec![window(0, i, 10 + i as u64), window(1, i, 20 + i as u64)]).collect();
        let refs: Vec<&[Epoch]> = groups.iter().map(|g| g.as_slice()).collect();
        let input = PairInput::<f32>::from_groups(&refs, (1, 0), &model.enc_cfg, &stats(), None).unwrap();
        let mut t = Tape::eval();
        let tokens = model.embed_tokens(&mut t, &input).unwrap();
        let fused = model.fuse(&mut t, tokens, (1, 0), None);
        let cls = model.cls_pair(&mut t, fused, 9);
        for (i, g) in groups.iter().enumerate() {
            let s = prepare_state(&model, &g[1], &g[0], &stats()).unwrap();
            let out = crossmodal_forward(&model, &s).unwrap();
            let want: Vec<f32> = out.fused[0].row(0).iter().chain(out.fused[1].row(0).iter()).copied().collect();
            let got = t.value(cls).row(i).to_vec();
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn stage2_loss_examples() {
        let seq = patchify::<f64>(&Epoch::new(0, (0..8).map(|x| x as f32).collect(), 0, 0), 4).unwrap();
        let plan = MaskPlan::from_masked(2, vec![1]).unwrap();
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        let l = stage2_loss([&seq, &seq], [&seq, &seq], [&plan, &plan], &z, &z, 0.5, 0.0).unwrap();
        assert_eq!(l, 0.0);
        let mut off = seq.clone();
        off.patches.row_mut(1).mapv_inplace(|x| x + 0.4f64.sqrt());
        let con = nt_xent(&z, &z, 0.5).unwrap();
        let l = stage2_loss([&off, &seq], [&seq, &seq], [&plan, &plan], &z, &z, 0.5, 1.0).unwrap();
        assert!((l - (0.2 + con)).abs() < 1e-12);
    }

    #[test]
    fn stage2_training_reduces_loss_and_keeps_frozen() {
        let mut model = tiny_model(3, 1);
        let groups: Vec<Vec<Epoch>> = (0..24)
            .map(|i| (0..3).map(|m| window(m, i % 20, (i * 3 + m) as u64)).collect())
            .collect();
        let refs: Vec<&[Epoch]> = groups.iter().map(|g| g.as_slice()).collect();
        let hp = TrainConfig {
            batch_size: 4,
            iters_per_epoch: 10,
            max_epochs: 6,
            warmup_epochs: 1,
            patience: 0,
            lr: 3e-3,
            adam: Default::default(),
            lambda_ramp_epochs: 1,
            val_size: 4,
        };
        let policy = NoisePolicy { sigma: vec![0.05; 3] };
        let before = model.frozen_digest();
        let base: Vec<Array2<f32>> = model.encoders[0].params().iter().filter(|p| !p.trainable).map(|p| p.value.clone()).collect();
        let trace = train_stage2(&mut model, &refs[..20], &refs[20..], &stats(), &hp, &policy, 5).unwrap();
        assert_eq!(trace.frozen_digest, before);
        let after: Vec<Array2<f32>> = model.encoders[0].params().iter().filter(|p| !p.trainable).map(|p| p.value.clone()).collect();
        assert_eq!(base, after);
        let l = &trace.loss.step_loss;
        // the contrastive weight ramps in over the first epoch
        let head: f64 = l[10..20].iter().sum::<f64>() / 10.0;
        let tail: f64 = l[l.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
        let mut again = tiny_model(3, 1);
        let t2 = train_stage2(&mut again, &refs[..20], &refs[20..], &stats(), &hp, &policy, 5).unwrap();
        assert_eq!(trace, t2);
    }

    #[test]
    fn missing_encoder_is_reported() {
        let ec = tiny_enc();
        let s1 = vec![Some(UnimodalModel::<f32>::new("a", &ec, 0).unwrap()), None];
        let err = CrossModalModel::from_stage1(&tiny_cross(), vec!["a".into(), "b".into()], s1, 0);
        assert!(matches!(err, Err(Error::MissingDependency(_))));
    }

    #[test]
    fn finetune_freezes_all_but_fusion_adapters() {
        let mut model = tiny_model(2, 0);
        let targets = prepare_finetune(&mut model, &LoraConfig::finetune(), 1).unwrap();
        // q, k, v, o and two MLP maps per block, one block per modality
        assert_eq!(targets.len(), 12);
        for p in model.params() {
            assert_eq!(p.trainable, p.name.starts_with("lora.fuse."), "{}", p.name);
        }
    }
}

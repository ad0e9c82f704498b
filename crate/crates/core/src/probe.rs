//! Frozen-embedding extraction, linear probes, metrics and modality-pair
//! screening.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crossmodal::{aligned_pair, CrossModalModel, PairInput};
use crate::error::{invalid, Error, Result};
use crate::nn::{Init, Linear, LinearRole, Module};
use crate::optim::{Adam, AdamConfig};
use crate::signal::{Epoch, MaskPlan, SessionStats};
use crate::tape::{Real, Tape};
use crate::unimodal::{cls_rows, EncoderConfig, UnimodalEncoder};

// -------------------------------------------------------------------------
// embeddings

/// Concatenated CLS vectors of one aligned window pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenEmbedding {
    pub vector: Vec<f32>,
    pub pair: (usize, usize),
    pub labels: BTreeMap<String, usize>,
    pub session_id: u32,
    pub segment_index: usize,
}

/// Windows per forward pass during extraction.
pub const EXTRACT_BATCH: usize = 64;

/// Runs the fused model with every patch visible and returns `B x 2D`
/// concatenated CLS rows in slot order.
pub fn fused_cls<F: Real>(
    model: &CrossModalModel<F>,
    groups: &[&[Epoch]],
    pair: (usize, usize),
    stats: &SessionStats,
) -> Result<Array2<F>> {
    let d = model.embed_dim();
    let tpw = model.enc_cfg.num_patches() + 1;
    let mut out = Array2::zeros((groups.len(), 2 * d));
    for (ci, chunk) in groups.chunks(EXTRACT_BATCH).enumerate() {
        let input = PairInput::<F>::from_groups(chunk, pair, &model.enc_cfg, stats, None)?;
        let mut t = Tape::eval();
        let tokens = model.embed_tokens(&mut t, &input)?;
        let fused = model.fuse(&mut t, tokens, pair, None);
        let cls = model.cls_pair(&mut t, fused, tpw);
        let start = ci * EXTRACT_BATCH;
        out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(t.value(cls));
    }
    Ok(out)
}

/// Frozen embeddings for each aligned group. Model parameters are only read.
pub fn extract_embeddings(
    model: &CrossModalModel<f32>,
    groups: &[&[Epoch]],
    pair: (usize, usize),
    stats: &SessionStats,
) -> Result<Vec<FrozenEmbedding>> {
    let cls = fused_cls(model, groups, pair, stats)?;
    groups
        .iter()
        .zip(cls.rows())
        .map(|(g, row)| {
            let (ej, _) = aligned_pair(g, pair)?;
            Ok(FrozenEmbedding {
                vector: row.to_vec(),
                pair,
                labels: ej.labels.clone(),
                session_id: ej.session_id,
                segment_index: ej.segment_index,
            })
        })
        .collect()
}

pub fn extract_embedding(
    model: &CrossModalModel<f32>,
    group: &[Epoch],
    pair: (usize, usize),
    stats: &SessionStats,
) -> Result<FrozenEmbedding> {
    Ok(extract_embeddings(model, &[group], pair, stats)?.remove(0))
}

/// Stage-1 CLS vectors of one modality, `N x D`, every patch visible.
pub fn encoder_cls<F: Real>(
    enc: &UnimodalEncoder<F>,
    cfg: &EncoderConfig,
    windows: &[&Epoch],
) -> Result<Array2<F>> {
    let p = cfg.num_patches();
    let d = enc.embed_dim();
    let mut out = Array2::zeros((windows.len(), d));
    for (ci, chunk) in windows.chunks(EXTRACT_BATCH).enumerate() {
        let mut data = Vec::with_capacity(chunk.len() * cfg.epoch_len);
        for e in chunk {
            if e.samples.len() != cfg.epoch_len {
                return Err(Error::Shape(format!("window length {} != {}", e.samples.len(), cfg.epoch_len)));
            }
            data.extend(e.samples.iter().map(|&x| F::lift32(x)));
        }
        let x = Array2::from_shape_vec((chunk.len() * p, cfg.patch_size), data).expect("sized");
        let mut t = Tape::eval();
        let xv = t.constant(x);
        let plans = vec![MaskPlan::full(p); chunk.len()];
        let h = enc.encode(&mut t, xv, &plans);
        let cls = cls_rows(&mut t, h, chunk.len(), p + 1);
        let start = ci * EXTRACT_BATCH;
        out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(t.value(cls));
    }
    Ok(out)
}

/// Source of per-pair frozen features for screening.
pub trait PairFeatures {
    fn num_modalities(&self) -> usize;
    /// `N x F` features of `pair` for each aligned group.
    fn features(&self, groups: &[&[Epoch]], pair: (usize, usize)) -> Result<Array2<f32>>;
}

/// Concatenated CLS of the pair's two pretrained Stage-1 encoders. Each
/// modality is encoded once per set of groups.
pub struct EncoderFeatures<'a> {
    encoders: &'a [UnimodalEncoder<f32>],
    cfg: &'a EncoderConfig,
    cache: RefCell<HashMap<usize, (Vec<(u32, usize)>, Array2<f32>)>>,
}

impl<'a> EncoderFeatures<'a> {
    pub fn new(encoders: &'a [UnimodalEncoder<f32>], cfg: &'a EncoderConfig) -> Self {
        Self { encoders, cfg, cache: RefCell::new(HashMap::new()) }
    }

    fn modality(&self, groups: &[&[Epoch]], m: usize) -> Result<Array2<f32>> {
        let keys: Vec<(u32, usize)> = groups.iter().map(|g| (g[0].session_id, g[0].segment_index)).collect();
        if let Some((k, v)) = self.cache.borrow().get(&m) {
            if *k == keys {
                return Ok(v.clone());
            }
        }
        let windows = groups
            .iter()
            .map(|g| g.get(m).filter(|e| e.modality == m).ok_or_else(|| Error::Lookup(format!("no window for modality id {m}"))))
            .collect::<Result<Vec<_>>>()?;
        let cls = encoder_cls(&self.encoders[m], self.cfg, &windows)?;
        self.cache.borrow_mut().insert(m, (keys, cls.clone()));
        Ok(cls)
    }
}

impl PairFeatures for EncoderFeatures<'_> {
    fn num_modalities(&self) -> usize {
        self.encoders.len()
    }

    fn features(&self, groups: &[&[Epoch]], pair: (usize, usize)) -> Result<Array2<f32>> {
        let m = self.encoders.len();
        if pair.0 >= m || pair.1 >= m {
            return Err(Error::Lookup(format!("pair {pair:?} outside {m} encoders")));
        }
        for g in groups {
            aligned_pair(g, pair)?;
        }
        let ca = self.modality(groups, pair.0)?;
        let cb = self.modality(groups, pair.1)?;
        Ok(ndarray::concatenate(Axis(1), &[ca.view(), cb.view()]).expect("same rows"))
    }
}

/// Concatenated fused CLS of a Stage-2 model.
pub struct FusedFeatures<'a> {
    pub model: &'a CrossModalModel<f32>,
    pub stats: &'a SessionStats,
}

impl PairFeatures for FusedFeatures<'_> {
    fn num_modalities(&self) -> usize {
        self.model.num_modalities()
    }

    fn features(&self, groups: &[&[Epoch]], pair: (usize, usize)) -> Result<Array2<f32>> {
        fused_cls(self.model, groups, pair, self.stats)
    }
}

/// Task labels of each group, read from its first window.
pub fn task_labels(groups: &[&[Epoch]], task: &str) -> Result<Vec<usize>> {
    groups
        .iter()
        .map(|g| {
            g.first()
                .and_then(|e| e.labels.get(task).copied())
                .ok_or_else(|| Error::Lookup(format!("window has no label for task {task}")))
        })
        .collect()
}

// -------------------------------------------------------------------------
// metrics

/// Area under the ROC curve by the rank-sum statistic, ties counted as ½.
pub fn auroc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return invalid(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return invalid(format!("binary labels expected, found {l}"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return invalid("NaN score");
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub value: f64,
    /// Set when no true positives exist, so precision or recall is 0 or undefined.
    pub degenerate: bool,
}

/// F1 of the positive class.
pub fn f1(pred: &[usize], labels: &[usize]) -> F1Score {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &l) in pred.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return F1Score { value: 0.0, degenerate: true };
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fneg) as f64;
    F1Score { value: 2.0 * p * r / (p + r), degenerate: false }
}

/// Decision threshold on the positive-class probability.
pub const F1_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub auroc: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn scaled(self, k: f64) -> Self {
        Self { accuracy: self.accuracy * k, auroc: self.auroc * k, f1: self.f1 * k }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MulticlassMetrics {
    pub metrics: Metrics,
    /// Classes left out of the weighted averages for lack of support.
    pub excluded: Vec<usize>,
}

/// Argmax accuracy plus support-weighted one-vs-rest AUROC and F1.
pub fn weighted_multiclass_metrics(probs: &Array2<f64>, labels: &[usize]) -> Result<MulticlassMetrics> {
    let (n, k) = probs.dim();
    if n != labels.len() {
        return invalid(format!("{n} probability rows for {} labels", labels.len()));
    }
    if n == 0 || k < 2 {
        return invalid("need at least one row and two classes");
    }
    for (i, row) in probs.rows().into_iter().enumerate() {
        if (row.sum() - 1.0).abs() > 1e-6 {
            return invalid(format!("probability row {i} sums to {}", row.sum()));
        }
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return invalid(format!("label {l} outside {k} classes"));
    }
    let pred: Vec<usize> = probs.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
    let accuracy = pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / n as f64;
    let mut excluded = Vec::new();
    let (mut auc, mut f, mut support) = (0.0, 0.0, 0usize);
    for c in 0..k {
        let bin: Vec<usize> = labels.iter().map(|&l| (l == c) as usize).collect();
        let nc = bin.iter().sum::<usize>();
        if nc == 0 {
            excluded.push(c);
            continue;
        }
        let scores: Vec<f64> = probs.column(c).to_vec();
        let a = match auroc(&scores, &bin) {
            Ok(a) => a,
            Err(Error::UndefinedMetric(_)) => {
                excluded.push(c);
                continue;
            }
            Err(e) => return Err(e),
        };
        let bp: Vec<usize> = pred.iter().map(|&p| (p == c) as usize).collect();
        auc += nc as f64 * a;
        f += nc as f64 * f1(&bp, &bin).value;
        support += nc;
    }
    if support == 0 {
        return Err(Error::UndefinedMetric("no class has both positive and negative examples".into()));
    }
    let s = support as f64;
    Ok(MulticlassMetrics { metrics: Metrics { accuracy, auroc: auc / s, f1: f / s }, excluded })
}

/// Accuracy, AUROC and F1 for a binary task from positive-class probabilities.
pub fn binary_metrics(p_pos: &[f64], labels: &[usize]) -> Result<Metrics> {
    let pred: Vec<usize> = p_pos.iter().map(|&p| (p >= F1_THRESHOLD) as usize).collect();
    let accuracy = pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64;
    Ok(Metrics { accuracy, auroc: auroc(p_pos, labels)?, f1: f1(&pred, labels).value })
}

/// Binary metrics for two-column probabilities, weighted ones otherwise.
pub fn classification_metrics(probs: &Array2<f64>, labels: &[usize]) -> Result<Metrics> {
    if probs.ncols() == 2 {
        binary_metrics(&probs.column(1).to_vec(), labels)
    } else {
        Ok(weighted_multiclass_metrics(probs, labels)?.metrics)
    }
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

// -------------------------------------------------------------------------
// linear probe

/// `w_c = N / (K * N_c)`; every class must be present.
pub fn class_weights(labels: &[usize], k: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return invalid(format!("label {l} outside {k} classes"));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return invalid(format!("class {c} is absent"));
    }
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&c| n / (k as f64 * c as f64)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Replaces the inverse-frequency weights when set.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
}

impl ProbeConfig {
    pub fn paper_scale() -> Self {
        Self { batch_size: 128, epochs: 50, iters_per_epoch: 2000, lr: 4e-3, weight_decay: 1e-5, class_weights: None }
    }

    pub fn desk() -> Self {
        Self { batch_size: 128, epochs: 30, iters_per_epoch: 50, lr: 4e-3, weight_decay: 1e-5, class_weights: None }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.iters_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.iters_per_epoch == 0 {
            return Err(Error::InvalidConfig("probe batch_size, epochs and iters_per_epoch must be positive".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("probe lr must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Row features with labels and the session each row came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeData {
    pub features: Array2<f32>,
    pub labels: Vec<usize>,
    pub sessions: Vec<u32>,
    pub num_classes: usize,
}

impl ProbeData {
    pub fn new(features: Array2<f32>, labels: Vec<usize>, sessions: Vec<u32>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() || labels.len() != sessions.len() {
            return invalid("features, labels and sessions must have one entry per row");
        }
        if num_classes < 2 {
            return invalid("need at least two classes");
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return invalid(format!("label {l} outside {num_classes} classes"));
        }
        Ok(Self { features, labels, sessions, num_classes })
    }

    pub fn from_embeddings(emb: &[FrozenEmbedding], task: &str, num_classes: usize) -> Result<Self> {
        let d = emb.first().map_or(0, |e| e.vector.len());
        let mut data = Vec::with_capacity(emb.len() * d);
        let mut labels = Vec::with_capacity(emb.len());
        for e in emb {
            if e.vector.len() != d {
                return Err(Error::Shape("embeddings differ in length".into()));
            }
            data.extend_from_slice(&e.vector);
            labels.push(*e.labels.get(task).ok_or_else(|| Error::Lookup(format!("no label for task {task}")))?);
        }
        let features = Array2::from_shape_vec((emb.len(), d), data).expect("sized");
        Self::new(features, labels, emb.iter().map(|e| e.session_id).collect(), num_classes)
    }

    fn rows(&self, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let x = self.features.select(Axis(0), idx).mapv(|v| v as f64);
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Row indices of a fixed train/validation/test split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IndexSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl IndexSplit {
    /// Rejects repeated rows, rows out of range, and sessions shared
    /// between splits.
    pub fn check(&self, data: &ProbeData) -> Result<()> {
        let n = data.labels.len();
        let mut seen = BTreeSet::new();
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n {
                return invalid(format!("split index {i} outside {n} rows"));
            }
            if !seen.insert(i) {
                return invalid(format!("split leakage: row {i} appears twice"));
            }
        }
        let sess = |idx: &[usize]| idx.iter().map(|&i| data.sessions[i]).collect::<BTreeSet<u32>>();
        let (a, b, c) = (sess(&self.train), sess(&self.val), sess(&self.test));
        if let Some(s) = a.intersection(&b).chain(a.intersection(&c)).chain(b.intersection(&c)).next() {
            return invalid(format!("split leakage: session {s} appears in two splits"));
        }
        Ok(())
    }
}

/// Standardization followed by one linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `in x K`
    pub weight: Array2<f64>,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    fn standardize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut z = x.clone();
        for mut row in z.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) * self.scale[j];
            }
        }
        z
    }

    pub fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = self.standardize(x).dot(&self.weight);
        for mut row in y.rows_mut() {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        y
    }

    pub fn predict_proba(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut p = self.logits(x);
        crate::tape::softmax_rows_inplace(&mut p);
        p
    }

    pub fn predict_proba_f32(&self, x: &Array2<f32>) -> Array2<f64> {
        self.predict_proba(&x.mapv(|v| v as f64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub probe: LinearProbe,
    pub step_loss: Vec<f64>,
    /// Selection score (F1 or weighted F1) on the validation rows per epoch.
    pub val_score: Vec<f64>,
    pub best_epoch: usize,
}

/// Trains a class-weighted linear probe on `split.train`, keeping the
/// parameters of the epoch with the best validation F1 (weighted F1 for
/// more than two classes). Without validation rows the last epoch is kept.
pub fn train_probe(data: &ProbeData, split: &IndexSplit, cfg: &ProbeConfig, seed: u64) -> Result<ProbeFit> {
    cfg.validate()?;
    split.check(data)?;
    if split.train.is_empty() {
        return invalid("empty probe training split");
    }
    let k = data.num_classes;
    let (xtr, ytr) = data.rows(&split.train);
    let weights = match &cfg.class_weights {
        Some(w) if w.len() == k => w.clone(),
        Some(w) => return Err(Error::InvalidConfig(format!("{} class weights for {k} classes", w.len()))),
        None => class_weights(&ytr, k)?,
    };
    let d = xtr.ncols();
    let mean = xtr.mean_axis(Axis(0)).expect("nonempty").to_vec();
    let scale: Vec<f64> = xtr
        .std_axis(Axis(0), 0.0)
        .iter()
        .map(|&s| if s > 1e-12 { 1.0 / s } else { 1.0 })
        .collect();
    let mut probe = LinearProbe { mean, scale, weight: Array2::zeros((d, k)), bias: vec![0.0; k] };
    let ztr = probe.standardize(&xtr);

    let mut init = Init::seeded(seed);
    let mut layer = Linear::<f64>::new("probe", LinearRole::Other, d, k, true, &mut init);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9b0b_e5a1);
    let mut opt = Adam::new(AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::default() });
    let val = (!split.val.is_empty()).then(|| data.rows(&split.val));
    let mut fit = ProbeFit { probe: probe.clone(), step_loss: Vec::new(), val_score: Vec::new(), best_epoch: 0 };
    let mut best = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..ytr.len()).collect();
    let mut cursor = order.len();
    for epoch in 0..cfg.epochs {
        for _ in 0..cfg.iters_per_epoch {
            let mut idx = Vec::with_capacity(cfg.batch_size);
            while idx.len() < cfg.batch_size.min(order.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let xb = ztr.select(Axis(0), &idx);
            let yb: Vec<usize> = idx.iter().map(|&i| ytr[i]).collect();
            let wb: Vec<f64> = yb.iter().map(|&y| weights[y]).collect();
            let mut t = Tape::new(true, 0);
            let xv = t.constant(xb);
            let logits = layer.forward(&mut t, xv);
            let loss = t.cross_entropy(logits, &yb, Some(&wb), false);
            fit.step_loss.push(t.scalar(loss));
            let grads = t.backward(loss);
            opt.step(layer.params_mut(), &grads, cfg.lr);
        }
        probe.weight.assign(&layer.weight.value);
        probe.bias = layer.bias.as_ref().expect("probe has a bias").value.row(0).to_vec();
        let score = match &val {
            Some((xv, yv)) => selection_score(&probe.predict_proba(xv), yv, k),
            None => epoch as f64,
        };
        fit.val_score.push(score);
        if score > best {
            best = score;
            fit.best_epoch = epoch;
            fit.probe = probe.clone();
        }
    }
    Ok(fit)
}

fn selection_score(probs: &Array2<f64>, labels: &[usize], k: usize) -> f64 {
    if k == 2 {
        let pred: Vec<usize> = probs.column(1).iter().map(|&p| (p >= F1_THRESHOLD) as usize).collect();
        f1(&pred, labels).value
    } else {
        weighted_multiclass_metrics(probs, labels).map_or(0.0, |m| m.metrics.f1)
    }
}

/// Probe metrics on a set of rows.
pub fn evaluate_probe(probe: &LinearProbe, data: &ProbeData, idx: &[usize]) -> Result<Metrics> {
    let (x, y) = data.rows(idx);
    classification_metrics(&probe.predict_proba(&x), &y)
}

// -------------------------------------------------------------------------
// reports

/// Metrics of one probe run, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub task: String,
    pub pair: (String, String),
    pub model: String,
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: String,
    pub pair: (String, String),
    pub model: String,
    pub seeds: Vec<u64>,
    /// Percent, one entry per seed.
    pub per_seed: Vec<Metrics>,
    pub mean: Metrics,
    /// Population standard deviation over the listed seeds.
    pub sd: Metrics,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub checkpoints: Vec<String>,
}

pub fn aggregate_seeds(results: &[SeedResult]) -> Result<ProbeReport> {
    if results.len() < 2 {
        return invalid("aggregation needs at least two seeds");
    }
    let first = &results[0];
    if let Some(r) = results.iter().find(|r| r.task != first.task || r.pair != first.pair || r.model != first.model) {
        return invalid(format!(
            "cannot aggregate {}/{:?}/{} with {}/{:?}/{}",
            first.task, first.pair, first.model, r.task, r.pair, r.model
        ));
    }
    let n = results.len() as f64;
    let stat = |get: fn(&Metrics) -> f64| {
        let m = results.iter().map(|r| get(&r.metrics)).sum::<f64>() / n;
        let v = results.iter().map(|r| (get(&r.metrics) - m).powi(2)).sum::<f64>() / n;
        (m, v.sqrt())
    };
    let (am, asd) = stat(|m| m.accuracy);
    let (um, usd) = stat(|m| m.auroc);
    let (fm, fsd) = stat(|m| m.f1);
    Ok(ProbeReport {
        task: first.task.clone(),
        pair: first.pair.clone(),
        model: first.model.clone(),
        seeds: results.iter().map(|r| r.seed).collect(),
        per_seed: results.iter().map(|r| r.metrics).collect(),
        mean: Metrics { accuracy: am, auroc: um, f1: fm },
        sd: Metrics { accuracy: asd, auroc: usd, f1: fsd },
        config_hash: String::new(),
        checkpoints: Vec::new(),
    })
}

pub const CSV_HEADER: &str = "task,pair,model,seeds,accuracy_mean,accuracy_sd,auroc_mean,auroc_sd,f1_mean,f1_sd";

impl ProbeReport {
    /// One CSV row; metrics as percentages with two decimals.
    pub fn csv_row(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        format!(
            "{},{}+{},{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}",
            self.task,
            self.pair.0,
            self.pair.1,
            self.model,
            seeds.join(";"),
            self.mean.accuracy,
            self.sd.accuracy,
            self.mean.auroc,
            self.sd.auroc,
            self.mean.f1,
            self.sd.f1
        )
    }

    /// Structured text record with metrics rounded to two decimals.
    pub fn to_record(&self) -> serde_json::Value {
        let r = |m: &Metrics| {
            serde_json::json!({
                "accuracy": round2(m.accuracy),
                "auroc": round2(m.auroc),
                "f1": round2(m.f1),
            })
        };
        serde_json::json!({
            "task": self.task,
            "pair": [self.pair.0, self.pair.1],
            "model": self.model,
            "seeds": self.seeds,
            "per_seed": self.per_seed.iter().map(r).collect::<Vec<_>>(),
            "mean": r(&self.mean),
            "sd": r(&self.sd),
            "config_hash": self.config_hash,
            "checkpoints": self.checkpoints,
        })
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

// -------------------------------------------------------------------------
// screening

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreenConfig {
    /// Fitting rows drawn from the training split.
    pub subsample_n: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// L2 penalty of the logistic regression.
    pub weight_decay: f64,
}

impl ScreenConfig {
    pub fn paper_scale() -> Self {
        Self { subsample_n: 128_000, max_steps: 100, batch_size: 128, lr: 4e-3, weight_decay: 1e-2 }
    }

    pub fn desk() -> Self {
        Self { subsample_n: 2000, max_steps: 100, batch_size: 128, lr: 1e-2, weight_decay: 1e-2 }
    }

    fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            batch_size: self.batch_size,
            epochs: 1,
            iters_per_epoch: self.max_steps,
            lr: self.lr,
            weight_decay: self.weight_decay,
            class_weights: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenEntry {
    pub pair: (usize, usize),
    /// F1 for binary tasks, weighted OVR AUROC otherwise.
    pub score: f64,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

fn pair_seed(seed: u64, pair: (usize, usize)) -> u64 {
    let key = ((pair.0 as u64) << 32) | pair.1 as u64;
    seed ^ key.wrapping_add(1).wrapping_mul(0xd6e8_feb8_6659_fd93)
}

/// Scores every unordered modality pair with a short logistic regression on
/// frozen features and returns them best first. Binary tasks rank by F1 then
/// AUROC; multiclass tasks by weighted AUROC. Pairs whose metric is
/// undefined go last.
///
/// The sessions of `pool` are split in half at random: up to
/// `cfg.subsample_n` windows of one half fit each classifier and the other
/// half scores it.
pub fn screen_pairs(
    source: &dyn PairFeatures,
    pool: &[&[Epoch]],
    task: &str,
    num_classes: usize,
    cfg: &ScreenConfig,
    seed: u64,
) -> Result<Vec<ScreenEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sessions: Vec<u32> = pool.iter().map(|g| g[0].session_id).collect::<BTreeSet<_>>().into_iter().collect();
    if sessions.len() < 2 {
        return invalid("screening needs windows from at least two sessions");
    }
    sessions.shuffle(&mut rng);
    let fit_sessions: BTreeSet<u32> = sessions[..sessions.len() / 2].iter().copied().collect();
    let (mut fit, score): (Vec<&[Epoch]>, Vec<&[Epoch]>) = pool.iter().partition(|g| fit_sessions.contains(&g[0].session_id));
    if cfg.subsample_n == 0 || cfg.subsample_n > pool.len() {
        return invalid(format!("subsample of {} outside 1..={} available windows", cfg.subsample_n, pool.len()));
    }
    if fit.len() > cfg.subsample_n {
        fit.shuffle(&mut rng);
        fit.truncate(cfg.subsample_n);
        fit.sort_by_key(|g| (g[0].session_id, g[0].segment_index));
    }
    let groups: Vec<&[Epoch]> = fit.iter().chain(&score).copied().collect();
    let labels = task_labels(&groups, task)?;
    let sessions: Vec<u32> = groups.iter().map(|g| g[0].session_id).collect();
    let split = IndexSplit { train: (0..fit.len()).collect(), val: Vec::new(), test: (fit.len()..groups.len()).collect() };
    let m = source.num_modalities();
    let mut out = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            let pair = (a, b);
            let features = source.features(&groups, pair)?;
            let data = ProbeData::new(features, labels.clone(), sessions.clone(), num_classes)?;
            let result = train_probe(&data, &split, &cfg.probe_config(), pair_seed(seed, pair))
                .and_then(|f| evaluate_probe(&f.probe, &data, &split.test));
            out.push(match result {
                Ok(mt) => ScreenEntry {
                    pair,
                    score: if num_classes == 2 { mt.f1 } else { mt.auroc },
                    metrics: Some(mt),
                    error: None,
                },
                Err(e @ (Error::UndefinedMetric(_) | Error::InvalidInput(_))) => {
                    ScreenEntry { pair, score: f64::NEG_INFINITY, metrics: None, error: Some(e.to_string()) }
                }
                Err(e) => return Err(e),
            });
        }
    }
    let tie = |e: &ScreenEntry| e.metrics.map_or(f64::NEG_INFINITY, |m| m.auroc);
    out.sort_by(|x, y| y.score.total_cmp(&x.score).then(tie(y).total_cmp(&tie(x))).then(x.pair.cmp(&y.pair)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_auroc(s: &[f64], l: &[usize]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] == 1 && l[j] == 0 {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    proptest! {
        #[test]
        fn auroc_matches_pairwise(v in prop::collection::vec((0u8..20, 0usize..2), 2..200)) {
            let s: Vec<f64> = v.iter().map(|x| x.0 as f64 / 4.0).collect();
            let l: Vec<usize> = v.iter().map(|x| x.1).collect();
            prop_assume!(l.contains(&0) && l.contains(&1));
            prop_assert_eq!(auroc(&s, &l).unwrap(), brute_auroc(&s, &l));
        }

        #[test]
        fn auroc_monotone_invariant(v in prop::collection::vec((-5.0f64..5.0, 0usize..2), 2..100), a in 0.1f64..3.0) {
            let s: Vec<f64> = v.iter().map(|x| x.0).collect();
            let l: Vec<usize> = v.iter().map(|x| x.1).collect();
            prop_assume!(l.contains(&0) && l.contains(&1));
            let t: Vec<f64> = s.iter().map(|x| (a * x).exp() + x.powi(3)).collect();
            prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
        }

        #[test]
        fn f1_matches_confusion(v in prop::collection::vec((0usize..2, 0usize..2), 1..60)) {
            let p: Vec<usize> = v.iter().map(|x| x.0).collect();
            let l: Vec<usize> = v.iter().map(|x| x.1).collect();
            let tp = v.iter().filter(|x| *x == &(1, 1)).count() as f64;
            let fp = v.iter().filter(|x| *x == &(1, 0)).count() as f64;
            let fneg = v.iter().filter(|x| *x == &(0, 1)).count() as f64;
            let want = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
            prop_assert!((f1(&p, &l).value - want).abs() < 1e-12);
        }
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1(&[1, 0, 1], &[1, 0, 1]).value, 1.0);
        let none = f1(&[0, 0, 0], &[1, 0, 1]);
        assert_eq!((none.value, none.degenerate), (0.0, true));
        assert_eq!(f1(&[1, 1, 0], &[1, 0, 1]).value, 0.5);
    }

    #[test]
    fn multiclass_examples() {
        let eye = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let m = weighted_multiclass_metrics(&eye, &[0, 1, 2, 1]).unwrap().metrics;
        assert_eq!((m.accuracy, m.auroc, m.f1), (1.0, 1.0, 1.0));
        let uni = Array2::from_elem((10, 5), 0.2);
        let labels: Vec<usize> = (0..10).map(|i| i % 5).collect();
        assert_eq!(weighted_multiclass_metrics(&uni, &labels).unwrap().metrics.auroc, 0.5);
        let bad = array![[0.5, 0.6]];
        assert!(weighted_multiclass_metrics(&bad, &[0]).is_err());
    }

    #[test]
    fn multiclass_matches_binarized_oracle() {
        let probs = array![
            [0.6, 0.3, 0.1],
            [0.2, 0.5, 0.3],
            [0.1, 0.2, 0.7],
            [0.4, 0.4, 0.2],
            [0.3, 0.3, 0.4],
            [0.5, 0.1, 0.4],
            [0.2, 0.6, 0.2],
        ];
        let labels = [0, 1, 2, 1, 0, 2, 1];
        let got = weighted_multiclass_metrics(&probs, &labels).unwrap();
        let pred: Vec<usize> = probs.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
        let (mut a, mut f) = (0.0, 0.0);
        for c in 0..3 {
            let bin: Vec<usize> = labels.iter().map(|&l| (l == c) as usize).collect();
            let bp: Vec<usize> = pred.iter().map(|&p| (p == c) as usize).collect();
            let n = bin.iter().sum::<usize>() as f64;
            a += n * brute_auroc(&probs.column(c).to_vec(), &bin);
            let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
            for i in 0..7 {
                match (bp[i], bin[i]) {
                    (1, 1) => tp += 1.0,
                    (1, 0) => fp += 1.0,
                    (0, 1) => fneg += 1.0,
                    _ => {}
                }
            }
            f += n * if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fneg) } else { 0.0 };
        }
        let acc = pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / 7.0;
        assert!((got.metrics.auroc - a / 7.0).abs() < 1e-12);
        assert!((got.metrics.f1 - f / 7.0).abs() < 1e-12);
        assert_eq!(got.metrics.accuracy, acc);
        assert!(got.excluded.is_empty());
    }

    #[test]
    fn multiclass_missing_class_is_excluded() {
        let probs = array![[0.7, 0.2, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1]];
        let got = weighted_multiclass_metrics(&probs, &[0, 1, 0]).unwrap();
        assert_eq!(got.excluded, vec![2]);
        assert_eq!(got.metrics.auroc, 1.0);
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(class_weights(&[0, 1, 0, 1], 2).unwrap(), vec![1.0, 1.0]);
        let mut l = vec![0; 90];
        l.extend([1; 10]);
        let w = class_weights(&l, 2).unwrap();
        assert!((w[0] - 100.0 / 180.0).abs() < 1e-12 && (w[1] - 5.0).abs() < 1e-12);
        let mut l = vec![0; 9917];
        l.extend([1; 83]);
        assert!((class_weights(&l, 2).unwrap()[1] - 60.24).abs() < 0.01);
        assert!(class_weights(&[0, 0], 2).is_err());
    }

    fn toy(n: usize, seed: u64) -> ProbeData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((n, 3));
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            x[[i, 0]] = if c == 1 { 1.0 } else { -1.0 } + rng.random_range(-0.5..0.5);
            x[[i, 1]] = rng.random_range(-1.0..1.0);
            x[[i, 2]] = 3.0;
            y.push(c);
        }
        ProbeData::new(x, y, (0..n as u32).collect(), 2).unwrap()
    }

    #[test]
    fn probe_separates_toy_data() {
        let data = toy(100, 3);
        let split = IndexSplit { train: (0..80).collect(), val: (80..90).collect(), test: (90..100).collect() };
        let cfg = ProbeConfig { epochs: 4, iters_per_epoch: 50, batch_size: 32, ..ProbeConfig::desk() };
        let fit = train_probe(&data, &split, &cfg, 1).unwrap();
        assert_eq!(evaluate_probe(&fit.probe, &data, &split.train).unwrap().accuracy, 1.0);
        assert_eq!(fit.step_loss.len(), 200);
        let again = train_probe(&data, &split, &cfg, 1).unwrap();
        assert_eq!(fit, again);
        let other = train_probe(&data, &split, &cfg, 2).unwrap();
        assert_ne!(fit.step_loss, other.step_loss);
    }

    #[test]
    fn probe_rejects_leakage() {
        let data = toy(20, 0);
        let split = IndexSplit { train: (0..10).collect(), val: vec![9, 10], test: vec![] };
        assert!(matches!(train_probe(&data, &split, &ProbeConfig::desk(), 0), Err(Error::InvalidInput(_))));
        let mut shared = data.clone();
        shared.sessions = vec![0; 20];
        let split = IndexSplit { train: (0..10).collect(), val: (10..20).collect(), test: vec![] };
        assert!(matches!(train_probe(&shared, &split, &ProbeConfig::desk(), 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn aggregate_examples() {
        let r = |seed, auroc| SeedResult {
            task: "event".into(),
            pair: ("a".into(), "b".into()),
            model: "m".into(),
            seed,
            metrics: Metrics { accuracy: 50.0, auroc, f1: 10.0 },
        };
        let rep = aggregate_seeds(&[r(0, 80.0), r(1, 82.0)]).unwrap();
        assert_eq!((rep.mean.auroc, rep.sd.auroc), (81.0, 1.0));
        let rep = aggregate_seeds(&[r(0, 70.0), r(1, 70.0), r(2, 70.0)]).unwrap();
        assert_eq!(rep.sd.auroc, 0.0);
        assert!(aggregate_seeds(&[r(0, 1.0)]).is_err());
        let mut other = r(1, 1.0);
        other.task = "stage".into();
        assert!(aggregate_seeds(&[r(0, 1.0), other]).is_err());
        assert!(rep.csv_row().starts_with("event,a+b,m,0;1;2,50.00,0.00,70.00"));
    }
}

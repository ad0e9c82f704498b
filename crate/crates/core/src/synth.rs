//! Seeded multi-session corpus with position-dependent events.
//!
//! Each session is a run of aligned windows, one per modality. Windows carry
//! an `event` label whose probability rises in the final third of the
//! session, and a five-class `stage` label from a Markov chain. Events leave
//! a dip in the configured event channels; nothing else in the signals
//! depends on the position within the session.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{compute_session_stats, zscore_normalize, Epoch, SessionStats};
use crate::store::{read_f32_blob, write_atomic, write_f32_blob};
use crate::unimodal::NoisePolicy;

pub const EVENT_TASK: &str = "event";
pub const STAGE_TASK: &str = "stage";
pub const NUM_STAGES: usize = 5;
/// Upper bound on the per-window event probability.
pub const MAX_EVENT_PROB: f64 = 0.95;

/// How a modality's raw signal is synthesized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalKind {
    /// Stage-dependent oscillation.
    Eeg,
    /// Slow baseline; events pull it down.
    Spo2,
    /// Breathing-band oscillation; events shrink its amplitude.
    Resp,
    /// White noise only.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityRecipe {
    pub name: String,
    pub kind: SignalKind,
    /// Relative std of the augmentation noise; 0 leaves views untouched.
    pub augment_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_sessions: usize,
    pub session_len_mean: f64,
    pub session_len_std: f64,
    pub epoch_len: usize,
    pub modalities: Vec<ModalityRecipe>,
    pub event_base_rate: f64,
    /// Multiplier on the event rate in the final third of a session.
    pub event_time_boost: f64,
    /// Modalities that show the event signature. May be empty, which gives
    /// a corpus whose labels are invisible in the signals.
    pub event_channels: Vec<String>,
    /// Fractional depth of the event dip.
    pub event_depth: f64,
    /// Amplitude of slow random drift added to every channel.
    pub drift: f64,
    /// Std of white measurement noise added to every non-noise channel.
    pub noise: f64,
    pub stage_transition: Vec<Vec<f64>>,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        let m = |name: &str, kind, augment_sigma| ModalityRecipe { name: name.into(), kind, augment_sigma };
        Self {
            n_sessions: 60,
            session_len_mean: 120.0,
            session_len_std: 20.0,
            epoch_len: 128,
            modalities: vec![
                m("eeg", SignalKind::Eeg, 0.05),
                m("spo2", SignalKind::Spo2, 0.05),
                m("resp", SignalKind::Resp, 0.0),
                m("noise", SignalKind::Noise, 0.05),
            ],
            event_base_rate: 0.04,
            event_time_boost: 3.0,
            event_channels: vec!["spo2".into(), "resp".into()],
            event_depth: 0.4,
            drift: 0.3,
            noise: 0.1,
            stage_transition: vec![
                vec![0.90, 0.06, 0.02, 0.00, 0.02],
                vec![0.05, 0.80, 0.13, 0.00, 0.02],
                vec![0.02, 0.03, 0.88, 0.05, 0.02],
                vec![0.01, 0.00, 0.07, 0.92, 0.00],
                vec![0.02, 0.03, 0.03, 0.00, 0.92],
            ],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_sessions < 10 {
            return bad(format!("generator.n_sessions {} is too small for an 80/10/10 split", self.n_sessions));
        }
        if !(self.session_len_mean >= 4.0) || !(self.session_len_std >= 0.0) {
            return bad("generator.session_len_mean must be >= 4 and session_len_std >= 0".into());
        }
        if self.epoch_len == 0 {
            return bad("generator.epoch_len must be positive".into());
        }
        if self.modalities.len() < 2 {
            return bad("generator.modalities needs at least two entries".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return bad(format!("generator.modalities: duplicate name {}", m.name));
            }
            if m.augment_sigma < 0.0 {
                return bad(format!("generator.modalities.{}.augment_sigma must be >= 0", m.name));
            }
        }
        for c in &self.event_channels {
            if !self.modalities.iter().any(|m| &m.name == c) {
                return bad(format!("generator.event_channels: unknown modality {c}"));
            }
        }
        if !(0.0..=1.0).contains(&self.event_base_rate) || self.event_time_boost < 0.0 {
            return bad("generator.event_base_rate must lie in [0, 1] and event_time_boost be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.event_depth) || self.drift < 0.0 || self.noise < 0.0 {
            return bad("generator.event_depth must lie in [0, 1); drift and noise must be >= 0".into());
        }
        if self.stage_transition.len() != NUM_STAGES {
            return bad(format!("generator.stage_transition must be {NUM_STAGES}x{NUM_STAGES}"));
        }
        for (i, row) in self.stage_transition.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if row.len() != NUM_STAGES || row.iter().any(|&p| p < 0.0) || (s - 1.0).abs() > 1e-9 {
                return bad(format!("generator.stage_transition row {i} is not a probability vector"));
            }
        }
        Ok(())
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.modalities.iter().map(|m| m.name.clone()).collect()
    }

    pub fn noise_policy(&self) -> NoisePolicy {
        NoisePolicy { sigma: self.modalities.iter().map(|m| m.augment_sigma).collect() }
    }
}

/// Event probability for a window: the base rate, boosted in the final
/// third of the session, capped at [`MAX_EVENT_PROB`].
pub fn event_prior(segment_index: usize, session_len: usize, cfg: &GeneratorConfig) -> f64 {
    let late = (segment_index as f64) / (session_len as f64) > 2.0 / 3.0;
    let p = if late { cfg.event_base_rate * cfg.event_time_boost } else { cfg.event_base_rate };
    p.min(MAX_EVENT_PROB)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Session ids per split; the three lists are disjoint.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        let mut all: Vec<u32> = self.train.iter().chain(&self.val).chain(&self.test).copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        all.len() == n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub id: u32,
    /// `windows[segment][modality]`
    pub windows: Vec<Vec<Epoch>>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: GeneratorConfig,
    pub sessions: Vec<Session>,
    pub splits: SplitManifest,
    /// Windows that were flat before normalization.
    pub degenerate_windows: usize,
}

impl Corpus {
    pub fn modalities(&self) -> Vec<String> {
        self.config.modality_names()
    }

    pub fn session(&self, id: u32) -> Option<&Session> {
        self.sessions.iter().find(|s| s.id == id)
    }

    /// Aligned window groups (one window per modality) of a split, in
    /// session then segment order.
    pub fn groups(&self, split: Split) -> Vec<&[Epoch]> {
        self.splits
            .ids(split)
            .iter()
            .filter_map(|&id| self.session(id))
            .flat_map(|s| s.windows.iter().map(|w| w.as_slice()))
            .collect()
    }

    /// Windows of one modality in a split.
    pub fn windows(&self, split: Split, modality: usize) -> Vec<&Epoch> {
        self.groups(split).into_iter().map(|g| &g[modality]).collect()
    }

    /// Session-length statistics over the training split.
    pub fn session_stats(&self) -> Result<SessionStats> {
        let lens: Vec<usize> = self.splits.train.iter().filter_map(|&id| self.session(id)).map(|s| s.len()).collect();
        compute_session_stats(&lens)
    }

    pub fn num_windows(&self) -> usize {
        self.sessions.iter().map(|s| s.len()).sum()
    }
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
fn stationary(p: &[Vec<f64>]) -> Vec<f64> {
    let n = p.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..2000 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                next[j] += pi[i] * p[i][j];
            }
        }
        pi = next;
    }
    pi
}

fn draw_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

const STAGE_FREQ: [f64; NUM_STAGES] = [22.0, 14.0, 9.0, 4.0, 17.0];
const STAGE_AMP: [f64; NUM_STAGES] = [0.6, 0.8, 1.0, 1.6, 0.7];

/// Raised-cosine bump over half the window, starting at `start`.
fn dip_window(len: usize, start: usize) -> Vec<f64> {
    let half = len / 2;
    (0..len)
        .map(|n| {
            if n < start || n >= start + half {
                0.0
            } else {
                let u = (n - start) as f64 / half as f64;
                0.5 * (1.0 - (2.0 * PI * u).cos())
            }
        })
        .collect()
}

/// Slow random drift: a few low-frequency sinusoids.
fn drift(len: usize, amp: f64, rng: &mut impl Rng) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let f = rng.random_range(0.3..2.0);
            let ph = rng.random_range(0.0..2.0 * PI);
            let a: f64 = rng.sample::<f64, _>(StandardNormal) * amp / 3f64.sqrt();
            (f, ph, a)
        })
        .collect();
    (0..len)
        .map(|n| {
            let x = n as f64 / len as f64;
            comps.iter().map(|&(f, ph, a)| a * (2.0 * PI * f * x + ph).sin()).sum()
        })
        .collect()
}

fn synth_window(
    kind: SignalKind,
    stage: usize,
    dip: Option<&[f64]>,
    cfg: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let len = cfg.epoch_len;
    let white = |rng: &mut ChaCha8Rng, s: f64| -> Vec<f64> {
        (0..len).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let depth = |n: usize| dip.map_or(1.0, |w| 1.0 - cfg.event_depth * w[n]);
    match kind {
        SignalKind::Noise => white(rng, 1.0),
        SignalKind::Eeg => {
            let f = STAGE_FREQ[stage] * rng.random_range(0.9..1.1);
            let ph = rng.random_range(0.0..2.0 * PI);
            let d = drift(len, cfg.drift, rng);
            let w = white(rng, cfg.noise + 0.3);
            (0..len)
                .map(|n| {
                    let x = n as f64 / len as f64;
                    STAGE_AMP[stage] * (2.0 * PI * f * x + ph).sin() * depth(n) + d[n] + w[n]
                })
                .collect()
        }
        SignalKind::Spo2 => {
            let d = drift(len, cfg.drift, rng);
            let w = white(rng, cfg.noise);
            (0..len).map(|n| depth(n) + d[n] + w[n]).collect()
        }
        SignalKind::Resp => {
            let f = rng.random_range(3.5..4.5);
            let ph = rng.random_range(0.0..2.0 * PI);
            let d = drift(len, cfg.drift, rng);
            // slow breath-to-breath amplitude variation
            let env = drift(len, cfg.drift, rng);
            let w = white(rng, cfg.noise);
            (0..len)
                .map(|n| {
                    let x = n as f64 / len as f64;
                    (2.0 * PI * f * x + ph).sin() * (depth(n) + env[n]) + d[n] + w[n]
                })
                .collect()
        }
    }
}

fn session_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn generate_session(cfg: &GeneratorConfig, index: usize, len: usize, degenerate: &mut usize) -> Result<Session> {
    let mut rng = ChaCha8Rng::seed_from_u64(session_seed(cfg.seed, index));
    let id = index as u32;
    let pi = stationary(&cfg.stage_transition);
    let event_mods: Vec<bool> = cfg.modalities.iter().map(|m| cfg.event_channels.contains(&m.name)).collect();
    let mut stage = draw_index(&pi, &mut rng);
    let mut windows = Vec::with_capacity(len);
    for seg in 0..len {
        if seg > 0 {
            stage = draw_index(&cfg.stage_transition[stage], &mut rng);
        }
        let event = rng.random::<f64>() < event_prior(seg, len, cfg);
        let start = rng.random_range(0..=cfg.epoch_len / 2);
        let dip = dip_window(cfg.epoch_len, start);
        let mut group = Vec::with_capacity(cfg.modalities.len());
        for (m, recipe) in cfg.modalities.iter().enumerate() {
            let sig = (event && event_mods[m]).then_some(dip.as_slice());
            let raw: Vec<f32> = synth_window(recipe.kind, stage, sig, cfg, &mut rng).into_iter().map(|x| x as f32).collect();
            let norm = zscore_normalize(&raw)?;
            *degenerate += norm.degenerate as usize;
            let mut e = Epoch::new(m, norm.values, id, seg);
            e.labels.insert(EVENT_TASK.into(), event as usize);
            e.labels.insert(STAGE_TASK.into(), stage);
            group.push(e);
        }
        windows.push(group);
    }
    Ok(Session { id, windows })
}

/// Generates sessions and a session-disjoint 80/10/10 split.
pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let len_dist = Normal::new(cfg.session_len_mean, cfg.session_len_std)
        .map_err(|e| Error::InvalidConfig(format!("session length distribution: {e}")))?;
    let lens: Vec<usize> = (0..cfg.n_sessions).map(|_| len_dist.sample(&mut rng).round().max(4.0) as usize).collect();
    let mut degenerate = 0;
    let sessions = lens
        .iter()
        .enumerate()
        .map(|(i, &l)| generate_session(cfg, i, l, &mut degenerate))
        .collect::<Result<Vec<_>>>()?;
    let mut ids: Vec<u32> = (0..cfg.n_sessions as u32).collect();
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let n = ids.len();
    let n_train = (0.8 * n as f64).round() as usize;
    let n_val = (0.1 * n as f64).round() as usize;
    let mut splits = SplitManifest {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    Ok(Corpus { config: cfg.clone(), sessions, splits, degenerate_windows: degenerate })
}

// -------------------------------------------------------------------------
// persistence

const CORPUS_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusManifest {
    format: u32,
    config: GeneratorConfig,
    modalities: Vec<String>,
    sessions: Vec<SessionEntry>,
    splits: SplitManifest,
    degenerate_windows: usize,
    /// Effective run configuration of the producing command, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionEntry {
    id: u32,
    len: usize,
    blob: String,
}

impl Corpus {
    /// Writes `manifest.json`, `labels.csv` and one blob per session
    /// (little-endian f32, modality-major, windows in segment order).
    pub fn save(&self, dir: &Path, run_config: Option<serde_json::Value>) -> Result<()> {
        fs::create_dir_all(dir.join("sessions"))?;
        let mut entries = Vec::with_capacity(self.sessions.len());
        for s in &self.sessions {
            let blob = format!("sessions/{:05}.f32", s.id);
            let m = self.config.modalities.len();
            let mut data = Vec::with_capacity(m * s.len() * self.config.epoch_len);
            for mi in 0..m {
                for w in &s.windows {
                    data.extend_from_slice(&w[mi].samples);
                }
            }
            write_f32_blob(&dir.join(&blob), &data)?;
            entries.push(SessionEntry { id: s.id, len: s.len(), blob });
        }
        let mut labels = Vec::new();
        writeln!(labels, "session_id,segment_index,{EVENT_TASK},{STAGE_TASK}")?;
        for s in &self.sessions {
            for (seg, w) in s.windows.iter().enumerate() {
                writeln!(labels, "{},{},{},{}", s.id, seg, w[0].labels[EVENT_TASK], w[0].labels[STAGE_TASK])?;
            }
        }
        write_atomic(&dir.join("labels.csv"), &labels)?;
        let manifest = CorpusManifest {
            format: CORPUS_FORMAT,
            config: self.config.clone(),
            modalities: self.modalities(),
            sessions: entries,
            splits: self.splits.clone(),
            degenerate_windows: self.degenerate_windows,
            run_config,
        };
        write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| Error::MissingDependency(format!("corpus manifest in {}: {e}", dir.display())))?;
        let manifest: CorpusManifest = serde_json::from_str(&text)?;
        if manifest.format != CORPUS_FORMAT {
            return Err(Error::CorruptCheckpoint(format!("unsupported corpus format {}", manifest.format)));
        }
        let labels = read_labels(&dir.join("labels.csv"))?;
        let cfg = manifest.config;
        let m = cfg.modalities.len();
        let l = cfg.epoch_len;
        let mut sessions = Vec::with_capacity(manifest.sessions.len());
        for entry in &manifest.sessions {
            let data = read_f32_blob(&dir.join(&entry.blob), m * entry.len * l)?;
            let mut windows = Vec::with_capacity(entry.len);
            for seg in 0..entry.len {
                let (event, stage) = *labels
                    .get(&(entry.id, seg))
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("no label for session {} #{seg}", entry.id)))?;
                let group = (0..m)
                    .map(|mi| {
                        let off = (mi * entry.len + seg) * l;
                        let mut e = Epoch::new(mi, data[off..off + l].to_vec(), entry.id, seg);
                        e.labels.insert(EVENT_TASK.into(), event);
                        e.labels.insert(STAGE_TASK.into(), stage);
                        e
                    })
                    .collect();
                windows.push(group);
            }
            sessions.push(Session { id: entry.id, windows });
        }
        Ok(Corpus { config: cfg, sessions, splits: manifest.splits, degenerate_windows: manifest.degenerate_windows })
    }
}

fn read_labels(path: &Path) -> Result<BTreeMap<(u32, usize), (usize, usize)>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| Error::CorruptCheckpoint(format!("labels.csv line {}", i + 1)));
        if f.len() != 4 {
            return Err(Error::CorruptCheckpoint(format!("labels.csv line {} has {} fields", i + 1, f.len())));
        }
        out.insert((parse(f[0])? as u32, parse(f[1])?), (parse(f[2])?, parse(f[3])?));
    }
    Ok(out)
}

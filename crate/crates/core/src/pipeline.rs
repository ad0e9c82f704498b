//! End-to-end orchestration: corpus, Stage 1, Stage 2, probing and the
//! time-aware comparison.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_stage1, Provenance};
use crate::config::RunConfig;
use crate::crossmodal::{prepare_finetune, train_stage2, CrossModalModel, Stage2Trace};
use crate::error::{Error, Result};
use crate::probe::{
    aggregate_seeds, evaluate_probe, extract_embeddings, fused_cls, screen_pairs, task_labels, train_probe, EncoderFeatures, IndexSplit,
    Metrics, ProbeData, ProbeFit, ProbeReport, ScreenEntry, SeedResult,
};
use crate::signal::{Epoch, SessionStats};
use crate::synth::{generate_corpus, Corpus, Split, NUM_STAGES, STAGE_TASK};
use crate::unimodal::{train_stage1, LossTrace, UnimodalModel};

pub const TIME_AWARE: &str = "time-aware";
pub const BASELINE: &str = "non-time-aware";

/// Independent seed for one component of a run.
pub fn child_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = seed ^ 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes().chain(index.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    // splitmix finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

pub fn num_classes(task: &str, corpus: &Corpus) -> usize {
    match task {
        STAGE_TASK => NUM_STAGES,
        _ => corpus
            .sessions
            .iter()
            .flat_map(|s| s.windows.iter())
            .filter_map(|w| w[0].labels.get(task).copied())
            .max()
            .map_or(0, |m| m + 1)
            .max(2),
    }
}

/// Generates the corpus of one run; the run seed replaces the generator seed.
pub fn corpus_for(cfg: &RunConfig, seed: u64) -> Result<Corpus> {
    generate_corpus(&crate::synth::GeneratorConfig { seed, ..cfg.generator.clone() })
}

pub struct Stage1Output {
    pub models: Vec<UnimodalModel<f32>>,
    pub traces: Vec<LossTrace>,
}

pub fn pretrain_stage1(corpus: &Corpus, cfg: &RunConfig, seed: u64) -> Result<Stage1Output> {
    let policy = corpus.config.noise_policy();
    let mut out = Stage1Output { models: Vec::new(), traces: Vec::new() };
    for (m, name) in corpus.modalities().iter().enumerate() {
        let s = child_seed(seed, "stage1", m as u64);
        let mut model = UnimodalModel::new(name, &cfg.encoder, s)?;
        let train = corpus.windows(Split::Train, m);
        let val = corpus.windows(Split::Val, m);
        let trace = train_stage1(&mut model, &train, &val, &cfg.stage1, &policy, s ^ 1)?;
        out.models.push(model);
        out.traces.push(trace);
    }
    Ok(out)
}

/// Stage 2 on top of copies of the Stage-1 encoders. Both variants share
/// the initialization and the training stream for a given seed.
pub fn pretrain_stage2(
    corpus: &Corpus,
    stage1: &[UnimodalModel<f32>],
    cfg: &RunConfig,
    time_aware: bool,
    seed: u64,
) -> Result<(CrossModalModel<f32>, Stage2Trace)> {
    let mut cross = cfg.cross.clone();
    cross.time_aware = time_aware;
    let stats = corpus.session_stats()?;
    let s = child_seed(seed, "stage2", 0);
    let encoders = stage1.iter().map(|m| Some(m.clone())).collect();
    let mut model = CrossModalModel::from_stage1(&cross, corpus.modalities(), encoders, s)?;
    let train = corpus.groups(Split::Train);
    let val = corpus.groups(Split::Val);
    let trace = train_stage2(&mut model, &train, &val, &stats, &cfg.stage2, &corpus.config.noise_policy(), s ^ 1)?;
    Ok((model, trace))
}

pub fn pair_ids(names: &[String], pair: &[String]) -> Result<(usize, usize)> {
    let id = |n: &String| {
        names.iter().position(|m| m == n).ok_or_else(|| Error::Lookup(format!("unknown modality {n}")))
    };
    match pair {
        [a, b] => Ok((id(a)?, id(b)?)),
        _ => Err(Error::InvalidConfig("a pair needs exactly two modality names".into())),
    }
}

/// Fused embeddings of every split plus the row split that keeps them apart.
pub fn probe_data(model: &CrossModalModel<f32>, corpus: &Corpus, task: &str, pair: (usize, usize)) -> Result<(ProbeData, IndexSplit)> {
    let stats = corpus.session_stats()?;
    let parts = [corpus.groups(Split::Train), corpus.groups(Split::Val), corpus.groups(Split::Test)];
    let all: Vec<&[Epoch]> = parts.iter().flatten().copied().collect();
    let features = fused_cls(model, &all, pair, &stats)?;
    let labels = task_labels(&all, task)?;
    let sessions = all.iter().map(|g| g[0].session_id).collect();
    let data = ProbeData::new(features, labels, sessions, num_classes(task, corpus))?;
    let (a, b) = (parts[0].len(), parts[0].len() + parts[1].len());
    let split = IndexSplit { train: (0..a).collect(), val: (a..b).collect(), test: (b..all.len()).collect() };
    Ok((data, split))
}

pub struct ProbeOutcome {
    /// Test-split metrics in percent.
    pub metrics: Metrics,
    pub fit: ProbeFit,
}

pub fn probe_model(
    model: &CrossModalModel<f32>,
    corpus: &Corpus,
    cfg: &RunConfig,
    pair: (usize, usize),
    seed: u64,
) -> Result<ProbeOutcome> {
    let (data, split) = probe_data(model, corpus, &cfg.eval.task, pair)?;
    let fit = train_probe(&data, &split, &cfg.probe, child_seed(seed, "probe", 0))?;
    let metrics = evaluate_probe(&fit.probe, &data, &split.test)?.scaled(100.0);
    Ok(ProbeOutcome { metrics, fit })
}

/// Ranks every pair with the pretrained Stage-1 encoders.
pub fn screen_with_encoders(corpus: &Corpus, stage1: &[UnimodalModel<f32>], cfg: &RunConfig, seed: u64) -> Result<Vec<ScreenEntry>> {
    let encoders: Vec<_> = stage1.iter().map(|m| m.encoder.clone()).collect();
    let source = EncoderFeatures::new(&encoders, &cfg.encoder);
    let pool = corpus.groups(Split::Train);
    let mut sc = cfg.screen.clone();
    sc.subsample_n = sc.subsample_n.min(pool.len());
    let task = &cfg.eval.task;
    screen_pairs(&source, &pool, task, num_classes(task, corpus), &sc, child_seed(seed, "screen", 0))
}

/// Both variants of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub time_aware: Metrics,
    pub baseline: Metrics,
    /// Wall time; left out of serialized reports so they stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub reports: Vec<ProbeReport>,
    /// Mean AUROC of the time-aware model minus the baseline, in points.
    pub auroc_gain: f64,
    #[serde(skip)]
    pub seconds: f64,
}

pub fn ablation_run(cfg: &RunConfig, seed: u64) -> Result<AblationRun> {
    let start = Instant::now();
    let corpus = corpus_for(cfg, seed)?;
    let pair = pair_ids(&corpus.modalities(), &cfg.eval.pair)?;
    let stage1 = pretrain_stage1(&corpus, cfg, seed)?;
    let mut metrics = Vec::new();
    for time_aware in [true, false] {
        let (model, _) = pretrain_stage2(&corpus, &stage1.models, cfg, time_aware, seed)?;
        metrics.push(probe_model(&model, &corpus, cfg, pair, seed)?.metrics);
    }
    Ok(AblationRun { seed, time_aware: metrics[0], baseline: metrics[1], seconds: start.elapsed().as_secs_f64() })
}

/// Trains and probes both variants for every configured seed.
pub fn compare_time_aware(cfg: &RunConfig) -> Result<AblationReport> {
    let start = Instant::now();
    let runs = cfg.seeds.iter().map(|&s| ablation_run(cfg, s)).collect::<Result<Vec<_>>>()?;
    let names = cfg.eval.pair.clone();
    let pair = (names[0].clone(), names[1].clone());
    let mut reports = Vec::new();
    for (model, pick) in [(TIME_AWARE, true), (BASELINE, false)] {
        let results: Vec<SeedResult> = runs
            .iter()
            .map(|r| SeedResult {
                task: cfg.eval.task.clone(),
                pair: pair.clone(),
                model: model.into(),
                seed: r.seed,
                metrics: if pick { r.time_aware } else { r.baseline },
            })
            .collect();
        let mut rep = if results.len() >= 2 { aggregate_seeds(&results)? } else { single(&results[0]) };
        rep.config_hash = cfg.short_hash();
        reports.push(rep);
    }
    let auroc_gain = reports[0].mean.auroc - reports[1].mean.auroc;
    Ok(AblationReport { runs, reports, auroc_gain, seconds: start.elapsed().as_secs_f64() })
}

/// A one-seed report; the spread is zero by construction.
pub fn single(r: &SeedResult) -> ProbeReport {
    ProbeReport {
        task: r.task.clone(),
        pair: r.pair.clone(),
        model: r.model.clone(),
        seeds: vec![r.seed],
        per_seed: vec![r.metrics],
        mean: r.metrics,
        sd: Metrics::default(),
        config_hash: String::new(),
        checkpoints: Vec::new(),
    }
}

pub fn stage1_dir(modality: &str) -> String {
    format!("stage1-{modality}")
}

pub fn stage2_dir(time_aware: bool) -> String {
    format!("stage2-{}", if time_aware { TIME_AWARE } else { BASELINE })
}

pub fn finetune_dir(time_aware: bool) -> String {
    format!("finetune-{}", if time_aware { TIME_AWARE } else { BASELINE })
}

pub fn provenance(cfg: &RunConfig, seed: u64) -> Provenance {
    Provenance { seed, config_hash: cfg.short_hash(), run_config: cfg.to_json() }
}

/// Writes every Stage-1 model under `root` and returns the directory names.
pub fn save_stage1_all(models: &[UnimodalModel<f32>], root: &Path, prov: &Provenance) -> Result<Vec<String>> {
    models
        .iter()
        .map(|m| {
            let d = stage1_dir(&m.modality);
            save_stage1(m, &root.join(&d), prov)?;
            Ok(d)
        })
        .collect()
}

/// Fine-tunes a Stage-2 model on `corpus` with fresh fusion adapters.
/// Session statistics are recomputed on the fine-tuning training split.
pub fn finetune(model: &mut CrossModalModel<f32>, corpus: &Corpus, cfg: &RunConfig, seed: u64) -> Result<(Stage2Trace, SessionStats)> {
    if model.modalities != corpus.modalities() {
        return Err(Error::Alignment(format!(
            "model modalities {:?} differ from the corpus's {:?}",
            model.modalities,
            corpus.modalities()
        )));
    }
    prepare_finetune(model, &cfg.finetune.lora, child_seed(seed, "finetune", 0))?;
    let stats = corpus.session_stats()?;
    let train = corpus.groups(Split::Train);
    let val = corpus.groups(Split::Val);
    let hp = cfg.finetune.schedule(train.len());
    let trace = train_stage2(model, &train, &val, &stats, &hp, &corpus.config.noise_policy(), child_seed(seed, "finetune", 1))?;
    Ok((trace, stats))
}

/// All `C(M, 2)` pairs in enumeration order.
pub fn all_pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m).flat_map(|a| (a + 1..m).map(move |b| (a, b))).collect()
}

/// Probes `model` on each pair for one seed.
pub fn probe_pairs(
    model: &CrossModalModel<f32>,
    corpus: &Corpus,
    cfg: &RunConfig,
    pairs: &[(usize, usize)],
    model_name: &str,
    seed: u64,
) -> Result<Vec<SeedResult>> {
    let names = corpus.modalities();
    pairs
        .iter()
        .map(|&pair| {
            let out = probe_model(model, corpus, cfg, pair, seed)?;
            Ok(SeedResult {
                task: cfg.eval.task.clone(),
                pair: (names[pair.0].clone(), names[pair.1].clone()),
                model: model_name.into(),
                seed,
                metrics: out.metrics,
            })
        })
        .collect()
}

/// Groups per-seed results by (task, pair, model) and aggregates each group.
pub fn aggregate_results(results: &[SeedResult], config_hash: &str) -> Result<Vec<ProbeReport>> {
    let mut keys: Vec<(String, (String, String), String)> = Vec::new();
    for r in results {
        let k = (r.task.clone(), r.pair.clone(), r.model.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|k| {
            let group: Vec<SeedResult> =
                results.iter().filter(|r| (&r.task, &r.pair, &r.model) == (&k.0, &k.1, &k.2)).cloned().collect();
            let mut rep = if group.len() >= 2 { aggregate_seeds(&group)? } else { single(&group[0]) };
            rep.config_hash = config_hash.into();
            Ok(rep)
        })
        .collect()
}

/// One row of an embedding dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub split: Split,
    pub session_id: u32,
    pub segment_index: usize,
    pub labels: std::collections::BTreeMap<String, usize>,
    pub vector: Vec<f32>,
}

pub fn embedding_rows(model: &CrossModalModel<f32>, corpus: &Corpus, pair: (usize, usize), stats: &SessionStats) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let groups = corpus.groups(split);
        for e in extract_embeddings(model, &groups, pair, stats)? {
            rows.push(EmbeddingRow {
                split,
                session_id: e.session_id,
                segment_index: e.segment_index,
                labels: e.labels,
                vector: e.vector,
            });
        }
    }
    Ok(rows)
}

/// The configured pair, or the top screened pair when none is configured.
pub fn resolve_pair(cfg: &RunConfig, corpus: &Corpus, stage1: &[UnimodalModel<f32>], seed: u64) -> Result<(usize, usize)> {
    if !cfg.eval.pair.is_empty() {
        return pair_ids(&corpus.modalities(), &cfg.eval.pair);
    }
    let ranked = screen_with_encoders(corpus, stage1, cfg, seed)?;
    ranked
        .first()
        .filter(|e| e.error.is_none())
        .map(|e| e.pair)
        .ok_or_else(|| Error::UndefinedMetric("screening scored no pair".into()))
}

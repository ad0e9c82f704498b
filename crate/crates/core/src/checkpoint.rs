//! Checkpoint directories: a JSON manifest plus one little-endian f32 blob
//! per parameter.
//!
//! A Stage-2 checkpoint stores only what Stage 2 owns. The frozen encoder
//! weights are resolved from the Stage-1 checkpoints it names, which must
//! sit next to it under the same root.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::adapters::{is_adapter_param, LoraConfig};
use crate::crossmodal::{prepare_finetune, CrossConfig, CrossModalModel};
use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::signal::SessionStats;
use crate::store::{f32_to_bytes, read_f32_blob, write_atomic, write_f32_blob};
use crate::unimodal::{EncoderConfig, UnimodalModel};

pub const FORMAT: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub file: String,
    pub trainable: bool,
}

/// Where a checkpoint came from; enough to re-run the producing command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub run_config: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Manifest {
    pub format: u32,
    pub stage: u8,
    pub id: String,
    pub modality: String,
    pub encoder: EncoderConfig,
    pub provenance: Provenance,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Ref {
    pub modality: String,
    pub id: String,
    /// Directory name relative to the checkpoint root.
    pub dir: String,
    pub manifest: Stage1Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Manifest {
    pub format: u32,
    pub stage: u8,
    pub id: String,
    pub time_aware: bool,
    pub cross: CrossConfig,
    pub encoder: EncoderConfig,
    pub modalities: Vec<String>,
    pub session_stats: SessionStats,
    /// Which split the session statistics were computed on.
    pub stats_source: String,
    /// Adapters added for fine-tuning, if any.
    pub finetune: Option<LoraConfig>,
    pub frozen_digest: String,
    pub provenance: Provenance,
    pub stage1: Vec<Stage1Ref>,
    pub params: Vec<ParamEntry>,
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::CorruptCheckpoint(msg.into()))
}

fn blob_name(i: usize) -> String {
    format!("params/{i:04}.f32")
}

/// Content id over names, shapes and raw bits.
fn content_id<'a>(params: impl IntoIterator<Item = &'a Param<f32>>) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name.as_bytes());
        h.update([0]);
        h.update((p.value.nrows() as u64).to_le_bytes());
        h.update((p.value.ncols() as u64).to_le_bytes());
        h.update(f32_to_bytes(&p.value.iter().copied().collect::<Vec<_>>()));
    }
    hex::encode(h.finalize())[..16].to_string()
}

fn write_params(dir: &Path, params: &[&Param<f32>]) -> Result<Vec<ParamEntry>> {
    let mut out = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let file = blob_name(i);
        let data: Vec<f32> = p.value.iter().copied().collect();
        write_f32_blob(&dir.join(&file), &data)?;
        out.push(ParamEntry {
            name: p.name.clone(),
            shape: [p.value.nrows(), p.value.ncols()],
            dtype: "f32".into(),
            file,
            trainable: p.trainable,
        });
    }
    Ok(out)
}

/// Overwrites the named parameters of `targets` from the blobs. The name
/// sets must match exactly.
fn read_params(dir: &Path, entries: &[ParamEntry], targets: Vec<&mut Param<f32>>) -> Result<()> {
    let mut by_name: HashMap<&str, &ParamEntry> = HashMap::new();
    for e in entries {
        if e.dtype != "f32" {
            return corrupt(format!("{}: unsupported dtype {}", e.name, e.dtype));
        }
        if by_name.insert(&e.name, e).is_some() {
            return corrupt(format!("duplicate parameter {}", e.name));
        }
    }
    if by_name.len() != targets.len() {
        return corrupt(format!("manifest lists {} parameters, model has {}", by_name.len(), targets.len()));
    }
    for p in targets {
        let e = match by_name.get(p.name.as_str()) {
            Some(e) => e,
            None => return corrupt(format!("parameter {} missing from manifest", p.name)),
        };
        if e.shape != [p.value.nrows(), p.value.ncols()] {
            return corrupt(format!("{}: shape {:?} does not match the model's {:?}", e.name, e.shape, p.value.dim()));
        }
        let data = read_f32_blob(&dir.join(&e.file), e.shape[0] * e.shape[1])?;
        p.value = ndarray::Array2::from_shape_vec((e.shape[0], e.shape[1]), data).expect("sized");
        p.trainable = e.trainable;
    }
    Ok(())
}

fn read_manifest<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<T> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::MissingDependency(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", path.display())))
}

fn write_manifest<T: Serialize>(dir: &Path, m: &T) -> Result<()> {
    write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(m)?.as_bytes())
}

/// Saves a Stage-1 model and returns its id.
pub fn save_stage1(model: &UnimodalModel<f32>, dir: &Path, prov: &Provenance) -> Result<String> {
    let params = model.params();
    let manifest = Stage1Manifest {
        format: FORMAT,
        stage: 1,
        id: content_id(params.iter().copied()),
        modality: model.modality.clone(),
        encoder: model.cfg.clone(),
        provenance: prov.clone(),
        params: write_params(dir, &params)?,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest.id)
}

pub fn load_stage1(dir: &Path) -> Result<(UnimodalModel<f32>, Stage1Manifest)> {
    let m: Stage1Manifest = read_manifest(dir)?;
    if m.format != FORMAT || m.stage != 1 {
        return corrupt(format!("{}: not a Stage-1 checkpoint (format {}, stage {})", dir.display(), m.format, m.stage));
    }
    let mut model = UnimodalModel::new(&m.modality, &m.encoder, 0)?;
    read_params(dir, &m.params, model.params_mut())?;
    if content_id(model.params()) != m.id {
        return corrupt(format!("{}: content does not match id {}", dir.display(), m.id));
    }
    Ok((model, m))
}

fn encoder_base_names(model: &CrossModalModel<f32>) -> HashSet<String> {
    model.encoders.params().into_iter().filter(|p| !is_adapter_param(&p.name)).map(|p| p.name.clone()).collect()
}

/// What a Stage-2 checkpoint needs besides the model itself.
pub struct Stage2Save<'a> {
    pub root: &'a Path,
    pub name: &'a str,
    /// Stage-1 checkpoint directory names under `root`, one per modality.
    pub stage1_dirs: &'a [String],
    pub stats: SessionStats,
    pub stats_source: &'a str,
    pub finetune: Option<LoraConfig>,
    pub provenance: &'a Provenance,
}

pub fn save_stage2(model: &CrossModalModel<f32>, spec: &Stage2Save) -> Result<String> {
    if spec.stage1_dirs.len() != model.num_modalities() {
        return Err(Error::MissingDependency(format!(
            "{} Stage-1 checkpoints for {} modalities",
            spec.stage1_dirs.len(),
            model.num_modalities()
        )));
    }
    let mut stage1 = Vec::new();
    for (name, d) in model.modalities.iter().zip(spec.stage1_dirs) {
        let m: Stage1Manifest = read_manifest(&spec.root.join(d))?;
        if &m.modality != name {
            return Err(Error::MissingDependency(format!("{d} holds modality {}, expected {name}", m.modality)));
        }
        stage1.push(Stage1Ref { modality: name.clone(), id: m.id.clone(), dir: d.clone(), manifest: m });
    }
    let base = encoder_base_names(model);
    let own: Vec<&Param<f32>> = model.params().into_iter().filter(|p| !base.contains(&p.name)).collect();
    let dir = spec.root.join(spec.name);
    let manifest = Stage2Manifest {
        format: FORMAT,
        stage: 2,
        id: content_id(model.params()),
        time_aware: model.time_aware(),
        cross: model.cfg.clone(),
        encoder: model.enc_cfg.clone(),
        modalities: model.modalities.clone(),
        session_stats: spec.stats,
        stats_source: spec.stats_source.into(),
        finetune: spec.finetune.clone(),
        frozen_digest: model.frozen_digest(),
        provenance: spec.provenance.clone(),
        stage1,
        params: write_params(&dir, &own)?,
    };
    write_manifest(&dir, &manifest)?;
    Ok(manifest.id)
}

/// Loads a Stage-2 checkpoint, resolving its Stage-1 dependencies under
/// `root` by recorded id.
pub fn load_stage2(root: &Path, name: &str) -> Result<(CrossModalModel<f32>, Stage2Manifest)> {
    let dir = root.join(name);
    let m: Stage2Manifest = read_manifest(&dir)?;
    if m.format != FORMAT || m.stage != 2 {
        return corrupt(format!("{}: not a Stage-2 checkpoint (format {}, stage {})", dir.display(), m.format, m.stage));
    }
    if m.cross.time_aware != m.time_aware {
        return corrupt("time_aware flag disagrees with the recorded config");
    }
    let mut stage1 = Vec::with_capacity(m.stage1.len());
    for r in &m.stage1 {
        let (model, got) = load_stage1(&root.join(&r.dir))
            .map_err(|e| Error::MissingDependency(format!("Stage-1 checkpoint {} ({}): {e}", r.id, r.dir)))?;
        if got.id != r.id {
            return Err(Error::MissingDependency(format!("{} holds Stage-1 id {}, expected {}", r.dir, got.id, r.id)));
        }
        stage1.push(Some(model));
    }
    let mut model = CrossModalModel::from_stage1(&m.cross, m.modalities.clone(), stage1, 0)?;
    if let Some(lora) = &m.finetune {
        prepare_finetune(&mut model, lora, 0)?;
    }
    let base = encoder_base_names(&model);
    let own: Vec<&mut Param<f32>> = model.params_mut().into_iter().filter(|p| !base.contains(&p.name)).collect();
    read_params(&dir, &m.params, own)?;
    // encoder base weights came from Stage 1; restore their frozen flag
    for p in model.encoders.params_mut() {
        if !is_adapter_param(&p.name) {
            p.trainable = false;
        }
    }
    if content_id(model.params()) != m.id || model.frozen_digest() != m.frozen_digest {
        return corrupt(format!("{}: content does not match id {}", dir.display(), m.id));
    }
    Ok((model, m))
}

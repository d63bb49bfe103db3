//! Versioned binary checkpoint container.
//!
//! ```text
//! "WOGCK1" | version u32 | stage u8 | header_len u32 | header JSON | sha256(header) | blobs
//! ```
//!
//! The JSON header lists every parameter with its shape, frozen flag, byte
//! range and SHA-256; blobs are little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::future_encoder;
use crate::policy::{ModelConfig, Policy};
use crate::tensor::{ParamStore, Tensor};
use crate::training::ActionNorm;
use crate::vision::VisionConfig;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"WOGCK1";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Magic, version, stage byte and header length.
const FIXED: usize = 15;
/// SHA-256 of the JSON header, stored right after it.
const DIGEST: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "I")]
    One,
    #[serde(rename = "II")]
    Two,
    #[serde(rename = "finetune")]
    Finetune,
}

impl Stage {
    pub fn code(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Finetune => 3,
        }
    }

    fn from_code(c: u8) -> Option<Stage> {
        match c {
            1 => Some(Stage::One),
            2 => Some(Stage::Two),
            3 => Some(Stage::Finetune),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::One => "I",
            Stage::Two => "II",
            Stage::Finetune => "finetune",
        }
    }

    /// Stage II and later carry a frozen future encoder.
    pub fn has_frozen_encoder(self) -> bool {
        self != Stage::One
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Training recipe that produced it, such as `wog_full` or `vanilla`.
    pub variant: String,
    pub model: ModelConfig,
    pub vision: VisionConfig,
    pub seed: u64,
    pub action_norm: ActionNorm,
    pub encoder_checksum: Option<String>,
    /// Echo of the run configuration.
    pub config: serde_json::Value,
    pub params: ParamStore,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
    offset: u64,
    len: u64,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    stage: Stage,
    variant: String,
    model: ModelConfig,
    vision: VisionConfig,
    seed: u64,
    action_norm: ActionNorm,
    encoder_checksum: Option<String>,
    config: serde_json::Value,
    params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn from_policy(
        policy: &Policy,
        stage: Stage,
        variant: &str,
        vision: &VisionConfig,
        seed: u64,
        action_norm: &ActionNorm,
        config: serde_json::Value,
    ) -> Self {
        let encoder_checksum = stage.has_frozen_encoder().then(|| future_encoder::checksum(&policy.store));
        Self {
            stage,
            variant: variant.to_string(),
            model: policy.cfg.clone(),
            vision: vision.clone(),
            seed,
            action_norm: action_norm.clone(),
            encoder_checksum,
            config,
            params: policy.store.clone(),
        }
    }

    /// Rebuilds the policy with this checkpoint's parameters and freeze flags.
    pub fn to_policy(&self) -> Result<Policy> {
        let mut policy = Policy::new(&self.model, &self.vision, self.seed)?;
        if policy.store.len() != self.params.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} parameters stored, model has {}",
                self.params.len(),
                policy.store.len()
            ))
            .into());
        }
        for (_, p) in self.params.iter() {
            let id = policy.store.id(&p.name)?;
            let dst = policy.store.get_mut(id)?;
            if dst.tensor.shape() != p.tensor.shape() {
                return Err(CheckpointError::Malformed(format!("shape of {}", p.name)).into());
            }
            dst.tensor.data_mut().copy_from_slice(p.tensor.data());
            dst.frozen = p.frozen;
        }
        Ok(policy)
    }

    /// Fails unless the checkpoint is one of `allowed` stages.
    pub fn require_stage(&self, op: &'static str, required: &'static str, allowed: &[Stage]) -> Result<()> {
        if allowed.contains(&self.stage) {
            Ok(())
        } else {
            Err(CheckpointError::Stage {
                op,
                required,
                found: self.stage.as_str().to_string(),
            }
            .into())
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = Vec::new();
        let mut entries = Vec::new();
        for (_, p) in self.params.iter() {
            let bytes = p.tensor.to_le_bytes();
            entries.push(ParamEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                frozen: p.frozen,
                offset: blobs.len() as u64,
                len: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
            blobs.extend_from_slice(&bytes);
        }
        let header = Header {
            stage: self.stage,
            variant: self.variant.clone(),
            model: self.model.clone(),
            vision: self.vision.clone(),
            seed: self.seed,
            action_norm: self.action_norm.clone(),
            encoder_checksum: self.encoder_checksum.clone(),
            config: self.config.clone(),
            params: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(FIXED + json.len() + DIGEST + blobs.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.stage.code());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&Sha256::digest(&json));
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let truncated = |what: &str| Error::from(CheckpointError::Truncated(what.to_string()));
        if buf.len() < 6 || &buf[..6] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        if buf.len() < FIXED {
            return Err(truncated("fixed header"));
        }
        let version = u32::from_le_bytes(buf[6..10].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            }
            .into());
        }
        let stage_code = buf[10];
        let hlen = u32::from_le_bytes(buf[11..15].try_into().expect("4 bytes")) as usize;
        let json_end = FIXED + hlen;
        let body = json_end + DIGEST;
        if buf.len() < body {
            return Err(truncated("JSON header"));
        }
        let json = &buf[FIXED..json_end];
        if Sha256::digest(json).as_slice() != &buf[json_end..body] {
            return Err(CheckpointError::Checksum("header".into()).into());
        }
        let header: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if Stage::from_code(stage_code) != Some(header.stage) {
            return Err(CheckpointError::Malformed("stage byte disagrees with header".into()).into());
        }
        let blobs = &buf[body..];
        let mut params = ParamStore::new();
        let mut expected_end = 0u64;
        for e in &header.params {
            let end = e.offset.checked_add(e.len).ok_or_else(|| CheckpointError::Malformed("blob range".into()))?;
            if end as usize > blobs.len() {
                return Err(truncated(&e.name));
            }
            let bytes = &blobs[e.offset as usize..end as usize];
            if hex::encode(Sha256::digest(bytes)) != e.sha256 {
                return Err(CheckpointError::Checksum(e.name.clone()).into());
            }
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(e.shape.clone(), data).map_err(|_| CheckpointError::Malformed(format!("shape of {}", e.name)))?;
            let id = params.add(e.name.clone(), tensor)?;
            params.get_mut(id)?.frozen = e.frozen;
            expected_end = expected_end.max(end);
        }
        if expected_end as usize != blobs.len() {
            return Err(CheckpointError::Malformed("trailing bytes after parameter blobs".into()).into());
        }
        let ck = Self {
            stage: header.stage,
            variant: header.variant,
            model: header.model,
            vision: header.vision,
            seed: header.seed,
            action_norm: header.action_norm,
            encoder_checksum: header.encoder_checksum,
            config: header.config,
            params,
        };
        ck.verify_encoder()?;
        Ok(ck)
    }

    /// For stage II and later, the stored encoder must match its recorded checksum.
    pub fn verify_encoder(&self) -> Result<()> {
        if !self.stage.has_frozen_encoder() {
            return Ok(());
        }
        let expected = self
            .encoder_checksum
            .clone()
            .ok_or_else(|| CheckpointError::Malformed("stage-II checkpoint without encoder checksum".into()))?;
        let found = future_encoder::checksum(&self.params);
        if found != expected {
            return Err(CheckpointError::EncoderChecksum { expected, found }.into());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    ck.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

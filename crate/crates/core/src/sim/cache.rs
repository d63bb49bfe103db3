//! Episode cache: a little-endian binary container plus a JSON manifest.
//!
//! Layout of a `.wogep` file:
//!
//! ```text
//! "WOGEP1" | task u8 | seed u64 | count u32 | height u32 | width u32 | channels u32
//!          | action_dim u32 | instruction_len u32
//! per episode:
//!   len u32 | seed u64 | success u8 | labeled u8 | source u8
//!   | instruction u32 * instruction_len | frames f32 * (len+1)*h*w*c | actions f64 * len*3
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::demos::generate_demos_with;
use super::{Episode, Image, RenderConfig, SourceTag, Task, TaskParams, ACTION_DIM, INSTRUCTION_LEN};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 6] = b"WOGEP1";
/// Bumped whenever demo generation changes, so stale caches get new keys.
const GENERATOR_VERSION: u32 = 2;
const MANIFEST: &str = "manifest.json";

/// Everything that determines the content of a cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSpec {
    pub task: Task,
    pub n: usize,
    pub seed: u64,
    pub render: RenderConfig,
    pub params: TaskParams,
    pub source_tag: SourceTag,
    pub label_fraction: f64,
}

impl CacheSpec {
    /// Content address: hex sha256 over the canonical JSON of the spec.
    pub fn key(&self) -> String {
        let json = serde_json::to_vec(&(GENERATOR_VERSION, self)).expect("spec serializes");
        let digest = Sha256::digest(&json);
        format!("{}-{}", self.task, &hex::encode(digest)[..16])
    }

    pub fn generate(&self) -> Result<Vec<Episode>> {
        generate_demos_with(
            self.task,
            self.n,
            self.seed,
            &self.render,
            &self.params,
            self.source_tag,
            self.label_fraction,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub key: String,
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
    pub episodes: usize,
    pub spec: CacheSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CacheManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let tmp = dir.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.key == key)
    }
}

/// Serializes episodes to the binary container.
pub fn encode_episodes(task: Task, seed: u64, episodes: &[Episode]) -> Result<Vec<u8>> {
    let (h, w) = episodes
        .first()
        .and_then(|e| e.frames.first())
        .map(|f| (f.height, f.width))
        .unwrap_or((0, 0));
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.push(task.code());
    out.extend_from_slice(&seed.to_le_bytes());
    for v in [episodes.len(), h, w, 3, ACTION_DIM, INSTRUCTION_LEN] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for e in episodes {
        if e.instruction.len() != INSTRUCTION_LEN || e.frames.len() != e.actions.len() + 1 || e.task != task {
            return Err(crate::error::invalid("encode_episodes", format!("inconsistent episode seed {}", e.seed)));
        }
        out.extend_from_slice(&(e.actions.len() as u32).to_le_bytes());
        out.extend_from_slice(&e.seed.to_le_bytes());
        out.extend_from_slice(&[u8::from(e.success), u8::from(e.has_action_labels), e.source_tag.code()]);
        for t in &e.instruction {
            out.extend_from_slice(&t.to_le_bytes());
        }
        for f in &e.frames {
            if f.height != h || f.width != w {
                return Err(crate::error::invalid("encode_episodes", "mixed frame sizes"));
            }
            for v in &f.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for a in e.actions.iter().flatten() {
            out.extend_from_slice(&a.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(cache_err(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn cache_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Cache {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Parses the binary container. `path` is only used in error messages.
pub fn decode_episodes(buf: &[u8], path: &Path) -> Result<(Task, u64, Vec<Episode>)> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(6)? != CACHE_MAGIC {
        return Err(cache_err(path, "bad magic"));
    }
    let task = Task::from_code(r.u8()?).ok_or_else(|| cache_err(path, "unknown task code"))?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let (adim, ilen) = (r.u32()? as usize, r.u32()? as usize);
    if c != 3 || adim != ACTION_DIM || ilen != INSTRUCTION_LEN {
        return Err(cache_err(path, format!("unsupported dims c={c} a={adim} instr={ilen}")));
    }
    let mut episodes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let ep_seed = r.u64()?;
        let success = r.u8()? != 0;
        let labeled = r.u8()? != 0;
        let source_tag = SourceTag::from_code(r.u8()?).ok_or_else(|| cache_err(path, "unknown source tag"))?;
        let instruction = (0..ilen).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let mut frames = Vec::with_capacity(len + 1);
        for _ in 0..=len {
            let raw = r.take(h * w * c * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            frames.push(Image { height: h, width: w, data });
        }
        let raw = r.take(len * adim * 8)?;
        let flat: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let actions = flat.chunks_exact(3).map(|a| [a[0], a[1], a[2]]).collect();
        episodes.push(Episode {
            task,
            instruction,
            frames,
            actions,
            success,
            seed: ep_seed,
            source_tag,
            has_action_labels: labeled,
        });
    }
    if r.pos != buf.len() {
        return Err(cache_err(path, "trailing bytes"));
    }
    Ok((task, seed, episodes))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the episodes for `spec` under `dir` and records them in the manifest.
pub fn save_episodes(dir: &Path, spec: &CacheSpec, episodes: &[Episode]) -> Result<ManifestEntry> {
    fs::create_dir_all(dir)?;
    let key = spec.key();
    let file = format!("{key}.wogep");
    let bytes = encode_episodes(spec.task, spec.seed, episodes)?;
    let tmp = dir.join(format!("{file}.tmp"));
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, dir.join(&file))?;
    let entry = ManifestEntry {
        key: key.clone(),
        file,
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
        episodes: episodes.len(),
        spec: spec.clone(),
    };
    let mut manifest = CacheManifest::load(dir)?;
    manifest.entries.retain(|e| e.key != key);
    manifest.entries.push(entry.clone());
    manifest.entries.sort_by(|a, b| a.key.cmp(&b.key));
    manifest.save(dir)?;
    Ok(entry)
}

/// Loads the entry for `spec`, verifying its checksum against the manifest.
pub fn load_episodes(dir: &Path, spec: &CacheSpec) -> Result<Vec<Episode>> {
    let manifest = CacheManifest::load(dir)?;
    let key = spec.key();
    let entry = manifest
        .get(&key)
        .ok_or_else(|| cache_err(dir, format!("no manifest entry for {key}")))?;
    let path: PathBuf = dir.join(&entry.file);
    let bytes = fs::read(&path)?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(cache_err(&path, "checksum mismatch"));
    }
    Ok(decode_episodes(&bytes, &path)?.2)
}

/// Returns cached episodes for `spec`, generating and saving them on a miss.
pub fn load_or_generate(dir: &Path, spec: &CacheSpec) -> Result<(Vec<Episode>, ManifestEntry)> {
    let manifest = CacheManifest::load(dir)?;
    if let Some(entry) = manifest.get(&spec.key()) {
        if dir.join(&entry.file).exists() {
            let eps = load_episodes(dir, spec)?;
            return Ok((eps, entry.clone()));
        }
    }
    let eps = spec.generate()?;
    let entry = save_episodes(dir, spec, &eps)?;
    Ok((eps, entry))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> CacheSpec {
        CacheSpec {
            task: Task::PickPlace,
            n: 3,
            seed: 5,
            render: RenderConfig::default(),
            params: TaskParams::default(),
            source_tag: SourceTag::Robot,
            label_fraction: 0.5,
        }
    }

    #[test]
    fn round_trip_and_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        let eps = s.generate().unwrap();
        let entry = save_episodes(dir.path(), &s, &eps).unwrap();
        assert_eq!(load_episodes(dir.path(), &s).unwrap(), eps);
        let again = encode_episodes(s.task, s.seed, &s.generate().unwrap()).unwrap();
        assert_eq!(sha256_hex(&again), entry.sha256);
    }

    #[test]
    fn corruption_detected() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        let entry = save_episodes(dir.path(), &s, &s.generate().unwrap()).unwrap();
        let path = dir.path().join(&entry.file);
        let mut bytes = fs::read(&path).unwrap();
        bytes[100] ^= 1;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_episodes(dir.path(), &s), Err(Error::Cache { .. })));
        assert!(decode_episodes(&bytes[..50], &path).is_err());
    }

    #[test]
    fn keys_separate_specs() {
        let a = spec();
        let b = CacheSpec { seed: 6, ..spec() };
        let c = CacheSpec {
            render: RenderConfig {
                background_color_id: 1,
                ..RenderConfig::default()
            },
            ..spec()
        };
        assert_ne!(a.key(), b.key());
        assert_ne!(a.key(), c.key());
        assert_eq!(a.key(), spec().key());
    }
}

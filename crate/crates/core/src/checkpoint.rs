//! Binary checkpoints.
//!
//! Layout: the magic bytes `FMW1`, a little-endian `u64` manifest length,
//! a JSON manifest, then every tensor as little-endian `f64` in manifest
//! order. The manifest's `checksum` is the SHA-256 of the manifest
//! (serialized with an empty checksum) followed by the payload, so any
//! flipped byte is caught on load. Serialization is canonical: loading and
//! saving again reproduces the file byte for byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, ModelConfig};
use crate::error::{Error, Result};
use crate::ssl::{HeadConfig, ProjectionHead, SslModel};
use crate::tensor::{hex, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"FMW1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    /// Start, in `f64` elements, within the payload.
    offset: usize,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    kind: String,
    config: Value,
    state: Value,
    tensors: Vec<TensorEntry>,
    checksum: String,
}

/// Named groups of parameter stores plus free-form config and training
/// state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub state: Value,
    pub groups: Vec<(String, ParamStore)>,
}

fn digest(manifest: &Manifest, payload: &[u8]) -> Result<String> {
    let mut m = manifest.clone();
    m.checksum.clear();
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&m)?);
    h.update(payload);
    Ok(hex(&h.finalize()))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: Value, state: Value) -> Self {
        Self {
            kind: kind.into(),
            config,
            state,
            groups: Vec::new(),
        }
    }

    pub fn add_group(&mut self, name: impl Into<String>, store: &ParamStore) -> &mut Self {
        self.groups.push((name.into(), store.clone()));
        self
    }

    pub fn group(&self, name: &str) -> Result<&ParamStore> {
        self.groups
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| corrupt(format!("{} checkpoint has no `{name}` group", self.kind)))
    }

    pub fn has_group(&self, name: &str) -> bool {
        self.groups.iter().any(|(n, _)| n == name)
    }

    /// Deserialize `config[key]`.
    pub fn config_field<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .config
            .get(key)
            .ok_or_else(|| corrupt(format!("{} checkpoint config lacks `{key}`", self.kind)))?;
        serde_json::from_value(v.clone()).map_err(|e| corrupt(format!("config `{key}`: {e}")))
    }

    pub fn expect_kind(&self, kinds: &[&str]) -> Result<()> {
        if kinds.contains(&self.kind.as_str()) {
            Ok(())
        } else {
            Err(corrupt(format!("expected a {} checkpoint, found `{}`", kinds.join(" or "), self.kind)))
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut offset = 0;
        for (group, store) in &self.groups {
            for (_, name, t) in store.iter() {
                tensors.push(TensorEntry {
                    group: group.clone(),
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                    trainable: t.requires_grad(),
                });
                offset += t.numel();
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            state: self.state.clone(),
            tensors,
            checksum: String::new(),
        };
        manifest.checksum = digest(&manifest, &payload)?;
        let header = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(12 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_add(12))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("manifest length exceeds file size"))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[12..end]).map_err(|e| corrupt(format!("unreadable manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {}", manifest.format_version)));
        }
        let payload = &bytes[end..];
        if digest(&manifest, payload)? != manifest.checksum {
            return Err(corrupt("checksum mismatch; refusing to load"));
        }
        let mut expected = 0usize;
        for t in &manifest.tensors {
            if t.offset != expected {
                return Err(corrupt(format!("tensor `{}.{}` at offset {}, expected {expected}", t.group, t.name, t.offset)));
            }
            expected += t.shape.iter().product::<usize>();
        }
        if payload.len() != expected * 8 {
            return Err(corrupt(format!("payload has {} bytes, manifest describes {}", payload.len(), expected * 8)));
        }
        let mut groups: Vec<(String, ParamStore)> = Vec::new();
        for t in &manifest.tensors {
            let n: usize = t.shape.iter().product();
            let data: Vec<f64> = payload[t.offset * 8..(t.offset + n) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(t.shape.clone(), data)?.with_requires_grad(t.trainable);
            tensor.validate().map_err(|e| corrupt(format!("tensor `{}.{}`: {e}", t.group, t.name)))?;
            if groups.last().is_none_or(|(g, _)| g != &t.group) {
                if groups.iter().any(|(g, _)| g == &t.group) {
                    return Err(corrupt(format!("group `{}` is not contiguous", t.group)));
                }
                groups.push((t.group.clone(), ParamStore::new()));
            }
            let store = &mut groups.last_mut().expect("just pushed").1;
            if store.id(&t.name).is_some() {
                return Err(corrupt(format!("duplicate tensor `{}.{}`", t.group, t.name)));
            }
            store.insert_tensor_unchecked(t.name.clone(), tensor);
        }
        Ok(Self {
            kind: manifest.kind,
            config: manifest.config,
            state: manifest.state,
            groups,
        })
    }

    /// Write to a temporary file beside `path`, then rename over it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file_name = path.file_name().ok_or_else(|| Error::Usage(format!("{} is not a file path", path.display())))?;
        let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()
        };
        if let Err(e) = write() {
            let _ = fs::remove_file(&tmp);
            return Err(Error::io(&tmp, e));
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Add `model` under `<prefix>.backbone`, `<prefix>.cls_head`,
    /// `<prefix>.patch_head` and `<prefix>.centers`.
    pub fn add_ssl(&mut self, prefix: &str, model: &SslModel) -> &mut Self {
        let mut centers = ParamStore::new();
        for (name, head) in [("cls", &model.cls_head), ("patch", &model.patch_head)] {
            let k = head.center.len();
            centers.add(name, Tensor::new([k], head.center.clone()).expect("center length"));
        }
        centers.freeze();
        self.add_group(format!("{prefix}.backbone"), &model.backbone.params)
            .add_group(format!("{prefix}.cls_head"), &model.cls_head.params)
            .add_group(format!("{prefix}.patch_head"), &model.patch_head.params)
            .add_group(format!("{prefix}.centers"), &centers)
    }

    /// Rebuild an [`SslModel`] stored by [`Self::add_ssl`]; configs come
    /// from `config["<prefix>_model"]` and `config["<prefix>_head"]`.
    pub fn ssl_model(&self, prefix: &str) -> Result<SslModel> {
        let model: ModelConfig = self.config_field(&format!("{prefix}_model"))?;
        let head: HeadConfig = self.config_field(&format!("{prefix}_head"))?;
        let backbone = Backbone::from_params(model, self.group(&format!("{prefix}.backbone"))?.clone())?;
        let mut cls_head = ProjectionHead::from_params(head.clone(), self.group(&format!("{prefix}.cls_head"))?.clone())?;
        let mut patch_head = ProjectionHead::from_params(head, self.group(&format!("{prefix}.patch_head"))?.clone())?;
        let centers = self.group(&format!("{prefix}.centers"))?;
        for (name, h) in [("cls", &mut cls_head), ("patch", &mut patch_head)] {
            let t = centers
                .id(name)
                .map(|id| centers.get(id))
                .ok_or_else(|| corrupt(format!("missing `{name}` centre")))?;
            if t.numel() != h.config.prototypes {
                return Err(corrupt(format!("`{name}` centre has {} entries for {} prototypes", t.numel(), h.config.prototypes)));
            }
            h.center = t.data().to_vec();
        }
        Ok(SslModel {
            backbone,
            cls_head,
            patch_head,
        })
    }

    /// The backbone for downstream use: the teacher's in pretraining
    /// checkpoints, the student's in distillation checkpoints, or a bare
    /// `backbone` group.
    pub fn backbone(&self) -> Result<Backbone> {
        for (group, key) in [("teacher.backbone", "teacher_model"), ("student.backbone", "student_model"), ("backbone", "model")] {
            if self.has_group(group) {
                let cfg: ModelConfig = self.config_field(key)?;
                return Backbone::from_params(cfg, self.group(group)?.clone());
            }
        }
        Err(corrupt(format!("{} checkpoint holds no backbone", self.kind)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Preset;
    use serde_json::json;

    fn ssl_ckpt() -> (SslModel, Checkpoint) {
        let head = HeadConfig {
            hidden: 8,
            bottleneck: 4,
            prototypes: 6,
            ..Default::default()
        };
        let mut m = SslModel::new(ModelConfig::preset(Preset::Tiny), head.clone(), 4).unwrap();
        m.cls_head.center = (0..6).map(|i| i as f64 * 0.1 + 1e-17).collect();
        let mut c = Checkpoint::new(
            "pretrain",
            json!({ "teacher_model": m.backbone.config, "teacher_head": head }),
            json!({ "step": 3 }),
        );
        c.add_ssl("teacher", &m);
        (m, c)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (m, c) = ssl_ckpt();
        let a = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back.to_bytes().unwrap(), a);
        let m2 = back.ssl_model("teacher").unwrap();
        assert_eq!(m2.checksum(), m.checksum());
        assert_eq!(m2.cls_head.center, m.cls_head.center);
        assert_eq!(back.backbone().unwrap().checksum(), m.backbone.checksum());
        assert_eq!(back.state["step"], 3);
    }

    #[test]
    fn corruption_refused() {
        let (_, c) = ssl_ckpt();
        let good = c.to_bytes().unwrap();
        for pos in [20, good.len() / 2, good.len() - 1] {
            let mut bad = good.clone();
            bad[pos] ^= 0x01;
            assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))), "byte {pos}");
        }
        assert!(Checkpoint::from_bytes(&good[..good.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(b"FMW2xxxxxxxxxxxx").is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let (_, c) = ssl_ckpt();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("m.fmw");
        c.save(&p).unwrap();
        c.save(&p).unwrap();
        let names: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
        assert_eq!(fs::read(&p).unwrap(), c.to_bytes().unwrap());
        assert!(Checkpoint::load(&p).unwrap().expect_kind(&["distill"]).is_err());
    }
}

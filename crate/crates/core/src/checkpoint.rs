//! Binary container for models, adapters and resumable training state.
//!
//! Layout: `u64` little-endian header length, the UTF-8 JSON [`Header`],
//! then every tensor's values as little-endian `f64` in header order. The
//! header carries the SHA-256 of that payload.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::lora::{AdaptedModel, LoraConfig};
use crate::tiny_lm::{AdapterWeights, Model, ModelConfig, Vocab};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Model,
    Adapter,
    TrainState,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mode: Option<String>,
    pub stage: Option<usize>,
    pub seed: u64,
    /// training sample-presentations behind the stored weights
    #[serde(default)]
    pub presentations: Option<usize>,
}

/// Where an adapter file's base model lives, relative to the adapter file
/// when not absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseRef {
    pub path: String,
    pub payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub model_config: ModelConfig,
    /// non-reserved vocabulary codepoints in id order
    pub vocab: String,
    pub provenance: Provenance,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    #[serde(default)]
    pub base: Option<BaseRef>,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
    /// free-form state owned by the writer (e.g. trainer progress)
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Header {
    pub fn new(kind: CheckpointKind, model_config: &ModelConfig, vocab: &Vocab, provenance: Provenance) -> Header {
        Header {
            format_version: FORMAT_VERSION,
            kind,
            model_config: model_config.clone(),
            vocab: vocab.chars().iter().collect(),
            provenance,
            lora: None,
            base: None,
            tensors: Vec::new(),
            payload_sha256: String::new(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::from_chars(self.vocab.chars())
    }
}

fn payload_bytes(tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(tensors.iter().map(|(_, t)| t.len() * 8).sum());
    for (_, t) in tensors {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

/// Fills in the tensor table and checksum of `header`, then writes the file.
/// Returns the payload checksum.
pub fn write_checkpoint(path: &Path, mut header: Header, tensors: &[(String, &Tensor)]) -> Result<String> {
    let payload = payload_bytes(tensors);
    header.tensors = tensors
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    header.payload_sha256 = hex::encode(Sha256::digest(&payload));
    let json = serde_json::to_vec(&header).map_err(|e| Error::CorruptFile(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let write = |f: &mut fs::File| -> std::io::Result<()> {
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&payload)?;
        f.flush()
    };
    write(&mut f).map_err(|e| Error::io(path, e))?;
    Ok(header.payload_sha256)
}

/// Reads and verifies a checkpoint. Tensors come back in header order.
pub fn read_checkpoint(path: &Path) -> Result<(Header, Vec<Tensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<(Header, Vec<Tensor>)> {
    let corrupt = |m: &str| Error::CorruptFile(m.to_string());
    if bytes.len() < 8 {
        return Err(corrupt("file shorter than its length prefix"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let hend = usize::try_from(hlen)
        .ok()
        .and_then(|h| h.checked_add(8))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header length exceeds file size"))?;
    // version first, so files from other versions report a version error
    // even if the rest of their header no longer parses
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes[8..hend]).map_err(|e| Error::CorruptFile(format!("header: {e}")))?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt("header has no format_version"))? as u32;
    if found != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| Error::CorruptFile(format!("header: {e}")))?;
    let payload = &bytes[hend..];
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch"));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut off = 0;
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = off + n * 8;
        if end > payload.len() {
            return Err(corrupt("payload shorter than the tensor table"));
        }
        let data = payload[off..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
        off = end;
    }
    if off != payload.len() {
        return Err(corrupt("trailing bytes after the last tensor"));
    }
    Ok((header, tensors))
}

fn expect_kind(header: &Header, kind: CheckpointKind) -> Result<()> {
    if header.kind != kind {
        return Err(Error::CorruptFile(format!(
            "expected a {kind:?} checkpoint, found {:?}",
            header.kind
        )));
    }
    Ok(())
}

/// Copies `tensors` into `targets` after checking names and shapes.
pub fn assign_tensors(
    entries: &[TensorEntry],
    tensors: Vec<Tensor>,
    names: &[String],
    targets: Vec<&mut Tensor>,
) -> Result<()> {
    if entries.len() != targets.len() || names.len() != targets.len() {
        return Err(Error::CorruptFile(format!(
            "expected {} tensors, found {}",
            targets.len(),
            entries.len()
        )));
    }
    for (((entry, t), name), slot) in entries.iter().zip(tensors).zip(names).zip(targets) {
        if &entry.name != name || t.shape() != slot.shape() {
            return Err(Error::CorruptFile(format!(
                "tensor `{}` {:?} does not fit `{}` {:?}",
                entry.name,
                t.shape(),
                name,
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}

pub fn save_model(path: &Path, model: &Model, vocab: &Vocab, provenance: Provenance) -> Result<String> {
    let header = Header::new(CheckpointKind::Model, &model.config, vocab, provenance);
    write_checkpoint(path, header, &model.named_parameters())
}

pub fn load_model(path: &Path) -> Result<(Model, Vocab, Header)> {
    let (header, tensors) = read_checkpoint(path)?;
    expect_kind(&header, CheckpointKind::Model)?;
    let model = model_from(&header, tensors)?;
    Ok((model, header.vocab(), header))
}

fn model_from(header: &Header, tensors: Vec<Tensor>) -> Result<Model> {
    let mut model = Model::init(header.model_config.clone())?;
    let names = model.parameter_names();
    assign_tensors(&header.tensors, tensors, &names, model.parameters_mut())?;
    Ok(model)
}

/// Writes only the adapter tensors plus a reference to `base_path`, which
/// must already hold the base model.
pub fn save_adapter(
    path: &Path,
    adapted: &AdaptedModel,
    vocab: &Vocab,
    base_path: &Path,
    provenance: Provenance,
) -> Result<String> {
    let (base_header, _) = read_checkpoint(base_path)?;
    let mut header = Header::new(CheckpointKind::Adapter, &adapted.base.config, vocab, provenance);
    header.lora = Some(adapted.config.clone());
    header.base = Some(BaseRef {
        path: relative_to(base_path, path),
        payload_sha256: base_header.payload_sha256,
    });
    write_checkpoint(path, header, &adapted.trainable_parameters())
}

fn relative_to(target: &Path, from_file: &Path) -> String {
    let dir = from_file.parent().unwrap_or(Path::new(""));
    match target.strip_prefix(dir) {
        Ok(rel) if !dir.as_os_str().is_empty() => rel.to_string_lossy().into_owned(),
        _ => std::path::absolute(target)
            .unwrap_or_else(|_| target.to_path_buf())
            .to_string_lossy()
            .into_owned(),
    }
}

fn resolve_base(adapter_path: &Path, base: &BaseRef) -> PathBuf {
    let p = Path::new(&base.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        adapter_path.parent().unwrap_or(Path::new("")).join(p)
    }
}

pub fn load_adapter(path: &Path) -> Result<(AdaptedModel, Vocab, Header)> {
    let (header, tensors) = read_checkpoint(path)?;
    expect_kind(&header, CheckpointKind::Adapter)?;
    let base_ref = header
        .base
        .as_ref()
        .ok_or_else(|| Error::MissingBase("adapter header names no base model".into()))?;
    let base_path = resolve_base(path, base_ref);
    if !base_path.exists() {
        return Err(Error::MissingBase(base_path.display().to_string()));
    }
    let (base, _, base_header) = load_model(&base_path)?;
    if base_header.payload_sha256 != base_ref.payload_sha256 {
        return Err(Error::MissingBase(format!(
            "{} does not hold the base this adapter was trained on",
            base_path.display()
        )));
    }
    let lora = header
        .lora
        .clone()
        .ok_or_else(|| Error::CorruptFile("adapter header has no lora config".into()))?;
    let mut adapted = crate::lora::attach(base, lora)?;
    let names: Vec<String> = adapted.trainable_parameters().into_iter().map(|(n, _)| n).collect();
    assign_tensors(&header.tensors, tensors, &names, adapted.trainable_parameters_mut())?;
    Ok((adapted, header.vocab(), header))
}

/// A model for evaluation, from either a model or an adapter checkpoint.
pub enum LoadedModel {
    Plain(Model),
    Adapted(AdaptedModel),
}

impl LoadedModel {
    pub fn base(&self) -> &Model {
        match self {
            LoadedModel::Plain(m) => m,
            LoadedModel::Adapted(a) => &a.base,
        }
    }

    pub fn adapters(&self) -> Option<&AdapterWeights> {
        match self {
            LoadedModel::Plain(_) => None,
            LoadedModel::Adapted(a) => Some(&a.adapters),
        }
    }
}

pub fn load_any(path: &Path) -> Result<(LoadedModel, Vocab, Header)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, _) = decode(&bytes)?;
    match header.kind {
        CheckpointKind::Model => load_model(path).map(|(m, v, h)| (LoadedModel::Plain(m), v, h)),
        CheckpointKind::Adapter => load_adapter(path).map(|(a, v, h)| (LoadedModel::Adapted(a), v, h)),
        CheckpointKind::TrainState => Err(Error::CorruptFile(
            "training-state checkpoints cannot be evaluated directly".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::attach;

    fn setup() -> (Model, Vocab) {
        let vocab = Vocab::from_chars("ابت ".chars());
        let mut cfg = ModelConfig::new(vocab.size());
        cfg.embed_dim = 8;
        cfg.context_len = 16;
        (Model::init(cfg).unwrap(), vocab)
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (model, vocab) = setup();
        let p = dir.path().join("m.ckpt");
        let prov = Provenance {
            mode: Some("baseline".into()),
            stage: None,
            seed: 9,
            presentations: Some(12),
        };
        save_model(&p, &model, &vocab, prov.clone()).unwrap();
        let (back, v2, h) = load_model(&p).unwrap();
        assert_eq!(back, model);
        assert_eq!(v2, vocab);
        assert_eq!(h.provenance, prov);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let (model, vocab) = setup();
        let p = dir.path().join("m.ckpt");
        save_model(&p, &model, &vocab, Provenance::default()).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_model(&p), Err(Error::CorruptFile(_))));
        fs::write(&p, &bytes[..5]).unwrap();
        assert!(matches!(load_model(&p), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn other_versions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (model, vocab) = setup();
        let p = dir.path().join("m.ckpt");
        let mut header = Header::new(CheckpointKind::Model, &model.config, &vocab, Provenance::default());
        header.format_version = 99;
        // write_checkpoint keeps the caller's version
        write_checkpoint(&p, header, &model.named_parameters()).unwrap();
        assert!(matches!(
            load_model(&p),
            Err(Error::VersionMismatch { found: 99, expected: FORMAT_VERSION })
        ));
    }

    #[test]
    fn adapter_needs_its_base() {
        let dir = tempfile::tempdir().unwrap();
        let (model, vocab) = setup();
        let base = dir.path().join("base.ckpt");
        let adapter = dir.path().join("adapter.ckpt");
        save_model(&base, &model, &vocab, Provenance::default()).unwrap();
        let mut adapted = attach(model, LoraConfig::default()).unwrap();
        for t in adapted.trainable_parameters_mut() {
            t.data_mut()[0] = 0.25;
        }
        save_adapter(&adapter, &adapted, &vocab, &base, Provenance::default()).unwrap();
        let (back, _, h) = load_adapter(&adapter).unwrap();
        assert_eq!(back, adapted);
        assert_eq!(h.base.unwrap().path, "base.ckpt");
        assert!(matches!(load_any(&adapter).unwrap().0, LoadedModel::Adapted(_)));
        fs::remove_file(&base).unwrap();
        assert!(matches!(load_adapter(&adapter), Err(Error::MissingBase(_))));
    }
}

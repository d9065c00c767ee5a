//! Weight checkpoints.
//!
//! Checkpoints are safetensors files: a JSON header listing every tensor's name,
//! dtype and shape, followed by little-endian data. The header's free-form
//! metadata map carries `format`, `format_version` and a `config` entry holding
//! the JSON architecture description, so a checkpoint is self-describing.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::TensorError;

pub const FORMAT_NAME: &str = "gazesr-checkpoint";
pub const FORMAT_VERSION: &str = "1";

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

fn to_st(d: DType) -> StDtype {
    match d {
        DType::F32 => StDtype::F32,
        DType::F64 => StDtype::F64,
    }
}

fn from_st(d: StDtype) -> Result<DType, TensorError> {
    match d {
        StDtype::F32 => Ok(DType::F32),
        StDtype::F64 => Ok(DType::F64),
        other => Err(TensorError::Format(format!("unsupported tensor dtype {other:?}"))),
    }
}

/// Serialises every parameter of `store` plus `metadata` to bytes.
pub fn to_bytes<S: Scalar>(store: &ParamStore<S>, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>, TensorError> {
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = store
        .iter()
        .map(|(_, p)| {
            let mut b = Vec::new();
            S::write_le(&p.value, &mut b);
            (p.name.clone(), p.shape.clone(), b)
        })
        .collect();
    let mut views = Vec::with_capacity(raw.len());
    for (name, shape, bytes) in &raw {
        let view = TensorView::new(to_st(S::DTYPE), shape.clone(), bytes)
            .map_err(|e| TensorError::Format(format!("tensor {name}: {e}")))?;
        views.push((name.clone(), view));
    }
    let mut meta: HashMap<String, String> = metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    meta.insert("format".into(), FORMAT_NAME.into());
    meta.insert("format_version".into(), FORMAT_VERSION.into());
    safetensors::serialize(views, Some(meta)).map_err(|e| TensorError::Format(e.to_string()))
}

pub fn save<S: Scalar>(
    path: &Path,
    store: &ParamStore<S>,
    metadata: &BTreeMap<String, String>,
) -> Result<(), TensorError> {
    let bytes = to_bytes(store, metadata)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Parses a checkpoint into a fresh store (values converted to `S` when the file
/// was written with a different width) plus its metadata.
pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<(ParamStore<S>, BTreeMap<String, String>), TensorError> {
    let manifest = manifest_from_bytes(bytes)?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| TensorError::Format(e.to_string()))?;
    let mut store = ParamStore::new();
    // Header order is not preserved by safetensors; the manifest is sorted by name.
    for entry in &manifest.tensors {
        let view = st.tensor(&entry.name).map_err(|e| TensorError::Format(e.to_string()))?;
        let values: Vec<S> = match entry.dtype {
            DType::F32 => f32::read_le(view.data()).into_iter().map(|v| S::of(v as f64)).collect(),
            DType::F64 => f64::read_le(view.data()).into_iter().map(S::of).collect(),
        };
        store.insert(entry.name.clone(), entry.shape.clone(), values);
    }
    Ok((store, manifest.metadata))
}

pub fn load<S: Scalar>(path: &Path) -> Result<(ParamStore<S>, BTreeMap<String, String>), TensorError> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

pub fn manifest_from_bytes(bytes: &[u8]) -> Result<Manifest, TensorError> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| TensorError::Format(e.to_string()))?;
    let metadata: BTreeMap<String, String> =
        meta.metadata().clone().unwrap_or_default().into_iter().collect();
    match metadata.get("format") {
        Some(f) if f == FORMAT_NAME => {}
        other => {
            return Err(TensorError::Format(format!("not a {FORMAT_NAME} file (format = {other:?})")));
        }
    }
    let st = SafeTensors::deserialize(bytes).map_err(|e| TensorError::Format(e.to_string()))?;
    let mut tensors = Vec::new();
    for (name, view) in st.tensors() {
        tensors.push(TensorEntry { name, dtype: from_st(view.dtype())?, shape: view.shape().to_vec() });
    }
    tensors.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(Manifest { metadata, tensors })
}

/// Reads every F32/F64 tensor of any safetensors file (no format tag required),
/// widened to f64 and sorted by name. Used for importing foreign weights.
pub fn read_foreign(bytes: &[u8]) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>, TensorError> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| TensorError::Format(e.to_string()))?;
    let mut out = Vec::new();
    for (name, view) in st.tensors() {
        let values = match from_st(view.dtype())? {
            DType::F32 => f32::read_le(view.data()).into_iter().map(|v| v as f64).collect(),
            DType::F64 => f64::read_le(view.data()),
        };
        out.push((name, view.shape().to_vec(), values));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, TensorError> {
    let bytes = std::fs::read(path)?;
    manifest_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::SeedableRng;

    #[test]
    fn roundtrip_with_metadata_and_width_change() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::<f32>::new();
        ps.add("b.w", &[2, 3], Init::Normal { std: 1.0 }, &mut rng);
        ps.add("a.bias", &[3], Init::Constant(0.5), &mut rng);
        let mut meta = BTreeMap::new();
        meta.insert("config".to_string(), "{\"k\":1}".to_string());
        let bytes = to_bytes(&ps, &meta).unwrap();

        let m = manifest_from_bytes(&bytes).unwrap();
        assert_eq!(m.metadata["config"], "{\"k\":1}");
        assert_eq!(m.tensors[0], TensorEntry { name: "a.bias".into(), dtype: DType::F32, shape: vec![3] });

        let (back, _) = from_bytes::<f32>(&bytes).unwrap();
        let mut target = ParamStore::<f32>::new();
        target.add("b.w", &[2, 3], Init::Zeros, &mut rng);
        target.add("a.bias", &[3], Init::Zeros, &mut rng);
        target.load_from(&back, false).unwrap();
        assert_eq!(target.content_hash(), ps.content_hash());

        let (wide, _) = from_bytes::<f64>(&bytes).unwrap();
        assert_eq!(wide.get(wide.id("a.bias").unwrap()).value, vec![0.5; 3]);
    }

    #[test]
    fn rejects_foreign_files() {
        let view_bytes = vec![0u8; 4];
        let view = TensorView::new(StDtype::F32, vec![1], &view_bytes).unwrap();
        let bytes = safetensors::serialize(vec![("x".to_string(), view)], None).unwrap();
        assert!(manifest_from_bytes(&bytes).is_err());
        let raw = read_foreign(&bytes).unwrap();
        assert_eq!(raw, vec![("x".to_string(), vec![1], vec![0.0])]);
    }
}

//! Model checkpoints as a single JSON document:
//! `{"config": {...}, "params": {name: {"shape": [...], "data": [...]}}}`.
//!
//! Floats are written in shortest round-trip form, so loading reproduces
//! every parameter bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::Params;
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    config: ModelConfig,
    params: BTreeMap<String, Entry>,
}

pub fn to_json(model: &Model) -> Result<String> {
    if let Some((name, _)) = model.params.iter().find(|(_, t)| !t.all_finite()) {
        return Err(Error::Validation(format!("parameter {name} has non-finite values")));
    }
    let doc = Document {
        config: model.config.clone(),
        params: model
            .params
            .iter()
            .map(|(n, t)| {
                let entry = Entry {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                };
                (n.clone(), entry)
            })
            .collect(),
    };
    serde_json::to_string(&doc).map_err(|e| Error::Validation(e.to_string()))
}

pub fn from_json(text: &str) -> Result<Model> {
    let doc: Document = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let mut params = Params::new();
    for (name, e) in doc.params {
        let t = Tensor::new(e.shape, e.data).map_err(|err| Error::Validation(format!("{name}: {err}")))?;
        params.insert(name, t)?;
    }
    Model::from_parts(doc.config, params)
}

/// Writes to a temporary file beside `path`, then renames it into place.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let text = to_json(model)?;
    write_atomic(path, text.as_bytes())
}

pub fn load(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

/// Replaces `path` with `bytes` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut f = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(tmp, e))?;
    f.sync_all().map_err(|e| Error::io(tmp, e))?;
    drop(f);
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DimSeries, SparseSeries};
    use crate::model::ModelConfig;

    fn small() -> ModelConfig {
        ModelConfig {
            dims: 2,
            ref_points: 4,
            latent: 3,
            mtan_out: 4,
            heads: 2,
            embed_dim: 6,
            dk: 3,
            enc_hidden: 4,
            dec_hidden: 4,
            head_hidden: 5,
            clf_hidden: 3,
            clf_mlp: 5,
            classes: Some(3),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = Model::new(small(), 3).unwrap();
        // awkward values: subnormal, tiny, huge, negative zero
        let w = m.params.get_mut("dec.out.0.w").unwrap();
        w.data_mut()[..4].copy_from_slice(&[5e-324, 1e-300, -1.7976931348623157e308, -0.0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save(&m, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.config, m.config);
        for ((n1, a), (n2, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b), "{n1}");
        }
        assert!(!dir.path().join("model.json.tmp").exists());
    }

    #[test]
    fn loaded_model_gives_identical_outputs() {
        let m = Model::new(small(), 4).unwrap();
        let back = from_json(&to_json(&m).unwrap()).unwrap();
        let s = SparseSeries::new(
            vec![DimSeries::new(vec![0.1, 0.3], vec![1.0, 2.0]), DimSeries::new(vec![0.2], vec![-1.0])],
            None,
        )
        .unwrap();
        let a = m.encode(&s).unwrap();
        let b = back.encode(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.decode(&a.mu, &[0.5]).unwrap(), back.decode(&b.mu, &[0.5]).unwrap());
    }

    #[test]
    fn malformed_documents_are_rejected() {
        assert!(matches!(from_json("{"), Err(Error::Parse { .. })));
        let m = Model::new(small(), 0).unwrap();
        let text = to_json(&m).unwrap().replace("\"dec.out.1.b\"", "\"dec.out.9.b\"");
        assert!(matches!(from_json(&text), Err(Error::Config(_))));
        assert!(matches!(load(Path::new("/nonexistent/model.json")), Err(Error::Io { .. })));
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::EpochRecord;
use crate::encoder::{Encoder, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A model plus training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder,
    pub step: usize,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn new(encoder: Encoder, step: usize, history: Vec<EpochRecord>) -> Self {
        Self {
            encoder,
            step,
            history,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.encoder.config()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    config: ModelConfig,
    step: usize,
    loss_history: Vec<EpochRecord>,
    /// Vectors as flat arrays, matrices as arrays of rows.
    weights: BTreeMap<String, Value>,
}

fn tensor_to_value(t: &Tensor) -> Value {
    if t.shape().len() == 1 {
        serde_json::json!(t.data())
    } else {
        serde_json::json!(t.to_rows())
    }
}

fn value_to_tensor(name: &str, v: &Value) -> Result<Tensor> {
    let bad = || Error::Checkpoint(format!("weight {name} is not a numeric array"));
    let arr = v.as_array().ok_or_else(bad)?;
    if arr.first().is_some_and(Value::is_array) {
        let rows: Vec<Vec<f64>> = arr
            .iter()
            .map(|r| {
                r.as_array()
                    .ok_or_else(bad)?
                    .iter()
                    .map(|x| x.as_f64().ok_or_else(bad))
                    .collect()
            })
            .collect::<Result<_>>()?;
        Tensor::from_rows(&rows)
    } else {
        let data: Vec<f64> = arr.iter().map(|x| x.as_f64().ok_or_else(bad)).collect::<Result<_>>()?;
        Tensor::new(&[data.len()], data)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let doc = Document {
        config: ckpt.config().clone(),
        step: ckpt.step,
        loss_history: ckpt.history.clone(),
        weights: ckpt
            .encoder
            .params()
            .iter()
            .map(|(k, t)| (k.to_string(), tensor_to_value(t)))
            .collect(),
    };
    let text = serde_json::to_string(&doc)?;
    fs::write(path.as_ref(), text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    let doc: Document = serde_json::from_str(&text)?;
    let mut params = ParamStore::default();
    for (name, v) in &doc.weights {
        params.insert(name.clone(), value_to_tensor(name, v)?);
    }
    let encoder = Encoder::from_parts(doc.config, params)?;
    Ok(Checkpoint::new(encoder, doc.step, doc.loss_history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            model_dim: 8,
            num_layers: 2,
            split_layer: 1,
            ffn_dim: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let enc = Encoder::new(cfg(), &mut Rng::new(4)).unwrap();
        let ckpt = Checkpoint::new(enc, 7, vec![]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        save_checkpoint(&p, &ckpt).unwrap();
        let back = load_checkpoint(&p).unwrap();
        for (name, t) in ckpt.encoder.params().iter() {
            let u = back.encoder.params().get(name).unwrap();
            assert_eq!(t.shape(), u.shape());
            for (a, b) in t.data().iter().zip(u.data()) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
        assert_eq!(back.step, 7);
    }

    #[test]
    fn mismatched_model_dim_is_rejected() {
        let enc = Encoder::new(cfg(), &mut Rng::new(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        save_checkpoint(&p, &Checkpoint::new(enc, 0, vec![])).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let edited = text.replacen("\"model_dim\":8", "\"model_dim\":4", 1);
        assert_ne!(text, edited);
        fs::write(&p, edited).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }

    #[test]
    fn missing_weight_is_listed() {
        let enc = Encoder::new(cfg(), &mut Rng::new(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        save_checkpoint(&p, &Checkpoint::new(enc, 0, vec![])).unwrap();
        let mut doc: Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        doc["weights"].as_object_mut().unwrap().remove("input.b");
        fs::write(&p, doc.to_string()).unwrap();
        let err = load_checkpoint(&p).unwrap_err().to_string();
        assert!(err.contains("input.b"), "{err}");
    }
}

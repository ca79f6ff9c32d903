//! Named-tensor checkpoints as JSON documents.
//!
//! ```json
//! {"format": "hgsignal-tensors/1",
//!  "tensors": [{"name": "actor.0.l1.w", "shape": [16, 64], "values": [...]}]}
//! ```
//!
//! Values are written with shortest round-trip formatting, so loading a
//! saved file reproduces every `f64` bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor, TensorError};

pub const FORMAT: &str = "hgsignal-tensors/1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    tensors: Vec<Entry>,
}

/// Flattens named stores into one list; names are prefixed `prefix.name`.
pub fn to_json(stores: &[(&str, &ParamStore)]) -> String {
    let tensors = stores
        .iter()
        .flat_map(|(prefix, store)| {
            store.iter().map(move |(name, t)| Entry {
                name: format!("{prefix}.{name}"),
                shape: t.shape().to_vec(),
                values: t.values().to_vec(),
            })
        })
        .collect();
    serde_json::to_string(&Document {
        format: FORMAT.to_string(),
        tensors,
    })
    .expect("tensor document serializes")
}

/// Overwrites the values of every tensor in `stores` from a document
/// produced by [`to_json`] for stores of the same layout.
pub fn load_into(json: &str, stores: &mut [(&str, &mut ParamStore)]) -> Result<(), TensorError> {
    let doc: Document =
        serde_json::from_str(json).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    if doc.format != FORMAT {
        return Err(TensorError::Checkpoint(format!("unknown format {:?}", doc.format)));
    }
    let expected: usize = stores.iter().map(|(_, s)| s.len()).sum();
    if expected != doc.tensors.len() {
        return Err(TensorError::Checkpoint(format!(
            "expected {expected} tensors, file has {}",
            doc.tensors.len()
        )));
    }
    let mut entries = doc.tensors.into_iter();
    for (prefix, store) in stores.iter_mut() {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let entry = entries.next().expect("counted above");
            let want = format!("{prefix}.{}", store.name(id));
            if entry.name != want {
                return Err(TensorError::Checkpoint(format!(
                    "expected tensor {want}, found {}",
                    entry.name
                )));
            }
            let t = store.get_mut(id);
            if entry.shape != t.shape() || entry.values.len() != t.len() {
                return Err(TensorError::Checkpoint(format!("shape mismatch for {want}")));
            }
            t.values_mut().copy_from_slice(&entry.values);
        }
    }
    Ok(())
}

/// Reads a document into fresh standalone tensors, in file order.
pub fn read_tensors(json: &str) -> Result<Vec<(String, Tensor)>, TensorError> {
    let doc: Document =
        serde_json::from_str(json).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    doc.tensors
        .into_iter()
        .map(|e| Ok((e.name, Tensor::new(e.shape, e.values)?)))
        .collect()
}

pub fn save(path: &Path, stores: &[(&str, &ParamStore)]) -> std::io::Result<()> {
    std::fs::write(path, to_json(stores))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::matrix(2, 2, vec![0.1, 1.0 / 3.0, -2e-300, 7.0]).unwrap());
        a.add("b", Tensor::row(vec![std::f64::consts::PI]));
        let json = to_json(&[("net", &a)]);
        let mut b = a.clone();
        b.get_mut(b.find("w").unwrap()).values_mut()[1] = 0.0;
        load_into(&json, &mut [("net", &mut b)]).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(read_tensors(&json).unwrap()[0].0, "net.w");
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(2, 2));
        let json = to_json(&[("net", &a)]);
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(3, 2));
        assert!(load_into(&json, &mut [("net", &mut b)]).is_err());
        assert!(load_into(&json, &mut [("other", &mut a.clone())]).is_err());
    }
}

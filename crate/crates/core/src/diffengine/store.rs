use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

/// One entry of the portable JSON parameter snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn to_entries(&self) -> Vec<ParamEntry> {
        self.params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                values: t.values().to_vec(),
            })
            .collect()
    }

    pub fn from_entries(entries: Vec<ParamEntry>) -> Result<Self> {
        let mut store = Self::new();
        for e in entries {
            let t = Tensor::new(e.shape, e.values)
                .map_err(|err| Error::Config(format!("parameter `{}`: {err}", e.name)))?;
            if store.params.insert(e.name.clone(), t).is_some() {
                return Err(Error::Config(format!("duplicate parameter `{}`", e.name)));
            }
        }
        Ok(store)
    }

    /// Checks that this store provides exactly the names and shapes of `reference`.
    pub fn check_layout(&self, reference: &ParamStore) -> Result<()> {
        for (name, t) in &reference.params {
            match self.params.get(name) {
                None => return Err(Error::Config(format!("missing parameter `{name}`"))),
                Some(mine) if mine.shape() != t.shape() => {
                    return Err(Error::Config(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        mine.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !reference.params.contains_key(*k)) {
            return Err(Error::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_entries())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_entries(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_validation() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 0.25]).unwrap());
        s.insert("b", Tensor::vector(vec![-1.5]));
        let text = s.to_json().unwrap();
        assert!(text.contains(r#""name":"a","shape":[2,2]"#));
        assert_eq!(ParamStore::from_json(&text).unwrap(), s);

        let bad = r#"[{"name":"a","shape":[2,2],"values":[1,2,3]}]"#;
        assert!(ParamStore::from_json(bad).is_err());
        let dup = r#"[{"name":"a","shape":[1],"values":[1]},{"name":"a","shape":[1],"values":[2]}]"#;
        assert!(ParamStore::from_json(dup).is_err());
    }

    #[test]
    fn layout_check() {
        let mut r = ParamStore::new();
        r.insert("w", Tensor::zeros(&[2, 3]));
        let mut s = r.clone();
        assert!(s.check_layout(&r).is_ok());
        s.insert("w", Tensor::zeros(&[3, 2]));
        assert!(s.check_layout(&r).is_err());
    }
}

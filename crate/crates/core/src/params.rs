//! Named parameter tensors with roles and content hashes.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Ownership class of a tensor. Training code uses it to decide what may
/// be written; the frozen-base check hashes everything tagged `Base`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Base,
    Adapter,
    Fusion,
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub data: Vec<f32>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// 2-D view: vectors become `1 × n`.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, rest @ ..] => (*r, rest.iter().product()),
            [] => (1, 1),
        }
    }

    pub fn to_mat(&self) -> Mat<f32> {
        let (r, c) = self.dims();
        Mat::from_vec(r, c, self.data.clone())
    }

    pub fn bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn sha256(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Ordered collection of parameters; insertion order is the serialization
/// order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], role: Role, data: Vec<f32>) -> Result<()> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "{name}: shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            role,
            data,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn numel_with_role(&self, role: Role) -> usize {
        self.params.iter().filter(|p| p.role == role).map(Param::numel).sum()
    }

    /// `name → sha256` for every tensor with the given role.
    pub fn hashes(&self, role: Role) -> BTreeMap<String, String> {
        self.params
            .iter()
            .filter(|p| p.role == role)
            .map(|p| (p.name.clone(), p.sha256()))
            .collect()
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        let i = self.index.remove(name)?;
        let p = self.params.remove(i);
        for v in self.index.values_mut() {
            if *v > i {
                *v -= 1;
            }
        }
        Some(p)
    }

    /// Merges another store in; names must not collide.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for p in other.params {
            self.insert(&p.name, &p.shape, p.role, p.data)?;
        }
        Ok(())
    }

    /// Gaussian-initialized tensor.
    pub fn insert_normal<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        shape: &[usize],
        role: Role,
        std: f32,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f32, std).map_err(|e| Error::invalid(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, shape, role, data)
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], role: Role, value: f32) -> Result<()> {
        let n: usize = shape.iter().product();
        self.insert(name, shape, role, vec![value; n])
    }

    /// Copies values of every tensor in `src` over the same-named tensor
    /// here. Returns the number of bytes written.
    pub fn overwrite_from(&mut self, src: &ParamStore) -> Result<usize> {
        let mut bytes = 0;
        for p in src.iter() {
            let dst = self
                .get_mut(&p.name)
                .ok_or_else(|| Error::Shape(format!("{} not present in destination", p.name)))?;
            if dst.shape != p.shape {
                return Err(Error::Shape(format!(
                    "{}: {:?} vs {:?}",
                    p.name, dst.shape, p.shape
                )));
            }
            dst.data.copy_from_slice(&p.data);
            bytes += p.data.len() * std::mem::size_of::<f32>();
        }
        Ok(bytes)
    }
}

/// Accumulated gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct GradStore {
    pub grads: HashMap<String, Vec<f32>>,
}

impl GradStore {
    pub fn add(&mut self, name: &str, g: &[f32]) {
        match self.grads.get_mut(name) {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += *x;
                }
            }
            None => {
                self.grads.insert(name.to_string(), g.to_vec());
            }
        }
    }

    pub fn merge(&mut self, other: &GradStore) {
        let mut names: Vec<&String> = other.grads.keys().collect();
        names.sort();
        for n in names {
            self.add(n, &other.grads[n]);
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.grads.values_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .map(|x| (*x as f64) * (*x as f64))
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_and_shape_errors() {
        let mut s = ParamStore::new();
        s.insert("w", &[2, 3], Role::Base, vec![0.0; 6]).unwrap();
        assert!(s.insert("w", &[1], Role::Base, vec![0.0]).is_err());
        assert!(s.insert("x", &[2, 2], Role::Base, vec![0.0; 3]).is_err());
        assert_eq!(s.get("w").unwrap().dims(), (2, 3));
    }

    #[test]
    fn hash_tracks_content() {
        let mut s = ParamStore::new();
        s.insert("b", &[4], Role::Base, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let h0 = s.hashes(Role::Base);
        s.get_mut("b").unwrap().data[2] = 3.5;
        assert_ne!(h0, s.hashes(Role::Base));
        assert!(s.hashes(Role::Adapter).is_empty());
    }
}

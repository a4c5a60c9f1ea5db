use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{contract, Result};
use crate::rng::SplitMix64;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in registration order.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Registry of trainable parameters with gradient accumulators, in
/// registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

/// The tape leaves created for a store during one forward pass.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Binding over leaves created elsewhere, aligned with registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(contract(format!("parameter `{name}` registered twice")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.grads.push(vec![0.0; value.len()]);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &Tape) -> Binding {
        Binding {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Puts every parameter on the tape as a constant (inference).
    pub fn bind_frozen(&self, tape: &Tape) -> Binding {
        Binding {
            vars: self
                .values
                .iter()
                .map(|v| tape.constant(v.clone()))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, binding: &Binding, grads: &Gradients) {
        for (acc, var) in self.grads.iter_mut().zip(&binding.vars) {
            if let Some(g) = grads.wrt_slice(*var) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub(crate) fn values_and_grads_mut(
        &mut self,
    ) -> impl Iterator<Item = (&str, &mut Tensor, &mut Vec<f64>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter_mut())
            .zip(self.grads.iter_mut())
            .map(|((n, v), g)| (n, v, g))
    }

    /// Bitwise equality of all values, in order.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Serializes as a one-line JSON header listing `(name, shape)` in
    /// registration order, a newline, then every value as little-endian f64.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            version: 1,
            params: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(n, v)| CheckpointEntry {
                    name: n.clone(),
                    shape: v.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_string(&header)?;
        w.write_all(json.as_bytes())?;
        w.write_all(b"\n")?;
        for v in &self.values {
            for x in v.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| contract("checkpoint header is not newline-terminated"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(contract(format!(
                "unknown checkpoint format `{}`",
                header.format
            )));
        }
        let body = &bytes[newline + 1..];
        let expected: usize = header
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        if body.len() != expected * 8 {
            return Err(contract(format!(
                "checkpoint body holds {} bytes, header describes {} values",
                body.len(),
                expected
            )));
        }
        let mut store = ParamStore::new();
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for entry in header.params {
            let n = entry.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            store.register(entry.name, Tensor::new(entry.shape, data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(std::fs::File::open(path)?)
    }

    /// Copies values from `other` (same names and shapes, same order).
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(contract(
                "checkpoint parameter names do not match the model",
            ));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(contract(format!(
                    "checkpoint shape {:?} does not match model shape {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

const CHECKPOINT_FORMAT: &str = "ptrag-params";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    params: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
}

/// Uniform in `±sqrt(1/fan_in)`.
pub fn uniform_init(rng: &mut SplitMix64, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| (2.0 * rng.next_f64() - 1.0) * bound)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

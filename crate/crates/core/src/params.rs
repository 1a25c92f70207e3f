//! Named parameter storage and dense layers.

use diffcore::{Array, Gradients, Result as DiffResult, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::Container;
use crate::error::{Error, Result};

/// Ordered, named collection of weight arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Array {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Array {
        &mut self.values[i]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// Places every array on the tape, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect()
    }

    /// Gradients for `vars` in store order.
    pub fn collect_grads(grads: &Gradients, vars: &[Var]) -> Vec<Array> {
        vars.iter()
            .map(|v| grads.get(*v).cloned().expect("bound as trainable"))
            .collect()
    }

    /// SHA-256 over names, shapes and the exact bits of every weight.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex_digest(&h.finalize())
    }

    pub fn write_into(&self, container: &mut Container, prefix: &str) {
        for (name, v) in self.names.iter().zip(&self.values) {
            container
                .tensors
                .push((format!("{prefix}{name}"), v.clone()));
        }
    }

    /// Overwrites every weight from `container`, checking shapes.
    pub fn read_from(&mut self, container: &Container, prefix: &str) -> Result<()> {
        for (name, v) in self.names.iter().zip(self.values.iter_mut()) {
            let loaded = container.tensor(&format!("{prefix}{name}"))?;
            if loaded.shape() != v.shape() {
                return Err(Error::Format(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    v.shape(),
                    loaded.shape()
                )));
            }
            *v = loaded.clone();
        }
        Ok(())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    GlorotUniform,
    Zeros,
}

/// Affine layer `x · W + b` with `W: [inputs, outputs]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    weight: usize,
    bias: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = match init {
            Init::Zeros => Array::zeros(&[inputs, outputs]),
            Init::GlorotUniform => {
                let bound = glorot_bound(inputs, outputs);
                let data = (0..inputs * outputs)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Array::new(vec![inputs, outputs], data).expect("sized")
            }
        };
        let weight = store.push(format!("{name}.weight"), w);
        let bias = store.push(format!("{name}.bias"), Array::zeros(&[outputs]));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn weight_index(&self) -> usize {
        self.weight
    }

    pub fn bias_index(&self) -> usize {
        self.bias
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> DiffResult<Var> {
        let z = tape.matmul(x, vars[self.weight])?;
        tape.add(z, vars[self.bias])
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

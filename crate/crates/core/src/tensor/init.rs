//! Named parameters with deterministic initialization.
//!
//! Every learnable weight is created through a [`Registry`], which derives
//! an RNG stream from `(model seed, parameter name)`. Two models built
//! with the same seed are therefore bit-identical regardless of creation
//! order, and any single parameter can be re-derived in isolation.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// A named leaf tensor tracked for optimization and checkpointing.
#[derive(Clone)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum ParamInit {
    /// uniform(−a, a) with a = sqrt(6/(fan_in+fan_out)).
    XavierUniform { fan_in: usize, fan_out: usize },
    Zeros,
    Constant(f64),
}

/// The symmetric bound used by Xavier-uniform initialization.
pub fn xavier_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG stream that depends only on (seed, name).
fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a64(name).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Creates and tracks uniquely named parameters for one model instance.
pub struct Registry {
    seed: u64,
    params: BTreeMap<String, Parameter>,
}

impl Registry {
    pub fn new(seed: u64) -> Registry {
        Registry {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Create a parameter. Names must be unique within the registry.
    pub fn param(&mut self, name: &str, shape: &[usize], init: ParamInit) -> Result<Tensor> {
        if self.params.contains_key(name) {
            return Err(Error::contract(
                "registry.param",
                format!("duplicate parameter name `{name}`"),
            ));
        }
        let n: usize = shape.iter().product();
        let values = match init {
            ParamInit::XavierUniform { fan_in, fan_out } => {
                let a = xavier_limit(fan_in, fan_out);
                let mut rng = rng_for(self.seed, name);
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
            ParamInit::Zeros => vec![0.0; n],
            ParamInit::Constant(c) => vec![c; n],
        };
        let tensor = Tensor::leaf(shape, values)?;
        self.params.insert(
            name.to_string(),
            Parameter {
                name: name.to_string(),
                tensor: tensor.clone(),
            },
        );
        Ok(tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    /// All parameters in name order.
    pub fn parameters(&self) -> Vec<Parameter> {
        self.params.values().cloned().collect()
    }

    /// Parameters whose names start with `prefix`, in name order. Used to
    /// restrict optimization to one stage of the pipeline.
    pub fn parameters_with_prefix(&self, prefix: &str) -> Vec<Parameter> {
        self.params
            .values()
            .filter(|p| p.name.starts_with(prefix))
            .cloned()
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grads(&self) {
        for p in self.params.values() {
            p.tensor.zero_grad();
        }
    }

    /// Overwrite parameter values from a checkpoint map. Every registered
    /// parameter must be present with a matching shape.
    pub fn load_values(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for p in self.params.values() {
            let src = values.get(&p.name).ok_or_else(|| Error::Format {
                what: "checkpoint",
                details: format!("missing parameter `{}`", p.name),
            })?;
            if src.shape() != p.tensor.shape() {
                return Err(Error::Format {
                    what: "checkpoint",
                    details: format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        p.name,
                        src.shape(),
                        p.tensor.shape()
                    ),
                });
            }
            p.tensor.set_values(src.to_vec())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bits_regardless_of_order() {
        let mut a = Registry::new(7);
        let wa = a.param("w", &[4, 3], ParamInit::XavierUniform { fan_in: 4, fan_out: 3 }).unwrap();
        let ba = a.param("b", &[3], ParamInit::Zeros).unwrap();

        let mut b = Registry::new(7);
        let bb = b.param("b", &[3], ParamInit::Zeros).unwrap();
        let wb = b.param("w", &[4, 3], ParamInit::XavierUniform { fan_in: 4, fan_out: 3 }).unwrap();

        assert_eq!(wa.to_vec(), wb.to_vec());
        assert_eq!(ba.to_vec(), bb.to_vec());
    }

    #[test]
    fn different_seed_or_name_differs() {
        let mut a = Registry::new(1);
        let mut b = Registry::new(2);
        let init = ParamInit::XavierUniform { fan_in: 8, fan_out: 8 };
        let w1 = a.param("w", &[8, 8], init).unwrap();
        let w2 = b.param("w", &[8, 8], init).unwrap();
        assert_ne!(w1.to_vec(), w2.to_vec());

        let mut c = Registry::new(1);
        let u = c.param("u", &[8, 8], init).unwrap();
        assert_ne!(w1.to_vec(), u.to_vec());
    }

    #[test]
    fn xavier_values_respect_limit() {
        let mut r = Registry::new(3);
        let w = r.param("w", &[16, 16], ParamInit::XavierUniform { fan_in: 16, fan_out: 16 }).unwrap();
        let a = xavier_limit(16, 16);
        assert!(w.to_vec().iter().all(|v| v.abs() < a));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut r = Registry::new(0);
        r.param("w", &[2], ParamInit::Zeros).unwrap();
        assert!(r.param("w", &[2], ParamInit::Zeros).is_err());
    }

    #[test]
    fn prefix_filter_selects_stage() {
        let mut r = Registry::new(0);
        r.param("camera.backbone.w", &[2], ParamInit::Zeros).unwrap();
        r.param("lidar.chain.w", &[2], ParamInit::Zeros).unwrap();
        r.param("camera.depth.w", &[2], ParamInit::Zeros).unwrap();
        let cam = r.parameters_with_prefix("camera.");
        assert_eq!(cam.len(), 2);
        assert!(cam.iter().all(|p| p.name().starts_with("camera.")));
        assert_eq!(r.total_len(), 6);
    }
}

//! A network together with its parameter values and energy reference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::deq::{deq_forward, DeqOutput, SolverConfig};
use crate::eqnet::{EqNet, ModelConfig};
use crate::error::Result;
use crate::graph::AtomicSystem;
use crate::params::ParamSet;

#[derive(Debug, Clone)]
pub struct Model {
    pub net: EqNet,
    pub params: ParamSet,
    /// Added to every energy prediction (the training-set mean energy).
    pub energy_offset: f64,
}

impl Model {
    pub fn new(net: EqNet, params: ParamSet, energy_offset: f64) -> Result<Self> {
        params.check_layout(net.param_specs())?;
        Ok(Self {
            net,
            params,
            energy_offset,
        })
    }

    /// Freshly initialized model, deterministic in `seed`.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let net = EqNet::new(cfg)?;
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            net,
            params,
            energy_offset: 0.0,
        })
    }

    /// Fixed-point inference; see [`deq_forward`].
    pub fn forward(&self, system: &AtomicSystem, solver: &SolverConfig, reuse: Option<&[f64]>) -> Result<DeqOutput> {
        let mut out = deq_forward(&self.net, &self.params, system, solver, reuse)?;
        out.energy += self.energy_offset;
        Ok(out)
    }
}

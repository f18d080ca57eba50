//! Helpers shared by unit tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::eqnet::{EqNet, ModelConfig};
use crate::graph::AtomicSystem;
use crate::irreps::Rotation;
use crate::params::ParamSet;
use crate::vec3::{add, Vec3};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random molecule-like cluster: atoms in a box, rejected when closer than
/// `min_dist`.
pub fn random_system<R: Rng>(rng: &mut R, n: usize, box_len: f64, min_dist: f64) -> AtomicSystem {
    let mut pos: Vec<Vec3> = Vec::new();
    while pos.len() < n {
        let p = [
            rng.gen_range(0.0..box_len),
            rng.gen_range(0.0..box_len),
            rng.gen_range(0.0..box_len),
        ];
        if pos.iter().all(|q| crate::vec3::norm(crate::vec3::sub(p, *q)) > min_dist) {
            pos.push(p);
        }
    }
    let z = (0..n).map(|_| [1, 6, 7, 8][rng.gen_range(0..4)]).collect();
    AtomicSystem::new(z, pos).unwrap()
}

pub fn small_config(l_max: usize) -> ModelConfig {
    ModelConfig {
        l_max,
        channels: 4,
        heads: 2,
        attn_hidden: 3,
        radial_hidden: 5,
        energy_hidden: 4,
        num_basis: 4,
        r_cut: 3.0,
        max_neighbors: 8,
        max_atomic_number: 8,
        layers: 2,
        path_dropout: 0.0,
        avg_degree: 3.0,
    }
}

pub fn net_and_params(cfg: ModelConfig, seed: u64) -> (EqNet, ParamSet) {
    let net = EqNet::new(cfg).unwrap();
    let params = net.init_params(&mut rng(seed));
    (net, params)
}

pub fn transform(sys: &AtomicSystem, r: &Rotation, t: Vec3) -> AtomicSystem {
    let mut out = sys.clone();
    for p in &mut out.positions {
        *p = add(r.apply(*p), t);
    }
    out
}


/// Central difference of `f` at `x[i]`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

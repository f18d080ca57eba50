//! Ground-truth potential: harmonic bonds plus Lennard-Jones between
//! non-bonded pairs, force-shifted so energy and force vanish at the cutoff.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AtomicSystem, MIN_PAIR_DISTANCE};
use crate::vec3::{norm, scale, sub, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    /// Rest length, Å.
    pub r0: f64,
    /// Stiffness, eV/Å².
    pub k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LennardJones {
    /// Well depth, eV.
    pub epsilon: f64,
    /// Zero crossing, Å.
    pub sigma: f64,
    /// Å.
    pub cutoff: f64,
}

impl LennardJones {
    fn raw(&self, r: f64) -> (f64, f64) {
        let s6 = (self.sigma / r).powi(6);
        let s12 = s6 * s6;
        let e = 4.0 * self.epsilon * (s12 - s6);
        let de = 4.0 * self.epsilon * (-12.0 * s12 + 6.0 * s6) / r;
        (e, de)
    }

    /// Shifted-force pair energy and its radial derivative.
    pub fn pair(&self, r: f64) -> (f64, f64) {
        if r >= self.cutoff {
            return (0.0, 0.0);
        }
        let (e, de) = self.raw(r);
        let (ec, dec) = self.raw(self.cutoff);
        (e - ec - (r - self.cutoff) * dec, de - dec)
    }
}

/// Bonded pairs are excluded from the Lennard-Jones sum.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OraclePotential {
    pub bonds: Vec<Bond>,
    pub lj: Option<LennardJones>,
}

impl OraclePotential {
    pub fn validate(&self, num_atoms: usize) -> Result<()> {
        for b in &self.bonds {
            if b.i >= num_atoms || b.j >= num_atoms || b.i == b.j {
                return Err(Error::OutOfRange(format!(
                    "bond ({}, {}) on a system of {num_atoms} atoms",
                    b.i, b.j
                )));
            }
            if !(b.r0 > 0.0) || !(b.k >= 0.0) {
                return Err(Error::Invalid(format!("bond ({}, {}) has r0 {} and k {}", b.i, b.j, b.r0, b.k)));
            }
        }
        if let Some(lj) = &self.lj {
            if !(lj.epsilon >= 0.0) || !(lj.sigma > 0.0) || !(lj.cutoff > 0.0) {
                return Err(Error::Invalid("Lennard-Jones parameters must be positive".into()));
            }
        }
        Ok(())
    }

    fn bonded(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n * n];
        for b in &self.bonds {
            m[b.i * n + b.j] = true;
            m[b.j * n + b.i] = true;
        }
        m
    }

    /// Energy (eV) and forces (eV/Å).
    pub fn eval(&self, system: &AtomicSystem) -> Result<(f64, Vec<Vec3>)> {
        let n = system.len();
        self.validate(n)?;
        let x = &system.positions;
        let mut energy = 0.0;
        let mut forces = vec![[0.0; 3]; n];
        let mut add_pair = |i: usize, j: usize, e: f64, de: f64, d: Vec3, r: f64| {
            energy += e;
            let f = scale(d, -de / r);
            for k in 0..3 {
                forces[i][k] += f[k];
                forces[j][k] -= f[k];
            }
        };
        let dist = |i: usize, j: usize| -> Result<(Vec3, f64)> {
            let d = sub(x[i], x[j]);
            let r = norm(d);
            if r < MIN_PAIR_DISTANCE {
                return Err(Error::CoincidentAtoms { i, j, dist: r });
            }
            Ok((d, r))
        };
        for b in &self.bonds {
            let (d, r) = dist(b.i, b.j)?;
            let dr = r - b.r0;
            add_pair(b.i, b.j, 0.5 * b.k * dr * dr, b.k * dr, d, r);
        }
        if let Some(lj) = &self.lj {
            let bonded = self.bonded(n);
            for i in 0..n {
                for j in i + 1..n {
                    if bonded[i * n + j] {
                        continue;
                    }
                    let (d, r) = dist(i, j)?;
                    if r < lj.cutoff {
                        let (e, de) = lj.pair(r);
                        add_pair(i, j, e, de, d, r);
                    }
                }
            }
        }
        Ok((energy, forces))
    }
}

/// Built-in molecule and its potential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSystem {
    pub name: String,
    pub atomic_numbers: Vec<u32>,
    /// Reference geometry, Å.
    pub positions: Vec<Vec3>,
    pub potential: OraclePotential,
}

pub const PRESETS: [&str; 2] = ["formaldehyde", "water"];

impl OracleSystem {
    pub fn preset(name: &str) -> Result<Self> {
        let lj = |epsilon, sigma| {
            Some(LennardJones {
                epsilon,
                sigma,
                cutoff: 4.0,
            })
        };
        let bond = |i, j, r0, k| Bond { i, j, r0, k };
        let s = match name {
            "formaldehyde" => Self {
                name: "formaldehyde".into(),
                atomic_numbers: vec![6, 8, 1, 1],
                positions: vec![[0.0, 0.0, 0.0], [1.21, 0.0, 0.0], [-0.59, 0.94, 0.0], [-0.59, -0.94, 0.0]],
                potential: OraclePotential {
                    bonds: vec![bond(0, 1, 1.21, 60.0), bond(0, 2, 1.10, 30.0), bond(0, 3, 1.10, 30.0)],
                    lj: lj(0.02, 1.7),
                },
            },
            "water" | "toy" => Self {
                name: "water".into(),
                atomic_numbers: vec![8, 1, 1],
                positions: vec![[0.0, 0.0, 0.0], [0.757, 0.586, 0.0], [-0.757, 0.586, 0.0]],
                potential: OraclePotential {
                    bonds: vec![bond(0, 1, 0.957, 45.0), bond(0, 2, 0.957, 45.0)],
                    lj: lj(0.05, 1.35),
                },
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown potential preset '{other}' (available: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(s)
    }

    pub fn system(&self) -> Result<AtomicSystem> {
        AtomicSystem::new(self.atomic_numbers.clone(), self.positions.clone())
    }

    /// Preset name, or a path to a JSON description.
    pub fn load(spec: &str) -> Result<Self> {
        if PRESETS.contains(&spec) || spec == "toy" {
            return Self::preset(spec);
        }
        let text = std::fs::read_to_string(spec)?;
        let s: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{spec}: {e}")))?;
        s.system()?;
        s.potential.validate(s.atomic_numbers.len())?;
        Ok(s)
    }
}

/// `E` and `F` of the oracle.
pub fn oracle_eval(system: &AtomicSystem, potential: &OraclePotential) -> Result<(f64, Vec<Vec3>)> {
    potential.eval(system)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::irreps::Rotation;
    use crate::testutil::{rng, transform};
    use rand::Rng;

    fn perturbed(sys: &OracleSystem, seed: u64, amp: f64) -> AtomicSystem {
        let mut r = rng(seed);
        let mut s = sys.system().unwrap();
        for p in &mut s.positions {
            for v in p.iter_mut() {
                *v += r.gen_range(-amp..amp);
            }
        }
        s
    }

    #[test]
    fn rest_lengths_without_lj_are_zero() {
        let mut o = OracleSystem::preset("formaldehyde").unwrap();
        o.potential.lj = None;
        // Put the hydrogens exactly at their rest length.
        let c = 1.10 / (0.59f64.powi(2) + 0.94f64.powi(2)).sqrt();
        o.positions[2] = [-0.59 * c, 0.94 * c, 0.0];
        o.positions[3] = [-0.59 * c, -0.94 * c, 0.0];
        let (e, f) = oracle_eval(&o.system().unwrap(), &o.potential).unwrap();
        assert!(e.abs() < 1e-28);
        assert!(f.iter().flatten().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn stretched_bond_restores_with_hooke_force() {
        let pot = OraclePotential {
            bonds: vec![Bond { i: 0, j: 1, r0: 1.0, k: 7.0 }],
            lj: None,
        };
        let s = AtomicSystem::new(vec![1, 1], vec![[0.0; 3], [1.25, 0.0, 0.0]]).unwrap();
        let (e, f) = oracle_eval(&s, &pot).unwrap();
        assert!((e - 0.5 * 7.0 * 0.0625).abs() < 1e-14);
        assert!((f[1][0] + 7.0 * 0.25).abs() < 1e-14);
        assert!((f[0][0] - 7.0 * 0.25).abs() < 1e-14);
    }

    #[test]
    fn forces_match_finite_differences() {
        for name in PRESETS {
            let o = OracleSystem::preset(name).unwrap();
            for seed in 0..5 {
                let s = perturbed(&o, seed, 0.15);
                let (_, f) = o.potential.eval(&s).unwrap();
                let h = 1e-5;
                for a in 0..s.len() {
                    for k in 0..3 {
                        let mut p = s.clone();
                        p.positions[a][k] += h;
                        let ep = o.potential.eval(&p).unwrap().0;
                        p.positions[a][k] -= 2.0 * h;
                        let em = o.potential.eval(&p).unwrap().0;
                        let fd = -(ep - em) / (2.0 * h);
                        assert!((fd - f[a][k]).abs() < 1e-7, "{name} atom {a} comp {k}: {fd} vs {}", f[a][k]);
                    }
                }
            }
        }
    }

    #[test]
    fn lj_vanishes_smoothly_at_cutoff() {
        let lj = LennardJones {
            epsilon: 0.1,
            sigma: 1.5,
            cutoff: 4.0,
        };
        let (e, de) = lj.pair(4.0 - 1e-9);
        assert!(e.abs() < 1e-12 && de.abs() < 1e-9);
        assert_eq!(lj.pair(4.5), (0.0, 0.0));
    }

    #[test]
    fn symmetric_under_rigid_motion_and_relabeling() {
        let o = OracleSystem::preset("formaldehyde").unwrap();
        let s = perturbed(&o, 3, 0.1);
        let (e, f) = o.potential.eval(&s).unwrap();
        let rot = Rotation::random(&mut rng(9));
        let moved = transform(&s, &rot, [1.0, -2.0, 0.5]);
        let (e2, f2) = o.potential.eval(&moved).unwrap();
        assert!((e - e2).abs() < 1e-12);
        for (a, b) in f.iter().zip(&f2) {
            let ra = rot.apply(*a);
            assert!(ra.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-11));
        }
        // Swap the two hydrogens, together with their bond indices.
        let mut sw = s.clone();
        sw.positions.swap(2, 3);
        let (e3, f3) = o.potential.eval(&sw).unwrap();
        assert!((e - e3).abs() < 1e-12);
        assert!(f[2].iter().zip(&f3[3]).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn bad_bond_index_rejected() {
        let pot = OraclePotential {
            bonds: vec![Bond { i: 0, j: 5, r0: 1.0, k: 1.0 }],
            lj: None,
        };
        let s = AtomicSystem::new(vec![1, 1], vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(oracle_eval(&s, &pot), Err(Error::OutOfRange(_))));
        assert!(OracleSystem::preset("argon").is_err());
    }
}

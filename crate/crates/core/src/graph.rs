//! Atomic systems, cutoff neighbor lists and radial distance embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vec3::{norm, sub, Vec3};

/// Closest allowed approach of two atoms, in Å.
pub const MIN_PAIR_DISTANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicSystem {
    pub atomic_numbers: Vec<u32>,
    pub positions: Vec<Vec3>,
    pub velocities: Option<Vec<Vec3>>,
    pub masses: Option<Vec<f64>>,
}

impl AtomicSystem {
    pub fn new(atomic_numbers: Vec<u32>, positions: Vec<Vec3>) -> Result<Self> {
        let s = Self {
            atomic_numbers,
            positions,
            velocities: None,
            masses: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_velocities(mut self, velocities: Vec<Vec3>) -> Result<Self> {
        self.velocities = Some(velocities);
        self.validate()?;
        Ok(self)
    }

    pub fn with_masses(mut self, masses: Vec<f64>) -> Result<Self> {
        self.masses = Some(masses);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atomic_numbers.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.atomic_numbers.len();
        if self.positions.len() != n {
            return Err(Error::Invalid(format!(
                "{} atomic numbers but {} positions",
                n,
                self.positions.len()
            )));
        }
        if self.atomic_numbers.iter().any(|&z| z < 1) {
            return Err(Error::Invalid("atomic numbers must be >= 1".into()));
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite position".into()));
        }
        if let Some(v) = &self.velocities {
            if v.len() != n {
                return Err(Error::Invalid("velocity count mismatch".into()));
            }
        }
        if let Some(m) = &self.masses {
            if m.len() != n || m.iter().any(|&m| !(m > 0.0)) {
                return Err(Error::Invalid("masses must be positive, one per atom".into()));
            }
        }
        Ok(())
    }

    /// Masses if set, otherwise looked up from the atomic-mass table.
    pub fn masses_or_default(&self) -> Vec<f64> {
        match &self.masses {
            Some(m) => m.clone(),
            None => self.atomic_numbers.iter().map(|&z| atomic_mass(z)).collect(),
        }
    }
}

/// Standard atomic weight in amu (H..Ne; heavier elements fall back to 2Z).
pub fn atomic_mass(z: u32) -> f64 {
    const TABLE: [f64; 10] = [
        1.008, 4.0026, 6.94, 9.0122, 10.81, 12.011, 14.007, 15.999, 18.998, 20.180,
    ];
    TABLE
        .get(z as usize - 1)
        .copied()
        .unwrap_or(2.0 * z as f64)
}

const SYMBOLS: [&str; 10] = ["H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne"];

pub fn element_symbol(z: u32) -> Option<&'static str> {
    SYMBOLS.get((z as usize).checked_sub(1)?).copied()
}

pub fn atomic_number(symbol: &str) -> Option<u32> {
    SYMBOLS
        .iter()
        .position(|&s| s == symbol)
        .map(|i| i as u32 + 1)
}

/// Directed edges `src -> dst`, sorted by `(dst, dist, src)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeList {
    /// `(src, dst)` pairs.
    pub edges: Vec<(usize, usize)>,
    /// `positions[src] - positions[dst]`.
    pub r_vec: Vec<Vec3>,
    pub dist: Vec<f64>,
    /// Edges into node `t` occupy `offsets[t]..offsets[t + 1]`.
    pub offsets: Vec<usize>,
}

impl EdgeList {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn incoming(&self, t: usize) -> std::ops::Range<usize> {
        self.offsets[t]..self.offsets[t + 1]
    }

    pub fn mean_degree(&self) -> f64 {
        if self.num_nodes() == 0 {
            0.0
        } else {
            self.len() as f64 / self.num_nodes() as f64
        }
    }
}

/// All ordered pairs within `r_cut`, keeping at most `max_neighbors` nearest
/// sources per destination (ties broken by lower source index).
pub fn build_neighbor_list(
    system: &AtomicSystem,
    r_cut: f64,
    max_neighbors: usize,
) -> Result<EdgeList> {
    if !(r_cut > 0.0) {
        return Err(Error::OutOfRange(format!("cutoff {r_cut} must be positive")));
    }
    let n = system.len();
    let pos = &system.positions;
    let mut edges = Vec::new();
    let mut r_vec = Vec::new();
    let mut dist = Vec::new();
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    let mut candidates: Vec<(f64, usize, Vec3)> = Vec::new();
    for dst in 0..n {
        candidates.clear();
        for src in 0..n {
            if src == dst {
                continue;
            }
            let r = sub(pos[src], pos[dst]);
            let d = norm(r);
            if d < MIN_PAIR_DISTANCE {
                return Err(Error::CoincidentAtoms {
                    i: src.min(dst),
                    j: src.max(dst),
                    dist: d,
                });
            }
            if d <= r_cut {
                candidates.push((d, src, r));
            }
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(d, src, r) in candidates.iter().take(max_neighbors) {
            edges.push((src, dst));
            r_vec.push(r);
            dist.push(d);
        }
        offsets.push(edges.len());
    }
    Ok(EdgeList {
        edges,
        r_vec,
        dist,
        offsets,
    })
}

/// Smooth cutoff envelope `1 - 10x^3 + 15x^4 - 6x^5` with `x = d / r_cut`;
/// value, slope and curvature vanish at the cutoff. Zero beyond it.
pub fn envelope(d: f64, r_cut: f64) -> f64 {
    let x = d / r_cut;
    if x >= 1.0 {
        return 0.0;
    }
    let x3 = x * x * x;
    1.0 - x3 * (10.0 - 15.0 * x + 6.0 * x * x)
}

/// Gaussian bumps on evenly spaced centers in `[0, r_cut]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialBasis {
    pub num_basis: usize,
    pub r_cut: f64,
    pub width: f64,
}

impl RadialBasis {
    /// Width defaults to the center spacing.
    pub fn new(num_basis: usize, r_cut: f64) -> Result<Self> {
        if num_basis < 2 {
            return Err(Error::OutOfRange("need at least 2 radial bases".into()));
        }
        Self::with_width(num_basis, r_cut, r_cut / (num_basis - 1) as f64)
    }

    pub fn with_width(num_basis: usize, r_cut: f64, width: f64) -> Result<Self> {
        if num_basis == 0 || !(r_cut > 0.0) || !(width > 0.0) {
            return Err(Error::OutOfRange("radial basis parameters must be positive".into()));
        }
        Ok(Self {
            num_basis,
            r_cut,
            width,
        })
    }

    pub fn center(&self, k: usize) -> f64 {
        if self.num_basis == 1 {
            0.0
        } else {
            self.r_cut * k as f64 / (self.num_basis - 1) as f64
        }
    }

    /// Basis values without range checking (zero beyond the cutoff).
    pub(crate) fn eval_into(&self, dist: f64, out: &mut [f64]) {
        let env = envelope(dist, self.r_cut);
        for (k, o) in out.iter_mut().enumerate() {
            let t = (dist - self.center(k)) / self.width;
            *o = (-0.5 * t * t).exp() * env;
        }
    }
}

pub fn radial_embed(dist: f64, basis: &RadialBasis) -> Result<Vec<f64>> {
    if !(dist > 0.0 && dist <= basis.r_cut) {
        return Err(Error::OutOfRange(format!(
            "distance {dist} outside (0, {}]",
            basis.r_cut
        )));
    }
    let mut out = vec![0.0; basis.num_basis];
    basis.eval_into(dist, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::irreps::Rotation;
    use crate::vec3::add;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, box_len: f64, rng: &mut impl Rng) -> AtomicSystem {
        let positions = (0..n)
            .map(|_| std::array::from_fn(|_| rng.gen_range(0.0..box_len)))
            .collect();
        AtomicSystem::new(vec![1; n], positions).unwrap()
    }

    #[test]
    fn two_atoms_within_cutoff() {
        let s = AtomicSystem::new(vec![1, 8], vec![[0.0; 3], [3.0, 0.0, 0.0]]).unwrap();
        let e = build_neighbor_list(&s, 5.0, 32).unwrap();
        assert_eq!(e.edges, vec![(1, 0), (0, 1)]);
        assert_eq!(e.r_vec[0], [3.0, 0.0, 0.0]);
        assert_eq!(e.r_vec[1], [-3.0, 0.0, 0.0]);
        assert_eq!(e.dist, vec![3.0, 3.0]);
    }

    #[test]
    fn two_atoms_beyond_cutoff() {
        let s = AtomicSystem::new(vec![1, 1], vec![[0.0; 3], [6.0, 0.0, 0.0]]).unwrap();
        assert!(build_neighbor_list(&s, 5.0, 32).unwrap().is_empty());
    }

    #[test]
    fn coincident_atoms_named() {
        let s = AtomicSystem::new(vec![1, 1, 1], vec![[0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
            .unwrap();
        match build_neighbor_list(&s, 5.0, 32) {
            Err(Error::CoincidentAtoms { i: 1, j: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let s = random_cloud(20, 6.0, &mut rng);
        let e = build_neighbor_list(&s, 5.0, 4).unwrap();
        for t in 0..s.len() {
            let mut all: Vec<(f64, usize)> = (0..s.len())
                .filter(|&j| j != t)
                .map(|j| (norm(sub(s.positions[j], s.positions[t])), j))
                .filter(|&(d, _)| d <= 5.0)
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expected: Vec<usize> = all.iter().take(4).map(|x| x.1).collect();
            let got: Vec<usize> = e.incoming(t).map(|k| e.edges[k].0).collect();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn envelope_zero_at_cutoff() {
        let b = RadialBasis::new(8, 5.0).unwrap();
        assert!(radial_embed(5.0, &b).unwrap().iter().all(|&v| v == 0.0));
        assert!(radial_embed(5.01, &b).is_err());
        assert!(radial_embed(0.0, &b).is_err());
    }

    #[test]
    fn narrow_width_selects_center() {
        let b = RadialBasis::with_width(6, 5.0, 0.05).unwrap();
        let v = radial_embed(b.center(3), &b).unwrap();
        let argmax = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 3);
        assert!(v[2] < 1e-10 * v[3] && v[4] < 1e-10 * v[3]);
    }

    #[test]
    fn smooth_at_cutoff() {
        let b = RadialBasis::new(8, 5.0).unwrap();
        let h = 1e-4;
        let mut lo = vec![0.0; 8];
        let mut hi = vec![0.0; 8];
        b.eval_into(5.0 - h, &mut lo);
        b.eval_into(5.0 + h, &mut hi);
        for k in 0..8 {
            assert!(((hi[k] - lo[k]) / (2.0 * h)).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn translation_and_rotation_covariance(seed in 0u64..1000, tx in -5.0..5.0f64, ty in -5.0..5.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_cloud(8, 4.0, &mut rng);
            let e = build_neighbor_list(&s, 3.0, 32).unwrap();

            let shifted = AtomicSystem::new(
                s.atomic_numbers.clone(),
                s.positions.iter().map(|&p| add(p, [tx, ty, 1.0])).collect(),
            ).unwrap();
            let es = build_neighbor_list(&shifted, 3.0, 32).unwrap();
            prop_assert_eq!(&e.edges, &es.edges);
            for (a, b) in e.r_vec.iter().zip(&es.r_vec) {
                prop_assert!(norm(sub(*a, *b)) < 1e-12);
            }

            let r = Rotation::random(&mut rng);
            let rotated = AtomicSystem::new(
                s.atomic_numbers.clone(),
                s.positions.iter().map(|&p| r.apply(p)).collect(),
            ).unwrap();
            let er = build_neighbor_list(&rotated, 3.0, 32).unwrap();
            prop_assert_eq!(e.len(), er.len());
            for k in 0..e.len() {
                let ki = er.edges.iter().position(|&x| x == e.edges[k]).unwrap();
                prop_assert!((e.dist[k] - er.dist[ki]).abs() < 1e-12);
                prop_assert!(norm(sub(r.apply(e.r_vec[k]), er.r_vec[ki])) < 1e-12);
            }
        }

        #[test]
        fn permutation_covariance(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_cloud(7, 4.0, &mut rng);
            let mut perm: Vec<usize> = (0..7).collect();
            for i in (1..7).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            // atom perm[i] of the permuted system is atom i of the original
            let mut positions = vec![[0.0; 3]; 7];
            for (i, &p) in perm.iter().enumerate() {
                positions[p] = s.positions[i];
            }
            let sp = AtomicSystem::new(vec![1; 7], positions).unwrap();
            let e = build_neighbor_list(&s, 3.0, 32).unwrap();
            let ep = build_neighbor_list(&sp, 3.0, 32).unwrap();
            let mut mapped: Vec<(usize, usize)> = e.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
            let mut got = ep.edges.clone();
            mapped.sort();
            got.sort();
            prop_assert_eq!(mapped, got);
        }
    }
}

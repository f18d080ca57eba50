//! Clebsch-Gordan coupling tensors for the real harmonic basis.
//!
//! Each path `(l1, l2, l3)` is the (unique up to scale) tensor `C` with
//! `(D_l1 ⊗ D_l2 ⊗ D_l3) vec(C) = vec(C)` for every rotation. It is found as
//! the null vector of that constraint stacked over two generic rotations,
//! then normalized to `|C|_F^2 = 2*l3 + 1` with its first significant entry
//! (row-major over `m1, m2, m3`) positive.
//!
//! Under this normalization and the `(y, z, x)` ordering of degree 1:
//! - `(1,1,0)` contracts to `(f . g) / sqrt(3)`,
//! - `(1,1,1)` gives `(f x g) / sqrt(2)`,
//! - `(0,l,l)` is plain scalar multiplication.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;

use crate::error::Result;
use crate::irreps::rotation::{wigner_d, Rotation};
use crate::irreps::sh::check_degree;

/// Dense coefficients of one coupling path, indexed `[m1][m2][m3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CgPath {
    pub l1: usize,
    pub l2: usize,
    pub l3: usize,
    /// False for triangle-violating paths, whose coefficients are all zero.
    pub allowed: bool,
    coeffs: Vec<f64>,
}

impl CgPath {
    #[inline]
    pub fn get(&self, m1: usize, m2: usize, m3: usize) -> f64 {
        let (d2, d3) = (2 * self.l2 + 1, 2 * self.l3 + 1);
        self.coeffs[(m1 * d2 + m2) * d3 + m3]
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (2 * self.l1 + 1, 2 * self.l2 + 1, 2 * self.l3 + 1)
    }

    /// Couples one degree-`l1` block with one degree-`l2` block into `out`
    /// (accumulating, scaled by `w`).
    pub fn couple_into(&self, f: &[f64], g: &[f64], w: f64, out: &mut [f64]) {
        let (d1, d2, d3) = self.dims();
        for m1 in 0..d1 {
            let fm = f[m1] * w;
            if fm == 0.0 {
                continue;
            }
            for m2 in 0..d2 {
                let fg = fm * g[m2];
                let row = &self.coeffs[(m1 * d2 + m2) * d3..(m1 * d2 + m2 + 1) * d3];
                for (o, c) in out.iter_mut().zip(row) {
                    *o += c * fg;
                }
            }
        }
    }
}

pub fn triangle(l1: usize, l2: usize, l3: usize) -> bool {
    l1.abs_diff(l2) <= l3 && l3 <= l1 + l2
}

fn kron3(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b).kronecker(c)
}

fn compute_path(l1: usize, l2: usize, l3: usize) -> CgPath {
    let (d1, d2, d3) = (2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1);
    let n = d1 * d2 * d3;
    if !triangle(l1, l2, l3) {
        return CgPath {
            l1,
            l2,
            l3,
            allowed: false,
            coeffs: vec![0.0; n],
        };
    }
    let rotations = [
        Rotation::from_axis_angle([0.3, -0.5, 0.8], 1.1),
        Rotation::from_axis_angle([-0.7, 0.2, 0.4], 2.3),
    ];
    let mut stacked = DMatrix::<f64>::zeros(rotations.len() * n, n);
    for (k, r) in rotations.iter().enumerate() {
        let a = kron3(
            &wigner_d(l1, r).expect("degree checked"),
            &wigner_d(l2, r).expect("degree checked"),
            &wigner_d(l3, r).expect("degree checked"),
        ) - DMatrix::identity(n, n);
        stacked.view_mut((k * n, 0), (n, n)).copy_from(&a);
    }
    let svd = stacked.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    if n > 1 {
        // SO(3) couplings are multiplicity free.
        debug_assert!(svd.singular_values[order[1]] > 1e-4);
    }
    let null = v_t.row(order[0]).transpose();
    let mut coeffs: Vec<f64> = null.iter().copied().collect();
    let max = coeffs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let lead = coeffs
        .iter()
        .copied()
        .find(|v| v.abs() > 1e-6 * max)
        .unwrap_or(1.0);
    let norm = coeffs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s = (d3 as f64).sqrt() / norm * lead.signum();
    for c in &mut coeffs {
        *c *= s;
        if c.abs() < 1e-14 {
            *c = 0.0;
        }
    }
    CgPath {
        l1,
        l2,
        l3,
        allowed: true,
        coeffs,
    }
}

/// Cached coupling tensor for path `(l1, l2, l3)`. Triangle-violating
/// paths come back empty with `allowed == false`.
pub fn clebsch_gordan(l1: usize, l2: usize, l3: usize) -> Result<Arc<CgPath>> {
    check_degree(l1)?;
    check_degree(l2)?;
    check_degree(l3)?;
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize, usize), Arc<CgPath>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(p) = cache.lock().unwrap().get(&(l1, l2, l3)) {
        return Ok(p.clone());
    }
    let path = Arc::new(compute_path(l1, l2, l3));
    Ok(cache
        .lock()
        .unwrap()
        .entry((l1, l2, l3))
        .or_insert(path)
        .clone())
}

/// All allowed paths with every degree at most `l_max`.
#[derive(Debug, Clone)]
pub struct CgTable {
    pub l_max: usize,
    paths: Vec<Arc<CgPath>>,
}

impl CgTable {
    pub fn new(l_max: usize) -> Result<Self> {
        check_degree(l_max)?;
        let mut paths = Vec::new();
        for l1 in 0..=l_max {
            for l2 in 0..=l_max {
                for l3 in 0..=l_max {
                    if triangle(l1, l2, l3) {
                        paths.push(clebsch_gordan(l1, l2, l3)?);
                    }
                }
            }
        }
        Ok(Self { l_max, paths })
    }

    pub fn paths(&self) -> &[Arc<CgPath>] {
        &self.paths
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::irreps::sh::cartesian_to_l1;
    use crate::irreps::MAX_DEGREE;
    use crate::vec3::{cross, dot, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut impl Rng) -> Vec3 {
        [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ]
    }

    #[test]
    fn dot_product_identity() {
        let p = clebsch_gordan(1, 1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let (f, g) = (rand_vec(&mut rng), rand_vec(&mut rng));
            let mut out = [0.0];
            p.couple_into(&cartesian_to_l1(f), &cartesian_to_l1(g), 1.0, &mut out);
            assert!((out[0] - dot(f, g) / 3f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_product_identity() {
        let p = clebsch_gordan(1, 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (f, g) = (rand_vec(&mut rng), rand_vec(&mut rng));
            let mut out = [0.0; 3];
            p.couple_into(&cartesian_to_l1(f), &cartesian_to_l1(g), 1.0, &mut out);
            let expected = cartesian_to_l1(cross(f, g));
            for k in 0..3 {
                assert!((out[k] - expected[k] / 2f64.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_path_is_multiplication() {
        for l in 0..=MAX_DEGREE {
            let p = clebsch_gordan(0, l, l).unwrap();
            let g: Vec<f64> = (0..2 * l + 1).map(|i| i as f64 - 1.5).collect();
            let mut out = vec![0.0; 2 * l + 1];
            p.couple_into(&[2.5], &g, 1.0, &mut out);
            for (o, gi) in out.iter().zip(&g) {
                assert!((o - 2.5 * gi).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn triangle_violations_are_empty() {
        let p = clebsch_gordan(0, 1, 2).unwrap();
        assert!(!p.allowed);
        assert!(p.coeffs().iter().all(|&c| c == 0.0));
        let p = clebsch_gordan(3, 0, 1).unwrap();
        assert!(!p.allowed);
    }

    #[test]
    fn table_is_deterministic() {
        let a = CgTable::new(2).unwrap();
        let b = compute_path(2, 2, 2);
        let cached = a.paths().iter().find(|p| (p.l1, p.l2, p.l3) == (2, 2, 2)).unwrap();
        assert_eq!(cached.coeffs(), b.coeffs());
        assert_eq!(a.paths().len(), 15);
    }
}

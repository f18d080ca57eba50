use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::irreps::sh::{check_degree, sh_flat};
use crate::irreps::MAX_DEGREE;
use crate::vec3::Vec3;

const ORTHO_TOL: f64 = 1e-12;

/// A proper rotation: 3x3 orthogonal with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    m: [[f64; 3]; 3],
}

impl Rotation {
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRotation("non-finite entry".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let rrt: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (rrt - target).abs() > ORTHO_TOL {
                    return Err(Error::InvalidRotation(format!(
                        "R R^T deviates from identity by {:e}",
                        (rrt - target).abs()
                    )));
                }
            }
        }
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidRotation(format!("determinant {det}")));
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation from a unit quaternion `(w, x, y, z)`; the input is normalized.
    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        Self {
            m: [
                [
                    1.0 - 2.0 * (y * y + z * z),
                    2.0 * (x * y - w * z),
                    2.0 * (x * z + w * y),
                ],
                [
                    2.0 * (x * y + w * z),
                    1.0 - 2.0 * (x * x + z * z),
                    2.0 * (y * z - w * x),
                ],
                [
                    2.0 * (x * z - w * y),
                    2.0 * (y * z + w * x),
                    1.0 - 2.0 * (x * x + y * y),
                ],
            ],
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = crate::vec3::norm(axis);
        let (s, c) = (0.5 * angle).sin_cos();
        Self::from_quaternion([c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n])
    }

    /// Haar-uniform random rotation.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        Self::from_quaternion(q)
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        std::array::from_fn(|i| self.m[i][0] * v[0] + self.m[i][1] * v[1] + self.m[i][2] * v[2])
    }

    pub fn transpose(&self) -> Self {
        Self {
            m: std::array::from_fn(|i| std::array::from_fn(|j| self.m[j][i])),
        }
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Rotation) -> Self {
        Self {
            m: std::array::from_fn(|i| {
                std::array::from_fn(|j| (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum())
            }),
        }
    }
}

// Sample directions and the pseudo-inverse of their harmonics, per degree.
struct WignerBasis {
    dirs: Vec<Vec3>,
    pinv: DMatrix<f64>,
}

fn fibonacci_directions(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64 + 0.3;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

fn degree_block(l: usize, u: Vec3) -> Vec<f64> {
    let mut flat = vec![0.0; (l + 1) * (l + 1)];
    sh_flat(l, u, &mut flat);
    flat[l * l..].to_vec()
}

fn wigner_basis(l: usize) -> &'static WignerBasis {
    static CACHE: OnceLock<Vec<WignerBasis>> = OnceLock::new();
    let all = CACHE.get_or_init(|| {
        (0..=MAX_DEGREE)
            .map(|l| {
                let d = 2 * l + 1;
                let dirs = fibonacci_directions(2 * d + 3);
                let y = DMatrix::from_fn(d, dirs.len(), |m, i| degree_block(l, dirs[i])[m]);
                let gram = &y * y.transpose();
                let inv = gram
                    .try_inverse()
                    .expect("harmonic sample matrix is full rank");
                WignerBasis {
                    pinv: y.transpose() * inv,
                    dirs,
                }
            })
            .collect()
    });
    &all[l]
}

/// Wigner-D matrix of degree `l`, consistent with the harmonics:
/// `Y_l(R u) = D_l(R) Y_l(u)`. Obtained by least squares over a fixed set
/// of sample directions, so it inherits the harmonic convention exactly.
pub fn wigner_d(l: usize, r: &Rotation) -> Result<DMatrix<f64>> {
    check_degree(l)?;
    let basis = wigner_basis(l);
    let d = 2 * l + 1;
    let mut yr = DMatrix::zeros(d, basis.dirs.len());
    for (i, &u) in basis.dirs.iter().enumerate() {
        let block = degree_block(l, r.apply(u));
        for m in 0..d {
            yr[(m, i)] = block[m];
        }
    }
    Ok(yr * &basis.pinv)
}

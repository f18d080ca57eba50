//! Real spherical harmonics in component normalization.
//!
//! Convention: `Y_l` has `2l+1` components ordered `m = -l..=l`, no
//! Condon-Shortley phase, and `|Y_l(u)|^2 = 2l+1` for every unit `u`.
//! With this choice `Y_1(u) = sqrt(3) * (u_y, u_z, u_x)`.

use crate::error::{Error, Result};
use crate::irreps::MAX_DEGREE;
use crate::vec3::{norm, Vec3};

const UNIT_TOL: f64 = 1e-9;

/// Real spherical harmonics of degrees `0..=l_max`, one array per degree.
pub fn spherical_harmonics(l_max: usize, u: Vec3) -> Result<Vec<Vec<f64>>> {
    check_degree(l_max)?;
    let n = norm(u);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NonUnitVector(n));
    }
    let mut flat = vec![0.0; (l_max + 1) * (l_max + 1)];
    sh_flat(l_max, u, &mut flat);
    Ok((0..=l_max)
        .map(|l| flat[l * l..(l + 1) * (l + 1)].to_vec())
        .collect())
}

pub(crate) fn check_degree(l: usize) -> Result<()> {
    if l > MAX_DEGREE {
        return Err(Error::DegreeTooHigh {
            requested: l,
            max: MAX_DEGREE,
        });
    }
    Ok(())
}

/// Writes all degrees `0..=l_max` into `out` (length `(l_max+1)^2`), the
/// degree-`l` block starting at offset `l*l`. `u` must already be unit.
pub(crate) fn sh_flat(l_max: usize, u: Vec3, out: &mut [f64]) {
    debug_assert_eq!(out.len(), (l_max + 1) * (l_max + 1));
    let [x, y, z] = u;

    // (x + i y)^m = sin^m(theta) e^{i m phi}
    let mut re = vec![1.0; l_max + 1];
    let mut im = vec![0.0; l_max + 1];
    for m in 1..=l_max {
        re[m] = re[m - 1] * x - im[m - 1] * y;
        im[m] = re[m - 1] * y + im[m - 1] * x;
    }

    // q[l][m]: associated Legendre P_l^m(z) divided by (1 - z^2)^{m/2}
    let mut q = vec![vec![0.0; l_max + 1]; l_max + 1];
    let mut double_fact = 1.0;
    for m in 0..=l_max {
        if m > 0 {
            double_fact *= (2 * m - 1) as f64;
        }
        q[m][m] = double_fact;
        if m < l_max {
            q[m + 1][m] = (2 * m + 1) as f64 * z * q[m][m];
        }
        for l in (m + 2)..=l_max {
            q[l][m] = ((2 * l - 1) as f64 * z * q[l - 1][m] - (l + m - 1) as f64 * q[l - 2][m])
                / (l - m) as f64;
        }
    }

    for l in 0..=l_max {
        let base = l * l + l;
        for m in 0..=l {
            // (l-m)!/(l+m)!
            let mut ratio = 1.0;
            for k in (l - m + 1)..=(l + m) {
                ratio /= k as f64;
            }
            let mut norm = ((2 * l + 1) as f64 * ratio).sqrt();
            if m == 0 {
                out[base] = norm * q[l][0];
            } else {
                norm *= std::f64::consts::SQRT_2;
                out[base + m] = norm * q[l][m] * re[m];
                out[base - m] = norm * q[l][m] * im[m];
            }
        }
    }
}

/// Maps a degree-1 block (component order y, z, x) back to Cartesian.
#[inline]
pub fn l1_to_cartesian(v: &[f64]) -> Vec3 {
    [v[2], v[0], v[1]]
}

/// Maps a Cartesian vector to a degree-1 block (component order y, z, x).
#[inline]
pub fn cartesian_to_l1(v: Vec3) -> [f64; 3] {
    [v[1], v[2], v[0]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut impl Rng) -> Vec3 {
        loop {
            let v: Vec3 = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n = norm(v);
            if n > 0.1 && n < 1.0 {
                return [v[0] / n, v[1] / n, v[2] / n];
            }
        }
    }

    // Closed-form polynomials, written out independently of the recurrence.
    fn closed_form_l1(u: Vec3) -> [f64; 3] {
        let s3 = 3f64.sqrt();
        [s3 * u[1], s3 * u[2], s3 * u[0]]
    }

    fn closed_form_l2(u: Vec3) -> [f64; 5] {
        let [x, y, z] = u;
        let s15 = 15f64.sqrt();
        [
            s15 * x * y,
            s15 * y * z,
            5f64.sqrt() / 2.0 * (3.0 * z * z - 1.0),
            s15 * x * z,
            s15 / 2.0 * (x * x - y * y),
        ]
    }

    #[test]
    fn degree_zero_is_one() {
        let y = spherical_harmonics(0, [0.6, 0.0, 0.8]).unwrap();
        assert_eq!(y, vec![vec![1.0]]);
    }

    #[test]
    fn north_pole_degree_one() {
        let y = spherical_harmonics(1, [0.0, 0.0, 1.0]).unwrap();
        let expected = closed_form_l1([0.0, 0.0, 1.0]);
        let n2: f64 = y[1].iter().map(|v| v * v).sum();
        assert!((n2 - 3.0).abs() < 1e-14);
        for (a, b) in y[1].iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let u = random_unit(&mut rng);
            let y = spherical_harmonics(2, u).unwrap();
            for (a, b) in y[1].iter().zip(closed_form_l1(u)) {
                assert!((a - b).abs() < 1e-13);
            }
            for (a, b) in y[2].iter().zip(closed_form_l2(u)) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn component_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let u = random_unit(&mut rng);
            let y = spherical_harmonics(MAX_DEGREE, u).unwrap();
            for (l, block) in y.iter().enumerate() {
                let n2: f64 = block.iter().map(|v| v * v).sum();
                assert!((n2 - (2 * l + 1) as f64).abs() < 1e-12, "l={l} n2={n2}");
            }
        }
    }

    #[test]
    fn rejects_non_unit_and_high_degree() {
        assert!(matches!(
            spherical_harmonics(1, [1.0, 1.0, 0.0]),
            Err(Error::NonUnitVector(_))
        ));
        assert!(matches!(
            spherical_harmonics(MAX_DEGREE + 1, [1.0, 0.0, 0.0]),
            Err(Error::DegreeTooHigh { .. })
        ));
    }

    #[test]
    fn l1_cartesian_roundtrip() {
        let v = [0.1, -2.0, 3.5];
        assert_eq!(l1_to_cartesian(&cartesian_to_l1(v)), v);
    }
}

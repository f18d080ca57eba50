//! SO(3) irreducible-representation math: harmonics, Wigner-D matrices,
//! Clebsch-Gordan coupling and the weighted tensor product.

mod cg;
mod rotation;
mod sh;

pub use cg::{clebsch_gordan, triangle, CgPath, CgTable};
pub use rotation::{wigner_d, Rotation};
pub use sh::{cartesian_to_l1, l1_to_cartesian, spherical_harmonics};
pub(crate) use sh::sh_flat;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest degree with cached Wigner and coupling tables.
pub const MAX_DEGREE: usize = 3;

/// Ordered `(degree, multiplicity)` entries. Data for an entry is stored
/// channel-major, components `m = -l..=l` innermost.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IrrepsLayout {
    entries: Vec<(usize, usize)>,
}

impl IrrepsLayout {
    pub fn new(entries: Vec<(usize, usize)>) -> Result<Self> {
        if entries.windows(2).any(|w| w[0].0 > w[1].0) {
            return Err(Error::LayoutMismatch(
                "degrees must be nondecreasing".into(),
            ));
        }
        if entries.iter().any(|&(_, c)| c == 0) {
            return Err(Error::LayoutMismatch("multiplicity must be positive".into()));
        }
        if let Some(&(l, _)) = entries.iter().find(|(l, _)| *l > MAX_DEGREE) {
            return Err(Error::DegreeTooHigh {
                requested: l,
                max: MAX_DEGREE,
            });
        }
        Ok(Self { entries })
    }

    /// `channels` copies of every degree `0..=l_max`.
    pub fn uniform(l_max: usize, channels: usize) -> Result<Self> {
        Self::new((0..=l_max).map(|l| (l, channels)).collect())
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries.iter().map(|&(l, c)| c * (2 * l + 1)).sum()
    }

    pub fn max_degree(&self) -> usize {
        self.entries.last().map_or(0, |e| e.0)
    }

    /// Start offset of each entry in the flat data.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.entries
            .iter()
            .map(|&(l, c)| {
                let o = off;
                off += c * (2 * l + 1);
                o
            })
            .collect()
    }
}

/// Features of one node: a flat array laid out by an [`IrrepsLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct IrrepsTensor {
    pub layout: IrrepsLayout,
    pub data: Vec<f64>,
}

impl IrrepsTensor {
    pub fn new(layout: IrrepsLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.dim() {
            return Err(Error::LayoutMismatch(format!(
                "data length {} != layout dimension {}",
                data.len(),
                layout.dim()
            )));
        }
        Ok(Self { layout, data })
    }

    pub fn zeros(layout: IrrepsLayout) -> Self {
        let data = vec![0.0; layout.dim()];
        Self { layout, data }
    }

    /// Block of entry `entry`, channel `c`.
    pub fn block(&self, entry: usize, c: usize) -> &[f64] {
        let (l, _) = self.layout.entries[entry];
        let start = self.layout.offsets()[entry] + c * (2 * l + 1);
        &self.data[start..start + 2 * l + 1]
    }
}

/// Rotates every `(l, channel)` block of `data` (laid out by `layout`) by
/// `D_l(R)`.
pub fn rotate_features(layout: &IrrepsLayout, data: &mut [f64], r: &Rotation) -> Result<()> {
    if *r == Rotation::identity() {
        return Ok(());
    }
    let mut mats = Vec::new();
    for l in 0..=layout.max_degree() {
        mats.push(wigner_d(l, r)?);
    }
    let mut off = 0;
    let mut tmp = vec![0.0; 2 * layout.max_degree() + 1];
    for &(l, c) in layout.entries() {
        let d = 2 * l + 1;
        let m = &mats[l];
        for _ in 0..c {
            let block = &mut data[off..off + d];
            for i in 0..d {
                tmp[i] = (0..d).map(|j| m[(i, j)] * block[j]).sum();
            }
            block.copy_from_slice(&tmp[..d]);
            off += d;
        }
    }
    Ok(())
}

pub fn apply_rotation(x: &IrrepsTensor, r: &Rotation) -> Result<IrrepsTensor> {
    let mut out = x.clone();
    rotate_features(&x.layout, &mut out.data, r)?;
    Ok(out)
}

/// One coupling path of a [`TensorProduct`]: entries of the two inputs and
/// the output it connects.
#[derive(Debug, Clone)]
pub struct TpPath {
    pub in1: usize,
    pub in2: usize,
    pub out: usize,
    pub cg: Arc<CgPath>,
}

/// Channel-wise weighted Clebsch-Gordan product.
///
/// Output channel `c` of a path couples channel `c` of the first input with
/// channel `c` of the second (or its only channel, when it has one), scaled
/// by a per-(path, channel) weight. Every input-entry pair whose degrees
/// couple to an output entry forms a path.
#[derive(Debug, Clone)]
pub struct TensorProduct {
    in1: IrrepsLayout,
    in2: IrrepsLayout,
    out: IrrepsLayout,
    paths: Vec<TpPath>,
}

impl TensorProduct {
    pub fn new(in1: IrrepsLayout, in2: IrrepsLayout, out: IrrepsLayout) -> Result<Self> {
        let mut paths = Vec::new();
        for (io, &(l3, c3)) in out.entries().iter().enumerate() {
            for (i1, &(l1, c1)) in in1.entries().iter().enumerate() {
                for (i2, &(l2, c2)) in in2.entries().iter().enumerate() {
                    if !triangle(l1, l2, l3) {
                        continue;
                    }
                    if c1 != c3 || (c2 != 1 && c2 != c1) {
                        return Err(Error::LayoutMismatch(format!(
                            "path ({l1},{l2},{l3}) has incompatible multiplicities {c1}, {c2} -> {c3}"
                        )));
                    }
                    paths.push(TpPath {
                        in1: i1,
                        in2: i2,
                        out: io,
                        cg: clebsch_gordan(l1, l2, l3)?,
                    });
                }
            }
        }
        Ok(Self {
            in1,
            in2,
            out,
            paths,
        })
    }

    pub fn paths(&self) -> &[TpPath] {
        &self.paths
    }

    /// Weights are indexed `[path][channel]`.
    pub fn num_weights(&self) -> usize {
        self.paths
            .iter()
            .map(|p| self.out.entries()[p.out].1)
            .sum()
    }

    pub fn apply(&self, f: &IrrepsTensor, g: &IrrepsTensor, weights: &[f64]) -> Result<IrrepsTensor> {
        if f.layout != self.in1 || g.layout != self.in2 {
            return Err(Error::LayoutMismatch("inputs do not match the product".into()));
        }
        if weights.len() != self.num_weights() {
            return Err(Error::LayoutMismatch(format!(
                "expected {} weights, got {}",
                self.num_weights(),
                weights.len()
            )));
        }
        let mut out = IrrepsTensor::zeros(self.out.clone());
        let out_offsets = self.out.offsets();
        let mut w_off = 0;
        for p in &self.paths {
            let (l3, c3) = self.out.entries()[p.out];
            let c2 = self.in2.entries()[p.in2].1;
            for c in 0..c3 {
                let fb = f.block(p.in1, c);
                let gb = g.block(p.in2, if c2 == 1 { 0 } else { c });
                let start = out_offsets[p.out] + c * (2 * l3 + 1);
                p.cg
                    .couple_into(fb, gb, weights[w_off + c], &mut out.data[start..start + 2 * l3 + 1]);
            }
            w_off += c3;
        }
        Ok(out)
    }
}

/// Convenience wrapper building the product for the given layouts.
pub fn tensor_product(
    f: &IrrepsTensor,
    g: &IrrepsTensor,
    weights: &[f64],
    out_layout: &IrrepsLayout,
) -> Result<IrrepsTensor> {
    TensorProduct::new(f.layout.clone(), g.layout.clone(), out_layout.clone())?.apply(f, g, weights)
}

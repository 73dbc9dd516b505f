//! Geometry of the hypercubic lattice Z^d: points, the two bond
//! neighbourhoods (nearest-neighbour and sup-norm spread-out), and
//! canonical unordered bonds.
//!
//! Neighbour offsets are always produced in lexicographic order, so any
//! procedure that walks them is reproducible given a seed.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A site of Z^d in lattice units.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticePoint(Vec<i64>);

impl LatticePoint {
    pub fn new(coords: Vec<i64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidArgument(
                "a lattice point needs at least one coordinate".into(),
            ));
        }
        Ok(Self(coords))
    }

    pub fn origin(dimension: usize) -> Self {
        Self(vec![0; dimension.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<i64> {
        self.0
    }

    pub fn translate(&self, offset: &[i64]) -> Result<Self> {
        if offset.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: offset.len(),
            });
        }
        Ok(Self(self.0.iter().zip(offset).map(|(a, b)| a + b).collect()))
    }

    pub fn sup_norm(&self) -> i64 {
        self.0.iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    pub fn l1_norm(&self) -> i64 {
        self.0.iter().map(|c| c.abs()).sum()
    }
}

impl From<&[i64]> for LatticePoint {
    fn from(c: &[i64]) -> Self {
        Self(c.to_vec())
    }
}

impl fmt::Display for LatticePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Neighbourhood {
    /// Bonds between sites at unit Euclidean distance.
    NearestNeighbour,
    /// Bonds between all pairs with `0 < ‖x − y‖_∞ ≤ range`.
    SpreadOut { range: u32 },
}

/// Dimension, neighbourhood and bond density of a percolation model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModelSpec", into = "RawModelSpec")]
pub struct ModelSpec {
    dimension: usize,
    neighbourhood: Neighbourhood,
    bond_density: f64,
    coordination: usize,
}

#[derive(Clone, Serialize, Deserialize)]
struct RawModelSpec {
    dimension: usize,
    neighbourhood: Neighbourhood,
    bond_density: f64,
}

impl TryFrom<RawModelSpec> for ModelSpec {
    type Error = Error;
    fn try_from(r: RawModelSpec) -> Result<Self> {
        ModelSpec::new(r.dimension, r.neighbourhood, r.bond_density)
    }
}

impl From<ModelSpec> for RawModelSpec {
    fn from(m: ModelSpec) -> Self {
        RawModelSpec {
            dimension: m.dimension,
            neighbourhood: m.neighbourhood,
            bond_density: m.bond_density,
        }
    }
}

impl ModelSpec {
    pub fn new(dimension: usize, neighbourhood: Neighbourhood, bond_density: f64) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::InvalidModel("dimension must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&bond_density) {
            return Err(Error::InvalidModel(format!(
                "bond density {bond_density} is outside [0, 1]"
            )));
        }
        let coordination = match neighbourhood {
            Neighbourhood::NearestNeighbour => 2 * dimension,
            Neighbourhood::SpreadOut { range } => {
                if range == 0 {
                    return Err(Error::InvalidModel("spread-out range must be at least 1".into()));
                }
                let side = 2 * range as u64 + 1;
                let mut box_size: u64 = 1;
                for _ in 0..dimension {
                    box_size = box_size
                        .checked_mul(side)
                        .filter(|&v| v <= u32::MAX as u64)
                        .ok_or_else(|| {
                            Error::InvalidModel(format!(
                                "spread-out neighbourhood with L = {range} in d = {dimension} is too large"
                            ))
                        })?;
                }
                (box_size - 1) as usize
            }
        };
        Ok(Self {
            dimension,
            neighbourhood,
            bond_density,
            coordination,
        })
    }

    pub fn nearest_neighbour(dimension: usize, bond_density: f64) -> Result<Self> {
        Self::new(dimension, Neighbourhood::NearestNeighbour, bond_density)
    }

    pub fn spread_out(dimension: usize, range: u32, bond_density: f64) -> Result<Self> {
        Self::new(dimension, Neighbourhood::SpreadOut { range }, bond_density)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn neighbourhood(&self) -> Neighbourhood {
        self.neighbourhood
    }

    pub fn bond_density(&self) -> f64 {
        self.bond_density
    }

    /// Same geometry with a different bond density.
    pub fn with_bond_density(&self, p: f64) -> Result<Self> {
        Self::new(self.dimension, self.neighbourhood, p)
    }

    /// Number of neighbours of each site.
    pub fn coordination(&self) -> usize {
        self.coordination
    }

    pub fn range(&self) -> u32 {
        match self.neighbourhood {
            Neighbourhood::NearestNeighbour => 1,
            Neighbourhood::SpreadOut { range } => range,
        }
    }

    /// Writes the `index`-th neighbour offset (lexicographic order) into `out`.
    ///
    /// `out.len()` must equal the dimension and `index < coordination()`.
    #[inline]
    pub fn offset_into(&self, index: usize, out: &mut [i64]) {
        let d = self.dimension;
        debug_assert_eq!(out.len(), d);
        match self.neighbourhood {
            Neighbourhood::NearestNeighbour => {
                out.fill(0);
                if index < d {
                    out[index] = -1;
                } else {
                    out[2 * d - 1 - index] = 1;
                }
            }
            Neighbourhood::SpreadOut { range } => {
                let side = 2 * range as usize + 1;
                let centre = self.coordination / 2;
                let mut raw = if index < centre { index } else { index + 1 };
                for slot in out.iter_mut().rev() {
                    *slot = (raw % side) as i64 - range as i64;
                    raw /= side;
                }
            }
        }
    }

    /// All neighbour offsets in lexicographic order.
    pub fn offsets(&self) -> Vec<Vec<i64>> {
        let mut buf = vec![0; self.dimension];
        (0..self.coordination())
            .map(|i| {
                self.offset_into(i, &mut buf);
                buf.clone()
            })
            .collect()
    }

    /// True when `diff` is a bond vector of this model.
    pub fn is_bond_vector(&self, diff: &[i64]) -> bool {
        if diff.len() != self.dimension {
            return false;
        }
        match self.neighbourhood {
            Neighbourhood::NearestNeighbour => diff.iter().map(|c| c.abs()).sum::<i64>() == 1,
            Neighbourhood::SpreadOut { range } => {
                let sup = diff.iter().map(|c| c.abs()).max().unwrap_or(0);
                sup > 0 && sup <= range as i64
            }
        }
    }

    pub(crate) fn check_point(&self, coords: &[i64]) -> Result<()> {
        if coords.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                found: coords.len(),
            });
        }
        Ok(())
    }
}

/// The neighbourhood of `x`, translated to `x`, in lexicographic offset order.
pub fn neighbours(m: &ModelSpec, x: &LatticePoint) -> Result<Vec<LatticePoint>> {
    m.check_point(x.coords())?;
    let mut off = vec![0; m.dimension()];
    Ok((0..m.coordination())
        .map(|i| {
            m.offset_into(i, &mut off);
            LatticePoint(x.coords().iter().zip(&off).map(|(a, b)| a + b).collect())
        })
        .collect())
}

/// An unordered pair of distinct sites, stored with the lexicographically
/// smaller endpoint first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Bond {
    lo: LatticePoint,
    hi: LatticePoint,
}

impl Bond {
    pub fn endpoints(&self) -> (&LatticePoint, &LatticePoint) {
        (&self.lo, &self.hi)
    }
}

pub fn canonical_bond(x: &LatticePoint, y: &LatticePoint) -> Result<Bond> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            found: y.dim(),
        });
    }
    match x.cmp(y) {
        std::cmp::Ordering::Equal => Err(Error::DegenerateBond),
        std::cmp::Ordering::Less => Ok(Bond {
            lo: x.clone(),
            hi: y.clone(),
        }),
        std::cmp::Ordering::Greater => Ok(Bond {
            lo: y.clone(),
            hi: x.clone(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn pt(c: &[i64]) -> LatticePoint {
        LatticePoint::new(c.to_vec()).unwrap()
    }

    #[test]
    fn nearest_neighbour_square() {
        let m = ModelSpec::nearest_neighbour(2, 0.5).unwrap();
        let nb = neighbours(&m, &pt(&[0, 0])).unwrap();
        assert_eq!(nb, vec![pt(&[-1, 0]), pt(&[0, -1]), pt(&[0, 1]), pt(&[1, 0])]);
    }

    #[test]
    fn moore_neighbourhood() {
        let m = ModelSpec::spread_out(2, 1, 0.1).unwrap();
        let nb = neighbours(&m, &pt(&[0, 0])).unwrap();
        assert_eq!(nb.len(), 8);
        assert!(!nb.contains(&pt(&[0, 0])));
    }

    #[test]
    fn spread_out_range_two_in_three_dimensions() {
        let m = ModelSpec::spread_out(3, 2, 0.1).unwrap();
        let x = pt(&[1, 1, 1]);
        let nb = neighbours(&m, &x).unwrap();
        // brute force: every y with 0 < |y - x|_inf <= 2
        let mut expected = Vec::new();
        for a in -1..=3 {
            for b in -1..=3 {
                for c in -1..=3 {
                    let y = pt(&[a, b, c]);
                    if y != x {
                        expected.push(y);
                    }
                }
            }
        }
        assert_eq!(nb.len(), 124);
        assert_eq!(nb, expected, "lexicographic order");
    }

    #[test]
    fn coordination_by_enumeration() {
        for d in 1..=4 {
            let m = ModelSpec::nearest_neighbour(d, 0.5).unwrap();
            let set: BTreeSet<_> = neighbours(&m, &LatticePoint::origin(d)).unwrap().into_iter().collect();
            assert_eq!(set.len(), 2 * d);
            for l in 1..=3u32 {
                if (2 * l as usize + 1).pow(d as u32) > 3000 {
                    continue;
                }
                let m = ModelSpec::spread_out(d, l, 0.5).unwrap();
                let nb = neighbours(&m, &LatticePoint::origin(d)).unwrap();
                let set: BTreeSet<_> = nb.iter().cloned().collect();
                assert_eq!(set.len(), nb.len());
                assert_eq!(nb.len(), (2 * l as usize + 1).pow(d as u32) - 1);
                assert!(nb.iter().all(|y| y.sup_norm() <= l as i64 && y.sup_norm() > 0));
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let m = ModelSpec::nearest_neighbour(3, 0.5).unwrap();
        assert!(matches!(
            neighbours(&m, &pt(&[0, 0])),
            Err(Error::DimensionMismatch { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn invalid_models() {
        assert!(ModelSpec::nearest_neighbour(0, 0.5).is_err());
        assert!(ModelSpec::nearest_neighbour(2, 1.5).is_err());
        assert!(ModelSpec::spread_out(2, 0, 0.5).is_err());
        assert!(ModelSpec::spread_out(40, 3, 0.5).is_err());
    }

    #[test]
    fn canonical_bonds() {
        let b = canonical_bond(&pt(&[0, 1]), &pt(&[0, 0])).unwrap();
        assert_eq!(b.endpoints(), (&pt(&[0, 0]), &pt(&[0, 1])));
        assert_eq!(
            canonical_bond(&pt(&[2, 2]), &pt(&[2, 3])).unwrap(),
            canonical_bond(&pt(&[2, 3]), &pt(&[2, 2])).unwrap()
        );
        let b = canonical_bond(&pt(&[-1, 0]), &pt(&[1, 0])).unwrap();
        assert_eq!(b.endpoints(), (&pt(&[-1, 0]), &pt(&[1, 0])));
        assert_eq!(canonical_bond(&pt(&[1, 1]), &pt(&[1, 1])), Err(Error::DegenerateBond));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn model() -> impl Strategy<Value = ModelSpec> {
            prop_oneof![
                (1usize..=4).prop_map(|d| ModelSpec::nearest_neighbour(d, 0.5).unwrap()),
                (1usize..=3, 1u32..=2).prop_map(|(d, l)| ModelSpec::spread_out(d, l, 0.5).unwrap()),
            ]
        }

        proptest! {
            #[test]
            fn translation_covariant_and_symmetric(
                m in model(),
                x in proptest::collection::vec(-50i64..50, 4),
                v in proptest::collection::vec(-50i64..50, 4),
            ) {
                let d = m.dimension();
                let x = LatticePoint::new(x[..d].to_vec()).unwrap();
                let v = &v[..d];
                let base = neighbours(&m, &x).unwrap();
                let shifted = neighbours(&m, &x.translate(v).unwrap()).unwrap();
                for (a, b) in base.iter().zip(&shifted) {
                    prop_assert_eq!(a.translate(v).unwrap(), b.clone());
                }
                for y in &base {
                    prop_assert!(neighbours(&m, y).unwrap().contains(&x));
                    let diff: Vec<i64> = y.coords().iter().zip(x.coords()).map(|(a, b)| a - b).collect();
                    prop_assert!(m.is_bond_vector(&diff));
                }
            }
        }
    }
}

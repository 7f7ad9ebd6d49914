use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Batch indices placed in the quadrants of one 2x2 grid, in the order
/// top-left, top-right, bottom-left, bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 4]", into = "[usize; 4]")]
pub struct GridLayout {
    members: [usize; 4],
}

impl GridLayout {
    pub fn new(members: [usize; 4]) -> Result<Self> {
        for i in 0..4 {
            for j in i + 1..4 {
                if members[i] == members[j] {
                    return Err(Error::invalid(format!(
                        "grid layout {members:?} repeats index {}",
                        members[i]
                    )));
                }
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> [usize; 4] {
        self.members
    }

    pub fn contains(&self, index: usize) -> bool {
        self.members.contains(&index)
    }

    /// Quadrant holding `index`, if any.
    pub fn quadrant_of(&self, index: usize) -> Option<usize> {
        self.members.iter().position(|&m| m == index)
    }
}

impl TryFrom<[usize; 4]> for GridLayout {
    type Error = Error;

    fn try_from(members: [usize; 4]) -> Result<Self> {
        GridLayout::new(members)
    }
}

impl From<GridLayout> for [usize; 4] {
    fn from(l: GridLayout) -> Self {
        l.members
    }
}

fn chunk_into_layouts(order: &[usize]) -> Vec<GridLayout> {
    order
        .chunks_exact(4)
        .map(|c| GridLayout {
            members: [c[0], c[1], c[2], c[3]],
        })
        .collect()
}

/// A uniformly random permutation of `0..n` cut into consecutive quadruples.
pub fn permute_into_grids<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<GridLayout>> {
    if n == 0 || !n.is_multiple_of(4) {
        return Err(Error::invalid(format!(
            "batch size {n} is not a positive multiple of 4; pad it first"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(chunk_into_layouts(&order))
}

fn check_reference(n: usize, reference: usize) -> Result<Vec<usize>> {
    if n < 4 || !(n - 1).is_multiple_of(3) {
        return Err(Error::invalid(format!(
            "reference grids need n = 3k + 1 with k >= 1, got n = {n}"
        )));
    }
    if reference >= n {
        return Err(Error::invalid(format!(
            "reference index {reference} outside batch of {n}"
        )));
    }
    Ok((0..n).filter(|&i| i != reference).collect())
}

fn reference_grids(reference: usize, others: &[usize]) -> Vec<GridLayout> {
    others
        .chunks_exact(3)
        .map(|c| GridLayout {
            members: [reference, c[0], c[1], c[2]],
        })
        .collect()
}

/// `(n - 1) / 3` grids, each with `reference` top-left and three of the
/// remaining views in ascending order.
pub fn reference_layouts(n: usize, reference: usize) -> Result<Vec<GridLayout>> {
    let others = check_reference(n, reference)?;
    Ok(reference_grids(reference, &others))
}

/// Like [`reference_layouts`] but with the non-reference views shuffled.
pub fn shuffled_reference_layouts<R: rand::Rng + ?Sized>(
    n: usize,
    reference: usize,
    rng: &mut R,
) -> Result<Vec<GridLayout>> {
    let mut others = check_reference(n, reference)?;
    others.shuffle(rng);
    Ok(reference_grids(reference, &others))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive;

    #[test]
    fn rejects_repeats() {
        assert!(GridLayout::new([0, 1, 1, 2]).is_err());
        assert!(serde_json::from_str::<GridLayout>("[3,3,0,1]").is_err());
        let l: GridLayout = serde_json::from_str("[3,2,0,1]").unwrap();
        assert_eq!(l.quadrant_of(0), Some(2));
    }

    #[test]
    fn permute_partitions() {
        let ls = permute_into_grids(8, &mut derive(42, &[])).unwrap();
        assert_eq!(ls.len(), 2);
        let mut all: Vec<usize> = ls.iter().flat_map(|l| l.members()).collect();
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        assert_eq!(ls, permute_into_grids(8, &mut derive(42, &[])).unwrap());
        assert!(permute_into_grids(6, &mut derive(0, &[])).is_err());
    }

    #[test]
    fn reference_small() {
        assert_eq!(
            reference_layouts(4, 0).unwrap(),
            vec![GridLayout::new([0, 1, 2, 3]).unwrap()]
        );
        assert_eq!(reference_layouts(7, 3).unwrap()[1].members(), [3, 4, 5, 6]);
        assert!(reference_layouts(6, 0).is_err());
        assert!(reference_layouts(4, 4).is_err());
    }
}

//! Truncated site sets for the normal modes.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

pub type SiteLabel = SmallVec<[i32; 3]>;

/// Ordered set of retained normal sites with their lattice labels.
///
/// Index `i` in every vector/matrix over the lattice refers to `sites[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub dim: usize,
    pub sites: Vec<SiteLabel>,
}

impl Lattice {
    /// One-dimensional sites `1..=radius` (the mean-zero BBM space, paired `j ~ -j`).
    pub fn line(radius: usize) -> Self {
        Self {
            dim: 1,
            sites: (1..=radius as i32).map(|j| SmallVec::from_slice(&[j])).collect(),
        }
    }

    /// Positive orthant `{1..=radius}^dim` (Dirichlet sine modes).
    pub fn orthant(dim: usize, radius: usize) -> Self {
        let mut sites = vec![SiteLabel::new()];
        for _ in 0..dim {
            sites = sites
                .into_iter()
                .flat_map(|s| {
                    (1..=radius as i32).map(move |c| {
                        let mut t = s.clone();
                        t.push(c);
                        t
                    })
                })
                .collect();
        }
        Self { dim, sites }
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn index_of(&self, label: &[i32]) -> Option<usize> {
        self.sites.iter().position(|s| s.as_slice() == label)
    }

    /// `|j|` used by the weighted norms: the l1 length, with 1 at the origin.
    pub fn weight(&self, i: usize) -> f64 {
        site_abs(&self.sites[i])
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.weight(i)).collect()
    }

    /// Restrict to the given indices, preserving order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            dim: self.dim,
            sites: idx.iter().map(|&i| self.sites[i].clone()).collect(),
        }
    }
}

pub fn site_abs(label: &[i32]) -> f64 {
    let n: i64 = label.iter().map(|c| (*c as i64).abs()).sum();
    if n == 0 {
        1.0
    } else {
        n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthant_enumerates_all_points() {
        let l = Lattice::orthant(2, 3);
        assert_eq!(l.len(), 9);
        assert_eq!(l.index_of(&[2, 3]), Some(5));
        assert_eq!(l.weight(5), 5.0);
    }

    #[test]
    fn origin_has_unit_weight() {
        assert_eq!(site_abs(&[0, 0]), 1.0);
    }
}

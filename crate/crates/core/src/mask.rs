//! Hidden-unit retention masks for BiLSTM substitutes.

use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Reverse,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Forward, Direction::Reverse];

    pub fn index(self) -> usize {
        match self {
            Direction::Forward => 0,
            Direction::Reverse => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Reverse => "rev",
        }
    }
}

/// Keep flags over the hidden units of one (layer, head, direction).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    pub keep: Vec<bool>,
}

impl PruneMask {
    pub fn full(units: usize) -> Self {
        Self {
            keep: vec![true; units],
        }
    }

    pub fn units(&self) -> usize {
        self.keep.len()
    }

    pub fn retained(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn ratio(&self) -> f64 {
        self.retained() as f64 / self.units().max(1) as f64
    }

    pub fn is_full(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }

    pub fn retained_indices(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(j, &k)| k.then_some(j))
            .collect()
    }

    fn flag<F: Real>(&self, j: usize) -> F {
        if self.keep[j] {
            F::one()
        } else {
            F::zero()
        }
    }

    /// Multiplier for a gate-stacked `[4·units × cols]` matrix: zeroes the
    /// rows of masked units in every gate block and, if `mask_cols`, also the
    /// columns of masked units.
    pub fn gate_matrix<F: Real>(&self, cols: usize, mask_cols: bool) -> Tensor<F> {
        let u = self.units();
        Tensor::from_fn(&[4 * u, cols], |i| {
            let (r, c) = (i / cols, i % cols);
            let row = self.flag::<F>(r % u);
            if mask_cols {
                row * self.flag::<F>(c)
            } else {
                row
            }
        })
    }

    /// Multiplier for a gate-stacked bias of length `4·units`.
    pub fn gate_vector<F: Real>(&self) -> Tensor<F> {
        let u = self.units();
        Tensor::from_fn(&[4 * u], |i| self.flag::<F>(i % u))
    }
}

/// Masks for every (layer, head, direction) of a FAR model, indexed
/// `[layer][head][direction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub masks: Vec<Vec<[PruneMask; 2]>>,
}

impl MaskSet {
    pub fn full(layers: usize, heads: usize, units: usize) -> Self {
        Self {
            masks: (0..layers)
                .map(|_| {
                    (0..heads)
                        .map(|_| [PruneMask::full(units), PruneMask::full(units)])
                        .collect()
                })
                .collect(),
        }
    }

    pub fn get(&self, layer: usize, head: usize, dir: Direction) -> &PruneMask {
        &self.masks[layer][head][dir.index()]
    }

    pub fn get_mut(&mut self, layer: usize, head: usize, dir: Direction) -> &mut PruneMask {
        &mut self.masks[layer][head][dir.index()]
    }

    pub fn layers(&self) -> usize {
        self.masks.len()
    }

    pub fn is_full(&self) -> bool {
        self.iter().all(|(_, _, _, m)| m.is_full())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, Direction, &PruneMask)> {
        self.masks.iter().enumerate().flat_map(|(l, heads)| {
            heads.iter().enumerate().flat_map(move |(h, dirs)| {
                Direction::BOTH
                    .into_iter()
                    .map(move |d| (l, h, d, &dirs[d.index()]))
            })
        })
    }

    /// Mean retention ratio over all (layer, head, direction).
    pub fn mean_retention(&self) -> f64 {
        let (sum, n) = self
            .iter()
            .fold((0.0, 0usize), |(s, n), (_, _, _, m)| (s + m.ratio(), n + 1));
        sum / n.max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_matrix_layout() {
        let m = PruneMask {
            keep: vec![true, false, true],
        };
        let t = m.gate_matrix::<f64>(3, true);
        assert_eq!(t.shape(), &[12, 3]);
        // unit 1 row in the forget gate block
        assert_eq!(t.row(4), &[0.0, 0.0, 0.0]);
        // unit 0 row in the output gate block: column 1 masked
        assert_eq!(t.row(9), &[1.0, 0.0, 1.0]);
        assert_eq!(m.retained(), 2);
        assert!((m.ratio() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mask_set_iteration_order() {
        let s = MaskSet::full(2, 3, 4);
        let v: Vec<_> = s.iter().map(|(l, h, d, _)| (l, h, d.index())).collect();
        assert_eq!(v.len(), 12);
        assert_eq!(v[0], (0, 0, 0));
        assert_eq!(v[1], (0, 0, 1));
        assert_eq!(v[11], (1, 2, 1));
        assert!(s.is_full());
    }
}

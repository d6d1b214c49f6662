//! Bipartite matching between predictions and ground-truth active objects.
//!
//! Costs are evaluated on detached values; gradients only ever flow through
//! the losses computed at the chosen prediction index.

use serde::{Deserialize, Serialize};

use crate::error::{KadError, Result};
use crate::geometry::{box_l1, giou_loss, BoxN};

/// Weighting of the geometric terms against the confidence term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchCost {
    pub lambda: f64,
}

impl Default for MatchCost {
    fn default() -> Self {
        MatchCost { lambda: 5.0 }
    }
}

/// Result of an assignment. `pairs` holds `(prediction, ground_truth)` indices,
/// ordered by ground-truth index.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    /// Prediction matched to ground truth `gt`.
    pub fn prediction_for(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|(_, g)| *g == gt).map(|(p, _)| *p)
    }
}

/// Row-major `predictions x ground_truths` cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(KadError::Input(format!(
                "cost matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(KadError::Input(format!("non-finite cost {v}")));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(KadError::Input("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn predictions(&self) -> usize {
        self.rows
    }

    pub fn ground_truths(&self) -> usize {
        self.cols
    }

    pub fn get(&self, pred: usize, gt: usize) -> f64 {
        self.data[pred * self.cols + gt]
    }

    fn check_feasible(&self) -> Result<()> {
        if self.cols == 0 || self.rows < self.cols {
            return Err(KadError::Infeasible {
                predictions: self.rows,
                ground_truths: self.cols,
            });
        }
        Ok(())
    }

    fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(p, g)| self.get(p, g)).sum()
    }
}

/// `-score + lambda * (giou_loss + l1)`; negative when a confident prediction
/// sits on the ground truth.
pub fn match_cost(score: f64, pred: &BoxN, gt: &BoxN, params: MatchCost) -> f64 {
    let geometric = giou_loss(&pred.to_corners(), &gt.to_corners()) + box_l1(pred, gt);
    -score + params.lambda * geometric
}

/// Cost matrix for one image: every prediction against every ground truth.
pub fn cost_matrix(
    scores: &[f64],
    boxes: &[BoxN],
    gts: &[BoxN],
    params: MatchCost,
) -> Result<CostMatrix> {
    if scores.len() != boxes.len() {
        return Err(KadError::Input(format!(
            "{} scores for {} boxes",
            scores.len(),
            boxes.len()
        )));
    }
    let mut data = Vec::with_capacity(scores.len() * gts.len());
    for (s, b) in scores.iter().zip(boxes) {
        for g in gts {
            data.push(match_cost(*s, b, g, params));
        }
    }
    CostMatrix::new(scores.len(), gts.len(), data)
}

/// Minimum-cost assignment of every ground truth to a distinct prediction.
///
/// Shortest augmenting path Hungarian algorithm with row/column potentials,
/// `O(K^2 m)` for `K` ground truths and `m` predictions. Ground truths play the
/// role of rows in the inner formulation. Ties resolve toward lower prediction
/// indices.
pub fn hungarian_assign(costs: &CostMatrix) -> Result<Assignment> {
    costs.check_feasible()?;
    let (m, k) = (costs.rows, costs.cols);

    if k == 1 {
        let (best, cost) = (0..m)
            .map(|p| (p, costs.get(p, 0)))
            .fold((0, f64::INFINITY), |acc, (p, c)| if c < acc.1 { (p, c) } else { acc });
        return Ok(Assignment {
            pairs: vec![(best, 0)],
            total_cost: cost,
        });
    }

    // 1-based indexing over ground truths (rows) and predictions (columns);
    // column 0 is the virtual source of each augmenting search.
    let cost = |gt: usize, pred: usize| costs.get(pred - 1, gt - 1);
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for gt in 1..=k {
        owner[0] = gt;
        let mut col = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[col] = true;
            let row = owner[col];
            let mut delta = f64::INFINITY;
            let mut next = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost(row, j) - u[row] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = col;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    next = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col = next;
            if owner[col] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col];
            owner[col] = owner[prev];
            col = prev;
            if col == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (j - 1, owner[j] - 1))
        .collect();
    pairs.sort_by_key(|&(_, g)| g);
    let total_cost = costs.total(&pairs);
    Ok(Assignment { pairs, total_cost })
}

/// Exhaustive minimum over all injections from ground truths into
/// predictions. Reference for [`hungarian_assign`]; limited to 8 predictions.
pub fn brute_force_assign(costs: &CostMatrix) -> Result<Assignment> {
    if costs.rows > 8 {
        return Err(KadError::TooLarge(costs.rows));
    }
    costs.check_feasible()?;

    fn search(
        costs: &CostMatrix,
        gt: usize,
        taken: &mut [bool],
        current: &mut Vec<usize>,
        acc: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if gt == costs.cols {
            if acc < best.0 {
                *best = (acc, current.clone());
            }
            return;
        }
        for p in 0..costs.rows {
            if taken[p] {
                continue;
            }
            taken[p] = true;
            current.push(p);
            search(costs, gt + 1, taken, current, acc + costs.get(p, gt), best);
            current.pop();
            taken[p] = false;
        }
    }

    let mut best = (f64::INFINITY, Vec::new());
    search(
        costs,
        0,
        &mut vec![false; costs.rows],
        &mut Vec::with_capacity(costs.cols),
        0.0,
        &mut best,
    );
    let pairs: Vec<(usize, usize)> = best.1.into_iter().enumerate().map(|(g, p)| (p, g)).collect();
    let total_cost = costs.total(&pairs);
    Ok(Assignment { pairs, total_cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoxN {
        BoxN::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn cost_examples() {
        let b = bx(0.5, 0.5, 0.3, 0.2);
        assert_eq!(match_cost(1.0, &b, &b, MatchCost { lambda: 5.0 }), -1.0);
        assert_eq!(match_cost(0.0, &b, &b, MatchCost { lambda: 5.0 }), 0.0);
    }

    #[test]
    fn cost_with_known_geometry() {
        // pred (0.5,0.5,1,1) against a gt centred at (1,1) with unit size;
        // the gt spills past the border so it is assembled from corners.
        use crate::geometry::BoxCorners;
        let a = BoxCorners::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let b = BoxCorners::new(0.5, 0.5, 1.5, 1.5).unwrap();
        let l1_center_space = 0.5 + 0.5 + 0.0 + 0.0;
        let cost = -0.5 + 1.0 * (giou_loss(&a, &b) + l1_center_space);
        assert!((cost - 1.579_365_079_365_079).abs() < 1e-12);
    }

    #[test]
    fn argmin_for_single_gt() {
        let c = CostMatrix::from_rows(&[vec![3.0], vec![-1.0], vec![2.0]]).unwrap();
        let a = hungarian_assign(&c).unwrap();
        assert_eq!(a.pairs, vec![(1, 0)]);
        assert_eq!(a.total_cost, -1.0);
        assert_eq!(brute_force_assign(&c).unwrap(), a);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let c = CostMatrix::from_rows(&[vec![1.0], vec![0.5], vec![0.5]]).unwrap();
        assert_eq!(hungarian_assign(&c).unwrap().pairs, vec![(1, 0)]);
        assert_eq!(brute_force_assign(&c).unwrap().pairs, vec![(1, 0)]);
    }

    #[test]
    fn diagonal_when_diagonal_is_minimal() {
        let n = 5;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.1 * i as f64 } else { 10.0 + j as f64 }).collect())
            .collect();
        let c = CostMatrix::from_rows(&rows).unwrap();
        let a = hungarian_assign(&c).unwrap();
        assert_eq!(a.pairs, (0..n).map(|i| (i, i)).collect::<Vec<_>>());
        let two = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let b = brute_force_assign(&two).unwrap();
        assert_eq!(b.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(b.total_cost, 2.0);
    }

    #[test]
    fn infeasible_and_too_large() {
        let c = CostMatrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(matches!(hungarian_assign(&c), Err(KadError::Infeasible { .. })));
        assert!(matches!(brute_force_assign(&c), Err(KadError::Infeasible { .. })));
        let big = CostMatrix::new(9, 1, vec![0.0; 9]).unwrap();
        assert!(matches!(brute_force_assign(&big), Err(KadError::TooLarge(9))));
        assert!(CostMatrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn agrees_with_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..500 {
            let m = rng.random_range(1..=6);
            let k = rng.random_range(1..=m);
            let data = (0..m * k).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c = CostMatrix::new(m, k, data).unwrap();
            let h = hungarian_assign(&c).unwrap();
            let b = brute_force_assign(&c).unwrap();
            assert!((h.total_cost - b.total_cost).abs() < 1e-9);
            assert_eq!(h.pairs.len(), k);
        }
    }

    #[test]
    fn row_shift_moves_total_by_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let m = rng.random_range(2..=6);
            let k = rng.random_range(1..=m);
            let mut data: Vec<f64> = (0..m * k).map(|_| rng.random_range(-5.0..5.0)).collect();
            let base = hungarian_assign(&CostMatrix::new(m, k, data.clone()).unwrap()).unwrap();
            // shifting a ground-truth row (one column of this layout) by c
            let gt = rng.random_range(0..k);
            let c = rng.random_range(-3.0..3.0);
            for p in 0..m {
                data[p * k + gt] += c;
            }
            let shifted = hungarian_assign(&CostMatrix::new(m, k, data).unwrap()).unwrap();
            assert!((shifted.total_cost - (base.total_cost + c)).abs() < 1e-9);
        }
    }

    #[test]
    fn cost_monotonicity() {
        let p = bx(0.4, 0.5, 0.2, 0.3);
        let g = bx(0.6, 0.5, 0.2, 0.2);
        let params = MatchCost { lambda: 2.0 };
        assert!(match_cost(0.9, &p, &g, params) < match_cost(0.1, &p, &g, params));
        assert!(match_cost(0.5, &p, &g, MatchCost { lambda: 3.0 }) > match_cost(0.5, &p, &g, params));
    }
}

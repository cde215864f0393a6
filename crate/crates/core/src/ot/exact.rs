use std::collections::VecDeque;

use super::{check_problem, OtError, TransportPlan};

/// Largest support size accepted by [`exact_ot`] on either side.
pub const MAX_EXACT_SUPPORT: usize = 64;

/// Minimum of `<C, pi>` over couplings of `alpha` and `beta`.
///
/// Transportation simplex started from the north-west corner basis. The
/// basis is kept as a spanning tree over row and column nodes, so degenerate
/// (zero-flow) basic cells are carried explicitly; Bland's smallest-index
/// rule picks entering and leaving cells, which rules out cycling.
pub fn exact_ot(alpha: &[f64], beta: &[f64], cost: &[f64]) -> Result<(f64, TransportPlan), OtError> {
    check_problem(alpha, beta, cost)?;
    let (k, l) = (alpha.len(), beta.len());
    if k > MAX_EXACT_SUPPORT || l > MAX_EXACT_SUPPORT {
        return Err(OtError::TooLarge(k.max(l)));
    }
    let mut solver = Simplex::north_west(alpha, beta, cost);
    solver.run()?;
    let plan = TransportPlan::new(k, l, solver.flow);
    Ok((plan.cost(cost), plan))
}

struct Simplex<'a> {
    k: usize,
    l: usize,
    cost: &'a [f64],
    flow: Vec<f64>,
    basic: Vec<bool>,
}

impl<'a> Simplex<'a> {
    fn north_west(alpha: &[f64], beta: &[f64], cost: &'a [f64]) -> Self {
        let (k, l) = (alpha.len(), beta.len());
        let mut flow = vec![0.0; k * l];
        let mut basic = vec![false; k * l];
        let (mut a, mut b) = (alpha.to_vec(), beta.to_vec());
        let (mut i, mut j) = (0, 0);
        loop {
            let x = a[i].min(b[j]);
            flow[i * l + j] = x;
            basic[i * l + j] = true;
            a[i] -= x;
            b[j] -= x;
            if i + 1 == k && j + 1 == l {
                break;
            }
            // Move down when the row is exhausted, so that exactly k + l - 1
            // cells end up basic and they form a staircase tree.
            if j + 1 == l || (i + 1 < k && a[i] <= b[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self {
            k,
            l,
            cost,
            flow,
            basic,
        }
    }

    fn potentials(&self) -> (Vec<f64>, Vec<f64>) {
        let (k, l) = (self.k, self.l);
        let mut u = vec![f64::NAN; k];
        let mut v = vec![f64::NAN; l];
        u[0] = 0.0;
        // nodes: rows 0..k, cols k..k+l
        let mut queue = VecDeque::from([0usize]);
        while let Some(node) = queue.pop_front() {
            if node < k {
                let i = node;
                for j in 0..l {
                    if self.basic[i * l + j] && v[j].is_nan() {
                        v[j] = self.cost[i * l + j] - u[i];
                        queue.push_back(k + j);
                    }
                }
            } else {
                let j = node - k;
                for i in 0..k {
                    if self.basic[i * l + j] && u[i].is_nan() {
                        u[i] = self.cost[i * l + j] - v[j];
                        queue.push_back(i);
                    }
                }
            }
        }
        debug_assert!(u.iter().chain(&v).all(|x| !x.is_nan()), "basis is not spanning");
        (u, v)
    }

    /// Tree path from row `i` to column `j`, as the sequence of basic cells.
    fn tree_path(&self, i: usize, j: usize) -> Vec<usize> {
        let (k, l) = (self.k, self.l);
        let mut prev = vec![usize::MAX; k + l];
        prev[i] = i;
        let mut queue = VecDeque::from([i]);
        while let Some(node) = queue.pop_front() {
            if node == k + j {
                break;
            }
            if node < k {
                for c in 0..l {
                    if self.basic[node * l + c] && prev[k + c] == usize::MAX {
                        prev[k + c] = node;
                        queue.push_back(k + c);
                    }
                }
            } else {
                let c = node - k;
                for r in 0..k {
                    if self.basic[r * l + c] && prev[r] == usize::MAX {
                        prev[r] = node;
                        queue.push_back(r);
                    }
                }
            }
        }
        // walk back from column j to row i, collecting cells
        let mut cells = Vec::new();
        let mut node = k + j;
        while node != i {
            let p = prev[node];
            let cell = if node >= k {
                p * l + (node - k)
            } else {
                node * l + (p - k)
            };
            cells.push(cell);
            node = p;
        }
        cells
    }

    fn run(&mut self) -> Result<(), OtError> {
        let (k, l) = (self.k, self.l);
        let scale = 1.0 + self.cost.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let tol = 1e-12 * scale;
        let max_pivots = 1000 * (k * l + 1);
        for _ in 0..max_pivots {
            let (u, v) = self.potentials();
            let entering = (0..k * l)
                .find(|&c| !self.basic[c] && self.cost[c] - u[c / l] - v[c % l] < -tol);
            let Some(enter) = entering else {
                return Ok(());
            };
            // cells along the cycle alternate -, +, -, ... starting next to the
            // entering column
            let path = self.tree_path(enter / l, enter % l);
            let leave = path
                .iter()
                .step_by(2)
                .copied()
                .min_by(|&a, &b| {
                    self.flow[a]
                        .partial_cmp(&self.flow[b])
                        .expect("finite flow")
                        .then(a.cmp(&b))
                })
                .expect("cycle has a decreasing cell");
            let theta = self.flow[leave];
            for (n, &cell) in path.iter().enumerate() {
                if n % 2 == 0 {
                    self.flow[cell] -= theta;
                } else {
                    self.flow[cell] += theta;
                }
            }
            self.flow[enter] = theta;
            self.flow[leave] = 0.0;
            self.basic[leave] = false;
            self.basic[enter] = true;
        }
        Err(OtError::NoTermination(max_pivots))
    }
}

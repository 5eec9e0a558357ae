//! Block-sparse Cholesky for 6x6-block normal equations, with a greedy
//! minimum-degree elimination order.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use rustc_hash::FxHashMap;

/// Symmetric block system `H x = b`. Only `i < j` off-diagonal blocks are
/// stored (`H_ij`; `H_ji` is its transpose).
#[derive(Clone, Debug)]
pub struct BlockSystem {
    pub diag: Vec<Matrix6<f64>>,
    pub upper: FxHashMap<(usize, usize), Matrix6<f64>>,
    pub rhs: Vec<Vector6<f64>>,
}

impl BlockSystem {
    pub fn new(n: usize) -> Self {
        Self {
            diag: vec![Matrix6::zeros(); n],
            upper: FxHashMap::default(),
            rhs: vec![Vector6::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Adds `block` at `(i, j)` (and its transpose at `(j, i)`).
    pub fn add_block(&mut self, i: usize, j: usize, block: &Matrix6<f64>) {
        use std::cmp::Ordering;
        match i.cmp(&j) {
            Ordering::Equal => self.diag[i] += block,
            Ordering::Less => *self.upper.entry((i, j)).or_insert_with(Matrix6::zeros) += block,
            Ordering::Greater => {
                *self.upper.entry((j, i)).or_insert_with(Matrix6::zeros) += block.transpose()
            }
        }
    }

    pub fn to_dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.len();
        let mut h = DMatrix::zeros(6 * n, 6 * n);
        let mut b = DVector::zeros(6 * n);
        for (i, d) in self.diag.iter().enumerate() {
            h.view_mut((6 * i, 6 * i), (6, 6)).copy_from(d);
            b.rows_mut(6 * i, 6).copy_from(&self.rhs[i]);
        }
        for (&(i, j), blk) in &self.upper {
            h.view_mut((6 * i, 6 * j), (6, 6)).copy_from(blk);
            h.view_mut((6 * j, 6 * i), (6, 6)).copy_from(&blk.transpose());
        }
        (h, b)
    }

    pub fn solve_dense(&self) -> Option<Vec<Vector6<f64>>> {
        let (h, b) = self.to_dense();
        let chol = h.cholesky()?;
        let x = chol.solve(&b);
        Some((0..self.len()).map(|i| x.fixed_rows::<6>(6 * i).into_owned()).collect())
    }

    pub fn solve_sparse(&self) -> Option<Vec<Vector6<f64>>> {
        let n = self.len();
        let order = minimum_degree_order(n, self.upper.keys().copied());
        let mut pos = vec![0usize; n];
        for (p, &node) in order.iter().enumerate() {
            pos[node] = p;
        }

        // Lower-triangular columns in elimination order: cols[c][r] = A_rc, r > c.
        let mut diag: Vec<Matrix6<f64>> = order.iter().map(|&v| self.diag[v]).collect();
        let mut cols: Vec<BTreeMap<usize, Matrix6<f64>>> = vec![BTreeMap::new(); n];
        for (&(i, j), blk) in &self.upper {
            let (pi, pj) = (pos[i], pos[j]);
            if pi > pj {
                cols[pj].insert(pi, *blk);
            } else {
                cols[pi].insert(pj, blk.transpose());
            }
        }

        let mut l_diag: Vec<Matrix6<f64>> = Vec::with_capacity(n);
        for c in 0..n {
            let lcc = diag[c].cholesky()?.l();
            let lcc_inv_t = lcc.try_inverse()?.transpose();
            let col: Vec<(usize, Matrix6<f64>)> = cols[c].iter().map(|(&r, a)| (r, a * lcc_inv_t)).collect();
            for (a, (r1, l1)) in col.iter().enumerate() {
                diag[*r1] -= l1 * l1.transpose();
                for (r2, l2) in &col[..a] {
                    // r1 > r2 because the column map is ordered.
                    *cols[*r2].entry(*r1).or_insert_with(Matrix6::zeros) -= l1 * l2.transpose();
                }
            }
            cols[c] = col.into_iter().collect();
            l_diag.push(lcc);
        }

        // Forward: L y = b.
        let mut y: Vec<Vector6<f64>> = order.iter().map(|&v| self.rhs[v]).collect();
        for c in 0..n {
            let yc = l_diag[c].solve_lower_triangular(&y[c])?;
            y[c] = yc;
            for (&r, l) in &cols[c] {
                y[r] -= l * yc;
            }
        }
        // Backward: L^T x = y.
        for c in (0..n).rev() {
            let mut acc = y[c];
            for (&r, l) in &cols[c] {
                acc -= l.transpose() * y[r];
            }
            y[c] = l_diag[c].transpose().solve_upper_triangular(&acc)?;
        }

        let mut x = vec![Vector6::zeros(); n];
        for (p, &node) in order.iter().enumerate() {
            x[node] = y[p];
        }
        Some(x)
    }
}

/// Greedy minimum-degree ordering on the block adjacency graph; ties go to
/// the lowest node index.
pub fn minimum_degree_order(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> Vec<usize> {
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (i, j) in edges {
        if i != j {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    let mut alive = vec![true; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n)
            .filter(|&v| alive[v])
            .min_by_key(|&v| (adj[v].len(), v))
            .expect("alive node");
        alive[v] = false;
        let nbrs: Vec<usize> = adj[v].iter().copied().collect();
        for &a in &nbrs {
            adj[a].remove(&v);
            for &b in &nbrs {
                if a != b {
                    adj[a].insert(b);
                }
            }
        }
        adj[v].clear();
        order.push(v);
    }
    order
}

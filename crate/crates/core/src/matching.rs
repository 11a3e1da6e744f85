//! Nearest-neighbour matching with replacement.
//!
//! Distances are Euclidean in the given score columns. Equal distances are
//! broken by the lower unit index, so results are fully deterministic and
//! agree with a brute-force scan.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{DsmError, Result};

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// A k-d tree over the rows of a donor set.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    dim: usize,
    /// Donor coordinates, row-major, in tree order.
    points: Vec<f64>,
    /// Unit index of each stored point.
    ids: Vec<usize>,
    nodes: Vec<Node>,
}

/// Builds an index over `rows` of `scores`.
pub fn build_index(scores: &DMatrix<f64>, rows: &[usize]) -> Result<NeighborIndex> {
    let dim = scores.ncols();
    if dim == 0 {
        return Err(DsmError::Domain("matching needs at least one column".into()));
    }
    for &r in rows {
        if scores.row(r).iter().any(|v| !v.is_finite()) {
            return Err(DsmError::NonFinite(format!("matching scores, row {r}")));
        }
    }
    let mut order: Vec<usize> = rows.to_vec();
    let mut nodes = Vec::new();
    if !order.is_empty() {
        let len = order.len();
        build_node(scores, &mut order, 0, len, &mut nodes);
    }
    let mut points = Vec::with_capacity(order.len() * dim);
    for &r in &order {
        points.extend(scores.row(r).iter());
    }
    Ok(NeighborIndex {
        dim,
        points,
        ids: order,
        nodes,
    })
}

fn build_node(
    scores: &DMatrix<f64>,
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let here = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return here;
    }
    let slice = &mut order[start..end];
    let mut best_dim = 0;
    let mut best_spread = -1.0;
    for d in 0..scores.ncols() {
        let (lo, hi) = slice.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
            let v = scores[(r, d)];
            (lo.min(v), hi.max(v))
        });
        if hi - lo > best_spread {
            best_spread = hi - lo;
            best_dim = d;
        }
    }
    if best_spread <= 0.0 {
        nodes.push(Node::Leaf { start, end });
        return here;
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&x, &y| {
        scores[(x, best_dim)].total_cmp(&scores[(y, best_dim)])
    });
    let value = scores[(slice[mid], best_dim)];
    nodes.push(Node::Split {
        dim: best_dim,
        value,
        left: 0,
        right: 0,
    });
    let left = build_node(scores, order, start, start + mid, nodes);
    let right = build_node(scores, order, start + mid, end, nodes);
    if let Node::Split {
        left: l, right: r, ..
    } = &mut nodes[here]
    {
        *l = left;
        *r = right;
    }
    here
}

/// Running best list ordered by `(squared distance, unit index)`.
struct Best {
    m: usize,
    items: Vec<(f64, usize)>,
}

impl Best {
    fn worst(&self) -> f64 {
        if self.items.len() < self.m {
            f64::INFINITY
        } else {
            self.items[self.m - 1].0
        }
    }

    fn offer(&mut self, d2: f64, id: usize) {
        let key = (d2, id);
        let less = |a: &(f64, usize), b: &(f64, usize)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
        if self.items.len() == self.m {
            if !less(&key, &self.items[self.m - 1]) {
                return;
            }
            self.items.pop();
        }
        let pos = self.items.partition_point(|it| less(it, &key));
        self.items.insert(pos, key);
    }
}

impl NeighborIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The `m` nearest stored points to `query` as `(unit index, squared
    /// distance)`, closest first.
    pub fn nearest(&self, query: &[f64], m: usize) -> Vec<(usize, f64)> {
        debug_assert_eq!(query.len(), self.dim);
        let mut best = Best {
            m,
            items: Vec::with_capacity(m + 1),
        };
        if m > 0 && !self.nodes.is_empty() {
            self.search(0, query, &mut best);
        }
        best.items.into_iter().map(|(d, i)| (i, d)).collect()
    }

    fn search(&self, node: usize, q: &[f64], best: &mut Best) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for pos in start..end {
                    let p = &self.points[pos * self.dim..(pos + 1) * self.dim];
                    let d2 = sq_dist(q, p);
                    if d2 <= best.worst() {
                        best.offer(d2, self.ids[pos]);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if diff * diff <= best.worst() {
                    self.search(far, q, best);
                }
            }
        }
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Matches of one query arm against the opposite donor arm.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMap {
    /// Arm the donors come from.
    pub donor_arm: u8,
    pub m: usize,
    /// Query units (all units of the other arm), ascending.
    pub queries: Vec<usize>,
    /// `matches[q]` holds the `m` donors of `queries[q]`, nearest first.
    pub matches: Vec<Vec<usize>>,
    /// Times each unit is used as a donor; zero outside the donor arm.
    pub k: Vec<usize>,
}

impl MatchMap {
    pub fn n(&self) -> usize {
        self.k.len()
    }

    /// `K(i) / M` for every unit.
    pub fn k_over_m(&self) -> Vec<f64> {
        let m = self.m as f64;
        self.k.iter().map(|&k| k as f64 / m).collect()
    }
}

/// For every unit with `A = 1 - donor_arm`, finds the `m` nearest units with
/// `A = donor_arm` in `scores`.
pub fn match_group(scores: &DMatrix<f64>, a: &[u8], donor_arm: u8, m: usize) -> Result<MatchMap> {
    let n = scores.nrows();
    if a.len() != n {
        return Err(DsmError::Dimension {
            expected: n,
            got: a.len(),
        });
    }
    if m == 0 {
        return Err(DsmError::Config("M must be at least 1".into()));
    }
    let donors: Vec<usize> = (0..n).filter(|&i| a[i] == donor_arm).collect();
    let queries: Vec<usize> = (0..n).filter(|&i| a[i] != donor_arm).collect();
    if donors.len() < m {
        return Err(DsmError::Domain(format!(
            "arm {donor_arm} has {} units, fewer than M = {m}",
            donors.len()
        )));
    }
    for &q in &queries {
        if scores.row(q).iter().any(|v| !v.is_finite()) {
            return Err(DsmError::NonFinite(format!("matching scores, row {q}")));
        }
    }
    let index = build_index(scores, &donors)?;
    let dim = scores.ncols();
    let matches: Vec<Vec<usize>> = queries
        .par_iter()
        .map_init(
            || vec![0.0; dim],
            |buf, &q| {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = scores[(q, j)];
                }
                index.nearest(buf, m).into_iter().map(|(i, _)| i).collect()
            },
        )
        .collect();
    let mut k = vec![0usize; n];
    for js in &matches {
        for &j in js {
            k[j] += 1;
        }
    }
    Ok(MatchMap {
        donor_arm,
        m,
        queries,
        matches,
        k,
    })
}

//! k-nearest-neighbor graphs over cell centers and the symmetric
//! self-looped normalization used by graph convolution.

use std::io::Write;

use crate::domain::{cell_center_m, CellId, GridSpec};
use crate::error::{Error, Result};
use crate::neuralnet::{Neighborhoods, Tensor};

pub const DEFAULT_K: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    pub n: usize,
    /// Directed k-NN choices, nearest first.
    pub knn: Vec<Vec<usize>>,
    /// Symmetrized neighbor lists, ascending, no self-loops.
    pub neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    /// Builds an adjacency directly from (undirected) edges.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidArgument(format!("edge ({a}, {b}) out of range {n}")));
            }
            if a != b {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for l in &mut neighbors {
            l.sort_unstable();
            l.dedup();
        }
        Ok(Adjacency {
            n,
            knn: neighbors.clone(),
            neighbors,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Attention neighborhoods (each node plus its neighbors).
    pub fn neighborhoods(&self) -> Neighborhoods {
        Neighborhoods::with_self_loops(&self.neighbors).expect("neighbor lists are in range")
    }
}

/// Directed k-NN by Euclidean distance, symmetrized by union. Ties in
/// distance go to the neighbor with the smaller `rank` key.
pub fn knn_graph_ranked<K: Ord>(points: &[(f64, f64)], rank: &[K], k: usize) -> Result<Adjacency> {
    let n = points.len();
    if rank.len() != n {
        return Err(Error::InvalidArgument("one rank key per point required".into()));
    }
    if k == 0 || n <= k {
        return Err(Error::InvalidArgument(format!(
            "k-NN graph needs more than k = {k} nodes, got {n}"
        )));
    }
    let mut knn = Vec::with_capacity(n);
    for (i, &(xi, yi)) in points.iter().enumerate() {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let (xj, yj) = points[j];
                ((xi - xj).powi(2) + (yi - yj).powi(2), j)
            })
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| rank[a.1].cmp(&rank[b.1])));
        knn.push(others.into_iter().take(k).map(|(_, j)| j).collect::<Vec<_>>());
    }
    let mut neighbors = vec![Vec::new(); n];
    for (i, l) in knn.iter().enumerate() {
        for &j in l {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
    }
    for l in &mut neighbors {
        l.sort_unstable();
        l.dedup();
    }
    Ok(Adjacency { n, knn, neighbors })
}

/// k-NN graph over arbitrary points; ties go to the lower index.
pub fn knn_graph(points: &[(f64, f64)], k: usize) -> Result<Adjacency> {
    let rank: Vec<usize> = (0..points.len()).collect();
    knn_graph_ranked(points, &rank, k)
}

/// k-NN graph over cell centers in projected meters; ties go to the
/// lexicographically smaller (row, col).
pub fn knn_graph_cells(cells: &[CellId], grid: &GridSpec, k: usize) -> Result<Adjacency> {
    let points: Vec<(f64, f64)> = cells.iter().map(|&c| cell_center_m(c, grid)).collect();
    knn_graph_ranked(&points, cells, k)
}

/// Dense `D̊^(−1/2)(A + I)D̊^(−1/2)`.
pub fn normalize_adjacency(adj: &Adjacency) -> Tensor {
    let n = adj.n;
    let deg: Vec<f64> = (0..n).map(|i| (adj.degree(i) + 1) as f64).collect();
    let mut out = Tensor::zeros([n, n]);
    for i in 0..n {
        out.set(&[i, i], 1.0 / deg[i]);
        for &j in &adj.neighbors[i] {
            // one rounding per entry keeps the matrix exactly symmetric
            out.set(&[i, j], 1.0 / (deg[i] * deg[j]).sqrt());
        }
    }
    out
}

/// Writes `src_row,src_col,dst_row,dst_col`, one line per undirected edge.
pub fn write_edge_list<W: Write>(w: W, adj: &Adjacency, cells: &[CellId]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["src_row", "src_col", "dst_row", "dst_col"])?;
    for (i, l) in adj.neighbors.iter().enumerate() {
        for &j in l.iter().filter(|&&j| j > i) {
            let (a, b) = (cells[i], cells[j]);
            out.write_record([a.row, a.col, b.row, b.col].map(|v| v.to_string()))?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_k1_links_endpoints_to_middle() {
        let adj = knn_graph(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)], 1).unwrap();
        assert_eq!(adj.knn[0], vec![1]);
        assert_eq!(adj.knn[2], vec![1]);
        // middle is equidistant: the tie goes to index 0
        assert_eq!(adj.knn[1], vec![0]);
        assert_eq!(adj.degree(1), 2);
    }

    #[test]
    fn k_n_minus_1_is_complete() {
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, (i * i) as f64)).collect();
        let adj = knn_graph(&pts, 4).unwrap();
        assert!((0..5).all(|i| adj.degree(i) == 4));
        assert_eq!(adj.n_edges(), 10);
    }

    #[test]
    fn too_few_nodes_is_error() {
        assert!(knn_graph(&[(0.0, 0.0), (1.0, 0.0)], 2).is_err());
    }

    #[test]
    fn two_node_normalization() {
        let adj = Adjacency::from_edges(2, &[(0, 1)]).unwrap();
        assert_eq!(normalize_adjacency(&adj).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn isolated_node_has_unit_diagonal() {
        let adj = Adjacency::from_edges(3, &[(0, 1)]).unwrap();
        let a = normalize_adjacency(&adj);
        assert_eq!(a.get(&[2, 2]), 1.0);
        assert_eq!(a.get(&[2, 0]), 0.0);
        assert_eq!(a.get(&[0, 2]), 0.0);
    }

    #[test]
    fn cell_ties_break_by_row_col() {
        let grid = GridSpec::default();
        // cell (1,1) has four equidistant neighbors; k = 2 picks (0,1) then (1,0)
        let cells = [
            CellId::new(2, 1),
            CellId::new(1, 2),
            CellId::new(1, 1),
            CellId::new(1, 0),
            CellId::new(0, 1),
        ];
        let adj = knn_graph_cells(&cells, &grid, 2).unwrap();
        assert_eq!(adj.knn[2], vec![4, 3]);
    }

    #[test]
    fn edge_list_dump() {
        let cells = [CellId::new(0, 0), CellId::new(0, 1)];
        let adj = Adjacency::from_edges(2, &[(0, 1)]).unwrap();
        let mut buf = Vec::new();
        write_edge_list(&mut buf, &adj, &cells).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "src_row,src_col,dst_row,dst_col\n0,0,0,1\n");
    }
}

//! Converter network topology: buses joined by inductive lines.
//!
//! Nodes are indexed `0..n`. Every edge is stored oriented from the lower to
//! the higher index, which fixes the sign convention of the incidence matrix.

use std::collections::{HashSet, VecDeque};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_len, Error, Result};
use crate::scalar::{lit, Scalar};

/// Connected, undirected graph with a positive susceptance per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph<T: Scalar> {
    n: usize,
    edges: Vec<(usize, usize)>,
    susceptances: Vec<T>,
}

/// Spectrum of the weighted Laplacian, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct LaplacianSpectrum<T: Scalar> {
    pub eigenvalues: DVector<T>,
    /// Orthonormal eigenvectors stored column-wise, in eigenvalue order.
    pub eigenvectors: DMatrix<T>,
}

impl<T: Scalar> NetworkGraph<T> {
    /// Builds a graph from `(k, j, b_kj)` triples.
    ///
    /// Endpoints may be given in either order. Self-loops, duplicate edges,
    /// out-of-range nodes, non-positive susceptances and disconnected graphs
    /// are rejected.
    pub fn new(n: usize, lines: impl IntoIterator<Item = (usize, usize, T)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGraph("graph must have at least one node".into()));
        }
        let mut seen = HashSet::new();
        let mut edges = Vec::new();
        let mut susceptances = Vec::new();
        for (a, b, weight) in lines {
            if a >= n || b >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a}, {b}) references a node outside 0..{n}"
                )));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop at node {a}")));
            }
            let (k, j) = if a < b { (a, b) } else { (b, a) };
            if !seen.insert((k, j)) {
                return Err(Error::InvalidGraph(format!("duplicate edge ({k}, {j})")));
            }
            if !(weight > T::zero()) || !weight.is_finite() {
                return Err(Error::InvalidGraph(format!(
                    "susceptance of edge ({k}, {j}) must be finite and positive, got {weight}"
                )));
            }
            edges.push((k, j));
            susceptances.push(weight);
        }
        let graph = Self {
            n,
            edges,
            susceptances,
        };
        graph.check_connected()?;
        Ok(graph)
    }

    /// Path `0 - 1 - ... - (n-1)` with uniform susceptance.
    pub fn path(n: usize, b: T) -> Result<Self> {
        Self::new(n, (1..n).map(|k| (k - 1, k, b)))
    }

    /// Cycle over `n` nodes. For `n = 2` this degenerates to a single line,
    /// for `n = 1` to an isolated node.
    pub fn ring(n: usize, b: T) -> Result<Self> {
        if n < 3 {
            return Self::path(n, b);
        }
        Self::new(n, (0..n).map(|k| (k, (k + 1) % n, b)))
    }

    /// Complete graph with uniform susceptance.
    pub fn complete(n: usize, b: T) -> Result<Self> {
        Self::new(
            n,
            (0..n).flat_map(|k| ((k + 1)..n).map(move |j| (k, j, b))),
        )
    }

    fn check_connected(&self) -> Result<()> {
        let mut adjacency = vec![Vec::new(); self.n];
        for &(k, j) in &self.edges {
            adjacency[k].push(j);
            adjacency[j].push(k);
        }
        let mut visited = vec![false; self.n];
        let mut queue = VecDeque::from([0]);
        visited[0] = true;
        let mut reached = 1;
        while let Some(node) = queue.pop_front() {
            for &next in &adjacency[node] {
                if !visited[next] {
                    visited[next] = true;
                    reached += 1;
                    queue.push_back(next);
                }
            }
        }
        if reached == self.n {
            Ok(())
        } else {
            Err(Error::Disconnected { n: self.n, reached })
        }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Oriented edges `(k, j)` with `k < j`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn susceptances(&self) -> &[T] {
        &self.susceptances
    }

    /// Iterates `(edge_index, k, j, b_kj)`.
    pub fn lines(&self) -> impl Iterator<Item = (usize, usize, usize, T)> + '_ {
        self.edges
            .iter()
            .zip(&self.susceptances)
            .enumerate()
            .map(|(e, (&(k, j), &b))| (e, k, j, b))
    }

    /// Neighbours of `node` with the susceptance of the connecting line.
    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        self.lines().filter_map(move |(_, k, j, b)| {
            if k == node {
                Some((j, b))
            } else if j == node {
                Some((k, b))
            } else {
                None
            }
        })
    }

    /// Same topology with every susceptance replaced by `f(e, k, j, b)`.
    pub fn reweighted(&self, mut f: impl FnMut(usize, usize, usize, T) -> T) -> Result<Self> {
        let lines: Vec<_> = self.lines().map(|(e, k, j, b)| (k, j, f(e, k, j, b))).collect();
        Self::new(self.n, lines)
    }

    /// Incidence matrix `n x m`: column `e = (k, j)` is `+1` at row `k`, `-1` at row `j`.
    pub fn incidence_matrix(&self) -> DMatrix<T> {
        let mut inc = DMatrix::zeros(self.n, self.edges.len());
        for (e, &(k, j)) in self.edges.iter().enumerate() {
            inc[(k, e)] = T::one();
            inc[(j, e)] = -T::one();
        }
        inc
    }

    /// Weighted Laplacian (bus admittance matrix), stamped edge by edge.
    pub fn weighted_laplacian(&self) -> DMatrix<T> {
        let mut lap = DMatrix::zeros(self.n, self.n);
        for (_, k, j, b) in self.lines() {
            lap[(k, k)] += b;
            lap[(j, j)] += b;
            lap[(k, j)] -= b;
            lap[(j, k)] -= b;
        }
        lap
    }

    /// Edge-wise angle differences `theta_k - theta_j`, i.e. the incidence
    /// transpose applied to `theta`.
    pub fn edge_differences(&self, theta: &DVector<T>) -> DVector<T> {
        assert_eq!(theta.len(), self.n, "angle vector length");
        DVector::from_iterator(
            self.edges.len(),
            self.edges.iter().map(|&(k, j)| theta[k] - theta[j]),
        )
    }

    /// Full symmetric eigen-decomposition of the Laplacian, sorted ascending.
    pub fn laplacian_spectrum(&self) -> Result<LaplacianSpectrum<T>> {
        let lap = self.weighted_laplacian();
        let eig = SymmetricEigen::try_new(lap, T::eps(), 10_000)
            .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;
        let mut order: Vec<usize> = (0..self.n).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[a]
                .partial_cmp(&eig.eigenvalues[b])
                .expect("finite eigenvalues")
        });
        let eigenvalues = DVector::from_iterator(self.n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut eigenvectors = DMatrix::zeros(self.n, self.n);
        for (dst, &src) in order.iter().enumerate() {
            eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        Ok(LaplacianSpectrum {
            eigenvalues,
            eigenvectors,
        })
    }

    /// Laplacian eigenvalues in ascending order.
    pub fn laplacian_eigenvalues(&self) -> Result<DVector<T>> {
        self.laplacian_spectrum().map(|s| s.eigenvalues)
    }

    /// Whether every line's angle difference lies strictly inside `(-pi/2, pi/2)`.
    pub fn security_check(&self, theta: &DVector<T>) -> bool {
        self.security_violation(theta).is_none()
    }

    /// First line whose angle difference leaves the open security interval.
    pub fn security_violation(&self, theta: &DVector<T>) -> Option<(usize, usize, T)> {
        let limit = T::frac_pi_2();
        self.edges.iter().find_map(|&(k, j)| {
            let diff = theta[k] - theta[j];
            // NaN differences count as violations.
            if diff.abs() < limit {
                None
            } else {
                Some((k, j, diff))
            }
        })
    }

    pub(crate) fn check_vector(&self, name: &str, v: &DVector<T>) -> Result<()> {
        check_len(name, self.n, v.len())
    }
}

/// Named topology families with uniform susceptance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFamily {
    Path,
    Ring,
    Complete,
}

impl GraphFamily {
    pub fn build<T: Scalar>(self, n: usize, b: T) -> Result<NetworkGraph<T>> {
        match self {
            GraphFamily::Path => NetworkGraph::path(n, b),
            GraphFamily::Ring => NetworkGraph::ring(n, b),
            GraphFamily::Complete => NetworkGraph::complete(n, b),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GraphFamily::Path => "path",
            GraphFamily::Ring => "ring",
            GraphFamily::Complete => "complete",
        }
    }
}

impl std::str::FromStr for GraphFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "path" => Ok(GraphFamily::Path),
            "ring" => Ok(GraphFamily::Ring),
            "complete" => Ok(GraphFamily::Complete),
            other => Err(Error::InvalidGraph(format!(
                "unknown graph generator `{other}` (expected path, ring or complete)"
            ))),
        }
    }
}

/// Closed-form Laplacian eigenvalues of a unit-weight path, `2 - 2 cos(k pi / n)`.
pub fn path_eigenvalues<T: Scalar>(n: usize, b: T) -> Vec<T> {
    (0..n)
        .map(|k| {
            let arg = T::pi() * lit::<T>(k as f64) / lit::<T>(n as f64);
            b * (lit::<T>(2.0) - lit::<T>(2.0) * arg.cos())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    #[test]
    fn incidence_of_single_edge() {
        let g = NetworkGraph::path(2, 1.0).unwrap();
        assert_eq!(g.incidence_matrix(), dmatrix![1.0; -1.0]);
    }

    #[test]
    fn incidence_of_path() {
        let g = NetworkGraph::path(3, 1.0).unwrap();
        assert_eq!(
            g.incidence_matrix(),
            dmatrix![1.0, 0.0; -1.0, 1.0; 0.0, -1.0]
        );
    }

    #[test]
    fn reversed_endpoints_are_normalized() {
        let g = NetworkGraph::new(2, [(1, 0, 2.0)]).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
        assert_eq!(g.incidence_matrix(), dmatrix![1.0; -1.0]);
    }

    #[test]
    fn laplacian_examples() {
        let two = NetworkGraph::path(2, 1.0).unwrap();
        assert_eq!(two.weighted_laplacian(), dmatrix![1.0, -1.0; -1.0, 1.0]);
        let tri = NetworkGraph::complete(3, 1.0).unwrap();
        assert_eq!(
            tri.weighted_laplacian(),
            dmatrix![2.0, -1.0, -1.0; -1.0, 2.0, -1.0; -1.0, -1.0, 2.0]
        );
        assert_eq!(tri.weighted_laplacian(), NetworkGraph::ring(3, 1.0).unwrap().weighted_laplacian());
        let path = NetworkGraph::path(3, 1.0).unwrap();
        assert_eq!(
            path.weighted_laplacian(),
            dmatrix![1.0, -1.0, 0.0; -1.0, 2.0, -1.0; 0.0, -1.0, 1.0]
        );
    }

    #[test]
    fn eigenvalue_examples() {
        let cases: [(NetworkGraph<f64>, [f64; 3]); 2] = [
            (NetworkGraph::path(3, 1.0).unwrap(), [0.0, 1.0, 3.0]),
            (NetworkGraph::ring(3, 1.0).unwrap(), [0.0, 3.0, 3.0]),
        ];
        for (g, expected) in cases {
            let ev = g.laplacian_eigenvalues().unwrap();
            for (a, b) in ev.iter().zip(expected) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
            }
        }
        let ev = NetworkGraph::path(2, 1.0).unwrap().laplacian_eigenvalues().unwrap();
        assert_abs_diff_eq!(ev[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ev[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn path_spectrum_matches_closed_form() {
        for n in [2, 5, 17] {
            let ev = NetworkGraph::path(n, 1.0).unwrap().laplacian_eigenvalues().unwrap();
            for (a, b) in ev.iter().zip(path_eigenvalues(n, 1.0)) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-11);
            }
        }
    }

    #[test]
    fn single_precision_spectrum() {
        let ev = NetworkGraph::<f32>::path(3, 1.0).unwrap().laplacian_eigenvalues().unwrap();
        assert_abs_diff_eq!(ev[0], 0.0, epsilon = 1e-5);
        assert_abs_diff_eq!(ev[1], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(ev[2], 3.0, epsilon = 1e-5);
    }

    #[test]
    fn security_examples() {
        use std::f64::consts::FRAC_PI_2;
        let tri = NetworkGraph::ring(3, 1.0).unwrap();
        assert!(tri.security_check(&DVector::zeros(3)));
        assert!(tri.security_check(&DVector::from_vec(vec![0.951, 0.92, 0.967])));
        let two = NetworkGraph::path(2, 1.0).unwrap();
        assert!(!two.security_check(&DVector::from_vec(vec![FRAC_PI_2, 0.0])));
        assert!(!two.security_check(&DVector::from_vec(vec![f64::NAN, 0.0])));
    }

    #[test]
    fn rejects_malformed_graphs() {
        assert!(matches!(
            NetworkGraph::new(3, [(0, 1, 1.0)]),
            Err(Error::Disconnected { n: 3, reached: 2 })
        ));
        assert!(NetworkGraph::new(2, [(0, 0, 1.0)]).is_err());
        assert!(NetworkGraph::new(2, [(0, 1, 1.0), (1, 0, 1.0)]).is_err());
        assert!(NetworkGraph::new(2, [(0, 1, 0.0)]).is_err());
        assert!(NetworkGraph::new(2, [(0, 1, -1.0)]).is_err());
        assert!(NetworkGraph::new(2, [(0, 2, 1.0)]).is_err());
        assert!(NetworkGraph::<f64>::new(0, []).is_err());
        assert!(NetworkGraph::<f64>::new(1, []).is_ok());
    }

    #[test]
    fn family_parsing() {
        assert_eq!("ring".parse::<GraphFamily>().unwrap(), GraphFamily::Ring);
        assert!("star".parse::<GraphFamily>().is_err());
    }
}

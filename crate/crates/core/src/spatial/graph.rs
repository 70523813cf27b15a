use std::collections::{BTreeSet, HashMap};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Symmetric tract adjacency with no self-loops and no isolated tracts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyGraph {
    names: Vec<String>,
    neighbors: Vec<Vec<usize>>,
}

/// Non-fatal problems found while building a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraphWarning {
    /// `from` listed `to` as a neighbour but not the other way round.
    Symmetrized { from: String, to: String },
}

impl std::fmt::Display for GraphWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GraphWarning::Symmetrized { from, to } => {
                write!(
                    f,
                    "{from} lists {to} as a neighbour but not vice versa; edge symmetrized"
                )
            }
        }
    }
}

/// Adjacency input: undirected edges, or per-tract neighbour lists.
#[derive(Debug, Clone, Copy)]
pub enum GraphInput<'a> {
    Edges(&'a [(String, String)]),
    NeighborLists(&'a [(String, Vec<String>)]),
}

/// Builds the adjacency graph over `registry` (tract order is kept).
pub fn build_graph(registry: &[String], input: GraphInput<'_>) -> Result<(AdjacencyGraph, Vec<GraphWarning>)> {
    let index: HashMap<&str, usize> = registry.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    if index.len() != registry.len() {
        return Err(Error::Graph("tract registry has duplicate ids".into()));
    }
    let lookup = |id: &str| -> Result<usize> {
        index
            .get(id)
            .copied()
            .ok_or_else(|| Error::Graph(format!("unknown tract id '{id}'")))
    };
    let mut warnings = Vec::new();
    let mut edges = Vec::new();
    match input {
        GraphInput::Edges(list) => {
            for (a, b) in list {
                edges.push((lookup(a)?, lookup(b)?));
            }
        }
        GraphInput::NeighborLists(lists) => {
            let mut directed = BTreeSet::new();
            for (a, nbrs) in lists {
                let i = lookup(a)?;
                for b in nbrs {
                    directed.insert((i, lookup(b)?));
                }
            }
            for &(i, j) in &directed {
                if i != j && !directed.contains(&(j, i)) {
                    warnings.push(GraphWarning::Symmetrized {
                        from: registry[i].clone(),
                        to: registry[j].clone(),
                    });
                }
                edges.push((i, j));
            }
        }
    }
    let g = AdjacencyGraph::from_index_edges(registry.to_vec(), &edges)?;
    Ok((g, warnings))
}

impl AdjacencyGraph {
    /// Builds from index pairs; duplicates and reversed pairs collapse to one edge.
    pub fn from_index_edges(names: Vec<String>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = names.len();
        let mut sets = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Graph(format!("edge ({a}, {b}) out of range for {n} tracts")));
            }
            if a == b {
                return Err(Error::Graph(format!("self-loop on tract '{}'", names[a])));
            }
            sets[a].insert(b);
            sets[b].insert(a);
        }
        let isolated: Vec<&str> = (0..n)
            .filter(|&i| sets[i].is_empty())
            .map(|i| names[i].as_str())
            .collect();
        if !isolated.is_empty() {
            return Err(Error::Graph(format!(
                "{} isolated tract(s) without neighbours: {}",
                isolated.len(),
                preview(&isolated)
            )));
        }
        Ok(Self {
            names,
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    /// Rook-adjacency lattice with `rows * cols` cells named `r{row}c{col}`.
    pub fn grid(rows: usize, cols: usize) -> Result<Self> {
        let names = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| format!("r{r}c{c}")))
            .collect();
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    edges.push((i, i + 1));
                }
                if r + 1 < rows {
                    edges.push((i, i + cols));
                }
            }
        }
        Self::from_index_edges(names, &edges)
    }

    /// Number of tracts `C`.
    pub fn n(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn neighbors(&self, j: usize) -> &[usize] {
        &self.neighbors[j]
    }

    pub fn neighbor_lists(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn degree(&self, j: usize) -> usize {
        self.neighbors[j].len()
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e = Vec::with_capacity(self.n_edges());
        for (a, nb) in self.neighbors.iter().enumerate() {
            for &b in nb {
                if a < b {
                    e.push((a, b));
                }
            }
        }
        e
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.n();
        let mut label = vec![usize::MAX; n];
        let mut comps = Vec::new();
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut stack = vec![start];
            let mut members = Vec::new();
            label[start] = id;
            while let Some(v) = stack.pop() {
                members.push(v);
                for &w in &self.neighbors[v] {
                    if label[w] == usize::MAX {
                        label[w] = id;
                        stack.push(w);
                    }
                }
            }
            members.sort_unstable();
            comps.push(members);
        }
        comps
    }

    /// Errors with the component listing unless the graph is connected.
    pub fn require_connected(&self) -> Result<()> {
        let comps = self.components();
        if comps.len() <= 1 {
            return Ok(());
        }
        let desc: Vec<String> = comps
            .iter()
            .map(|c| {
                let names: Vec<&str> = c.iter().map(|&i| self.names[i].as_str()).collect();
                format!("[{}]", preview(&names))
            })
            .collect();
        Err(Error::Graph(format!(
            "graph is disconnected into {} components: {}",
            comps.len(),
            desc.join(", ")
        )))
    }

    /// `out = L x` for the graph Laplacian `L = D - W`.
    pub fn laplacian_mul(&self, x: &[f64], out: &mut [f64]) {
        for (j, nb) in self.neighbors.iter().enumerate() {
            let s: f64 = nb.iter().map(|&k| x[k]).sum();
            out[j] = nb.len() as f64 * x[j] - s;
        }
    }

    /// `x' L x = sum over edges of (x_a - x_b)^2`.
    pub fn laplacian_quad(&self, x: &[f64]) -> f64 {
        let mut q = 0.0;
        for (a, nb) in self.neighbors.iter().enumerate() {
            for &b in nb {
                if a < b {
                    let d = x[a] - x[b];
                    q += d * d;
                }
            }
        }
        q
    }

    pub fn laplacian_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut l = DMatrix::zeros(n, n);
        for (j, nb) in self.neighbors.iter().enumerate() {
            l[(j, j)] = nb.len() as f64;
            for &k in nb {
                l[(j, k)] = -1.0;
            }
        }
        l
    }

    pub fn adjacency_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut w = DMatrix::zeros(n, n);
        for (j, nb) in self.neighbors.iter().enumerate() {
            for &k in nb {
                w[(j, k)] = 1.0;
            }
        }
        w
    }
}

fn preview(names: &[&str]) -> String {
    const MAX: usize = 8;
    if names.len() <= MAX {
        names.join(", ")
    } else {
        format!("{}, ... ({} more)", names[..MAX].join(", "), names.len() - MAX)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn single_edge() {
        let (g, w) = build_graph(&ids(&["A", "B"]), GraphInput::Edges(&pairs(&[("A", "B")]))).unwrap();
        assert!(w.is_empty());
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0]);
        assert_eq!((g.degree(0), g.degree(1)), (1, 1));
    }

    #[test]
    fn duplicate_edges_collapse() {
        let (g, _) = build_graph(
            &ids(&["A", "B"]),
            GraphInput::Edges(&pairs(&[("A", "B"), ("B", "A"), ("A", "B")])),
        )
        .unwrap();
        assert_eq!(g.n_edges(), 1);
        assert_eq!(g.edges(), vec![(0, 1)]);
    }

    #[test]
    fn self_loop_unknown_and_isolated_are_errors() {
        let reg = ids(&["A", "B", "C"]);
        let err = build_graph(&reg, GraphInput::Edges(&pairs(&[("A", "A")]))).unwrap_err();
        assert!(err.to_string().contains("self-loop"), "{err}");
        let err = build_graph(&reg, GraphInput::Edges(&pairs(&[("A", "Z")]))).unwrap_err();
        assert!(err.to_string().contains("unknown tract id 'Z'"), "{err}");
        let err = build_graph(&reg, GraphInput::Edges(&pairs(&[("A", "B")]))).unwrap_err();
        assert!(
            err.to_string().contains("isolated") && err.to_string().contains('C'),
            "{err}"
        );
    }

    #[test]
    fn asymmetric_lists_are_symmetrized_with_warning() {
        let reg = ids(&["A", "B", "C"]);
        let lists = vec![("A".to_string(), ids(&["B"])), ("B".to_string(), ids(&["A", "C"]))];
        let (g, w) = build_graph(&reg, GraphInput::NeighborLists(&lists)).unwrap();
        assert_eq!(g.neighbors(2), &[1]);
        assert_eq!(
            w,
            vec![GraphWarning::Symmetrized {
                from: "B".into(),
                to: "C".into()
            }]
        );
    }

    #[test]
    fn components_and_laplacian() {
        let names = ids(&["a", "b", "c", "d"]);
        let g = AdjacencyGraph::from_index_edges(names, &[(0, 1), (2, 3)]).unwrap();
        assert_eq!(g.components(), vec![vec![0, 1], vec![2, 3]]);
        let err = g.require_connected().unwrap_err();
        assert!(err.to_string().contains("[a, b], [c, d]"), "{err}");

        let grid = AdjacencyGraph::grid(3, 4).unwrap();
        assert_eq!(grid.n_edges(), 3 * 3 + 2 * 4);
        grid.require_connected().unwrap();
        let x: Vec<f64> = (0..12).map(|i| (i * i) as f64 * 0.1).collect();
        let mut lx = vec![0.0; 12];
        grid.laplacian_mul(&x, &mut lx);
        let dense = grid.laplacian_dense() * nalgebra::DVector::from_vec(x.clone());
        for i in 0..12 {
            assert!((lx[i] - dense[i]).abs() < 1e-12);
        }
        let q: f64 = x.iter().zip(&lx).map(|(a, b)| a * b).sum();
        assert!((grid.laplacian_quad(&x) - q).abs() < 1e-9);
    }
}

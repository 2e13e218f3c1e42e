//! Per-batch 1-nearest-neighbor graphs over image embeddings.
//!
//! Each row of a batch picks its single nearest neighbor under cosine
//! similarity (self excluded, ties to the lowest index); the union of those
//! choices is a sparse symmetric edge set. Connected components are labeled
//! with union-find (path compression + union by size) and drive the
//! positive/negative index sets consumed by the contrastive losses.
//!
//! Construction is discrete: no gradient flows through edge selection.

use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numcore::{dot, row_norms, Matrix};

/// Symmetric 1-NN adjacency plus a component labeling that partitions the
/// batch. Immutable once built; safe to share across threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    num_nodes: usize,
    /// Unordered pairs stored as `(i, j)` with `i < j`, sorted and deduped.
    edges: Vec<(usize, usize)>,
    /// Component label per node, in `[0, num_components)`. Labels are
    /// assigned in order of each component's smallest member.
    component_of: Vec<usize>,
    /// Label -> sorted member indices. Disjoint, covering all nodes.
    components: Vec<Vec<usize>>,
}

impl NeighborGraph {
    /// Assembles a graph from an explicit component partition, bypassing the
    /// 1-NN construction. Used to inject degenerate structures (for example
    /// all-singleton components) into the losses; `edges` is left empty.
    pub fn from_components(num_nodes: usize, components: Vec<Vec<usize>>) -> Result<Self> {
        let mut component_of = vec![usize::MAX; num_nodes];
        for (label, members) in components.iter().enumerate() {
            for &node in members {
                if node >= num_nodes {
                    return Err(Error::IndexOutOfRange {
                        index: node,
                        len: num_nodes,
                    });
                }
                if component_of[node] != usize::MAX {
                    return Err(Error::InvalidSpec(format!(
                        "node {node} appears in more than one component"
                    )));
                }
                component_of[node] = label;
            }
        }
        if component_of.iter().any(|&l| l == usize::MAX) {
            return Err(Error::InvalidSpec(
                "components do not cover all nodes".into(),
            ));
        }
        let mut components = components;
        for members in &mut components {
            members.sort_unstable();
        }
        Ok(NeighborGraph {
            num_nodes,
            edges: Vec::new(),
            component_of,
            components,
        })
    }

    /// Every node in its own component.
    pub fn singletons(num_nodes: usize) -> Self {
        NeighborGraph {
            num_nodes,
            edges: Vec::new(),
            component_of: (0..num_nodes).collect(),
            components: (0..num_nodes).map(|i| vec![i]).collect(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn component_of(&self) -> &[usize] {
        &self.component_of
    }

    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    /// All nodes outside the anchor's component (never the anchor itself).
    pub fn negatives_for(&self, anchor: usize) -> Result<Vec<usize>> {
        let label = self.label_of(anchor)?;
        Ok((0..self.num_nodes)
            .filter(|&j| self.component_of[j] != label)
            .collect())
    }

    /// The anchor's full component, anchor included.
    pub fn positives_for(&self, anchor: usize) -> Result<Vec<usize>> {
        let label = self.label_of(anchor)?;
        Ok(self.components[label].clone())
    }

    fn label_of(&self, anchor: usize) -> Result<usize> {
        if anchor >= self.num_nodes {
            return Err(Error::IndexOutOfRange {
                index: anchor,
                len: self.num_nodes,
            });
        }
        Ok(self.component_of[anchor])
    }
}

// Wire shape used by `probe-graph`:
// {"num_nodes": M, "edges": [[i,j],...], "components": [[...],...]}
impl Serialize for NeighborGraph {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("NeighborGraph", 3)?;
        s.serialize_field("num_nodes", &self.num_nodes)?;
        let edges: Vec<[usize; 2]> = self.edges.iter().map(|&(i, j)| [i, j]).collect();
        s.serialize_field("edges", &edges)?;
        s.serialize_field("components", &self.components)?;
        s.end()
    }
}

/// Builds the symmetric 1-NN graph over the rows of an `M x D` embedding
/// batch and labels its connected components.
///
/// Node `i` selects `argmax_{k != i} cos(row_i, row_k)` (cosine is the
/// negative distance), ties broken toward the lowest index; edge `{i, j}`
/// exists if either endpoint selected the other.
pub fn build_knn_graph(image_embeddings: &Matrix) -> Result<NeighborGraph> {
    let m = image_embeddings.rows();
    if m < 2 {
        return Err(Error::BatchTooSmall { got: m });
    }
    let norms = row_norms(image_embeddings)?;

    let mut edges: Vec<(usize, usize)> = Vec::with_capacity(m);
    let mut uf = UnionFind::new(m);
    for i in 0..m {
        let mut best = usize::MAX;
        let mut best_sim = f64::NEG_INFINITY;
        for k in 0..m {
            if k == i {
                continue;
            }
            let sim = dot(image_embeddings.row(i), image_embeddings.row(k)) / (norms[i] * norms[k]);
            if sim > best_sim {
                best_sim = sim;
                best = k;
            }
        }
        let (a, b) = if i < best { (i, best) } else { (best, i) };
        edges.push((a, b));
        uf.union(a, b);
    }
    edges.sort_unstable();
    edges.dedup();

    let (component_of, components) = uf.into_labels();
    Ok(NeighborGraph {
        num_nodes: m,
        edges,
        component_of,
        components,
    })
}

/// Disjoint-set forest with path compression and union by size; the labeling
/// it produces is the classic union-find component labeling.
#[derive(Debug, Clone)]
pub(crate) struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub(crate) fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]]; // path halving
            i = self.parent[i];
        }
        i
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra == rb {
            return;
        }
        let (big, small) = if self.size[ra] >= self.size[rb] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[small] = big;
        self.size[big] += self.size[small];
    }

    /// Collapses roots into dense labels ordered by smallest member index.
    fn into_labels(mut self) -> (Vec<usize>, Vec<Vec<usize>>) {
        let n = self.parent.len();
        let mut label_of_root = vec![usize::MAX; n];
        let mut component_of = vec![0; n];
        let mut components: Vec<Vec<usize>> = Vec::new();
        for node in 0..n {
            let root = self.find(node);
            let label = if label_of_root[root] == usize::MAX {
                let label = components.len();
                label_of_root[root] = label;
                components.push(Vec::new());
                label
            } else {
                label_of_root[root]
            };
            component_of[node] = label;
            components[label].push(node);
        }
        (component_of, components)
    }
}

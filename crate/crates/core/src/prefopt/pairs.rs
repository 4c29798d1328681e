use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::PrefOptError;
use crate::backends::RelationBackend;
use crate::chaingen::CoVqdChain;

/// Directed acyclic "sub-question i precedes j" relation over 1-based
/// sub-question positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph")]
pub struct ImplicationGraph {
    node_count: usize,
    edges: BTreeSet<(usize, usize)>,
}

#[derive(Deserialize)]
struct RawGraph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
}

impl TryFrom<RawGraph> for ImplicationGraph {
    type Error = PrefOptError;
    fn try_from(r: RawGraph) -> Result<Self, Self::Error> {
        ImplicationGraph::new(r.node_count, r.edges)
    }
}

impl ImplicationGraph {
    pub fn new(node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, PrefOptError> {
        let edges: BTreeSet<_> = edges.into_iter().collect();
        for &(i, j) in &edges {
            if i == 0 || j == 0 || i > node_count || j > node_count {
                return Err(PrefOptError::EdgeRange(i, j, node_count));
            }
            if i == j {
                return Err(PrefOptError::SelfLoop(i));
            }
        }
        let g = Self { node_count, edges };
        if let Some((from, to)) = g.find_back_edge() {
            return Err(PrefOptError::Cycle { from, to });
        }
        Ok(g)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    fn successors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.range((node, 0)..(node + 1, 0)).map(|&(_, j)| j)
    }

    // Depth-first search; any edge into a node still on the stack lies on a cycle.
    fn find_back_edge(&self) -> Option<(usize, usize)> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Open,
            Done,
        }
        let mut mark = vec![Mark::New; self.node_count + 1];
        for root in 1..=self.node_count {
            if mark[root] != Mark::New {
                continue;
            }
            let mut stack: Vec<(usize, Vec<usize>)> = vec![(root, self.successors(root).collect())];
            mark[root] = Mark::Open;
            while let Some((node, pending)) = stack.last_mut() {
                let node = *node;
                match pending.pop() {
                    Some(next) => match mark[next] {
                        Mark::Open => return Some((node, next)),
                        Mark::New => {
                            mark[next] = Mark::Open;
                            stack.push((next, self.successors(next).collect()));
                        }
                        Mark::Done => {}
                    },
                    None => {
                        mark[node] = Mark::Done;
                        stack.pop();
                    }
                }
            }
        }
        None
    }

    /// Topological order that keeps nodes in ascending position whenever the
    /// edges allow it.
    pub fn stable_topological_order(&self) -> Vec<usize> {
        let mut indegree = vec![0usize; self.node_count + 1];
        for &(_, j) in &self.edges {
            indegree[j] += 1;
        }
        let mut ready: BTreeSet<usize> = (1..=self.node_count).filter(|&n| indegree[n] == 0).collect();
        let mut order = Vec::with_capacity(self.node_count);
        while let Some(n) = ready.pop_first() {
            order.push(n);
            for j in self.successors(n) {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.insert(j);
                }
            }
        }
        order
    }

    fn check_permutation(&self, order: &[usize]) -> Result<(), PrefOptError> {
        let mut seen = vec![false; self.node_count + 1];
        let ok = order.len() == self.node_count
            && order.iter().all(|&v| {
                let fresh = (1..=self.node_count).contains(&v) && !seen[v];
                if fresh {
                    seen[v] = true;
                }
                fresh
            });
        if ok {
            Ok(())
        } else {
            Err(PrefOptError::NotPermutation(order.to_vec(), self.node_count))
        }
    }

    /// First edge `from -> to` with `to` placed before `from` in `order`.
    pub fn first_violation(&self, order: &[usize]) -> Option<(usize, usize)> {
        let mut pos = vec![0usize; self.node_count + 1];
        for (p, &v) in order.iter().enumerate() {
            pos[v] = p;
        }
        self.edges.iter().copied().find(|&(i, j)| pos[i] > pos[j])
    }
}

/// Preferred and rejected orderings of the same sub-questions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub context_id: String,
    #[serde(rename = "preferred")]
    pub preferred_order: Vec<usize>,
    #[serde(rename = "rejected")]
    pub rejected_order: Vec<usize>,
}

/// One pair per adjacent transposition of `base_order` that breaks an
/// implication. `base_order` itself must respect every edge.
pub fn build_preference_pairs(
    graph: &ImplicationGraph,
    base_order: &[usize],
    context_id: &str,
) -> Result<Vec<PreferencePair>, PrefOptError> {
    graph.check_permutation(base_order)?;
    if let Some((from, to)) = graph.first_violation(base_order) {
        return Err(PrefOptError::OrderViolatesEdge { from, to });
    }
    // Swapping neighbours only flips their relative order, so the swap breaks
    // an implication exactly when the earlier one implies the later one.
    Ok(base_order
        .windows(2)
        .enumerate()
        .filter(|(_, w)| graph.has_edge(w[0], w[1]))
        .map(|(p, _)| {
            let mut rejected = base_order.to_vec();
            rejected.swap(p, p + 1);
            PreferencePair {
                context_id: context_id.to_string(),
                preferred_order: base_order.to_vec(),
                rejected_order: rejected,
            }
        })
        .collect())
}

/// Queries the relation backend for every pair `i < j` of sub-questions.
pub fn assemble_implication_graph(
    chain: &CoVqdChain,
    relation: &dyn RelationBackend,
) -> Result<ImplicationGraph, PrefOptError> {
    let qas = chain.sub_qas();
    let image = Some(chain.source().image_ref.as_str());
    let mut edges = Vec::new();
    for i in 0..qas.len() {
        for j in i + 1..qas.len() {
            let label = relation.predict_relation(&qas[i].sub_question, &qas[j].sub_question, image)?;
            edges.extend(label.edge(i + 1, j + 1));
        }
    }
    ImplicationGraph::new(qas.len(), edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{MockRelation, RelationLabel};
    use crate::chaingen::{parse_chain, VqaSample};

    #[test]
    fn two_nodes_one_edge() {
        let g = ImplicationGraph::new(2, [(1, 2)]).unwrap();
        let pairs = build_preference_pairs(&g, &[1, 2], "ctx").unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].preferred_order, [1, 2]);
        assert_eq!(pairs[0].rejected_order, [2, 1]);
    }

    #[test]
    fn no_edges_no_pairs() {
        let g = ImplicationGraph::new(3, []).unwrap();
        assert!(build_preference_pairs(&g, &[1, 2, 3], "c").unwrap().is_empty());
    }

    #[test]
    fn fan_out_only_first_swap_violates() {
        let g = ImplicationGraph::new(3, [(1, 2), (1, 3)]).unwrap();
        let pairs = build_preference_pairs(&g, &[1, 2, 3], "c").unwrap();
        let rejected: Vec<_> = pairs.iter().map(|p| p.rejected_order.clone()).collect();
        assert_eq!(rejected, vec![vec![2, 1, 3]]);
    }

    #[test]
    fn cycles_rejected_with_edge() {
        let err = ImplicationGraph::new(2, [(1, 2), (2, 1)]).unwrap_err();
        assert!(matches!(err, PrefOptError::Cycle { .. }));
        let err = ImplicationGraph::new(3, [(1, 2), (2, 3), (3, 1)]).unwrap_err();
        let PrefOptError::Cycle { from, to } = err else { panic!() };
        assert!([(1, 2), (2, 3), (3, 1)].contains(&(from, to)));
        assert!(matches!(ImplicationGraph::new(2, [(1, 1)]), Err(PrefOptError::SelfLoop(1))));
        assert!(matches!(ImplicationGraph::new(2, [(1, 3)]), Err(PrefOptError::EdgeRange(..))));
    }

    #[test]
    fn base_order_must_be_topological_permutation() {
        let g = ImplicationGraph::new(3, [(2, 1)]).unwrap();
        assert!(matches!(
            build_preference_pairs(&g, &[1, 2, 3], "c"),
            Err(PrefOptError::OrderViolatesEdge { from: 2, to: 1 })
        ));
        assert!(matches!(
            build_preference_pairs(&g, &[2, 2, 3], "c"),
            Err(PrefOptError::NotPermutation(..))
        ));
        assert_eq!(g.stable_topological_order(), [2, 1, 3]);
    }

    #[test]
    fn graph_from_relation_backend() {
        let sample = VqaSample::new("s", "Who built this tower?", "img").unwrap();
        let chain = parse_chain("Q: what style?\nQ: which country?\nQ: who?", &sample).unwrap();
        let rel = MockRelation::new()
            .with_rule("what style?", "which country?", RelationLabel::Implies)
            .with_rule("what style?", "who?", RelationLabel::ImpliedBy);
        let g = assemble_implication_graph(&chain, &rel).unwrap();
        let edges: Vec<_> = g.edges().collect();
        assert_eq!(edges, [(1, 2), (3, 1)]);
    }

    #[test]
    fn serializes_with_short_field_names() {
        let p = PreferencePair {
            context_id: "c".into(),
            preferred_order: vec![1, 2],
            rejected_order: vec![2, 1],
        };
        assert_eq!(
            serde_json::to_string(&p).unwrap(),
            r#"{"context_id":"c","preferred":[1,2],"rejected":[2,1]}"#
        );
    }
}

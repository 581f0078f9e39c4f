//! Directed control tree paired with the resource tree it governs.
//!
//! Every control node owns exactly one resource vertex (its set of slots).
//! Edges in the resource tree are subset relations: a child's slots are
//! always contained in its parent's. Requirement information flows the
//! other way, from the leaves up to the root, via [`ControlTree::aggregate`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::SlotRef;
use crate::col::ColAttributes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControlKind {
    ResourceManager,
    ProcessManager,
    Application,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlNode {
    pub id: NodeId,
    pub kind: ControlKind,
    pub parent: Option<NodeId>,
    pub label: String,
    pub resources: BTreeSet<SlotRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("unknown control node {0:?}")]
    UnknownNode(NodeId),
    #[error("control graph is not a tree: {0}")]
    NotATree(String),
    #[error("resources of {child:?} are not a subset of its parent {parent:?}")]
    SubsetViolation { child: NodeId, parent: NodeId },
    #[error("control-to-resource mapping is not bijective")]
    NotBijective,
}

/// Vertex of the resource tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceVertex {
    pub id: usize,
    pub slots: BTreeSet<SlotRef>,
    pub parent: Option<usize>,
}

/// Aggregated requirement information for a subtree.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementSummary {
    pub requests: usize,
    pub num_delta: u64,
    pub min_delta: Option<u32>,
    pub priorities: BTreeMap<i64, usize>,
}

impl RequirementSummary {
    fn absorb_request(&mut self, attrs: &ColAttributes) {
        self.requests += 1;
        self.num_delta += u64::from(attrs.num_delta);
        let lo = attrs.grant_bounds().0;
        self.min_delta = Some(self.min_delta.map_or(lo, |m| m.min(lo)));
        *self.priorities.entry(attrs.priority).or_default() += 1;
    }

    fn merge(&mut self, other: &RequirementSummary) {
        self.requests += other.requests;
        self.num_delta += other.num_delta;
        self.min_delta = match (self.min_delta, other.min_delta) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        for (&p, &n) in &other.priorities {
            *self.priorities.entry(p).or_default() += n;
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ControlTree {
    nodes: Vec<ControlNode>,
    /// control node index -> resource vertex index
    resource_of: Vec<usize>,
}

impl ControlTree {
    pub fn new(root_label: impl Into<String>, resources: BTreeSet<SlotRef>) -> Self {
        ControlTree {
            nodes: vec![ControlNode {
                id: NodeId(0),
                kind: ControlKind::ResourceManager,
                parent: None,
                label: root_label.into(),
                resources,
            }],
            resource_of: vec![0],
        }
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    /// Attach a child. The subset relation is checked by [`validate`](Self::validate),
    /// not here, so that broken trees can be represented and reported.
    pub fn add_child(
        &mut self,
        parent: NodeId,
        kind: ControlKind,
        label: impl Into<String>,
        resources: BTreeSet<SlotRef>,
    ) -> Result<NodeId, TreeError> {
        self.node(parent)?;
        let id = NodeId(self.nodes.len());
        self.nodes.push(ControlNode {
            id,
            kind,
            parent: Some(parent),
            label: label.into(),
            resources,
        });
        self.resource_of.push(self.resource_of.len());
        Ok(id)
    }

    pub fn node(&self, id: NodeId) -> Result<&ControlNode, TreeError> {
        self.nodes.get(id.0).ok_or(TreeError::UnknownNode(id))
    }

    pub fn nodes(&self) -> &[ControlNode] {
        &self.nodes
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = &ControlNode> {
        self.nodes.iter().filter(move |n| n.parent == Some(id))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The resource tree mirrored by this control tree.
    pub fn resource_tree(&self) -> Vec<ResourceVertex> {
        let mut out: Vec<ResourceVertex> = self
            .nodes
            .iter()
            .map(|n| ResourceVertex {
                id: self.resource_of[n.id.0],
                slots: n.resources.clone(),
                parent: n.parent.map(|p| self.resource_of[p.0]),
            })
            .collect();
        out.sort_by_key(|v| v.id);
        out
    }

    /// Tree shape, subset edges and the control/resource bijection.
    pub fn validate(&self) -> Result<(), TreeError> {
        let roots = self.nodes.iter().filter(|n| n.parent.is_none()).count();
        if roots != 1 {
            return Err(TreeError::NotATree(format!("{roots} roots")));
        }
        for n in &self.nodes {
            // walk to the root; more than len steps means a cycle
            let mut cur = n.parent;
            let mut steps = 0;
            while let Some(p) = cur {
                steps += 1;
                if steps > self.nodes.len() {
                    return Err(TreeError::NotATree(format!("cycle through {:?}", n.id)));
                }
                cur = self.node(p)?.parent;
            }
            if let Some(p) = n.parent {
                let parent = self.node(p)?;
                if !n.resources.is_subset(&parent.resources) {
                    return Err(TreeError::SubsetViolation {
                        child: n.id,
                        parent: p,
                    });
                }
            }
        }
        let image: BTreeSet<usize> = self.resource_of.iter().copied().collect();
        if image.len() != self.nodes.len() || image.iter().any(|&v| v >= self.nodes.len()) {
            return Err(TreeError::NotBijective);
        }
        Ok(())
    }

    /// Bottom-up fold of requirement summaries. `pending` holds the requests
    /// local to each node.
    pub fn aggregate(
        &self,
        node: NodeId,
        pending: &BTreeMap<NodeId, Vec<ColAttributes>>,
    ) -> Result<RequirementSummary, TreeError> {
        self.node(node)?;
        let mut summary = RequirementSummary::default();
        for attrs in pending.get(&node).into_iter().flatten() {
            summary.absorb_request(attrs);
        }
        for child in self.children(node) {
            summary.merge(&self.aggregate(child.id, pending)?);
        }
        Ok(summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slots(v: &[u32]) -> BTreeSet<SlotRef> {
        v.iter().map(|&s| SlotRef { node: 0, slot: s }).collect()
    }

    fn grow(n: u32) -> ColAttributes {
        ColAttributes {
            num_delta: n,
            ..Default::default()
        }
    }

    #[test]
    fn leaf_and_parent_aggregation() {
        let mut t = ControlTree::new("rm", slots(&[0, 1, 2, 3]));
        let pm = t
            .add_child(
                t.root(),
                ControlKind::ProcessManager,
                "pm",
                slots(&[0, 1, 2, 3]),
            )
            .unwrap();
        let a = t
            .add_child(pm, ControlKind::Application, "a", slots(&[0, 1]))
            .unwrap();
        let b = t
            .add_child(pm, ControlKind::Application, "b", slots(&[2, 3]))
            .unwrap();
        let pending = BTreeMap::from([(a, vec![grow(2)]), (b, vec![grow(2)])]);
        assert_eq!(t.aggregate(a, &pending).unwrap().num_delta, 2);
        let s = t.aggregate(pm, &pending).unwrap();
        assert_eq!((s.num_delta, s.requests, s.min_delta), (4, 2, Some(2)));
        assert_eq!(t.aggregate(t.root(), &pending).unwrap(), s);
        assert_eq!(
            t.aggregate(NodeId(9), &pending),
            Err(TreeError::UnknownNode(NodeId(9)))
        );
        t.validate().unwrap();
        assert_eq!(t.resource_tree().len(), 4);
    }

    #[test]
    fn subset_violation_detected() {
        let mut t = ControlTree::new("rm", slots(&[0, 1]));
        let c = t
            .add_child(t.root(), ControlKind::ProcessManager, "pm", slots(&[1, 2]))
            .unwrap();
        assert_eq!(
            t.validate(),
            Err(TreeError::SubsetViolation {
                child: c,
                parent: t.root()
            })
        );
    }

    #[test]
    fn unknown_parent_rejected() {
        let mut t = ControlTree::new("rm", slots(&[0]));
        assert!(t
            .add_child(NodeId(3), ControlKind::Application, "x", slots(&[]))
            .is_err());
    }
}

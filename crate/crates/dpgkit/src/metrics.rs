//! Jaccard Index for Graphs (JIG): similarity between a proposed and a
//! ground-truth DPG over matched nodes and edges.
//!
//! Node identity across graphs is established by a detection-style greedy
//! matching: candidate pairs of same-category nodes are ranked by IoU and
//! accepted one-to-one above a threshold. An edge counts as intersected
//! when its category matches and every member maps to the corresponding
//! truth member in order. The combined score pools nodes and edges into a
//! single Jaccard over their disjoint union rather than averaging the two.

use std::collections::BTreeMap;

use crate::dpg::{Constituent, ConstituentId, Dpg};

/// Node correspondence parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    /// Minimum IoU for a node pair to be matchable; in (0, 1].
    pub iou_threshold: f64,
    pub require_category_match: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            require_category_match: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JigScore {
    pub node_jaccard: f64,
    pub edge_jaccard: f64,
    pub combined: f64,
}

/// Raw intersection/union counts behind a [`JigScore`]; lets callers pool
/// several diagrams into one micro-averaged number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct JigCounts {
    pub matched_nodes: usize,
    pub node_union: usize,
    pub matched_edges: usize,
    pub edge_union: usize,
}

impl JigCounts {
    pub fn score(&self) -> JigScore {
        JigScore {
            node_jaccard: ratio(self.matched_nodes, self.node_union),
            edge_jaccard: ratio(self.matched_edges, self.edge_union),
            combined: ratio(
                self.matched_nodes + self.matched_edges,
                self.node_union + self.edge_union,
            ),
        }
    }

    pub fn add(&mut self, other: &JigCounts) {
        self.matched_nodes += other.matched_nodes;
        self.node_union += other.node_union;
        self.matched_edges += other.matched_edges;
        self.edge_union += other.edge_union;
    }
}

// Empty against empty is identical, hence 1.
fn ratio(intersection: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    }
}

/// Greedy one-to-one matching between node lists: candidate pairs sorted
/// by IoU descending (ties by proposed id, then truth id), accepted when
/// IoU meets the threshold and both endpoints are still free.
pub fn match_node_lists<'a>(
    proposed: impl IntoIterator<Item = &'a Constituent>,
    truth: impl IntoIterator<Item = &'a Constituent>,
    cfg: &MatchConfig,
) -> Vec<(ConstituentId, ConstituentId)> {
    let proposed: Vec<&Constituent> = proposed.into_iter().collect();
    let truth: Vec<&Constituent> = truth.into_iter().collect();

    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, p) in proposed.iter().enumerate() {
        for (ti, t) in truth.iter().enumerate() {
            if cfg.require_category_match && p.category != t.category {
                continue;
            }
            let iou = p.bbox.iou(&t.bbox);
            if iou >= cfg.iou_threshold {
                pairs.push((iou, pi, ti));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("IoU is finite")
            .then_with(|| proposed[a.1].id.cmp(&proposed[b.1].id))
            .then_with(|| truth[a.2].id.cmp(&truth[b.2].id))
    });

    let mut p_used = vec![false; proposed.len()];
    let mut t_used = vec![false; truth.len()];
    let mut matching = Vec::new();
    for (_, pi, ti) in pairs {
        if !p_used[pi] && !t_used[ti] {
            p_used[pi] = true;
            t_used[ti] = true;
            matching.push((proposed[pi].id.clone(), truth[ti].id.clone()));
        }
    }
    matching
}

/// Node correspondence between two DPGs (see [`match_node_lists`]).
pub fn match_nodes(
    proposed: &Dpg,
    truth: &Dpg,
    cfg: &MatchConfig,
) -> Vec<(ConstituentId, ConstituentId)> {
    match_node_lists(proposed.nodes(), truth.nodes(), cfg)
}

/// Intersection/union counts between the graphs under the greedy matcher.
pub fn jig_counts(proposed: &Dpg, truth: &Dpg, cfg: &MatchConfig) -> JigCounts {
    let matching = match_nodes(proposed, truth, cfg);
    let map: BTreeMap<&ConstituentId, &ConstituentId> =
        matching.iter().map(|(p, t)| (p, t)).collect();

    let mut matched_edges = 0;
    for edge in proposed.edges() {
        let mapped: Option<Vec<ConstituentId>> = edge
            .members
            .iter()
            .map(|m| map.get(m).map(|t| (*t).clone()))
            .collect();
        if let Some(members) = mapped {
            if truth.has_edge_key(edge.category, &members) {
                matched_edges += 1;
            }
        }
    }

    JigCounts {
        matched_nodes: matching.len(),
        node_union: proposed.node_count() + truth.node_count() - matching.len(),
        matched_edges,
        edge_union: proposed.edge_count() + truth.edge_count() - matched_edges,
    }
}

/// The Jaccard Index for Graphs between a proposed and a truth DPG.
pub fn jig(proposed: &Dpg, truth: &Dpg, cfg: &MatchConfig) -> JigScore {
    jig_counts(proposed, truth, cfg).score()
}

//! Scored constituent and relationship proposals for one diagram — the
//! common input to every parser.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dpg::{Constituent, ConstituentId, Dpg, Relationship, RelationshipId, Violation};

/// Where a candidate set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    #[default]
    Ingested,
}

/// Unlike a [`Dpg`], a candidate set may hold mutually redundant or
/// conflicting relationships; it only guarantees that members resolve, the
/// arity table holds per candidate, and scores are probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    constituents: BTreeMap<ConstituentId, Constituent>,
    relationships: Vec<Relationship>,
    pub provenance: Provenance,
}

impl CandidateSet {
    pub fn new(
        constituents: impl IntoIterator<Item = Constituent>,
        relationships: impl IntoIterator<Item = Relationship>,
        provenance: Provenance,
    ) -> Result<Self, crate::dpg::ValidationError> {
        let mut violations = Vec::new();
        let mut map: BTreeMap<ConstituentId, Constituent> = BTreeMap::new();
        for node in constituents {
            if !node.bbox.is_valid() {
                violations.push(Violation::InvalidBox(node.id.clone()));
            }
            if !(0.0..=1.0).contains(&node.score) || !node.score.is_finite() {
                violations.push(Violation::NodeScoreOutOfRange {
                    id: node.id.clone(),
                    score: node.score,
                });
            }
            if map.contains_key(&node.id) {
                violations.push(Violation::DuplicateNodeId(node.id.clone()));
            } else {
                map.insert(node.id.clone(), node);
            }
        }
        let mut rels = Vec::new();
        let mut seen_ids: BTreeMap<RelationshipId, ()> = BTreeMap::new();
        for rel in relationships {
            if seen_ids.insert(rel.id.clone(), ()).is_some() {
                violations.push(Violation::DuplicateEdgeId(rel.id.clone()));
                continue;
            }
            if !(0.0..=1.0).contains(&rel.score) || !rel.score.is_finite() {
                violations.push(Violation::EdgeScoreOutOfRange {
                    id: rel.id.clone(),
                    score: rel.score,
                });
            }
            let slots = rel.category.slots();
            if rel.members.len() != slots.len() {
                violations.push(Violation::ArityMismatch {
                    edge: rel.id.clone(),
                    category: rel.category,
                    expected: slots.len(),
                    got: rel.members.len(),
                });
            } else {
                for (position, (member, slot)) in rel.members.iter().zip(slots).enumerate() {
                    match map.get(member) {
                        None => violations.push(Violation::DanglingMember {
                            edge: rel.id.clone(),
                            member: member.clone(),
                        }),
                        Some(node) if !slot.admits(node.category) => {
                            violations.push(Violation::MemberCategoryMismatch {
                                edge: rel.id.clone(),
                                category: rel.category,
                                position,
                                member: member.clone(),
                                got: node.category,
                            })
                        }
                        Some(_) => {}
                    }
                }
            }
            rels.push(rel);
        }
        if violations.is_empty() {
            Ok(Self {
                constituents: map,
                relationships: rels,
                provenance,
            })
        } else {
            Err(crate::dpg::ValidationError { violations })
        }
    }

    /// Treats a validated DPG as a (perfect) candidate set.
    pub fn from_dpg(dpg: &Dpg, provenance: Provenance) -> Self {
        Self {
            constituents: dpg.nodes().map(|n| (n.id.clone(), n.clone())).collect(),
            relationships: dpg.edges().cloned().collect(),
            provenance,
        }
    }

    pub fn constituent(&self, id: &ConstituentId) -> Option<&Constituent> {
        self.constituents.get(id)
    }

    /// Constituents in id order.
    pub fn constituents(&self) -> impl Iterator<Item = &Constituent> {
        self.constituents.values()
    }

    pub fn relationships(&self) -> &[Relationship] {
        &self.relationships
    }

    pub fn relationship(&self, id: &RelationshipId) -> Option<&Relationship> {
        self.relationships.iter().find(|r| &r.id == id)
    }

    pub fn constituent_count(&self) -> usize {
        self.constituents.len()
    }

    pub fn relationship_count(&self) -> usize {
        self.relationships.len()
    }

    /// Relationship candidates sorted by score descending, ties broken by
    /// id ascending — the presentation order used at parse time.
    pub fn relationships_by_score(&self) -> Vec<&Relationship> {
        let mut rels: Vec<&Relationship> = self.relationships.iter().collect();
        rels.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("scores are finite")
                .then_with(|| a.id.cmp(&b.id))
        });
        rels
    }
}

/// Accumulates accepted relationship candidates into a DPG that stays valid
/// at every step: member constituents are pulled in as nodes, and a
/// candidate whose (category, member tuple) is already present is refused.
#[derive(Debug, Clone)]
pub struct DpgAccumulator<'a> {
    source: &'a CandidateSet,
    nodes: BTreeMap<ConstituentId, Constituent>,
    edges: BTreeMap<RelationshipId, Relationship>,
    keys: std::collections::BTreeSet<(crate::dpg::RelationshipCategory, Vec<ConstituentId>)>,
}

impl<'a> DpgAccumulator<'a> {
    pub fn new(source: &'a CandidateSet) -> Self {
        Self {
            source,
            nodes: BTreeMap::new(),
            edges: BTreeMap::new(),
            keys: std::collections::BTreeSet::new(),
        }
    }

    pub fn source(&self) -> &CandidateSet {
        self.source
    }

    /// True if the candidate could be added right now.
    pub fn admits(&self, rel: &Relationship) -> bool {
        !self.keys.contains(&(rel.category, rel.members.clone()))
    }

    /// Adds the relationship and its member constituents. Returns false
    /// (and changes nothing) when the edge key is already present.
    pub fn accept(&mut self, rel: &Relationship) -> bool {
        let key = (rel.category, rel.members.clone());
        if self.keys.contains(&key) {
            return false;
        }
        for member in &rel.members {
            if !self.nodes.contains_key(member) {
                let node = self
                    .source
                    .constituent(member)
                    .expect("candidate members resolve within their set");
                self.nodes.insert(member.clone(), node.clone());
            }
        }
        self.keys.insert(key);
        self.edges.insert(rel.id.clone(), rel.clone());
        true
    }

    pub fn contains_node(&self, id: &ConstituentId) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Constituent> {
        self.nodes.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &Relationship> {
        self.edges.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// The accumulated graph. Valid by construction.
    pub fn to_dpg(&self) -> Dpg {
        Dpg::new(self.nodes.values().cloned(), self.edges.values().cloned())
            .expect("accumulator maintains validity")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpg::{ConstituentCategory, RelationshipCategory};
    use crate::geom::BBox;

    fn tiny_set() -> CandidateSet {
        let nodes = vec![
            Constituent::new(
                "b1",
                ConstituentCategory::Blob,
                BBox::new(0.1, 0.1, 0.3, 0.3),
                0.9,
            ),
            Constituent::new(
                "t1",
                ConstituentCategory::TextBox,
                BBox::new(0.1, 0.35, 0.3, 0.4),
                0.8,
            )
            .with_text("fox"),
        ];
        let rels = vec![
            Relationship::new(
                "r1",
                RelationshipCategory::R1,
                vec!["t1".into(), "b1".into()],
                0.7,
            ),
            Relationship::new(
                "r2",
                RelationshipCategory::R1,
                vec!["t1".into(), "b1".into()],
                0.4,
            ),
        ];
        CandidateSet::new(nodes, rels, Provenance::Synthetic).unwrap()
    }

    #[test]
    fn candidate_sets_allow_redundant_relationships() {
        let set = tiny_set();
        assert_eq!(set.relationship_count(), 2);
    }

    #[test]
    fn accumulator_refuses_duplicate_edge_keys() {
        let set = tiny_set();
        let mut acc = DpgAccumulator::new(&set);
        let rels = set.relationships_by_score();
        assert!(acc.accept(rels[0]));
        assert!(!acc.accept(rels[1]));
        let dpg = acc.to_dpg();
        assert_eq!(dpg.node_count(), 2);
        assert_eq!(dpg.edge_count(), 1);
    }

    #[test]
    fn score_ordering_breaks_ties_by_id() {
        let nodes = vec![
            Constituent::new(
                "t1",
                ConstituentCategory::TextBox,
                BBox::new(0.3, 0.0, 0.7, 0.05),
                1.0,
            )
            .with_text("a"),
        ];
        let rels = vec![
            Relationship::new("z", RelationshipCategory::R7, vec!["t1".into()], 0.5),
            Relationship::new("a", RelationshipCategory::R8, vec!["t1".into()], 0.5),
        ];
        let set = CandidateSet::new(nodes, rels, Provenance::Ingested).unwrap();
        let order: Vec<&str> = set
            .relationships_by_score()
            .iter()
            .map(|r| r.id.as_str())
            .collect();
        assert_eq!(order, vec!["a", "z"]);
    }
}

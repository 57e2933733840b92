//! Diagram parse graphs: typed constituents, the ten relationship
//! categories, and the validated graph they form.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geom::BBox;

mod verbalize;
pub use verbalize::{verbalize, RelationSentence};

/// The four low-level constituent types. Arrow heads and arrow tails are
/// separate so that arrows with one head, several heads, or none are all
/// representable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstituentCategory {
    Blob,
    TextBox,
    ArrowTail,
    ArrowHead,
}

impl ConstituentCategory {
    pub const ALL: [ConstituentCategory; 4] = [
        ConstituentCategory::Blob,
        ConstituentCategory::TextBox,
        ConstituentCategory::ArrowTail,
        ConstituentCategory::ArrowHead,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ConstituentCategory::Blob => "blob",
            ConstituentCategory::TextBox => "text_box",
            ConstituentCategory::ArrowTail => "arrow_tail",
            ConstituentCategory::ArrowHead => "arrow_head",
        }
    }
}

impl fmt::Display for ConstituentCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

id_newtype!(
    /// Opaque identifier of a constituent, unique within a diagram.
    ConstituentId
);
id_newtype!(
    /// Opaque identifier of a relationship, unique within a diagram.
    RelationshipId
);

/// A typed diagram node: category, geometry, proposal score, and the text
/// content for text boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constituent {
    pub id: ConstituentId,
    pub category: ConstituentCategory,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl Constituent {
    pub fn new(
        id: impl Into<ConstituentId>,
        category: ConstituentCategory,
        bbox: BBox,
        score: f64,
    ) -> Self {
        Self {
            id: id.into(),
            category,
            bbox,
            score,
            text: None,
        }
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }
}

/// The ten relationship categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RelationshipCategory {
    /// A text box naming an entire object.
    R1,
    /// A text box naming a region within an object.
    R2,
    /// A text box tied to a region within an object via an arrow.
    R3,
    /// Two objects related via an arrow.
    R4,
    /// An arrow head assigned to an arrow tail.
    R5,
    /// A text box describing the process an arrow stands for.
    R6,
    /// The title of the entire image.
    R7,
    /// A title for a section of the image.
    R8,
    /// A caption for the entire image.
    R9,
    /// Decorative or miscellaneous canvas elements.
    R10,
}

/// Category constraint on one member slot of a relationship.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotConstraint {
    Exactly(ConstituentCategory),
    Any,
}

impl SlotConstraint {
    pub fn admits(&self, category: ConstituentCategory) -> bool {
        match self {
            SlotConstraint::Exactly(c) => *c == category,
            SlotConstraint::Any => true,
        }
    }
}

use ConstituentCategory::{ArrowHead, ArrowTail, Blob, TextBox};
use SlotConstraint::{Any, Exactly};

impl RelationshipCategory {
    pub const ALL: [RelationshipCategory; 10] = [
        RelationshipCategory::R1,
        RelationshipCategory::R2,
        RelationshipCategory::R3,
        RelationshipCategory::R4,
        RelationshipCategory::R5,
        RelationshipCategory::R6,
        RelationshipCategory::R7,
        RelationshipCategory::R8,
        RelationshipCategory::R9,
        RelationshipCategory::R10,
    ];

    /// Ordered member slots. R7–R10 relate a single constituent to the
    /// diagram canvas, so they have one slot.
    pub fn slots(&self) -> &'static [SlotConstraint] {
        match self {
            RelationshipCategory::R1 | RelationshipCategory::R2 => {
                &[Exactly(TextBox), Exactly(Blob)]
            }
            RelationshipCategory::R3 => &[Exactly(TextBox), Exactly(ArrowTail), Exactly(Blob)],
            RelationshipCategory::R4 => &[Exactly(Blob), Exactly(ArrowTail), Exactly(Blob)],
            RelationshipCategory::R5 => &[Exactly(ArrowHead), Exactly(ArrowTail)],
            RelationshipCategory::R6 => &[Exactly(TextBox), Exactly(ArrowTail)],
            RelationshipCategory::R7 | RelationshipCategory::R8 | RelationshipCategory::R9 => {
                &[Exactly(TextBox)]
            }
            RelationshipCategory::R10 => &[Any],
        }
    }

    pub fn arity(&self) -> usize {
        self.slots().len()
    }

    /// True for the canvas-level categories R7–R10.
    pub fn is_canvas(&self) -> bool {
        self.arity() == 1
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RelationshipCategory::R1 => "R1",
            RelationshipCategory::R2 => "R2",
            RelationshipCategory::R3 => "R3",
            RelationshipCategory::R4 => "R4",
            RelationshipCategory::R5 => "R5",
            RelationshipCategory::R6 => "R6",
            RelationshipCategory::R7 => "R7",
            RelationshipCategory::R8 => "R8",
            RelationshipCategory::R9 => "R9",
            RelationshipCategory::R10 => "R10",
        }
    }

    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|c| c == self).unwrap()
    }
}

impl fmt::Display for RelationshipCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A typed edge over an ordered tuple of constituents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relationship {
    pub id: RelationshipId,
    pub category: RelationshipCategory,
    pub members: Vec<ConstituentId>,
    pub score: f64,
}

impl Relationship {
    pub fn new(
        id: impl Into<RelationshipId>,
        category: RelationshipCategory,
        members: Vec<ConstituentId>,
        score: f64,
    ) -> Self {
        Self {
            id: id.into(),
            category,
            members,
            score,
        }
    }

    /// Dedup key: two edges with equal category and member tuple are the
    /// same edge regardless of id.
    pub fn key(&self) -> (RelationshipCategory, &[ConstituentId]) {
        (self.category, &self.members)
    }
}

/// A single violated graph invariant, naming the offending node or edge.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Violation {
    #[error("duplicate constituent id `{0}`")]
    DuplicateNodeId(ConstituentId),
    #[error("duplicate relationship id `{0}`")]
    DuplicateEdgeId(RelationshipId),
    #[error("constituent `{0}` has an invalid box (need 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1)")]
    InvalidBox(ConstituentId),
    #[error("constituent `{id}` score {score} outside [0, 1]")]
    NodeScoreOutOfRange { id: ConstituentId, score: f64 },
    #[error("relationship `{id}` score {score} outside [0, 1]")]
    EdgeScoreOutOfRange { id: RelationshipId, score: f64 },
    #[error("constituent `{0}` is a text box without text")]
    MissingText(ConstituentId),
    #[error("constituent `{0}` carries text but is not a text box")]
    UnexpectedText(ConstituentId),
    #[error("relationship `{edge}` references unknown constituent `{member}`")]
    DanglingMember {
        edge: RelationshipId,
        member: ConstituentId,
    },
    #[error("relationship `{edge}` ({category}) has {got} members, expected {expected}")]
    ArityMismatch {
        edge: RelationshipId,
        category: RelationshipCategory,
        expected: usize,
        got: usize,
    },
    #[error(
        "relationship `{edge}` ({category}) member {position} is `{member}` of category {got}, \
         which the arity table does not admit"
    )]
    MemberCategoryMismatch {
        edge: RelationshipId,
        category: RelationshipCategory,
        position: usize,
        member: ConstituentId,
        got: ConstituentCategory,
    },
    #[error("relationship `{edge}` duplicates `{existing}` (same category and member tuple)")]
    DuplicateEdge {
        edge: RelationshipId,
        existing: RelationshipId,
    },
}

/// All violations found in one validation pass.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid diagram parse graph: {}", .violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ValidationError {
    pub violations: Vec<Violation>,
}

/// A validated diagram parse graph. Immutable once built, so it is safe to
/// share across threads. Isolated nodes are legal; partially built graphs
/// during search stay representable.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dpg {
    nodes: BTreeMap<ConstituentId, Constituent>,
    edges: BTreeMap<RelationshipId, Relationship>,
}

impl Dpg {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Validates the node and edge sets and assembles the graph. On failure
    /// returns every violation found, not just the first.
    pub fn new(
        nodes: impl IntoIterator<Item = Constituent>,
        edges: impl IntoIterator<Item = Relationship>,
    ) -> Result<Self, ValidationError> {
        let mut violations = Vec::new();
        let mut node_map: BTreeMap<ConstituentId, Constituent> = BTreeMap::new();

        for node in nodes {
            if !node.bbox.is_valid() {
                violations.push(Violation::InvalidBox(node.id.clone()));
            }
            if !(0.0..=1.0).contains(&node.score) || !node.score.is_finite() {
                violations.push(Violation::NodeScoreOutOfRange {
                    id: node.id.clone(),
                    score: node.score,
                });
            }
            match (node.category, &node.text) {
                (ConstituentCategory::TextBox, None) => {
                    violations.push(Violation::MissingText(node.id.clone()))
                }
                (c, Some(_)) if c != ConstituentCategory::TextBox => {
                    violations.push(Violation::UnexpectedText(node.id.clone()))
                }
                _ => {}
            }
            if node_map.contains_key(&node.id) {
                violations.push(Violation::DuplicateNodeId(node.id.clone()));
            } else {
                node_map.insert(node.id.clone(), node);
            }
        }

        let mut edge_map: BTreeMap<RelationshipId, Relationship> = BTreeMap::new();
        let mut keys: BTreeMap<(RelationshipCategory, Vec<ConstituentId>), RelationshipId> =
            BTreeMap::new();
        for edge in edges {
            if edge_map.contains_key(&edge.id) {
                violations.push(Violation::DuplicateEdgeId(edge.id.clone()));
                continue;
            }
            if !(0.0..=1.0).contains(&edge.score) || !edge.score.is_finite() {
                violations.push(Violation::EdgeScoreOutOfRange {
                    id: edge.id.clone(),
                    score: edge.score,
                });
            }
            let slots = edge.category.slots();
            if edge.members.len() != slots.len() {
                violations.push(Violation::ArityMismatch {
                    edge: edge.id.clone(),
                    category: edge.category,
                    expected: slots.len(),
                    got: edge.members.len(),
                });
            } else {
                for (position, (member, slot)) in edge.members.iter().zip(slots).enumerate() {
                    match node_map.get(member) {
                        None => violations.push(Violation::DanglingMember {
                            edge: edge.id.clone(),
                            member: member.clone(),
                        }),
                        Some(node) if !slot.admits(node.category) => {
                            violations.push(Violation::MemberCategoryMismatch {
                                edge: edge.id.clone(),
                                category: edge.category,
                                position,
                                member: member.clone(),
                                got: node.category,
                            })
                        }
                        Some(_) => {}
                    }
                }
            }
            let key = (edge.category, edge.members.clone());
            if let Some(existing) = keys.get(&key) {
                violations.push(Violation::DuplicateEdge {
                    edge: edge.id.clone(),
                    existing: existing.clone(),
                });
            } else {
                keys.insert(key, edge.id.clone());
            }
            edge_map.insert(edge.id.clone(), edge);
        }

        if violations.is_empty() {
            Ok(Self {
                nodes: node_map,
                edges: edge_map,
            })
        } else {
            Err(ValidationError { violations })
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.edges.is_empty()
    }

    pub fn node(&self, id: &ConstituentId) -> Option<&Constituent> {
        self.nodes.get(id)
    }

    pub fn edge(&self, id: &RelationshipId) -> Option<&Relationship> {
        self.edges.get(id)
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &Constituent> {
        self.nodes.values()
    }

    /// Edges in id order.
    pub fn edges(&self) -> impl Iterator<Item = &Relationship> {
        self.edges.values()
    }

    pub fn has_edge_key(&self, category: RelationshipCategory, members: &[ConstituentId]) -> bool {
        self.edges
            .values()
            .any(|e| e.category == category && e.members == members)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(id: &str) -> Constituent {
        Constituent::new(id, Blob, BBox::new(0.1, 0.1, 0.3, 0.3), 1.0)
    }

    fn text(id: &str, content: &str) -> Constituent {
        Constituent::new(id, TextBox, BBox::new(0.4, 0.4, 0.6, 0.5), 1.0).with_text(content)
    }

    #[test]
    fn minimal_legal_graph() {
        let dpg = Dpg::new(
            [blob("b1"), text("t1", "fox")],
            [Relationship::new(
                "r1",
                RelationshipCategory::R1,
                vec!["t1".into(), "b1".into()],
                1.0,
            )],
        )
        .unwrap();
        assert_eq!(dpg.node_count(), 2);
        assert_eq!(dpg.edge_count(), 1);
    }

    #[test]
    fn reversed_member_order_is_arity_violation() {
        let err = Dpg::new(
            [blob("b1"), text("t1", "fox")],
            [Relationship::new(
                "r1",
                RelationshipCategory::R1,
                vec!["b1".into(), "t1".into()],
                1.0,
            )],
        )
        .unwrap_err();
        assert!(err.violations.iter().any(|v| matches!(
            v,
            Violation::MemberCategoryMismatch {
                category: RelationshipCategory::R1,
                position: 0,
                ..
            }
        )));
    }

    #[test]
    fn dangling_member_is_reported() {
        let head = Constituent::new("h1", ArrowHead, BBox::new(0.0, 0.0, 0.1, 0.1), 1.0);
        let err = Dpg::new(
            [head],
            [Relationship::new(
                "r1",
                RelationshipCategory::R5,
                vec!["h1".into(), "t_missing".into()],
                1.0,
            )],
        )
        .unwrap_err();
        assert!(err.violations.iter().any(|v| matches!(
            v,
            Violation::DanglingMember { member, .. } if member.as_str() == "t_missing"
        )));
    }

    #[test]
    fn duplicate_edge_key_rejected() {
        let err = Dpg::new(
            [blob("b1"), text("t1", "fox")],
            [
                Relationship::new(
                    "r1",
                    RelationshipCategory::R1,
                    vec!["t1".into(), "b1".into()],
                    1.0,
                ),
                Relationship::new(
                    "r2",
                    RelationshipCategory::R1,
                    vec!["t1".into(), "b1".into()],
                    0.9,
                ),
            ],
        )
        .unwrap_err();
        assert!(err
            .violations
            .iter()
            .any(|v| matches!(v, Violation::DuplicateEdge { .. })));
    }

    #[test]
    fn text_presence_must_match_category() {
        let bad_blob = Constituent::new("b1", Blob, BBox::new(0.1, 0.1, 0.2, 0.2), 1.0)
            .with_text("should not be here");
        let bad_text = Constituent::new("t1", TextBox, BBox::new(0.3, 0.3, 0.4, 0.4), 1.0);
        let err = Dpg::new([bad_blob, bad_text], []).unwrap_err();
        assert!(err
            .violations
            .iter()
            .any(|v| matches!(v, Violation::UnexpectedText(_))));
        assert!(err
            .violations
            .iter()
            .any(|v| matches!(v, Violation::MissingText(_))));
    }

    #[test]
    fn isolated_nodes_are_legal() {
        let dpg = Dpg::new([blob("b1")], []).unwrap();
        assert_eq!(dpg.node_count(), 1);
        assert_eq!(dpg.edge_count(), 0);
    }

    #[test]
    fn r10_admits_any_category() {
        let dpg = Dpg::new(
            [blob("b1")],
            [Relationship::new(
                "r1",
                RelationshipCategory::R10,
                vec!["b1".into()],
                1.0,
            )],
        )
        .unwrap();
        assert_eq!(dpg.edge_count(), 1);
    }
}

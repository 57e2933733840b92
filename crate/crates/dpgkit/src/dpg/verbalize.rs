//! Turns DPG edges into relation sentences with one fixed template per
//! category.
//!
//! Template table (member slots in arity order; `name(x)` resolves a
//! display name as described below):
//!
//! | Category | Sentence                                   |
//! |----------|--------------------------------------------|
//! | R1       | `<text> names object-<blob id>`            |
//! | R2       | `<text> labels a region of <name(blob)>`   |
//! | R3       | `<text> points to a region of <name(blob)>`|
//! | R4       | `<name(blob A)> links to <name(blob B)>`   |
//! | R5       | `<name(head)> attaches to <name(tail)>`    |
//! | R6       | `<text> describes <name(tail)>`            |
//! | R7       | `image title is <text>`                    |
//! | R8       | `image section title is <text>`            |
//! | R9       | `image caption is <text>`                  |
//! | R10      | (no sentence)                              |
//!
//! Display names: a text box is its own text, spliced in verbatim; a blob
//! is the text of its lowest-id R1 label, or `object-<id>` when it has
//! none; arrow tails and heads are `arrow-<id>` and `arrowhead-<id>`.
//! The R1 template always uses the `object-<id>` form for the blob slot so
//! a label is never defined in terms of itself.

use super::{Constituent, ConstituentCategory, Dpg, Relationship, RelationshipCategory, RelationshipId};

/// A single verbalized DPG edge: a non-empty token list plus the edge it
/// came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationSentence {
    pub tokens: Vec<String>,
    pub source_edge: RelationshipId,
}

impl RelationSentence {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

fn splice(tokens: &mut Vec<String>, text: &str) {
    tokens.extend(text.split_whitespace().map(str::to_owned));
}

fn display_name(dpg: &Dpg, node: &Constituent, tokens: &mut Vec<String>) {
    match node.category {
        ConstituentCategory::TextBox => {
            splice(tokens, node.text.as_deref().unwrap_or_default());
        }
        ConstituentCategory::Blob => {
            let label = dpg
                .edges()
                .filter(|e| {
                    e.category == RelationshipCategory::R1 && e.members.get(1) == Some(&node.id)
                })
                .filter_map(|e| dpg.node(&e.members[0]))
                .find_map(|t| t.text.as_deref());
            match label {
                Some(text) => splice(tokens, text),
                None => tokens.push(format!("object-{}", node.id)),
            }
        }
        ConstituentCategory::ArrowTail => tokens.push(format!("arrow-{}", node.id)),
        ConstituentCategory::ArrowHead => tokens.push(format!("arrowhead-{}", node.id)),
    }
}

fn sentence_for(dpg: &Dpg, edge: &Relationship) -> Option<Vec<String>> {
    let member = |i: usize| dpg.node(&edge.members[i]).expect("validated edge member");
    let mut tokens = Vec::new();
    match edge.category {
        RelationshipCategory::R1 => {
            display_name(dpg, member(0), &mut tokens);
            tokens.push("names".into());
            tokens.push(format!("object-{}", member(1).id));
        }
        RelationshipCategory::R2 => {
            display_name(dpg, member(0), &mut tokens);
            splice(&mut tokens, "labels a region of");
            display_name(dpg, member(1), &mut tokens);
        }
        RelationshipCategory::R3 => {
            display_name(dpg, member(0), &mut tokens);
            splice(&mut tokens, "points to a region of");
            display_name(dpg, member(2), &mut tokens);
        }
        RelationshipCategory::R4 => {
            display_name(dpg, member(0), &mut tokens);
            splice(&mut tokens, "links to");
            display_name(dpg, member(2), &mut tokens);
        }
        RelationshipCategory::R5 => {
            display_name(dpg, member(0), &mut tokens);
            splice(&mut tokens, "attaches to");
            display_name(dpg, member(1), &mut tokens);
        }
        RelationshipCategory::R6 => {
            display_name(dpg, member(0), &mut tokens);
            tokens.push("describes".into());
            display_name(dpg, member(1), &mut tokens);
        }
        RelationshipCategory::R7 => {
            splice(&mut tokens, "image title is");
            display_name(dpg, member(0), &mut tokens);
        }
        RelationshipCategory::R8 => {
            splice(&mut tokens, "image section title is");
            display_name(dpg, member(0), &mut tokens);
        }
        RelationshipCategory::R9 => {
            splice(&mut tokens, "image caption is");
            display_name(dpg, member(0), &mut tokens);
        }
        RelationshipCategory::R10 => return None,
    }
    Some(tokens)
}

/// One sentence per R1–R9 edge, in edge-id order. Deterministic; R10 edges
/// produce nothing.
pub fn verbalize(dpg: &Dpg) -> Vec<RelationSentence> {
    dpg.edges()
        .filter_map(|edge| {
            sentence_for(dpg, edge).map(|tokens| RelationSentence {
                tokens,
                source_edge: edge.id.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::BBox;

    fn labeled_pair() -> Dpg {
        let nodes = vec![
            Constituent::new(
                "b1",
                ConstituentCategory::Blob,
                BBox::new(0.1, 0.1, 0.3, 0.3),
                1.0,
            ),
            Constituent::new(
                "b2",
                ConstituentCategory::Blob,
                BBox::new(0.6, 0.6, 0.8, 0.8),
                1.0,
            ),
            Constituent::new(
                "t1",
                ConstituentCategory::TextBox,
                BBox::new(0.1, 0.32, 0.3, 0.36),
                1.0,
            )
            .with_text("fox"),
            Constituent::new(
                "t2",
                ConstituentCategory::TextBox,
                BBox::new(0.6, 0.82, 0.8, 0.86),
                1.0,
            )
            .with_text("rabbit"),
            Constituent::new(
                "a1",
                ConstituentCategory::ArrowTail,
                BBox::new(0.3, 0.4, 0.6, 0.42),
                1.0,
            ),
        ];
        let edges = vec![
            Relationship::new(
                "r1",
                RelationshipCategory::R1,
                vec!["t1".into(), "b1".into()],
                1.0,
            ),
            Relationship::new(
                "r2",
                RelationshipCategory::R1,
                vec!["t2".into(), "b2".into()],
                1.0,
            ),
            Relationship::new(
                "r3",
                RelationshipCategory::R4,
                vec!["b1".into(), "a1".into(), "b2".into()],
                1.0,
            ),
        ];
        Dpg::new(nodes, edges).unwrap()
    }

    #[test]
    fn r4_uses_blob_labels() {
        let dpg = labeled_pair();
        let sentences = verbalize(&dpg);
        let r4 = sentences
            .iter()
            .find(|s| s.source_edge.as_str() == "r3")
            .unwrap();
        assert_eq!(r4.tokens, vec!["fox", "links", "to", "rabbit"]);
    }

    #[test]
    fn r7_template_keeps_text_verbatim() {
        let nodes = vec![Constituent::new(
            "t1",
            ConstituentCategory::TextBox,
            BBox::new(0.3, 0.0, 0.7, 0.05),
            1.0,
        )
        .with_text("The Water Cycle")];
        let edges = vec![Relationship::new(
            "r1",
            RelationshipCategory::R7,
            vec!["t1".into()],
            1.0,
        )];
        let dpg = Dpg::new(nodes, edges).unwrap();
        let sentences = verbalize(&dpg);
        assert_eq!(sentences.len(), 1);
        assert_eq!(sentences[0].text(), "image title is The Water Cycle");
    }

    #[test]
    fn empty_dpg_verbalizes_to_nothing() {
        assert!(verbalize(&Dpg::empty()).is_empty());
    }

    #[test]
    fn r10_produces_no_sentence_and_count_matches() {
        let nodes = vec![
            Constituent::new(
                "b1",
                ConstituentCategory::Blob,
                BBox::new(0.1, 0.1, 0.3, 0.3),
                1.0,
            ),
            Constituent::new(
                "t1",
                ConstituentCategory::TextBox,
                BBox::new(0.1, 0.32, 0.3, 0.36),
                1.0,
            )
            .with_text("sun"),
        ];
        let edges = vec![
            Relationship::new(
                "r1",
                RelationshipCategory::R10,
                vec!["b1".into()],
                1.0,
            ),
            Relationship::new(
                "r2",
                RelationshipCategory::R1,
                vec!["t1".into(), "b1".into()],
                1.0,
            ),
        ];
        let dpg = Dpg::new(nodes, edges).unwrap();
        let sentences = verbalize(&dpg);
        let verbal_edges = dpg
            .edges()
            .filter(|e| e.category != RelationshipCategory::R10)
            .count();
        assert_eq!(sentences.len(), verbal_edges);
        // Unlabeled slot in R1 falls back to the object-<id> form.
        assert_eq!(sentences[0].text(), "sun names object-b1");
    }
}

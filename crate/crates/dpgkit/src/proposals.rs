//! Relationship proposal generation: spatial features over member tuples,
//! one random forest per multi-member category (R1–R6), one positional
//! KDE per canvas category (R7–R10), and proximity-based pruning.
//!
//! Feature layout, 12 entries per member in arity order (24 for pairs, 36
//! for triples). For member `i` with "next" member `j = (i+1) mod K`:
//!
//! | off | entry                                            |
//! |-----|--------------------------------------------------|
//! | 0,1 | center x, center y                               |
//! | 2,3 | width, height                                    |
//! | 4   | detection score                                  |
//! | 5   | mean IoU with the other members                  |
//! | 6,7 | center offset to next: Δx, Δy                    |
//! | 8   | center distance to next                          |
//! | 9,10| sin/cos of the angle atan2(Δy, Δx)               |
//! | 11  | box-area ratio area(i)/area(j)                   |

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::candidates::{CandidateSet, Provenance};
use crate::dpg::{
    Constituent, ConstituentId, Dpg, Relationship, RelationshipCategory, ValidationError,
};
use crate::forest::{train_classifier, ForestError, RandomForest, RfParams};
use crate::kde::{Kde2d, KdeError};
use crate::metrics::{match_node_lists, MatchConfig};

pub const FEATURES_PER_MEMBER: usize = 12;
/// Grid used to normalize KDE densities into [0,1] scores.
pub const KDE_PEAK_GRID: usize = 64;
pub const DEFAULT_RADIUS: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum ProposalError {
    #[error("category {category} expects {expected} members, got {got}")]
    Arity {
        category: RelationshipCategory,
        expected: usize,
        got: usize,
    },
    #[error("category {category} member {position} has category {got}")]
    MemberCategory {
        category: RelationshipCategory,
        position: usize,
        got: crate::dpg::ConstituentCategory,
    },
    #[error("radius {0} outside (0, sqrt(2)]")]
    BadRadius(f64),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Kde(#[from] KdeError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

/// Spatial feature vector for one member tuple of a multi-member category.
pub fn rel_features(
    category: RelationshipCategory,
    members: &[&Constituent],
) -> Result<Vec<f64>, ProposalError> {
    let slots = category.slots();
    if members.len() != slots.len() {
        return Err(ProposalError::Arity {
            category,
            expected: slots.len(),
            got: members.len(),
        });
    }
    for (position, (member, slot)) in members.iter().zip(slots).enumerate() {
        if !slot.admits(member.category) {
            return Err(ProposalError::MemberCategory {
                category,
                position,
                got: member.category,
            });
        }
    }

    let k = members.len();
    let mut values = Vec::with_capacity(k * FEATURES_PER_MEMBER);
    for (i, m) in members.iter().enumerate() {
        let (cx, cy) = m.bbox.center();
        let mut iou_sum = 0.0;
        for (j, other) in members.iter().enumerate() {
            if i != j {
                iou_sum += m.bbox.iou(&other.bbox);
            }
        }
        let mean_iou = if k > 1 { iou_sum / (k - 1) as f64 } else { 0.0 };

        let next = members[(i + 1) % k];
        let (nx, ny) = next.bbox.center();
        let dx = nx - cx;
        let dy = ny - cy;
        let dist = (dx * dx + dy * dy).sqrt();
        let angle = dy.atan2(dx);

        values.extend_from_slice(&[
            cx,
            cy,
            m.bbox.width(),
            m.bbox.height(),
            m.score,
            mean_iou,
            dx,
            dy,
            dist,
            angle.sin(),
            angle.cos(),
            m.bbox.area() / next.bbox.area(),
        ]);
    }
    debug_assert!(values.iter().all(|v| v.is_finite()));
    Ok(values)
}

/// All category-legal tuples whose members' pairwise center distances are
/// all within `radius`. Constituents are visited in id order, so tuples
/// come out in (category, member-id) lexicographic order.
pub fn enumerate_legal_tuples<'a>(
    constituents: &[&'a Constituent],
    radius: f64,
) -> Result<Vec<(RelationshipCategory, Vec<&'a Constituent>)>, ProposalError> {
    if !(radius > 0.0 && radius <= std::f64::consts::SQRT_2) {
        return Err(ProposalError::BadRadius(radius));
    }
    let mut sorted: Vec<&Constituent> = constituents.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));

    let mut tuples = Vec::new();
    for category in RelationshipCategory::ALL {
        let slots = category.slots();
        let mut stack: Vec<&Constituent> = Vec::with_capacity(slots.len());
        fill_slots(category, slots, &sorted, radius, &mut stack, &mut tuples);
    }
    Ok(tuples)
}

fn fill_slots<'a>(
    category: RelationshipCategory,
    slots: &[crate::dpg::SlotConstraint],
    pool: &[&'a Constituent],
    radius: f64,
    stack: &mut Vec<&'a Constituent>,
    out: &mut Vec<(RelationshipCategory, Vec<&'a Constituent>)>,
) {
    let position = stack.len();
    if position == slots.len() {
        out.push((category, stack.clone()));
        return;
    }
    for candidate in pool {
        if !slots[position].admits(candidate.category) {
            continue;
        }
        if stack.iter().any(|chosen| chosen.id == candidate.id) {
            continue;
        }
        if stack
            .iter()
            .any(|chosen| chosen.bbox.center_distance(&candidate.bbox) > radius)
        {
            continue;
        }
        stack.push(candidate);
        fill_slots(category, slots, pool, radius, stack, out);
        stack.pop();
    }
}

/// A fitted positional model for one canvas category.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PositionModel {
    pub kde: Kde2d,
    /// Maximum density over the normalization grid.
    pub peak: f64,
}

impl PositionModel {
    pub fn fit(samples: &[(f64, f64)], bandwidth: Option<(f64, f64)>) -> Result<Self, KdeError> {
        let kde = Kde2d::fit(samples, bandwidth)?;
        let peak = kde.peak_on_grid(KDE_PEAK_GRID);
        Ok(Self { kde, peak })
    }

    /// Density normalized to [0,1] by the grid peak.
    pub fn score(&self, x: f64, y: f64) -> f64 {
        if self.peak <= 0.0 {
            return 0.0;
        }
        (self.kde.density(x, y) / self.peak).clamp(0.0, 1.0)
    }
}

/// Per-category scoring models plus the pruning radius they were trained
/// with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProposalModels {
    pub forests: BTreeMap<RelationshipCategory, RandomForest>,
    pub positions: BTreeMap<RelationshipCategory, PositionModel>,
    pub radius: f64,
}

impl ProposalModels {
    pub fn empty(radius: f64) -> Self {
        Self {
            forests: BTreeMap::new(),
            positions: BTreeMap::new(),
            radius,
        }
    }
}

/// Training input: one diagram's detected constituents plus its truth
/// graph.
pub struct ProposalTrainingDiagram<'a> {
    pub constituents: Vec<&'a Constituent>,
    pub truth: &'a Dpg,
}

/// Trains one forest per multi-member category on tuples enumerated from
/// the detected constituents (positive iff the tuple maps onto a truth
/// edge through IoU node matching), and one KDE per canvas category on the
/// truth member centers.
pub fn train_proposal_models(
    diagrams: &[ProposalTrainingDiagram<'_>],
    radius: f64,
    rf_params: &RfParams,
) -> Result<ProposalModels, ProposalError> {
    let match_cfg = MatchConfig::default();
    let mut rows: BTreeMap<RelationshipCategory, (Vec<Vec<f64>>, Vec<bool>)> = BTreeMap::new();
    let mut samples: BTreeMap<RelationshipCategory, Vec<(f64, f64)>> = BTreeMap::new();

    for diagram in diagrams {
        let truth_nodes: Vec<&Constituent> = diagram.truth.nodes().collect();
        let matching = match_node_lists(
            diagram.constituents.iter().copied(),
            truth_nodes.iter().copied(),
            &match_cfg,
        );
        let to_truth: BTreeMap<&ConstituentId, &ConstituentId> =
            matching.iter().map(|(p, t)| (p, t)).collect();
        let truth_keys: BTreeSet<(RelationshipCategory, Vec<ConstituentId>)> = diagram
            .truth
            .edges()
            .map(|e| (e.category, e.members.clone()))
            .collect();

        for (category, members) in enumerate_legal_tuples(&diagram.constituents, radius)? {
            if category.is_canvas() {
                continue;
            }
            let mapped: Option<Vec<ConstituentId>> = members
                .iter()
                .map(|m| to_truth.get(&m.id).map(|t| (*t).clone()))
                .collect();
            let label = mapped
                .map(|tuple| truth_keys.contains(&(category, tuple)))
                .unwrap_or(false);
            let features = rel_features(category, &members)?;
            let entry = rows.entry(category).or_default();
            entry.0.push(features);
            entry.1.push(label);
        }

        for edge in diagram.truth.edges() {
            if edge.category.is_canvas() {
                let node = diagram
                    .truth
                    .node(&edge.members[0])
                    .expect("validated member");
                samples
                    .entry(edge.category)
                    .or_default()
                    .push(node.bbox.center());
            }
        }
    }

    let mut models = ProposalModels::empty(radius);
    for (category, (features, labels)) in rows {
        if features.len() < 2 {
            log::warn!("category {category}: fewer than 2 training tuples, skipping forest");
            continue;
        }
        let forest = train_classifier(&features, &labels, rf_params)?;
        if forest.degenerate {
            log::info!("category {category}: single-class data, degenerate constant forest");
        }
        models.forests.insert(category, forest);
    }
    for (category, points) in samples {
        models
            .positions
            .insert(category, PositionModel::fit(&points, None)?);
    }
    Ok(models)
}

/// Enumerates legal tuples within the pruning radius and scores them: the
/// category forest for R1–R6, the peak-normalized positional KDE for
/// R7–R10. Candidates come back sorted by score descending (ties by id).
/// Categories without a fitted model are emitted with score 0.
pub fn propose_relationships(
    constituents: &[Constituent],
    radius: f64,
    models: &ProposalModels,
) -> Result<CandidateSet, ProposalError> {
    let refs: Vec<&Constituent> = constituents.iter().collect();
    let tuples = enumerate_legal_tuples(&refs, radius)?;

    let mut relationships = Vec::with_capacity(tuples.len());
    for (index, (category, members)) in tuples.iter().enumerate() {
        let score = if category.is_canvas() {
            match models.positions.get(category) {
                Some(model) => {
                    let (cx, cy) = members[0].bbox.center();
                    model.score(cx, cy)
                }
                None => 0.0,
            }
        } else {
            match models.forests.get(category) {
                Some(forest) => forest.predict(&rel_features(*category, members)?),
                None => 0.0,
            }
        };
        relationships.push(Relationship::new(
            format!("p{index:05}"),
            *category,
            members.iter().map(|m| m.id.clone()).collect(),
            score,
        ));
    }
    relationships.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then_with(|| a.id.cmp(&b.id))
    });

    Ok(CandidateSet::new(
        constituents.iter().cloned(),
        relationships,
        Provenance::Ingested,
    )?)
}

//! Diagram parse graphs and everything needed to infer and use them:
//! candidate generation, sequential and search-based parsers, a graph
//! similarity metric, attention-based question answering over verbalized
//! relations, and a deterministic synthetic corpus generator.

pub mod candidates;
pub mod dpg;
pub mod dqa;
pub mod dsdp;
pub mod forest;
pub mod geom;
pub mod io;
pub mod kde;
pub mod metrics;
pub mod nn;
pub mod proposals;
pub(crate) mod rngutil;

pub use candidates::{CandidateSet, DpgAccumulator, Provenance};
pub use dpg::{
    Constituent, ConstituentCategory, ConstituentId, Dpg, RelationSentence, Relationship,
    RelationshipCategory, RelationshipId, ValidationError, Violation,
};
pub use geom::BBox;
pub use metrics::{jig, JigScore, MatchConfig};

//! Object-concept repository, relative directions and their atomic action
//! concepts, top-k object mapping, and pooled action-object features.

mod action;
mod direction;
mod mapping;
mod repository;

pub use action::{map_action_concept, ActionConcept, BOUNDARY_SNAP};
pub use direction::{relative_direction, Direction, RelativeDirection};
pub use mapping::{
    action_object_phrase, concept_distribution, encode_actional_concept, map_object_concepts, renormalize_topk,
    ActionalAtomicConcept, PhraseCache, PROB_SUM_TOL,
};
pub(crate) use mapping::topk_indices;
pub use repository::{build_repository, concept_phrase, Concept, ConceptRepository, PHRASE_TEMPLATE};

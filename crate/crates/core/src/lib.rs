//! Metamorphic testing of multi-turn question answering systems.
//!
//! Dialogues are perturbed (shuffled, reduced, duplicated), each perturbed
//! round is tagged answerable or unanswerable from information graphs, a
//! system under test answers the perturbed dialogues, and three metamorphic
//! relations over mixed similarity scores flag inconsistent answers.

pub mod answerability;
pub mod chat;
pub mod coref;
pub mod dialogue;
pub mod error;
pub mod extract;
pub mod graph;
pub mod perturb;
pub mod scoring;
pub mod sidecar;
pub mod sut;
pub mod artifact;
pub mod oracle;
pub mod pipeline;
pub mod report;

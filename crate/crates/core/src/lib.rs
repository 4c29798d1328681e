//! Chain-guided retrieval-augmented visual question answering.
//!
//! A question about an image is decomposed into a chain of sub-questions
//! ([`chaingen`]), each sub-question drives a knowledge retrieval pass
//! ([`retrieval`]), and the retrieved material is assembled into a final
//! answering prompt ([`promptctor`]). [`prefopt`] holds the preference loss
//! suite used to align the decomposer, [`evalharness`] scores pipeline runs.

pub mod backends;
pub mod chaingen;
pub mod cli;
pub mod config;
pub mod evalharness;
pub mod prefopt;
pub mod promptctor;
pub mod retrieval;

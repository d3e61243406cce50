//! Text-conditioned indoor scene synthesis with likelihood-based furniture
//! retrieval.

pub mod annotation;
pub mod config;
pub mod decorate;
pub mod gateway;
pub mod layout;
pub mod metrics;
mod par;
pub mod pipeline;
pub mod scene;
pub mod templates;

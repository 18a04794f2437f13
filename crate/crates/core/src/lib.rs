//! Point-level position estimates from sparse cell-tower (CDR) trajectories.
//!
//! The pipeline calibrates coverage-circle radii against GPS fixes, runs a
//! Move/Stay switching Kalman filter and smoother over each subscriber's
//! cell sequence, snaps Move estimates onto roads, and scores the result
//! against annotated ground truth. [`sim`] generates seeded synthetic worlds
//! in the same file formats.

pub mod coverage;
pub mod eval;
pub mod geo;
pub mod ingest;
pub mod mapmatch;
pub mod pipeline;
pub mod sim;
pub mod skf;

//! Data reduction for cryo-EM image stacks.
//!
//! Images are ingested into a chunked datastore, reduced by a map-reduce PCA
//! (mean, covariance, correlation, Jacobi SVD, eigenspace projection) and
//! triaged into KEEP/DISCARD by robust distance in score space. A cost model
//! prices the storage and compute involved under several cloud pricing
//! schemes.

pub mod cost;
pub mod covariance;
pub mod ingest;
pub mod linalg;
pub mod mapreduce;
pub mod pca;
pub mod pipeline;
pub mod triage;

pub mod field;
pub mod lattice;
pub mod rng;
pub mod forest;
pub mod metrics;
pub mod stats;
pub mod pruning;
pub mod geometry;
pub mod environment;
pub mod pipeline;
pub mod walker;
pub mod oracle;
pub mod mixing;
pub mod report;

pub mod corpus;
pub mod decoder;
pub mod exec;
pub mod export;
pub mod fpu;
pub mod lattice;
pub mod metrics;
pub mod model;
pub mod trainer;

pub mod checkpoint;
pub mod corpus;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod trainer;

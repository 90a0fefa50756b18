pub mod environment;
pub mod experiments;
pub mod factorgraph;
pub mod gaussian;
pub mod layers;
pub mod metrics;
pub mod sim;

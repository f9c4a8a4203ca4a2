pub mod central_baseline;
pub mod codec;
pub mod harness;
pub mod protocol;
pub mod schedule;
pub mod spacetree;
pub mod topology;
pub mod transport;

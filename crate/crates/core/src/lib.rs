pub mod bridge;
pub mod dynamics;
pub mod fmt;
pub mod harness;
pub mod learning;
pub mod model;

pub mod harness;
pub mod props;
pub mod reference;

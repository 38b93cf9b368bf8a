//! The 7-level residual U-Net: graph layout, residual units, parameter
//! storage, checkpointing, and whole-network forward/backward passes.

pub mod graph;
pub mod net;
pub mod params;
pub mod unit;

pub use graph::{ModelGraph, ResidualUnitSpec, UnitWiring, BASE_WIDTHS};
pub use net::{forward_infer, forward_infer_traced, Mode, ResUnet};
pub use params::{
    is_learnable, InputScaling, ParamStore, StoreMeta, BN_EPSILON, BN_MOMENTUM, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use unit::{unit_backward, unit_forward_infer, unit_forward_train, UnitTape};

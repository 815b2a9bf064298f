//! Linear state-space sequence kernels and the selective (gated) block.

mod discrete;
mod selective;

pub use discrete::{
    apply_conv, build_conv_kernel, scan_recurrent, zoh_discretize, zoh_discretize_with, ConvKernel,
    DiscreteSsm, SsmParams, SINGULAR_THRESHOLD,
};
pub use selective::{
    bidirectional_scan, selective_block, selective_scan, GateActivation, Merge,
    SelectiveBlockParams,
};

//! Selective state-space kernels and the Mamba block built on them.

pub mod block;
pub mod scan;

pub use block::{MambaBlock, MambaBlockConfig, MambaVariant};
pub use scan::{
    selective_scan_backward, selective_scan_sequential, ssd_scan_chunked, ScanGrads, ScanParams,
    ScanState, StateMatrix,
};

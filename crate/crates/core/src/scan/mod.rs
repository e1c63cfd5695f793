//! Grid-to-sequence routes and the selective state-space scan run along them.

pub mod fs2d;
pub mod route;
pub mod ssm;

pub use fs2d::{deserialize, deserialize_tensor, fs2d, route_scan, serialize, serialize_tensor, DirectionalSequences};
pub use route::{make_route, ScanRoute, ScanStrategy};
pub use ssm::{
    a_log_init, scan_recurrence, selective_scan, selective_scan_components, selective_scan_tape, ssm_vars, SsmLayer,
    SsmParams, SsmVars, DEFAULT_STATE_SIZE,
};

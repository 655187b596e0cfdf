//! Library side of the `rollcall` binary; the simulator lives here so the
//! acceptance suite can drive it in process too.

pub mod sim;

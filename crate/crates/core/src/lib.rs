pub mod linalg;
pub mod cmps;
pub mod cavity;
pub mod lieb_liniger;
pub mod trace_dsp;
pub mod calibration;

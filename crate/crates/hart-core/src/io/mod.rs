//! External data formats: PPM images and the checkpoint container.

pub mod checkpoint;
pub mod ppm;

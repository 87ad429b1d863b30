//! File formats, image IO and the command implementations behind the `gcnet`
//! binary.

pub mod bench;
pub mod check;
pub mod image;
pub mod model_file;
pub mod segment;

//! On-disk formats: STNT tensor files, binary PPM/PGM images, and the
//! checkpoint archive bundling named tensors with a manifest.

pub mod archive;
pub mod pnm;
pub mod stnt;

pub use archive::{read_archive, write_archive};
pub use pnm::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use stnt::{tensor_from_bytes, tensor_load, tensor_save, tensor_to_bytes};

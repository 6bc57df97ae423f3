//! Synthetic fluorescence-style microscopy data plus the on-disk formats.
//!
//! Images are elliptical cells with radial falloff over a dark background, optionally
//! clustered, blurred by a per-image Gaussian and corrupted with additive noise, then
//! area-averaged down to the output size. Masks are drawn before the blur.

mod gen;
mod manifest;
mod pgm;

pub use gen::{
    generate_dataset, generate_sample, render_cells, CellPlacement, GenConfig, SampleMeta,
    SyntheticSample,
};
pub use manifest::{read_manifest, write_manifest, Manifest, ManifestEntry, MANIFEST_HEADER};
pub use pgm::{decode_pgm, encode_pgm, encode_pgm_ascii, read_pgm, write_pgm, GrayImage};

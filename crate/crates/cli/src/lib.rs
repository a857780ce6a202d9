//! IO, file formats, and the end-to-end enhancement entry point for the
//! `darklift` tool. The numerics live in `darklift-core`; this crate adds
//! the raw-frame container (16-bit PGM + JSON sidecar), sRGB image files
//! (PNG / binary PPM), the binary checkpoint format, dataset manifests,
//! procedural toy scenes, and the CLI.

pub mod checkpoint;
pub mod enhance;
pub mod images;
pub mod manifest;
pub mod pgm;
pub mod scenes;

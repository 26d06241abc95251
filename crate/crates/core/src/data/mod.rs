//! Dataset tooling: binary formats, manifests, the object lexicon, and the
//! synthetic generator.

pub mod bag;
pub mod bundle;
pub mod manifest;
pub mod synth;
pub mod wire;

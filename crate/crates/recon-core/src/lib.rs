//! Monocular reconstruction of tube-like interiors from video frames.
//!
//! The crate covers the full chain: synthetic scene generation and
//! rendering, frame pre-processing and binary features, two-view geometry,
//! bundle adjustment, keyframe SLAM with densification, point-cloud
//! cleaning, Poisson surface reconstruction, and alignment-based error
//! metrics against a ground-truth mesh.

pub mod align;
pub mod bundle;
pub mod epipolar;
pub mod features;
pub mod geometry;
pub mod image;
pub mod io;
pub mod mesh;
pub mod pipeline;
pub mod slam;
pub mod spatial;
pub mod surface;
pub mod synth;

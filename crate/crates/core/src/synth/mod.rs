//! Synthetic image pairs with known ground-truth homographies.
//!
//! Image B is a perspective warp of image A followed by photometric
//! damage (illumination ramps, shadows, highlights, occluders, noise).

mod dataset;
mod distort;
mod image;
mod pair;

pub use dataset::{
    generate_dataset, generate_indexed_pair, pair_seed, read_dataset, read_manifest, read_pair,
    write_dataset, Manifest, SourceImages, MANIFEST_FILE,
};
pub use distort::{
    add_gaussian_noise, add_illumination_gradient, add_occluder, add_shadow_polygon,
    add_specular_highlight, random_homography, warp_image, ConvexPolygon, Fill, Highlight,
    Occluder, OccluderShape,
};
pub use image::{procedural_image, FloatImage, Image, MIN_SIDE};
pub use pair::{generate_pair, DistortionConfig, SamplePair};

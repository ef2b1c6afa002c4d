//! Images, labeled datasets and synthetic generators.

mod dataset;
mod image;
mod patch;
mod ppm;
mod shapes;
mod vectors;

pub use dataset::{is_held_out, LabeledDataset, Split};
pub use image::ImageTensor;
pub use patch::{patchify, unpatchify};
pub use ppm::{decode_ppm, encode_ppm, load_ppm, save_ppm};
pub use shapes::{gen_shapes, ShapeKind, IMAGE_SIZE};
pub use vectors::{gen_vectors, MixtureSpec};

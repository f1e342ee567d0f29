//! Load MNIST IDX files and print split sizes and class counts.
//!
//! cargo run --release --example load_mnist -- path/to/mnist

use std::path::PathBuf;

use wfnet::data::{load_idx, Split};

fn main() -> wfnet::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data/mnist".into()));
    for (split, images, labels) in [
        (Split::Train, "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        (Split::Test, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ] {
        let ds = load_idx(&dir.join(images), &dir.join(labels), split)?;
        println!("{split:?}: {} images of {}x{}, classes {:?}", ds.len(), ds.image_size(), ds.image_size(), ds.class_counts());
    }
    Ok(())
}

//! Save a gated model to disk and load it back bit-exactly.
//!
//! cargo run --release --example checkpoint_roundtrip

use wfnet::checkpoint::{load_file, read_manifest, save_gated, write_file};
use wfnet::models::{ArchId, ArchSpec, Model};
use wfnet::wf::{wf_wrap, LayerSelection};

fn main() -> wfnet::Result<()> {
    let model = wf_wrap(Model::new(ArchSpec::new(ArchId::SmallCnn, 5, 16)?, 0)?, &LayerSelection::Default)?;
    let bytes = save_gated(&model)?;
    let (manifest, blob) = read_manifest(&bytes)?;
    println!("{} tensors, blob {} bytes, sha256 {}", manifest.tensors.len(), blob.len(), manifest.sha256);
    for t in manifest.tensors.iter().take(4) {
        println!("  {:<18} {:?} @ {}", t.name, t.shape, t.offset);
    }

    let path = std::env::temp_dir().join("wfnet_example.ckpt");
    write_file(&path, &bytes)?;
    let loaded = load_file(&path)?.into_gated()?;
    println!("reloaded from {}: identical bytes on re-save: {}", path.display(), save_gated(&loaded)? == bytes);
    std::fs::remove_file(&path)?;
    Ok(())
}

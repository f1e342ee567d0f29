//! Generate the synthetic benchmark and draw each class prototype as ASCII.
//!
//! cargo run --release --example synthetic_data

use wfnet::data::{synth_dataset, synth_prototypes, SynthSpec};

fn main() -> wfnet::Result<()> {
    let spec = SynthSpec::default();
    let data = synth_dataset(&spec)?;
    println!(
        "{} classes, {}x{} px: train {} / val {} / test {}",
        spec.n_classes,
        spec.image_size,
        spec.image_size,
        data.train.len(),
        data.val.len(),
        data.test.len()
    );
    let protos = synth_prototypes(spec.n_classes, spec.image_size);
    let ramp = [' ', '.', ':', '+', '#'];
    for c in 0..spec.n_classes {
        println!("class {c}");
        let px = spec.image_size * spec.image_size;
        let img = &protos.data()[c * px..][..px];
        for row in img.chunks(spec.image_size) {
            let line: String = row.iter().map(|v| ramp[((v.clamp(0.0, 0.999)) * ramp.len() as f64) as usize]).collect();
            println!("  {line}");
        }
    }
    Ok(())
}

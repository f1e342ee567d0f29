//! Train both architectures on the synthetic 5-class set and report validation accuracy.
//!
//! cargo run --release --example train_baseline

use std::time::Instant;

use wfnet::data::{synth_dataset, SynthSpec};
use wfnet::models::{train_baseline, ArchId, ArchSpec, TrainConfig};

fn main() -> wfnet::Result<()> {
    let data = synth_dataset(&SynthSpec::default())?;
    for arch in [ArchId::SmallCnn, ArchId::TinyVit] {
        let spec = ArchSpec::new(arch, 5, 16)?;
        let start = Instant::now();
        let out = train_baseline(spec, &data.train, &data.val, &TrainConfig::default())?;
        println!(
            "{arch}: {} params, val accuracy {:.3} after {} epochs ({:.1}s)",
            out.model.param_count(),
            out.val_accuracy,
            out.epochs_run,
            start.elapsed().as_secs_f64()
        );
        for r in &out.history {
            println!("  epoch {:>2}  loss {:.4}  val {:.3}", r.epoch, r.train_loss, r.val_accuracy);
        }
    }
    Ok(())
}

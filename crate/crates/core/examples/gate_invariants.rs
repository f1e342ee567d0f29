//! Wrap a model with per-class gates and show the two structural guarantees:
//! masking off reproduces the base model exactly, and editing one class's
//! gates never changes the outputs under another class's selector.
//!
//! cargo run --release --example gate_invariants

use wfnet::data::{synth_dataset, SynthSpec};
use wfnet::models::{ArchId, ArchSpec, Model};
use wfnet::wf::{wf_wrap, LayerSelection};

fn main() -> wfnet::Result<()> {
    let data = synth_dataset(&SynthSpec::default())?;
    let images = data.test.images();
    for arch in [ArchId::SmallCnn, ArchId::TinyVit] {
        let base = Model::new(ArchSpec::new(arch, 5, 16)?, 1)?;
        let mut wf = wf_wrap(base.clone(), &LayerSelection::Default)?;
        println!("{arch}: {} gate elements over layers {:?}", wf.gate_count(), wf.layers().iter().map(|l| &l.name).collect::<Vec<_>>());

        wf.set_masking(false);
        let same = wf.logits(images, 0)?.data() == base.logits(images)?.data();
        println!("  masking off, logits identical to base: {same}");

        wf.set_masking(true);
        let before = wf.logits(images, 1)?;
        let gate = wf.layers()[0].gate_weights.clone();
        gate.row_mut(wf.store_mut(), 0).iter_mut().for_each(|a| *a = -3.0);
        let after = wf.logits(images, 1)?;
        println!("  row 0 closed, selector-1 logits unchanged: {}", before.data() == after.data());
    }
    Ok(())
}

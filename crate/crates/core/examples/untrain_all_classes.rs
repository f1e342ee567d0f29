//! Train a baseline, then untrain every class in one round and report
//! per-class forget and retain accuracy.
//!
//! cargo run --release --example untrain_all_classes [small_cnn|tiny_vit]

use std::time::Instant;

use wfnet::data::{synth_dataset, SynthSpec};
use wfnet::metrics::{forget_accuracy, retain_accuracy};
use wfnet::models::{train_baseline, ArchId, ArchSpec, TrainConfig};
use wfnet::untrain::{untrain, UntrainConfig};
use wfnet::wf::{wf_wrap, LayerSelection};

fn main() -> wfnet::Result<()> {
    let arch = match std::env::args().nth(1) {
        Some(a) => ArchId::parse(&a)?,
        None => ArchId::SmallCnn,
    };
    let data = synth_dataset(&SynthSpec::default())?;
    let spec = ArchSpec::new(arch, 5, 16)?;
    let base = train_baseline(spec, &data.train, &data.val, &TrainConfig::default())?.model;
    let mut model = wf_wrap(base, &LayerSelection::Default)?;
    let cfg = UntrainConfig::for_arch(arch);

    let start = Instant::now();
    let out = untrain(&mut model, &data.train, &data.val, &cfg)?;
    println!(
        "{arch}: {} steps over {} epochs, best step {} (val L {:.4}), {:.1}s",
        out.steps,
        out.epochs,
        out.best_step,
        out.best_val_loss,
        start.elapsed().as_secs_f64()
    );
    for h in out.history.iter().step_by(10) {
        println!("  step {:>3}  S_r {:.4}  S_u {:.4}  R {:.4}  L {:.4}  val {:.4}", h.step, h.s_r, h.s_u, h.r, h.l, h.val_l);
    }
    for c in 0..model.n_classes() {
        let forget = forget_accuracy(&model, &data.test, c)?;
        let retain = retain_accuracy(&model, &data.test, c)?;
        println!("class {c}: Acc_f {forget:.3}  Acc_r {retain:.3}");
    }
    Ok(())
}

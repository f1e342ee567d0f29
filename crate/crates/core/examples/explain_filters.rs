//! Untrain a SmallCNN, then list which conv2 filters each class relies on
//! and which filters are shared between classes.
//!
//! cargo run --release --example explain_filters

use wfnet::data::{synth_dataset, SynthSpec};
use wfnet::explain::{filter_relevance, shared_filter_graph, top_filters};
use wfnet::models::{train_baseline, ArchId, ArchSpec, TrainConfig};
use wfnet::untrain::{untrain, UntrainConfig};
use wfnet::wf::{wf_wrap, LayerSelection};

fn main() -> wfnet::Result<()> {
    let data = synth_dataset(&SynthSpec::default())?;
    let base = train_baseline(ArchSpec::new(ArchId::SmallCnn, 5, 16)?, &data.train, &data.val, &TrainConfig::default())?;
    let mut model = wf_wrap(base.model, &LayerSelection::Default)?;
    untrain(&mut model, &data.train, &data.val, &UntrainConfig { max_epochs: 30, ..UntrainConfig::for_arch(ArchId::SmallCnn) })?;

    let rel = filter_relevance(&model, "conv2")?;
    let top = top_filters(&rel, 5)?;
    for (c, list) in top.iter().enumerate() {
        let items: Vec<String> = list.iter().map(|f| format!("#{}({:.2})", f.filter, f.relevance)).collect();
        println!("class {c}: {}", items.join(" "));
    }
    let graph = shared_filter_graph("conv2", &top, 2)?;
    println!("filters in the top-5 of at least 2 classes:");
    for (filter, degree) in graph.filter_degrees() {
        println!("  #{filter}: {degree} classes");
    }
    graph.write_csv(std::io::stdout().lock())?;
    Ok(())
}

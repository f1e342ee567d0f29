//! Train, untrain and score a SmallCNN on the synthetic set: forget/retain
//! accuracy, ZRF, distances to leave-one-out retrained models, and gate
//! insertion/deletion curves.
//!
//! cargo run --release --example evaluate_unlearning

use wfnet::config::{Overrides, RunConfig};
use wfnet::commands::{cmd_retrain_all, cmd_train, cmd_untrain, evaluate, ClassSelection, BASELINE_FILE, GATED_FILE, ORACLE_DIR};
use wfnet::checkpoint::load_file;

fn main() -> wfnet::Result<()> {
    let out = std::env::temp_dir().join("wfnet_evaluate_example");
    let cfg = RunConfig::from_toml_str(
        "[dataset]\nkind = \"synthetic\"\n",
        &Overrides { seed: Some(0), out: Some(out.clone()) },
    )?;
    cmd_train(&cfg)?;
    cmd_untrain(&cfg, &cfg.path(BASELINE_FILE))?;
    cmd_retrain_all(&cfg)?;

    let model = load_file(&cfg.path(GATED_FILE))?.into_gated()?;
    let test = cfg.dataset.load()?.test;
    let report = evaluate(&cfg, &model, &test, ClassSelection::All, Some(&cfg.path(ORACLE_DIR)))?;
    for r in [&report.unlearned, &report.original] {
        r.write_table(std::io::stdout().lock())?;
        println!();
    }
    for c in &report.curves {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |f| format!("{:.0}%", 100.0 * f));
        println!(
            "class {}: deletion below 0.5 at {}, insertion above 0.5 at {}",
            c.class,
            pct(c.deletion.first_below(0.5)),
            pct(c.insertion.first_above(0.5))
        );
    }
    std::fs::remove_dir_all(&out)?;
    Ok(())
}

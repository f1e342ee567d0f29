//! The pipeline steps behind the `wfnet` subcommands. Each reads its inputs,
//! writes its outputs under the run's `out` directory and returns a report.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_file, save_gated, save_model, write_file};
use crate::config::{RunConfig, UntrainSource};
use crate::diagnostics::{gradcheck_suite, GradCheckRow};
use crate::error::{Error, Result};
use crate::explain::{explain_layer, AssociationGraph};
use crate::metrics::{
    accuracy, activation_distance, deletion_curve, forget_accuracy, insertion_curve, mean_js_divergence,
    other_class_curve, retain_accuracy, zrf, ClassMetrics, Curve, MetricsReport, DEFAULT_STEP_FRACTION,
};
use crate::models::{retrain_without_class, train_baseline, ArchSpec, Classifier, EpochRecord, Model};
use crate::untrain::{untrain, write_history_jsonl};
use crate::wf::{wf_wrap, LayerSelection, WfModel};

pub const BASELINE_FILE: &str = "baseline.ckpt";
pub const GATED_FILE: &str = "wf.ckpt";
pub const ORACLE_DIR: &str = "oracles";
/// Offset added to the run seed for the randomly initialized model used by ZRF.
const RANDOM_TWIN_SEED_OFFSET: u64 = 0x2F;

pub fn oracle_file(class: usize) -> String {
    format!("oracle_class{class}.ckpt")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn arch_spec(cfg: &RunConfig, n_classes: usize, image_size: usize) -> Result<ArchSpec> {
    ArchSpec::new(cfg.arch, n_classes, image_size)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub arch: String,
    pub seed: u64,
    pub epochs_run: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub seconds: f64,
    pub history: Vec<EpochRecord>,
}

/// Train the baseline; writes `baseline.ckpt`, `train_report.json` and the resolved config.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let start = Instant::now();
    let data = cfg.dataset.load()?;
    let spec = arch_spec(cfg, data.train.n_classes(), data.train.image_size())?;
    let outcome = train_baseline(spec, &data.train, &data.val, &cfg.train)?;
    let report = TrainReport {
        arch: cfg.arch.to_string(),
        seed: cfg.train.seed,
        epochs_run: outcome.epochs_run,
        val_accuracy: outcome.val_accuracy,
        test_accuracy: accuracy(&outcome.model, &data.test, None)?,
        seconds: start.elapsed().as_secs_f64(),
        history: outcome.history,
    };
    write_file(&cfg.path(BASELINE_FILE), &save_model(&outcome.model)?)?;
    write_json(&cfg.path("train_report.json"), &report)?;
    write_file(&cfg.path("config.toml"), cfg.to_toml()?.as_bytes())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub excluded_class: usize,
    pub checkpoint: PathBuf,
    pub epochs_run: usize,
    pub val_accuracy: f64,
    /// Test accuracy on the classes it was trained on.
    pub retain_accuracy: f64,
}

/// Train one leave-one-class-out model per class into `oracles/`.
pub fn cmd_retrain_all(cfg: &RunConfig) -> Result<Vec<OracleReport>> {
    let data = cfg.dataset.load()?;
    let spec = arch_spec(cfg, data.train.n_classes(), data.train.image_size())?;
    let dir = cfg.path(ORACLE_DIR);
    let mut reports = Vec::with_capacity(spec.n_classes);
    for c in 0..spec.n_classes {
        let outcome = retrain_without_class(spec, &data.train, &data.val, c, &cfg.train)?;
        let path = dir.join(oracle_file(c));
        write_file(&path, &save_model(&outcome.model)?)?;
        reports.push(OracleReport {
            excluded_class: c,
            checkpoint: path,
            epochs_run: outcome.epochs_run,
            val_accuracy: outcome.val_accuracy,
            retain_accuracy: accuracy(&outcome.model, &data.test.without_class(c), None)?,
        });
    }
    write_json(&dir.join("report.json"), &reports)?;
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UntrainReport {
    pub steps: usize,
    pub epochs: usize,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub source: UntrainSource,
    pub seconds: f64,
}

/// Wrap the baseline and untrain every class at once; writes `wf.ckpt`,
/// `untrain_history.jsonl` and `untrain_report.json`.
pub fn cmd_untrain(cfg: &RunConfig, baseline: &Path) -> Result<UntrainReport> {
    let start = Instant::now();
    let data = cfg.dataset.load()?;
    let base = load_file(baseline)?.into_plain()?;
    let mut model = wf_wrap(base, &LayerSelection::Default)?;
    let stream = match cfg.untrain_source {
        UntrainSource::Train => &data.train,
        UntrainSource::Val => &data.val,
    };
    let outcome = untrain(&mut model, stream, &data.val, &cfg.untrain)?;
    write_file(&cfg.path(GATED_FILE), &save_gated(&model)?)?;
    let mut history = BufWriter::new(File::create(cfg.path("untrain_history.jsonl"))?);
    write_history_jsonl(&mut history, &outcome.history)?;
    let report = UntrainReport {
        steps: outcome.steps,
        epochs: outcome.epochs,
        best_step: outcome.best_step,
        best_val_loss: outcome.best_val_loss,
        stopped_early: outcome.stopped_early,
        source: cfg.untrain_source,
        seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&cfg.path("untrain_report.json"), &report)?;
    Ok(report)
}

/// `--class INT|all`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClassSelection {
    #[default]
    All,
    One(usize),
}

impl FromStr for ClassSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(ClassSelection::All);
        }
        s.parse()
            .map(ClassSelection::One)
            .map_err(|_| Error::InvalidArgument(format!("class must be an integer or `all`, got `{s}`")))
    }
}

impl ClassSelection {
    pub fn classes(self, n_classes: usize) -> Result<Vec<usize>> {
        match self {
            ClassSelection::All => Ok((0..n_classes).collect()),
            ClassSelection::One(c) if c < n_classes => Ok(vec![c]),
            ClassSelection::One(c) => Err(Error::LabelOutOfRange { label: c, classes: n_classes }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCurves {
    pub class: usize,
    pub insertion: Curve,
    pub deletion: Curve,
    pub other_class: Curve,
}

/// Metrics of the unlearned model, with the original model (and the
/// retrained oracles, when given) scored the same way for comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub unlearned: MetricsReport,
    pub original: MetricsReport,
    pub retrained: Option<MetricsReport>,
    pub curves: Vec<ClassCurves>,
}

struct Scored {
    acc_forget: f64,
    acc_retain: f64,
    distance: Option<f64>,
    js: Option<f64>,
    zrf: f64,
}

fn score(
    model: &dyn Classifier,
    test: &crate::data::Dataset,
    class: usize,
    oracle: Option<&Model>,
    twin: &Model,
    gated: bool,
) -> Result<Scored> {
    let forget = test.of_class(class);
    let (acc_forget, acc_retain) = if gated {
        (forget_accuracy(model, test, class)?, retain_accuracy(model, test, class)?)
    } else {
        (accuracy(model, &forget, None)?, accuracy(model, &test.without_class(class), None)?)
    };
    let oracle = oracle.map(|o| o as &dyn Classifier);
    let (distance, js) = match oracle {
        Some(_) => (
            Some(activation_distance(model, oracle, forget.images(), class)?),
            Some(mean_js_divergence(model, oracle, forget.images(), class)?),
        ),
        None => (None, None),
    };
    Ok(Scored { acc_forget, acc_retain, distance, js, zrf: zrf(model, twin, forget.images(), class)? })
}

fn metrics(class: usize, s: Scored, curves: Option<&ClassCurves>) -> ClassMetrics {
    ClassMetrics {
        class,
        acc_retain: s.acc_retain,
        acc_forget: s.acc_forget,
        activation_distance: s.distance,
        js_divergence: s.js,
        zrf: s.zrf,
        insertion_auc: curves.map(|c| c.insertion.auc()),
        deletion_auc: curves.map(|c| c.deletion.auc()),
    }
}

/// Load `oracle_class{c}.ckpt` for every class in `classes` from `dir`.
pub fn load_oracles(dir: &Path, classes: &[usize], n_classes: usize) -> Result<Vec<Option<Model>>> {
    let mut oracles: Vec<Option<Model>> = vec![None; n_classes];
    for &c in classes {
        oracles[c] = Some(load_file(&dir.join(oracle_file(c)))?.into_plain()?);
    }
    Ok(oracles)
}

/// Evaluate a gated checkpoint on the test split; writes `metrics.json`,
/// `metrics.txt` and one CSV per curve under `curves/`.
pub fn cmd_eval(
    cfg: &RunConfig,
    gated: &Path,
    selection: ClassSelection,
    oracle_dir: Option<&Path>,
) -> Result<EvalReport> {
    let data = cfg.dataset.load()?;
    let model = load_file(gated)?.into_gated()?;
    let report = evaluate(cfg, &model, &data.test, selection, oracle_dir)?;
    write_json(&cfg.path("metrics.json"), &report)?;
    let mut table = Vec::new();
    for r in std::iter::once(&report.unlearned).chain([&report.original]).chain(&report.retrained) {
        r.write_table(&mut table)?;
        table.push(b'\n');
    }
    write_file(&cfg.path("metrics.txt"), &table)?;
    let dir = cfg.path("curves");
    std::fs::create_dir_all(&dir)?;
    for c in &report.curves {
        for (name, curve) in [("insertion", &c.insertion), ("deletion", &c.deletion), ("other_class", &c.other_class)] {
            curve.write_csv(File::create(dir.join(format!("{name}_class{}.csv", c.class)))?)?;
        }
    }
    Ok(report)
}

/// The computation behind [`cmd_eval`], without file output.
pub fn evaluate(
    cfg: &RunConfig,
    model: &WfModel,
    test: &crate::data::Dataset,
    selection: ClassSelection,
    oracle_dir: Option<&Path>,
) -> Result<EvalReport> {
    let n = model.n_classes();
    let classes = selection.classes(n)?;
    let original = model.clone().into_base();
    let twin = Model::new(original.spec(), cfg.seed.wrapping_add(RANDOM_TWIN_SEED_OFFSET))?;
    let oracles = match oracle_dir {
        Some(dir) => load_oracles(dir, &classes, n)?,
        None => vec![None; n],
    };
    let mut gated = model.clone();
    gated.set_masking(true);
    let report = |name: &str, classes| MetricsReport {
        model: name.to_string(),
        dataset: match &cfg.dataset {
            crate::config::DatasetConfig::Synthetic(_) => "synthetic".into(),
            crate::config::DatasetConfig::Idx(_) => "idx".into(),
        },
        seeds: vec![cfg.seed],
        classes,
    };
    let (mut unlearned, mut orig, mut retrained, mut curves) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &c in &classes {
        let cc = ClassCurves {
            class: c,
            insertion: insertion_curve(&gated, &original, test, c, DEFAULT_STEP_FRACTION)?,
            deletion: deletion_curve(&gated, &original, test, c, DEFAULT_STEP_FRACTION)?,
            other_class: other_class_curve(&gated, &original, test, c, DEFAULT_STEP_FRACTION)?,
        };
        let oracle = oracles[c].as_ref();
        unlearned.push(metrics(c, score(&gated, test, c, oracle, &twin, true)?, Some(&cc)));
        orig.push(metrics(c, score(&original, test, c, oracle, &twin, false)?, None));
        if let Some(o) = oracle {
            retrained.push(metrics(c, score(o, test, c, None, &twin, false)?, None));
        }
        curves.push(cc);
    }
    Ok(EvalReport {
        unlearned: report("wf_unlearned", unlearned),
        original: report("original", orig),
        retrained: (!retrained.is_empty()).then(|| report("retrained", retrained)),
        curves,
    })
}

/// Export the class/filter graph of one gated layer, or of every gated layer
/// when `layer` is `None`; writes `explain_<layer>.csv` and `.json` under `out`.
pub fn cmd_explain(
    gated: &Path,
    out: &Path,
    layer: Option<&str>,
    top_k: usize,
    min_classes: usize,
) -> Result<Vec<AssociationGraph>> {
    let model = load_file(gated)?.into_gated()?;
    let layers: Vec<String> = match layer {
        Some(l) => vec![l.to_string()],
        None => model.layers().iter().map(|l| l.name.clone()).collect(),
    };
    std::fs::create_dir_all(out)?;
    let mut graphs = Vec::with_capacity(layers.len());
    for name in layers {
        let graph = explain_layer(&model, &name, top_k, min_classes)?;
        let stem = name.replace(['.', '/'], "_");
        graph.write_csv(File::create(out.join(format!("explain_{stem}.csv")))?)?;
        write_file(&out.join(format!("explain_{stem}.json")), graph.to_json()?.as_bytes())?;
        graphs.push(graph);
    }
    Ok(graphs)
}

/// Run the gradient-check suite; writes `gradcheck.json` under `out` when given.
pub fn cmd_gradcheck(out: Option<&Path>) -> Result<Vec<GradCheckRow>> {
    let rows = gradcheck_suite()?;
    if let Some(out) = out {
        write_json(&out.join("gradcheck.json"), &rows)?;
    }
    Ok(rows)
}

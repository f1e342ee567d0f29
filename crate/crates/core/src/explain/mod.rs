//! Filter-to-class associations read off the learned gates.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wf::WfModel;

/// Per-class filter relevance `1 − σ(raw α)` of one gated layer's weight gates.
///
/// Higher means the gate was closed harder when untraining that class, so the
/// filter matters more for it.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterRelevance {
    pub layer: String,
    /// `[N_c, K]`.
    pub relevance: Tensor,
}

impl FilterRelevance {
    /// Wrap a relevance matrix directly; entries must lie strictly inside `(0, 1)`.
    pub fn from_matrix(layer: impl Into<String>, relevance: Tensor) -> Result<Self> {
        if relevance.shape().len() != 2 {
            return Err(Error::shape("filter_relevance", format!("expected [N_c, K], got {:?}", relevance.shape())));
        }
        if let Some(v) = relevance.data().iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::InvalidArgument(format!("relevance {v} outside (0, 1)")));
        }
        Ok(FilterRelevance { layer: layer.into(), relevance })
    }

    pub fn n_classes(&self) -> usize {
        self.relevance.shape()[0]
    }

    pub fn n_filters(&self) -> usize {
        self.relevance.shape()[1]
    }
}

/// Relevance of every filter of the gated layer `layer` for every class.
pub fn filter_relevance(model: &WfModel, layer: &str) -> Result<FilterRelevance> {
    let l = model.layer(layer)?;
    let raw = l.gate_weights.raw(model.store());
    let inverted = raw.map(|a| 1.0 - sigmoid(a));
    FilterRelevance::from_matrix(layer, inverted)
}

/// One entry of a class's top-k list.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedFilter {
    pub filter: usize,
    pub relevance: f64,
}

/// For each class, the `k` most relevant filters in descending order; ties go
/// to the lower filter index.
pub fn top_filters(rel: &FilterRelevance, k: usize) -> Result<Vec<Vec<RankedFilter>>> {
    let width = rel.n_filters();
    if k > width {
        return Err(Error::InvalidArgument(format!("top-{k} requested from a layer with {width} filters")));
    }
    Ok(rel
        .relevance
        .data()
        .chunks(width)
        .map(|row| {
            let mut ranked: Vec<RankedFilter> =
                row.iter().enumerate().map(|(filter, &relevance)| RankedFilter { filter, relevance }).collect();
            ranked.sort_by(|a, b| b.relevance.total_cmp(&a.relevance).then(a.filter.cmp(&b.filter)));
            ranked.truncate(k);
            ranked
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub class: usize,
    pub filter: usize,
    pub relevance: f64,
}

/// Bipartite class/filter graph of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationGraph {
    pub layer: String,
    pub top_k: usize,
    pub min_classes: usize,
    /// Classes with at least one surviving edge.
    pub classes: Vec<usize>,
    /// Filters kept, ascending.
    pub filters: Vec<usize>,
    /// Sorted by class, then by the class's top-k order.
    pub edges: Vec<Edge>,
}

/// Keep only filters that appear in the top-k lists of at least `min_classes` classes.
pub fn shared_filter_graph(
    layer: &str,
    top_k: &[Vec<RankedFilter>],
    min_classes: usize,
) -> Result<AssociationGraph> {
    if min_classes == 0 {
        return Err(Error::InvalidArgument("min_classes must be at least 1".into()));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for list in top_k {
        for f in list {
            *counts.entry(f.filter).or_default() += 1;
        }
    }
    let filters: Vec<usize> = counts.into_iter().filter(|(_, n)| *n >= min_classes).map(|(f, _)| f).collect();
    let edges: Vec<Edge> = top_k
        .iter()
        .enumerate()
        .flat_map(|(class, list)| {
            list.iter()
                .filter(|f| filters.binary_search(&f.filter).is_ok())
                .map(move |f| Edge { class, filter: f.filter, relevance: f.relevance })
        })
        .collect();
    let mut classes: Vec<usize> = edges.iter().map(|e| e.class).collect();
    classes.dedup();
    Ok(AssociationGraph {
        layer: layer.to_string(),
        top_k: top_k.iter().map(Vec::len).max().unwrap_or(0),
        min_classes,
        classes,
        filters,
        edges,
    })
}

impl AssociationGraph {
    /// Edge list with columns `layer,class,filter_index,relevance`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "class", "filter_index", "relevance"])?;
        for e in &self.edges {
            out.write_record([self.layer.clone(), e.class.to_string(), e.filter.to_string(), e.relevance.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Number of classes each kept filter is connected to.
    pub fn filter_degrees(&self) -> BTreeMap<usize, usize> {
        let mut deg = BTreeMap::new();
        for e in &self.edges {
            *deg.entry(e.filter).or_default() += 1;
        }
        deg
    }
}

/// Relevance, top-k lists and shared-filter graph of one layer in one call.
pub fn explain_layer(model: &WfModel, layer: &str, top_k: usize, min_classes: usize) -> Result<AssociationGraph> {
    let rel = filter_relevance(model, layer)?;
    shared_filter_graph(layer, &top_filters(&rel, top_k)?, min_classes)
}

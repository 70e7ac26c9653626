//! Redundancy-aware tuning.
//!
//! A layer's redundancy is the mean cosine similarity between its input and
//! output hidden states over a calibration set. Layers are split into `N`
//! contiguous depth groups and, per group, only the most redundant layer is
//! fine-tuned; every other parameter stays frozen.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{layer_of, ActivationTrace, TinyLm};
use crate::nn::ParamStore;

/// Token sequences used to probe redundancy, with their provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    samples: Vec<Vec<usize>>,
    pub source_tag: String,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn new(samples: Vec<Vec<usize>>, source_tag: impl Into<String>, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::data("calibration set is empty"));
        }
        if samples.iter().any(Vec::is_empty) {
            return Err(Error::data("calibration sample with no tokens"));
        }
        Ok(Self {
            samples,
            source_tag: source_tag.into(),
            seed,
        })
    }

    pub fn samples(&self) -> &[Vec<usize>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Per-layer redundancy scores, index 0 holding layer 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyProfile {
    pub scores: Vec<f64>,
    pub sample_count: usize,
    /// Timesteps skipped because a hidden vector had zero norm.
    pub excluded_timesteps: usize,
}

impl RedundancyProfile {
    pub fn n_layers(&self) -> usize {
        self.scores.len()
    }

    /// Score of 1-indexed `layer`.
    pub fn score(&self, layer: usize) -> f64 {
        self.scores[layer - 1]
    }
}

/// Mean cosine similarity and the number of zero-norm timesteps skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerCosine {
    pub mean: f64,
    pub used: usize,
    pub excluded: usize,
}

/// Cosine similarity between the input and output of 1-indexed `layer`,
/// averaged over the trace's non-pad timesteps.
pub fn layer_cosine(trace: &ActivationTrace, layer: usize) -> Result<LayerCosine> {
    let n_layers = trace.n_layers();
    if layer == 0 || layer > n_layers {
        return Err(Error::range(format!(
            "layer {layer} outside 1..={n_layers}"
        )));
    }
    let input = &trace.hidden[layer - 1];
    let output = &trace.hidden[layer];
    if input.rows() != trace.seq_len() || output.rows() != trace.seq_len() {
        return Err(Error::contract("trace matrices disagree with its pad mask"));
    }
    let mut sum = 0.0;
    let mut used = 0;
    let mut excluded = 0;
    for t in 0..trace.seq_len() {
        if trace.pad_mask[t] {
            continue;
        }
        let (a, b) = (input.row(t), output.row(t));
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            excluded += 1;
            continue;
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        sum += (dot / (na * nb)).clamp(-1.0, 1.0);
        used += 1;
    }
    if used == 0 {
        return Err(Error::data(format!(
            "layer {layer}: no non-pad timestep with non-zero hidden states"
        )));
    }
    Ok(LayerCosine {
        mean: sum / used as f64,
        used,
        excluded,
    })
}

/// Traces every calibration sample (no gradients), takes each sample's
/// per-layer mean cosine, then the unweighted mean across samples.
///
/// Samples are reduced in index order, so the profile is bit-reproducible.
pub fn redundancy_profile(model: &TinyLm, calib: &CalibrationSet) -> Result<RedundancyProfile> {
    if calib.is_empty() {
        return Err(Error::data("calibration set is empty"));
    }
    let n = model.config.n_layers;
    let mut totals = vec![0.0; n];
    let mut excluded = 0;
    for (idx, sample) in calib.samples().iter().enumerate() {
        if sample.len() > model.config.max_seq_len {
            return Err(Error::range(format!(
                "calibration sample {idx} has {} tokens, max_seq_len is {}",
                sample.len(),
                model.config.max_seq_len
            )));
        }
        let (_, trace) = model.forward(sample, true)?;
        let trace = trace.expect("trace requested");
        for (layer, total) in totals.iter_mut().enumerate() {
            let c = layer_cosine(&trace, layer + 1)?;
            *total += c.mean;
            excluded += c.excluded;
        }
    }
    let count = calib.len() as f64;
    Ok(RedundancyProfile {
        scores: totals.into_iter().map(|t| t / count).collect(),
        sample_count: calib.len(),
        excluded_timesteps: excluded,
    })
}

/// Splits layers `1..=n_layers` into `n_groups` contiguous depth-ordered
/// ranges. When sizes are uneven the first `n_layers % n_groups` groups get
/// the extra layer.
pub fn partition_groups(n_layers: usize, n_groups: usize) -> Result<Vec<RangeInclusive<usize>>> {
    if n_groups == 0 || n_groups > n_layers {
        return Err(Error::range(format!(
            "cannot split {n_layers} layers into {n_groups} groups"
        )));
    }
    let base = n_layers / n_groups;
    let extra = n_layers % n_groups;
    let mut start = 1;
    Ok((0..n_groups)
        .map(|g| {
            let size = base + usize::from(g < extra);
            let r = start..=start + size - 1;
            start += size;
            r
        })
        .collect())
}

/// The trainable-layer selection: one layer per depth group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningPlan {
    groups: Vec<(usize, usize)>,
    selected: Vec<usize>,
    scores: Vec<f64>,
}

impl TuningPlan {
    /// Validates that `groups` tile `1..=scores.len()` contiguously and that
    /// `selected[g]` is a maximum of group `g`.
    pub fn new(groups: Vec<RangeInclusive<usize>>, selected: Vec<usize>, scores: Vec<f64>) -> Result<Self> {
        if groups.is_empty() || groups.len() != selected.len() {
            return Err(Error::contract("a plan needs exactly one selected layer per group"));
        }
        let mut next = 1;
        for (g, (range, &sel)) in groups.iter().zip(&selected).enumerate() {
            if *range.start() != next || range.end() < range.start() {
                return Err(Error::contract(format!("group {} is not contiguous", g + 1)));
            }
            next = range.end() + 1;
            if !range.contains(&sel) {
                return Err(Error::contract(format!(
                    "selected layer {sel} lies outside group {}",
                    g + 1
                )));
            }
            let best = range
                .clone()
                .map(|l| scores.get(l - 1).copied().unwrap_or(f64::NAN))
                .fold(f64::NEG_INFINITY, f64::max);
            if scores.get(sel - 1).copied() != Some(best) {
                return Err(Error::contract(format!(
                    "layer {sel} is not the most redundant layer of group {}",
                    g + 1
                )));
            }
        }
        if next - 1 != scores.len() {
            return Err(Error::contract("groups do not cover every layer"));
        }
        Ok(Self {
            groups: groups.into_iter().map(|r| (*r.start(), *r.end())).collect(),
            selected,
            scores,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_layers(&self) -> usize {
        self.scores.len()
    }

    pub fn groups(&self) -> Vec<RangeInclusive<usize>> {
        self.groups.iter().map(|&(a, b)| a..=b).collect()
    }

    /// Selected 1-indexed layers, shallowest group first.
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// 1-indexed group of `layer`.
    pub fn group_of(&self, layer: usize) -> Option<usize> {
        self.groups
            .iter()
            .position(|&(a, b)| (a..=b).contains(&layer))
            .map(|g| g + 1)
    }

    /// Freeze flag per parameter: trainable exactly when it belongs to a
    /// selected layer. Embeddings, final norm and head are always frozen.
    pub fn freeze_mask(&self, params: &ParamStore) -> BTreeMap<String, bool> {
        params
            .names()
            .map(|name| {
                let trainable = layer_of(name).is_some_and(|l| self.selected.contains(&l));
                (name.to_string(), !trainable)
            })
            .collect()
    }

    /// `layer,score,group,selected` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,score,group,selected\n");
        for layer in 1..=self.n_layers() {
            let _ = writeln!(
                s,
                "{},{:.6},{},{}",
                layer,
                self.scores[layer - 1],
                self.group_of(layer).expect("groups cover all layers"),
                self.selected.contains(&layer)
            );
        }
        s
    }

    /// Fixed-width version of [`to_csv`](Self::to_csv) for terminals.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:>5}  {:>10}  {:>5}  {}\n", "layer", "score", "group", "selected");
        for layer in 1..=self.n_layers() {
            let _ = writeln!(
                s,
                "{:>5}  {:>10.6}  {:>5}  {}",
                layer,
                self.scores[layer - 1],
                self.group_of(layer).expect("groups cover all layers"),
                if self.selected.contains(&layer) { "*" } else { "" }
            );
        }
        s
    }
}

/// Picks the highest-scoring layer of every group, ties going to the
/// shallower layer.
pub fn select_trainable(profile: &RedundancyProfile, groups: &[RangeInclusive<usize>]) -> Result<TuningPlan> {
    let n = profile.n_layers();
    if groups.iter().any(|r| *r.start() == 0 || *r.end() > n) {
        return Err(Error::range(format!(
            "groups reference layers outside the {n}-layer profile"
        )));
    }
    let selected = groups
        .iter()
        .map(|range| {
            let mut best = *range.start();
            for l in range.clone() {
                if profile.score(l) > profile.score(best) {
                    best = l;
                }
            }
            best
        })
        .collect();
    TuningPlan::new(groups.to_vec(), selected, profile.scores.clone())
}

/// Installs the plan's freeze mask on the model.
pub fn apply_plan(model: &mut TinyLm, plan: &TuningPlan) -> Result<()> {
    if plan.n_layers() != model.config.n_layers {
        return Err(Error::contract(format!(
            "plan covers {} layers but the model has {}",
            plan.n_layers(),
            model.config.n_layers
        )));
    }
    let mask = plan.freeze_mask(&model.params);
    model.params.set_freeze_mask(&mask)
}

/// Profile → groups → selection in one call.
pub fn plan_from_calibration(model: &TinyLm, calib: &CalibrationSet, n_groups: usize) -> Result<(RedundancyProfile, TuningPlan)> {
    let profile = redundancy_profile(model, calib)?;
    let groups = partition_groups(model.config.n_layers, n_groups)?;
    let plan = select_trainable(&profile, &groups)?;
    Ok((profile, plan))
}

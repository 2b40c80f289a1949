//! Displacement metrics and relational-reasoning probes.
//!
//! Metrics run in `f64` on raw (de-normalized) coordinates. The probes read
//! the final-iteration interaction values of the past encoder in evaluation
//! mode: category recognition via the accuracy-maximizing label bijection,
//! strength reasoning via Spearman rank correlation against charge, and
//! group capture via exact hyperedge recovery.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nmp::{extract_interactions, ScaleInteractions};
use crate::predictor::{Predictions, TrainedModel};
use crate::sim::{Dataset, GroupKind, LabelledSample};

// ---------------------------------------------------------------------------
// Displacement metrics
// ---------------------------------------------------------------------------

/// How the best-of-K minimum is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Each agent independently keeps its best sample, then agents average.
    #[default]
    PerAgent,
    /// One best sample for the whole scene.
    PerScene,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub min_ade: f64,
    pub min_fde: f64,
    pub k: usize,
    pub reduction: Reduction,
}

#[inline]
fn dist(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Best-of-K displacement errors for one scene.
///
/// `preds` is `[k][agent][frame][xy]` flattened, `gt` is
/// `[agent][frame][xy]` flattened. ADE averages the Euclidean distance over
/// all future frames, FDE uses the final frame only; each metric minimizes
/// over K independently.
pub fn displacement_metrics(
    preds: &[f64],
    gt: &[f64],
    k: usize,
    n_agents: usize,
    t_future: usize,
    reduction: Reduction,
) -> Result<MetricReport> {
    if k == 0 || n_agents == 0 || t_future == 0 {
        return Err(Error::dim("displacement_metrics: empty dims".to_string()));
    }
    let scene = n_agents * t_future * 2;
    if preds.len() != k * scene || gt.len() != scene {
        return Err(Error::dim(format!(
            "displacement_metrics: preds {} gt {} vs k={k} n={n_agents} t={t_future}",
            preds.len(),
            gt.len()
        )));
    }
    // per (k, agent): average and final displacement
    let mut ade = vec![0.0f64; k * n_agents];
    let mut fde = vec![0.0f64; k * n_agents];
    for ki in 0..k {
        for a in 0..n_agents {
            let mut acc = 0.0;
            for f in 0..t_future {
                let p = &preds[(ki * n_agents + a) * t_future * 2 + f * 2..];
                let q = &gt[(a * t_future + f) * 2..];
                let d = dist(p, q);
                acc += d;
                if f + 1 == t_future {
                    fde[ki * n_agents + a] = d;
                }
            }
            ade[ki * n_agents + a] = acc / t_future as f64;
        }
    }
    let (min_ade, min_fde) = match reduction {
        Reduction::PerAgent => {
            let mut ade_sum = 0.0;
            let mut fde_sum = 0.0;
            for a in 0..n_agents {
                let best_ade = (0..k)
                    .map(|ki| ade[ki * n_agents + a])
                    .fold(f64::INFINITY, f64::min);
                let best_fde = (0..k)
                    .map(|ki| fde[ki * n_agents + a])
                    .fold(f64::INFINITY, f64::min);
                ade_sum += best_ade;
                fde_sum += best_fde;
            }
            (ade_sum / n_agents as f64, fde_sum / n_agents as f64)
        }
        Reduction::PerScene => {
            let scene_ade = |ki: usize| -> f64 {
                (0..n_agents).map(|a| ade[ki * n_agents + a]).sum::<f64>() / n_agents as f64
            };
            let scene_fde = |ki: usize| -> f64 {
                (0..n_agents).map(|a| fde[ki * n_agents + a]).sum::<f64>() / n_agents as f64
            };
            (
                (0..k).map(scene_ade).fold(f64::INFINITY, f64::min),
                (0..k).map(scene_fde).fold(f64::INFINITY, f64::min),
            )
        }
    };
    Ok(MetricReport {
        min_ade,
        min_fde,
        k,
        reduction,
    })
}

/// Dataset-level metrics: mean of per-scene reports, plus the per-scene
/// values for CSV output.
#[derive(Debug, Clone, Serialize)]
pub struct DatasetMetrics {
    pub min_ade: f64,
    pub min_fde: f64,
    pub k: usize,
    pub reduction: Reduction,
    pub n_scenes: usize,
    #[serde(skip)]
    pub per_scene: Vec<MetricReport>,
}

/// Score predictions against the ground-truth futures of a dataset.
pub fn evaluate_predictions(
    preds: &Predictions,
    dataset: &Dataset,
    scene_offset: usize,
    reduction: Reduction,
) -> Result<DatasetMetrics> {
    let t_past = dataset.meta.t_past;
    let t_future = dataset.meta.t_future;
    let n_agents = dataset.meta.n_agents;
    if preds.t_future != t_future || preds.n_agents != n_agents {
        return Err(Error::dim(
            "predictions do not match dataset dims".to_string(),
        ));
    }
    let mut per_scene = Vec::with_capacity(preds.n_scenes);
    let mut ade_sum = 0.0;
    let mut fde_sum = 0.0;
    for b in 0..preds.n_scenes {
        let sample = dataset
            .samples
            .get(scene_offset + b)
            .ok_or_else(|| Error::dim("prediction scene beyond dataset".to_string()))?;
        let mut gt = Vec::with_capacity(n_agents * t_future * 2);
        for a in 0..n_agents {
            for f in 0..t_future {
                let p = sample.traj[a][t_past + f];
                gt.push(p[0]);
                gt.push(p[1]);
            }
        }
        let scene_pred = preds.scene(b);
        let report =
            displacement_metrics(&scene_pred, &gt, preds.k, n_agents, t_future, reduction)?;
        ade_sum += report.min_ade;
        fde_sum += report.min_fde;
        per_scene.push(report);
    }
    Ok(DatasetMetrics {
        min_ade: ade_sum / preds.n_scenes as f64,
        min_fde: fde_sum / preds.n_scenes as f64,
        k: preds.k,
        reduction,
        n_scenes: preds.n_scenes,
        per_scene,
    })
}

// ---------------------------------------------------------------------------
// Spearman rank correlation
// ---------------------------------------------------------------------------

/// Ranks with ties averaged (1-based).
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &id in &idx[i..=j] {
            ranks[id] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Returns
/// `(rho, degenerate)`; a constant input yields `(0.0, true)`.
pub fn spearman(xs: &[f64], ys: &[f64]) -> (f64, bool) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return (0.0, true);
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx <= 0.0 || vy <= 0.0 {
        return (0.0, true);
    }
    (cov / (vx * vy).sqrt(), false)
}

// ---------------------------------------------------------------------------
// Probe plumbing
// ---------------------------------------------------------------------------

const PROBE_CHUNK: usize = 64;

/// Run evaluation-mode encoder passes over the dataset in chunks, handing
/// each scene's interaction values to `visit`.
pub fn for_each_scene_interactions(
    model: &TrainedModel,
    dataset: &Dataset,
    mut visit: impl FnMut(usize, &LabelledSample, &[ScaleInteractions]) -> Result<()>,
) -> Result<()> {
    let n = dataset.samples.len();
    let mut start = 0;
    while start < n {
        let end = (start + PROBE_CHUNK).min(n);
        let chunk: Vec<&LabelledSample> = dataset.samples[start..end].iter().collect();
        let (g, out) = model.eval_encoder_pass(&chunk)?;
        for (local, sample) in chunk.iter().enumerate() {
            let scales = extract_interactions(&g, &out, local);
            visit(start + local, sample, &scales)?;
        }
        start = end;
    }
    Ok(())
}

fn kind_order(kinds_present: &[GroupKind]) -> Vec<GroupKind> {
    let canonical = [GroupKind::Free, GroupKind::Spring, GroupKind::Lightbar];
    canonical
        .into_iter()
        .filter(|k| kinds_present.contains(k))
        .collect()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Category probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CategoryReport {
    pub accuracy: f64,
    /// `permutation[predicted_label]` = index into `kinds` (the true label).
    pub permutation: Vec<usize>,
    pub kinds: Vec<GroupKind>,
    pub n_scored: usize,
    pub n_mapping: usize,
    /// Scenes where no hyperedge matched the ground-truth group (counted as
    /// misses in `accuracy`).
    pub match_failures: usize,
}

/// Predicted category of a labelled group: the argmax of `c` on the
/// hyperedge whose member set equals the group at the matching-size scale.
fn predicted_label(scales: &[ScaleInteractions], group: &[usize]) -> Option<usize> {
    let mut sorted = group.to_vec();
    sorted.sort_unstable();
    // prefer group scales (s >= 1, listed after pairwise) of matching size
    for si in (0..scales.len()).rev() {
        if scales[si].k != sorted.len() {
            continue;
        }
        for he in &scales[si].hyperedges {
            if he.members == sorted {
                let argmax = he
                    .c
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                    .map(|(i, _)| i)?;
                return Some(argmax);
            }
        }
    }
    None
}

/// Unsupervised category recognition: collect (predicted, true) pairs in
/// evaluation mode, fit the accuracy-maximizing bijection on the first
/// `mapping_frac` of samples, then score the rest (match failures count as
/// misses).
pub fn category_probe(
    model: &TrainedModel,
    dataset: &Dataset,
    mapping_frac: f64,
) -> Result<CategoryReport> {
    let kinds_present: Vec<GroupKind> = {
        let mut ks: Vec<GroupKind> = Vec::new();
        for s in &dataset.samples {
            for &k in &s.types {
                if !ks.contains(&k) {
                    ks.push(k);
                }
            }
        }
        kind_order(&ks)
    };
    let l = model.config.model.l_categories;
    if kinds_present.is_empty() {
        return Err(Error::config("dataset has no labelled groups"));
    }
    if kinds_present.len() != l {
        return Err(Error::config(format!(
            "category probe needs L = observed kinds: L = {l}, kinds = {kinds_present:?}"
        )));
    }

    // (true_kind_idx, Option<predicted>)
    let mut pairs: Vec<(usize, Option<usize>)> = Vec::with_capacity(dataset.samples.len());
    for_each_scene_interactions(model, dataset, |_, sample, scales| {
        let group = sample
            .groups
            .first()
            .ok_or_else(|| Error::config("category probe sample lacks a group"))?;
        let true_idx = kinds_present
            .iter()
            .position(|k| *k == sample.types[0])
            .expect("kind collected above");
        pairs.push((true_idx, predicted_label(scales, group)));
        Ok(())
    })?;

    let n_mapping = ((pairs.len() as f64 * mapping_frac).ceil() as usize).min(pairs.len());
    let (map_split, score_split) = pairs.split_at(n_mapping);

    // accuracy-maximizing bijection over the mapping split
    let mut best_perm: Vec<usize> = (0..l).collect();
    let mut best_hits = -1i64;
    for perm in permutations(l) {
        let hits = map_split
            .iter()
            .filter(|(t, p)| p.map(|p| perm[p] == *t).unwrap_or(false))
            .count() as i64;
        if hits > best_hits {
            best_hits = hits;
            best_perm = perm;
        }
    }

    let mut correct = 0usize;
    let mut failures = 0usize;
    for (t, p) in score_split {
        match p {
            Some(p) if best_perm[*p] == *t => correct += 1,
            Some(_) => {}
            None => failures += 1,
        }
    }
    Ok(CategoryReport {
        accuracy: correct as f64 / score_split.len().max(1) as f64,
        permutation: best_perm,
        kinds: kinds_present,
        n_scored: score_split.len(),
        n_mapping,
        match_failures: failures,
    })
}

// ---------------------------------------------------------------------------
// Strength probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct StrengthReport {
    /// `(charge, mean strength of the pair edge)` per sample.
    pub points: Vec<(f64, f64)>,
    pub spearman_rho: f64,
    /// Set when the strength output is constant across the dataset.
    pub degenerate: bool,
}

/// Strength reasoning on charged pairs: read `r` of the scale-0 edge joining
/// the two particles (mean over duplicates), pair with the scene's charge,
/// and rank-correlate.
pub fn strength_probe(model: &TrainedModel, dataset: &Dataset) -> Result<StrengthReport> {
    let mut points = Vec::with_capacity(dataset.samples.len());
    for_each_scene_interactions(model, dataset, |_, sample, scales| {
        let charge = sample
            .charge
            .ok_or_else(|| Error::config("strength probe sample lacks a charge"))?;
        let pairwise = &scales[0];
        let mut acc = 0.0;
        let mut cnt = 0usize;
        for he in &pairwise.hyperedges {
            if he.members == [0, 1] {
                acc += he.r;
                cnt += 1;
            }
        }
        if cnt == 0 {
            return Err(Error::contract("no pairwise edge joins the two particles"));
        }
        points.push((charge, acc / cnt as f64));
        Ok(())
    })?;
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (rho, degenerate) = spearman(&xs, &ys);
    Ok(StrengthReport {
        points,
        spearman_rho: rho,
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// Group capture probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct TypeRecovery {
    pub kind: GroupKind,
    pub group_size: usize,
    pub recovered: usize,
    pub total: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub per_type: Vec<TypeRecovery>,
}

/// Group capture: a labelled group is recovered when any hyperedge at the
/// matching-size scale equals its member set exactly. Size-2 groups are
/// scored at the K=2 group scale when configured, otherwise at the pairwise
/// scale.
pub fn group_probe(model: &TrainedModel, dataset: &Dataset) -> Result<GroupReport> {
    use std::collections::BTreeMap;
    let mut tallies: BTreeMap<(String, usize), (GroupKind, usize, usize)> = BTreeMap::new();
    for_each_scene_interactions(model, dataset, |_, sample, scales| {
        for (group, &kind) in sample.groups.iter().zip(&sample.types) {
            let mut sorted = group.clone();
            sorted.sort_unstable();
            // prefer a group scale (s >= 1) of matching size, else scale 0
            let scale = scales[1..]
                .iter()
                .find(|s| s.k == sorted.len())
                .or_else(|| (scales[0].k == sorted.len()).then_some(&scales[0]));
            let hit = scale.is_some_and(|s| s.hyperedges.iter().any(|he| he.members == sorted));
            let entry = tallies
                .entry((kind.to_string(), sorted.len()))
                .or_insert((kind, 0, 0));
            entry.2 += 1;
            if hit {
                entry.1 += 1;
            }
        }
        Ok(())
    })?;
    Ok(GroupReport {
        per_type: tallies
            .into_iter()
            .map(|((_, size), (kind, recovered, total))| TypeRecovery {
                kind,
                group_size: size,
                recovered,
                total,
                rate: recovered as f64 / total.max(1) as f64,
            })
            .collect(),
    })
}

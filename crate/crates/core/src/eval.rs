//! Trajectory, localization, relation and behavior metrics.

use serde::Serialize;

use crate::baselines::{random_walk_nll, Baseline};
use crate::error::{AlmError, Result};
use crate::field::{lm_sum_field, VectorField};
use crate::model::{Estimate, ModelParams};
use crate::predict::PredictionDocument;
use crate::scalar::Scalar;
use crate::scene::{BBox, Behavior, Cell, Lattice, Scene, Source};

fn directed<T: Scalar>(a: &[Cell], b: &[Cell]) -> T {
    let total: T = a
        .iter()
        .map(|p| b.iter().map(|q| p.euclidean::<T>(*q)).fold(T::infinity(), T::min))
        .sum();
    total / T::from_usize_lossy(a.len())
}

/// Modified Hausdorff distance: the larger of the two mean nearest-cell distances.
pub fn mhd<T: Scalar>(gt: &[Cell], pred: &[Cell]) -> Result<T> {
    if gt.is_empty() || pred.is_empty() {
        return Err(AlmError::Metric("modified Hausdorff distance of an empty trajectory".into()));
    }
    Ok(directed::<T>(gt, pred).max(directed(pred, gt)))
}

/// `lambda / (t2 - t1) * sum_{t1 <= t < t2} |F(x_t) . (x_{t+1} - x_t)|`.
pub fn model_nll<T: Scalar>(cells: &[Cell], t1: usize, t2: usize, field: &VectorField<T>, lambda: T) -> Result<T> {
    if t2 <= t1 || t2 >= cells.len() {
        return Err(AlmError::Metric(format!("invalid segment [{t1}, {t2}] of a {}-frame track", cells.len())));
    }
    let work: T = (t1..t2)
        .map(|t| field.step_work(cells[t], cells[t + 1].x - cells[t].x, cells[t + 1].y - cells[t].y))
        .sum();
    Ok(lambda * work / T::from_usize_lossy(t2 - t1))
}

/// Bounding box of the 2-sigma ellipse, clipped to the lattice.
pub fn predicted_box<T: Scalar>(source: &Source<T>, lattice: Lattice) -> BBox {
    let (hx, hy) = source.ellipse_half_extent(T::lit(2.0));
    let (hx, hy) = (hx.round().to_i32().unwrap_or(i32::MAX / 4), hy.round().to_i32().unwrap_or(i32::MAX / 4));
    BBox { x0: source.mu.x - hx, y0: source.mu.y - hy, x1: source.mu.x + hx, y1: source.mu.y + hy }.clip(lattice)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Localization {
    /// Matched ground-truth sources over all ground-truth sources.
    pub accuracy: f64,
    /// Predicted index matched to each ground-truth source.
    pub matches: Vec<Option<usize>>,
    /// IOU of each ground-truth source with its match (0 if unmatched).
    pub ious: Vec<f64>,
}

pub const IOU_THRESHOLD: f64 = 0.5;

/// Greedy one-to-one matching by descending IOU; pairs below 0.5 never match.
pub fn source_localization(pred: &[BBox], gt: &[BBox]) -> Localization {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (g, gb) in gt.iter().enumerate() {
        for (p, pb) in pred.iter().enumerate() {
            let iou = gb.iou::<f64>(pb);
            if iou >= IOU_THRESHOLD {
                pairs.push((iou, g, p));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut matches = vec![None; gt.len()];
    let mut ious = vec![0.0; gt.len()];
    let mut used = vec![false; pred.len()];
    for (iou, g, p) in pairs {
        if matches[g].is_none() && !used[p] {
            matches[g] = Some(p);
            ious[g] = iou;
            used[p] = true;
        }
    }
    let n = matches.iter().filter(|m| m.is_some()).count();
    let accuracy = if gt.is_empty() { 1.0 } else { n as f64 / gt.len() as f64 };
    Localization { accuracy, matches, ious }
}

/// Share of an agent's true goals whose matched prediction is also selected.
///
/// `None` when the agent has no true goals.
pub fn relation_accuracy(gt_goals: &[usize], pred_row: &[bool], matches: &[Option<usize>]) -> Option<f64> {
    if gt_goals.is_empty() {
        return None;
    }
    let hit = gt_goals
        .iter()
        .filter(|&&g| matches.get(g).copied().flatten().is_some_and(|p| pred_row.get(p).copied().unwrap_or(false)))
        .count();
    Some(hit as f64 / gt_goals.len() as f64)
}

/// Agreement count over all ground-truth sources divided by the number of true goals.
///
/// Unbounded above; kept for comparison with the printed formula.
pub fn relation_accuracy_literal(gt_goals: &[usize], n_gt_sources: usize, pred_row: &[bool], matches: &[Option<usize>]) -> Option<f64> {
    if gt_goals.is_empty() {
        return None;
    }
    let agree = (0..n_gt_sources)
        .filter(|j| {
            let truth = gt_goals.contains(j);
            let pred = matches[*j].is_some_and(|p| pred_row.get(p).copied().unwrap_or(false));
            truth == pred
        })
        .count();
    Some(agree as f64 / gt_goals.len() as f64)
}

/// An agent is jointly correct when all its true goals are localized and its predicted row is exactly their image.
pub fn joint_correct(gt_goals: &[usize], pred_row: &[bool], matches: &[Option<usize>]) -> bool {
    let mut want = vec![false; pred_row.len()];
    for &g in gt_goals {
        match matches.get(g).copied().flatten() {
            Some(p) => want[p] = true,
            None => return false,
        }
    }
    want == pred_row
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BehaviorReport {
    /// Rows are ground truth, columns predictions, in single/sequential/change order.
    pub confusion: [[usize; 3]; 3],
    /// `(recall, precision)` points per class.
    pub pr: Vec<Vec<(f64, f64)>>,
    /// Average precision per class; `None` without positives.
    pub ap: [Option<f64>; 3],
}

/// Precision-recall points from a threshold sweep, starting at `(0, 1)`.
pub fn pr_curve(scores: &[f64], positive: &[bool]) -> Vec<(f64, f64)> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 1.0)];
    if n_pos == 0 {
        return pts;
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if positive[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        pts.push((tp as f64 / n_pos as f64, tp as f64 / (tp + fp) as f64));
    }
    pts
}

/// Trapezoidal area under a precision-recall curve.
pub fn average_precision(pr: &[(f64, f64)]) -> f64 {
    pr.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

pub fn behavior_scores(gt: &[Behavior], pred: &[Behavior], scores: &[[f64; 3]]) -> Result<BehaviorReport> {
    if gt.len() != pred.len() || gt.len() != scores.len() {
        return Err(AlmError::Dimension("behavior lists are not aligned".into()));
    }
    let mut confusion = [[0usize; 3]; 3];
    for (g, p) in gt.iter().zip(pred) {
        confusion[g.index()][p.index()] += 1;
    }
    let mut pr = Vec::with_capacity(3);
    let mut ap = [None; 3];
    for k in 0..3 {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let pos: Vec<bool> = gt.iter().map(|g| g.index() == k).collect();
        let curve = pr_curve(&s, &pos);
        if pos.iter().any(|&p| p) {
            ap[k] = Some(average_precision(&curve));
        }
        pr.push(curve);
    }
    Ok(BehaviorReport { confusion, pr, ap })
}

/// Per-agent and aggregate metrics for one scene.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub mhd: Vec<Option<f64>>,
    pub nll: Vec<Option<f64>>,
    pub source_ious: Vec<f64>,
    pub source_matched: Vec<bool>,
    pub s_accuracy: f64,
    pub r_accuracy: f64,
    pub sr_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub behavior: Option<BehaviorReport>,
}

impl EvalReport {
    pub fn mean_mhd(&self) -> Option<f64> {
        mean(self.mhd.iter().flatten().copied())
    }

    pub fn mean_nll(&self) -> Option<f64> {
        mean(self.nll.iter().flatten().copied())
    }

    pub const CSV_HEADER: &'static str = "method,s_accuracy,r_accuracy,sr_accuracy,mean_mhd,mean_nll";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.method,
            self.s_accuracy,
            self.r_accuracy,
            self.sr_accuracy,
            opt(self.mean_mhd()),
            opt(self.mean_nll())
        )
    }
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Localization, relation and joint accuracies of predicted sources and relations.
pub fn score_sources_and_relations<T: Scalar>(
    pred_sources: &[Source<T>],
    pred_rows: &[Vec<bool>],
    gt_boxes: &[BBox],
    gt_goals: &[Vec<usize>],
    lattice: Lattice,
) -> (Localization, f64, f64) {
    let boxes: Vec<BBox> = pred_sources.iter().map(|s| predicted_box(s, lattice)).collect();
    let loc = source_localization(&boxes, gt_boxes);
    let r = mean(gt_goals.iter().zip(pred_rows).filter_map(|(g, p)| relation_accuracy(g, p, &loc.matches))).unwrap_or(0.0);
    let sr = mean(gt_goals.iter().zip(pred_rows).map(|(g, p)| joint_correct(g, p, &loc.matches) as u8 as f64)).unwrap_or(0.0);
    (loc, r, sr)
}

/// Scores a prediction document against a scene's full tracks and ground truth.
///
/// MHD compares the predicted and true future after `t0`. NLL scores the true
/// future from the last observed frame: under the random-walk model for `rw`
/// documents, under the summed field for `pm`, otherwise under the field of the
/// agent's last predicted goal. Source and relation accuracies need an estimate
/// and ground truth; behavior scores need predicted and true behaviors.
pub fn evaluate<T: Scalar>(
    scene: &Scene<T>,
    doc: &PredictionDocument,
    est: Option<&Estimate<T>>,
    params: &ModelParams<T>,
) -> Result<EvalReport> {
    if doc.agents.len() != scene.agents.len() {
        return Err(AlmError::Input(format!("prediction has {} agents, scene has {}", doc.agents.len(), scene.agents.len())));
    }
    for (p, a) in doc.agents.iter().zip(&scene.agents) {
        if p.id != a.id || p.t0 != a.observed().len() {
            return Err(AlmError::Input(format!("prediction for agent {} does not match scene agent {}", p.id, a.id)));
        }
    }
    if let Some(e) = est {
        if e.cmap.lattice() != scene.lattice {
            return Err(AlmError::Input("estimate lattice differs from scene lattice".into()));
        }
    }
    let cmap = est.map_or(&scene.cmap, |e| &e.cmap);
    let kind = Baseline::parse(&doc.method).ok();
    let sum = match (kind, est) {
        (Some(Baseline::Pm), Some(e)) => Some(lm_sum_field(&e.cmap, &e.mus(), &params.field)),
        _ => None,
    };
    let mut report = EvalReport { method: doc.method.clone(), ..EvalReport::default() };
    for (p, a) in doc.agents.iter().zip(&scene.agents) {
        let gt = &a.trajectory.cells;
        let t0 = p.t0;
        let m = match (gt.get(t0..), p.cells.get(t0..)) {
            (Some(g), Some(q)) if !g.is_empty() && !q.is_empty() => Some(mhd::<T>(g, q)?.to_f64_lossy()),
            _ => None,
        };
        report.mhd.push(m);
        let (t1, t2) = (t0.saturating_sub(1), gt.len().saturating_sub(1));
        let nll = if t2 <= t1 {
            None
        } else if kind == Some(Baseline::Rw) {
            Some(random_walk_nll::<T>(cmap, gt, t1, t2)?.to_f64_lossy())
        } else if let Some(f) = &sum {
            Some(model_nll(gt, t1, t2, f, params.path.lambda)?.to_f64_lossy())
        } else {
            match (est, p.goals.last()) {
                (Some(e), Some(&j)) if j < e.n_sources() => Some(model_nll(gt, t1, t2, &e.fields[j].field, params.path.lambda)?.to_f64_lossy()),
                _ => None,
            }
        };
        report.nll.push(nll);
    }
    if let (Some(e), Some(truth)) = (est, &scene.ground_truth) {
        let gt_boxes: Vec<BBox> = truth.sources.iter().map(|s| s.1).collect();
        let rows: Vec<Vec<bool>> = (0..e.relations.n_agents()).map(|i| e.relations.row(i).to_vec()).collect();
        let (loc, r, sr) = score_sources_and_relations(&e.sources, &rows, &gt_boxes, &truth.goals, scene.lattice);
        report.source_matched = loc.matches.iter().map(Option::is_some).collect();
        report.source_ious = loc.ious;
        report.s_accuracy = loc.accuracy;
        report.r_accuracy = r;
        report.sr_accuracy = sr;
    }
    if let Some(truth) = &scene.ground_truth {
        let pred: Option<Vec<Behavior>> = doc.agents.iter().map(|p| p.behavior).collect();
        if let (Some(pred), true) = (pred, truth.behaviors.len() == doc.agents.len()) {
            let scores: Vec<[f64; 3]> = doc
                .agents
                .iter()
                .zip(&pred)
                .map(|(p, z)| {
                    p.behavior_scores.unwrap_or_else(|| {
                        let mut s = [0.0; 3];
                        s[z.index()] = 1.0;
                        s
                    })
                })
                .collect();
            report.behavior = Some(behavior_scores(&truth.behaviors, &pred, &scores)?);
        }
    }
    Ok(report)
}

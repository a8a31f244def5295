//! Offline completion of trajectories and behaviors, and online frame-by-frame prediction.

use std::borrow::Borrow;

use itertools::Itertools;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AlmError, Result};
use crate::field::VectorField;
use crate::model::{
    agent_log_likelihood, behavior_log_prior, closest_goal, implied_behavior_log_prior, prefix_detour, relation_log_prior,
    smoothed_theta, Estimate, ModelParams, SourceField,
};
use crate::planner::step_length;
use crate::scalar::{log_sum_exp, Scalar};
use crate::scene::{Agent, Behavior, Cell, ConstraintMap, Relations, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnlineMode {
    /// Mean of weighted samples, snapped to a neighbouring cell.
    Mean,
    /// Lowest-cost candidate; reproduces the optimal path.
    Argmax,
}

/// Per-step cost used by the online predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepCost {
    /// `|F(x).d| + eps*|d|`, the planner's edge weight.
    Planner,
    /// `|F(x)| * |d|`.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictConfig {
    /// Frames spent at each intermediate goal of a sequential hypothesis.
    pub dwell: usize,
    /// Spacing of planned switch candidates for a change hypothesis.
    pub switch_stride: usize,
    /// Try every observed and planned cell as a switch point.
    pub exhaustive_switch: bool,
    pub samples: usize,
    pub relation_proposals: usize,
    pub stay_threshold: f64,
    pub mode: OnlineMode,
    pub step_cost: StepCost,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            dwell: 10,
            switch_stride: 3,
            exhaustive_switch: false,
            samples: 100,
            relation_proposals: 20,
            stay_threshold: 0.05,
            mode: OnlineMode::Mean,
            step_cost: StepCost::Planner,
        }
    }
}

impl PredictConfig {
    pub fn validate(&self) -> Result<()> {
        if self.switch_stride == 0 {
            return Err(AlmError::Input("switch_stride must be positive".into()));
        }
        if self.samples == 0 {
            return Err(AlmError::Input("samples must be positive".into()));
        }
        if !(self.stay_threshold >= 0.0) {
            return Err(AlmError::Input("stay_threshold must be non-negative".into()));
        }
        Ok(())
    }
}

/// Where a change of intent happens: inside the observed prefix or ahead on the planned path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SwitchPoint {
    Observed { index: usize, cell: Cell },
    Planned { steps: usize, cell: Cell },
}

impl SwitchPoint {
    pub fn cell(&self) -> Cell {
        match *self {
            SwitchPoint::Observed { cell, .. } | SwitchPoint::Planned { cell, .. } => cell,
        }
    }
}

/// One (behavior, ordered goals) explanation of an observed prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredHypothesis<T: Scalar> {
    pub behavior: Behavior,
    pub goals: Vec<usize>,
    pub switch: Option<SwitchPoint>,
    pub log_likelihood: T,
    pub log_prior: T,
}

impl<T: Scalar> ScoredHypothesis<T> {
    pub fn score(&self) -> T {
        let s = self.log_likelihood + self.log_prior;
        if s.is_nan() {
            T::neg_infinity()
        } else {
            s
        }
    }
}

fn step_cost<T: Scalar>(field: &VectorField<T>, a: Cell, b: Cell, params: &ModelParams<T>) -> T {
    if a == b {
        params.stall_energy * field.magnitude(a)
    } else {
        params.path.edge_weight(field, a, b.x - a.x, b.y - a.y)
    }
}

/// `cum[k]` is the cost of walking `prefix[..=k]` under `field`.
fn cumulative_costs<T: Scalar>(prefix: &[Cell], field: &VectorField<T>, params: &ModelParams<T>) -> Vec<T> {
    let mut cum = Vec::with_capacity(prefix.len());
    let mut acc = T::zero();
    cum.push(acc);
    for w in prefix.windows(2) {
        acc = acc + step_cost(field, w[0], w[1], params);
        cum.push(acc);
    }
    cum
}

/// Detour of a prefix under a goal sequence visited in order, and the index of the
/// leg in progress at the prefix end.
///
/// A leg ends when its goal is stepped on; resting on an already reached goal is free.
/// Infinite when a remaining leg is unreachable, `None` if the prefix leaves the walkable region.
pub fn sequential_detour<T: Scalar, F: Borrow<SourceField<T>>>(
    prefix: &[Cell],
    legs: &[usize],
    fields: &[F],
    cmap: &ConstraintMap,
    params: &ModelParams<T>,
) -> Option<(T, usize)> {
    let (&x0, &xt) = (prefix.first()?, prefix.last()?);
    if legs.is_empty() || prefix.iter().any(|c| !cmap.is_walkable(*c)) {
        return None;
    }
    let f = |m: usize| fields[legs[m]].borrow();
    let mut leg = 0;
    if x0 == f(0).mu && legs.len() > 1 {
        leg = 1;
    }
    let mut w = T::zero();
    for win in prefix.windows(2) {
        let (a, b) = (win[0], win[1]);
        let sf = f(leg);
        let resting = a == b && leg > 0 && a == f(leg - 1).mu;
        if !resting {
            w = w + step_cost(&sf.field, a, b, params);
        }
        if b == sf.mu && leg + 1 < legs.len() {
            leg += 1;
        }
    }
    let between = |m: usize| f(m).c2g.cost(f(m - 1).mu);
    let reference = (1..legs.len()).fold(f(0).c2g.cost(x0), |acc, m| acc + between(m));
    let remaining = (leg + 1..legs.len()).fold(f(leg).c2g.cost(xt), |acc, m| acc + between(m));
    let d = w + remaining - reference;
    Some((if d.is_finite() { d.max(T::zero()) } else { T::infinity() }, leg))
}

/// Best switch point and log-likelihood of "heads to `a`, then changes to `b`".
///
/// Candidates are the observed cell of closest approach to `a` and every
/// `switch_stride`-th cell of the optimal path from the current cell toward `a`.
/// The first leg must make progress toward `a`. The change prior `ln(gamma/(N-1))` is included.
pub fn score_change_hypothesis<T: Scalar, F: Borrow<SourceField<T>>>(
    prefix: &[Cell],
    a: usize,
    b: usize,
    fields: &[F],
    cmap: &ConstraintMap,
    params: &ModelParams<T>,
    config: &PredictConfig,
) -> Result<(Option<SwitchPoint>, T)> {
    if a == b {
        return Err(AlmError::Domain("change of intent needs two distinct goals".into()));
    }
    if a >= fields.len() || b >= fields.len() {
        return Err(AlmError::Dimension(format!("goal index out of range for {} sources", fields.len())));
    }
    let prior = behavior_log_prior(Behavior::Change, 2, params.kappa, params.gamma, fields.len())?;
    let (Some(&x0), Some(&xt)) = (prefix.first(), prefix.last()) else {
        return Ok((None, T::neg_infinity()));
    };
    if prefix.iter().any(|c| !cmap.is_walkable(*c)) {
        return Ok((None, T::neg_infinity()));
    }
    let (fa, fb) = (fields[a].borrow(), fields[b].borrow());
    let ca = |c: Cell| fa.c2g.cost(c);
    let cb = |c: Cell| fb.c2g.cost(c);
    let cum_a = cumulative_costs(prefix, &fa.field, params);
    let cum_b = cumulative_costs(prefix, &fb.field, params);
    let n = prefix.len();

    let mut best: Option<(SwitchPoint, T)> = None;
    let mut consider = |sp: SwitchPoint, d: T| {
        if d.is_finite() && best.as_ref().is_none_or(|(_, bd)| d < *bd) {
            best = Some((sp, d));
        }
    };

    let observed = |k: usize| {
        let s = prefix[k];
        let progress = ca(x0) - ca(s);
        if !(progress > T::zero()) {
            return T::infinity();
        }
        cum_a[k] - progress + (cum_b[n - 1] - cum_b[k]) + cb(xt) - cb(s)
    };
    if config.exhaustive_switch {
        for k in 1..n {
            consider(SwitchPoint::Observed { index: k, cell: prefix[k] }, observed(k));
        }
    } else {
        let k = (0..n).min_by(|&i, &j| ca(prefix[i]).partial_cmp(&ca(prefix[j])).unwrap_or(std::cmp::Ordering::Equal));
        if let Some(k) = k {
            consider(SwitchPoint::Observed { index: k, cell: prefix[k] }, observed(k));
        }
    }

    if let Some(path) = fa.c2g.path_from(xt) {
        let stride = if config.exhaustive_switch { 1 } else { config.switch_stride };
        let along = cum_a[n - 1] + ca(xt) - ca(x0);
        for steps in (stride..path.len()).step_by(stride) {
            let s = path[steps];
            if ca(x0) - ca(s) > T::zero() && cb(s).is_finite() {
                consider(SwitchPoint::Planned { steps, cell: s }, along);
            }
        }
    }

    Ok(match best {
        Some((sp, d)) => (Some(sp), -params.path.lambda * d.max(T::zero()) + prior),
        None => (None, T::neg_infinity()),
    })
}

/// Every hypothesis over a goal set: single for one goal; otherwise all orders as
/// sequential plus every ordered pair as change.
pub fn enumerate_hypotheses<T: Scalar, F: Borrow<SourceField<T>>>(
    prefix: &[Cell],
    goals: &[usize],
    fields: &[F],
    cmap: &ConstraintMap,
    params: &ModelParams<T>,
    config: &PredictConfig,
) -> Result<Vec<ScoredHypothesis<T>>> {
    if goals.is_empty() {
        return Err(AlmError::Prediction("agent has no goal".into()));
    }
    if let Some(&j) = goals.iter().find(|&&j| j >= fields.len()) {
        return Err(AlmError::Dimension(format!("goal {j} out of range for {} sources", fields.len())));
    }
    let n = fields.len();
    let ll = |legs: &[usize]| match sequential_detour(prefix, legs, fields, cmap, params) {
        Some((d, _)) => -params.path.lambda * d,
        None => T::neg_infinity(),
    };
    let mut out = Vec::new();
    if goals.len() == 1 {
        out.push(ScoredHypothesis {
            behavior: Behavior::Single,
            goals: goals.to_vec(),
            switch: None,
            log_likelihood: ll(goals),
            log_prior: behavior_log_prior(Behavior::Single, 1, params.kappa, params.gamma, n)?,
        });
        return Ok(out);
    }
    let seq_prior = behavior_log_prior(Behavior::Sequential, goals.len(), params.kappa, params.gamma, n)?;
    for perm in goals.iter().copied().permutations(goals.len()) {
        out.push(ScoredHypothesis {
            behavior: Behavior::Sequential,
            log_likelihood: ll(&perm),
            goals: perm,
            switch: None,
            log_prior: seq_prior,
        });
    }
    let change_prior = behavior_log_prior(Behavior::Change, 2, params.kappa, params.gamma, n)?;
    for pair in goals.iter().copied().permutations(2) {
        let (switch, total) = score_change_hypothesis(prefix, pair[0], pair[1], fields, cmap, params, config)?;
        out.push(ScoredHypothesis {
            behavior: Behavior::Change,
            goals: pair,
            switch,
            log_likelihood: total - change_prior,
            log_prior: change_prior,
        });
    }
    Ok(out)
}

fn best_hypothesis<T: Scalar>(hyps: Vec<ScoredHypothesis<T>>) -> Option<ScoredHypothesis<T>> {
    let mut best: Option<ScoredHypothesis<T>> = None;
    for h in hyps {
        if h.score() > T::neg_infinity() && best.as_ref().is_none_or(|b| h.score() > b.score()) {
            best = Some(h);
        }
    }
    best
}

/// Completes a prefix under a hypothesis up to `horizon` frames.
pub fn complete_trajectory<T: Scalar>(
    prefix: &[Cell],
    hyp: &ScoredHypothesis<T>,
    est: &Estimate<T>,
    params: &ModelParams<T>,
    horizon: usize,
    dwell: usize,
) -> Result<Vec<Cell>> {
    let xt = *prefix.last().ok_or_else(|| AlmError::Input("empty prefix".into()))?;
    let unreachable = |j: usize| AlmError::Prediction(format!("source {j} unreachable from {xt:?}"));
    let mut cells = prefix.to_vec();
    let extend = |cells: &mut Vec<Cell>, path: &[Cell]| cells.extend_from_slice(&path[1..]);
    match hyp.behavior {
        Behavior::Single | Behavior::Sequential => {
            let (_, leg) = sequential_detour(prefix, &hyp.goals, &est.fields, &est.cmap, params)
                .ok_or_else(|| AlmError::Prediction("prefix crosses an obstacle".into()))?;
            let mut cur = xt;
            for (m, &j) in hyp.goals.iter().enumerate().skip(leg) {
                let path = est.fields[j].c2g.path_from(cur).ok_or_else(|| unreachable(j))?;
                extend(&mut cells, &path);
                cur = est.fields[j].mu;
                if m + 1 < hyp.goals.len() {
                    cells.extend(std::iter::repeat_n(cur, dwell));
                }
            }
        }
        Behavior::Change => {
            let (a, b) = (hyp.goals[0], hyp.goals[1]);
            let from = match hyp.switch {
                Some(SwitchPoint::Planned { steps, .. }) => {
                    let path = est.fields[a].c2g.path_from(xt).ok_or_else(|| unreachable(a))?;
                    extend(&mut cells, &path[..=steps.min(path.len() - 1)]);
                    *cells.last().unwrap()
                }
                _ => xt,
            };
            let path = est.fields[b].c2g.path_from(from).ok_or_else(|| unreachable(b))?;
            extend(&mut cells, &path);
        }
    }
    let end = *cells.last().unwrap();
    let horizon = horizon.max(prefix.len());
    if cells.len() < horizon {
        cells.resize(horizon, end);
    }
    cells.truncate(horizon);
    Ok(cells)
}

/// Offline completion of one agent under its inferred goals.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflinePrediction<T: Scalar> {
    pub agent: u32,
    pub behavior: Behavior,
    pub goals: Vec<usize>,
    pub cells: Vec<Cell>,
    pub t0: usize,
    pub switch_point: Option<SwitchPoint>,
    pub log_likelihood: T,
    pub score: T,
}

/// Predicts one agent from its goal set `goals` (the nonzero entries of its relation row).
pub fn predict_agent<T: Scalar>(
    agent: &Agent,
    goals: &[usize],
    est: &Estimate<T>,
    params: &ModelParams<T>,
    config: &PredictConfig,
) -> Result<OfflinePrediction<T>> {
    let prefix = agent.observed();
    let hyps = enumerate_hypotheses(prefix, goals, &est.fields, &est.cmap, params, config)?;
    let best = best_hypothesis(hyps)
        .ok_or_else(|| AlmError::Prediction(format!("agent {}: every hypothesis has zero likelihood", agent.id)))?;
    let cells = complete_trajectory(prefix, &best, est, params, agent.trajectory.horizon, config.dwell)?;
    Ok(OfflinePrediction {
        agent: agent.id,
        behavior: best.behavior,
        goals: best.goals.clone(),
        cells,
        t0: prefix.len(),
        switch_point: best.switch,
        log_likelihood: best.log_likelihood,
        score: best.score(),
    })
}

/// Offline prediction for every agent under the estimated relations.
pub fn predict_offline<T: Scalar>(
    scene: &Scene<T>,
    est: &Estimate<T>,
    params: &ModelParams<T>,
    config: &PredictConfig,
) -> Result<Vec<OfflinePrediction<T>>> {
    config.validate()?;
    if est.relations.n_agents() != scene.agents.len() {
        return Err(AlmError::Dimension("relations do not match agents".into()));
    }
    scene
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| predict_agent(a, &est.relations.goals(i), est, params, config))
        .collect()
}

/// Best explanation of an agent over all goal subsets and its per-behavior posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct IntentEstimate<T: Scalar> {
    pub best: ScoredHypothesis<T>,
    /// Normalized log-posterior of single, sequential and change.
    pub class_log_posterior: [T; 3],
}

impl<T: Scalar> IntentEstimate<T> {
    pub fn class_posterior(&self) -> [f64; 3] {
        self.class_log_posterior.map(|l| l.to_f64_lossy().exp())
    }
}

/// Scores every goal subset of size at most `max_goals` with every behavior.
pub fn infer_intent<T: Scalar>(
    prefix: &[Cell],
    est: &Estimate<T>,
    params: &ModelParams<T>,
    config: &PredictConfig,
) -> Result<IntentEstimate<T>> {
    let n = est.n_sources();
    let mut by_class: [Vec<T>; 3] = Default::default();
    let mut all = Vec::new();
    for k in 1..=params.max_goals.min(n) {
        for subset in (0..n).combinations(k) {
            for h in enumerate_hypotheses(prefix, &subset, &est.fields, &est.cmap, params, config)? {
                by_class[h.behavior.index()].push(h.score());
                all.push(h);
            }
        }
    }
    let best = best_hypothesis(all).ok_or_else(|| AlmError::Prediction("every hypothesis has zero likelihood".into()))?;
    let class: [T; 3] = by_class.map(|v| log_sum_exp(v));
    let z = log_sum_exp(class);
    Ok(IntentEstimate { best, class_log_posterior: class.map(|c| c - z) })
}

/// [`infer_intent`] for every agent's observed prefix.
pub fn infer_intents<T: Scalar>(
    scene: &Scene<T>,
    est: &Estimate<T>,
    params: &ModelParams<T>,
    config: &PredictConfig,
) -> Result<Vec<IntentEstimate<T>>> {
    config.validate()?;
    scene.agents.iter().map(|a| infer_intent(a.observed(), est, params, config)).collect()
}

/// Relations implied by the goals of each agent's best hypothesis.
pub fn intent_relations<T: Scalar>(intents: &[IntentEstimate<T>], n_sources: usize) -> Result<Relations> {
    let lists: Vec<Vec<usize>> = intents.iter().map(|e| e.best.goals.clone()).collect();
    Relations::from_goal_lists(n_sources, &lists)
}

/// Offline predictions under the estimated relations, each tagged with its behavior posterior.
pub fn offline_document<T: Scalar>(
    scene: &Scene<T>,
    est: &Estimate<T>,
    params: &ModelParams<T>,
    config: &PredictConfig,
) -> Result<PredictionDocument> {
    let preds = predict_offline(scene, est, params, config)?;
    let agents = preds
        .iter()
        .zip(&scene.agents)
        .map(|(p, a)| {
            let mut out = AgentPrediction::from(p);
            out.behavior_scores = Some(infer_intent(a.observed(), est, params, config)?.class_posterior());
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionDocument::new("offline", agents))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Horizon,
    AllGoalsVisited,
    OutOfScene,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineAgent<T: Scalar> {
    pub id: u32,
    /// Observed prefix followed by predicted cells.
    pub cells: Vec<Cell>,
    pub t0: usize,
    pub horizon: usize,
    pub visited: Vec<usize>,
    pub remaining: Vec<usize>,
    /// Goal posterior over all sources after each predicted frame.
    pub posterior: Vec<Vec<T>>,
    pub stop: Option<StopReason>,
}

impl<T: Scalar> OnlineAgent<T> {
    pub fn current(&self) -> Cell {
        *self.cells.last().expect("non-empty track")
    }

    pub fn frame(&self) -> usize {
        self.cells.len() - 1
    }

    pub fn is_active(&self) -> bool {
        self.stop.is_none()
    }

    pub fn predicted(&self) -> &[Cell] {
        &self.cells[self.t0..]
    }

    fn settle(&mut self, fields: &[SourceField<T>], lattice_boundary: impl Fn(Cell) -> bool) {
        let x = self.current();
        while let Some(k) = closest_goal(&self.remaining, fields, x) {
            if fields[k].mu != x {
                break;
            }
            self.remaining.retain(|&j| j != k);
            self.visited.push(k);
        }
        if self.remaining.is_empty() {
            self.stop = Some(if lattice_boundary(x) { StopReason::OutOfScene } else { StopReason::AllGoalsVisited });
        } else if self.cells.len() >= self.horizon {
            self.stop = Some(StopReason::Horizon);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineState<T: Scalar> {
    /// Number of completed prediction steps.
    pub t: usize,
    pub agents: Vec<OnlineAgent<T>>,
    pub relations: Relations,
}

impl<T: Scalar> OnlineState<T> {
    pub fn new(scene: &Scene<T>, est: &Estimate<T>) -> Result<Self> {
        if est.relations.n_agents() != scene.agents.len() {
            return Err(AlmError::Dimension("relations do not match agents".into()));
        }
        let lattice = est.cmap.lattice();
        let agents = scene
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let cells = a.observed().to_vec();
                if cells.is_empty() {
                    return Err(AlmError::Input(format!("agent {} has no observations", a.id)));
                }
                let mut oa = OnlineAgent {
                    id: a.id,
                    t0: cells.len(),
                    cells,
                    horizon: a.trajectory.horizon,
                    visited: Vec::new(),
                    remaining: est.relations.goals(i),
                    posterior: Vec::new(),
                    stop: None,
                };
                oa.settle(&est.fields, |c| lattice.on_boundary(c));
                Ok(oa)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OnlineState { t: 0, agents, relations: est.relations.clone() })
    }

    pub fn is_finished(&self) -> bool {
        self.agents.iter().all(|a| !a.is_active())
    }
}

/// Legal next cells from `x` (stay plus walkable neighbours) in row-major order.
fn candidates(cmap: &ConstraintMap, x: Cell) -> Vec<Cell> {
    let mut c: Vec<Cell> = (-1..=1)
        .flat_map(|dy| (-1..=1).map(move |dx| x.offset(dx, dy)))
        .filter(|&c| cmap.is_walkable(c))
        .collect();
    c.sort();
    c
}

/// Cost of stepping `x -> xi` plus the cost-to-go from `xi`.
pub fn online_cost<T: Scalar>(sf: &SourceField<T>, x: Cell, xi: Cell, params: &ModelParams<T>, kind: StepCost) -> T {
    let (dx, dy) = (xi.x - x.x, xi.y - x.y);
    let step = match kind {
        StepCost::Planner => params.path.edge_weight(&sf.field, x, dx, dy),
        StepCost::Literal => sf.field.magnitude(x) * step_length::<T>(dx, dy),
    };
    step + sf.c2g.cost(xi)
}

/// Next cell of an agent at `x` heading for the source of `sf`; `None` if no candidate has finite cost.
pub fn next_cell<T: Scalar, R: Rng>(
    cmap: &ConstraintMap,
    sf: &SourceField<T>,
    x: Cell,
    params: &ModelParams<T>,
    config: &PredictConfig,
    rng: &mut R,
) -> Option<Cell> {
    let cand: Vec<(Cell, T)> = candidates(cmap, x)
        .into_iter()
        .map(|c| (c, online_cost(sf, x, c, params, config.step_cost)))
        .filter(|(_, k)| k.is_finite())
        .collect();
    if cand.is_empty() {
        return None;
    }
    let steps = |c: Cell| sf.c2g.steps(c).unwrap_or(u32::MAX);
    let by_cost = |a: &&(Cell, T), b: &&(Cell, T)| {
        a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal).then(steps(a.0).cmp(&steps(b.0))).then(a.0.cmp(&b.0))
    };
    let best = cand.iter().min_by(by_cost).expect("non-empty").clone();
    if config.mode == OnlineMode::Argmax || cand.len() == 1 {
        return Some(best.0);
    }
    let lambda = params.path.lambda.to_f64_lossy();
    let kmin = best.1.to_f64_lossy();
    let weights: Vec<f64> = cand.iter().map(|(_, k)| (-lambda * (k.to_f64_lossy() - kmin)).exp()).collect();
    let dist = WeightedIndex::new(&weights).ok()?;
    let (mut mx, mut my) = (0.0, 0.0);
    for _ in 0..config.samples {
        let c = cand[dist.sample(rng)].0;
        mx += f64::from(c.x - x.x);
        my += f64::from(c.y - x.y);
    }
    let (mx, my) = (mx / config.samples as f64, my / config.samples as f64);
    let norm = mx.hypot(my);
    if norm < config.stay_threshold {
        return Some(if cand.iter().any(|(c, _)| *c == x) { x } else { best.0 });
    }
    let (tx, ty) = (f64::from(x.x) + mx / norm, f64::from(x.y) + my / norm);
    cand.iter()
        .filter(|(c, _)| *c != x)
        .map(|(c, _)| *c)
        .min_by(|a, b| {
            let da = (f64::from(a.x) - tx).hypot(f64::from(a.y) - ty);
            let db = (f64::from(b.x) - tx).hypot(f64::from(b.y) - ty);
            da.total_cmp(&db).then(a.cmp(b))
        })
        .or(Some(best.0))
}

/// Normalized goal posterior over all sources: `theta_j * exp(-lambda * detour_j)`.
pub fn goal_posterior<T: Scalar>(cells: &[Cell], est: &Estimate<T>, theta: &[T], params: &ModelParams<T>) -> Vec<T> {
    let logs: Vec<T> = est
        .fields
        .iter()
        .zip(theta)
        .map(|(sf, &th)| match prefix_detour(cells, sf, &est.cmap, params) {
            Some(d) => th.ln() - params.path.lambda * d,
            None => T::neg_infinity(),
        })
        .collect();
    let z = log_sum_exp(logs.iter().copied());
    if !z.is_finite() {
        return vec![T::one() / T::from_usize_lossy(logs.len().max(1)); logs.len()];
    }
    logs.into_iter().map(|l| (l - z).exp()).collect()
}

fn relation_target<T: Scalar>(cells: &[Cell], goals: &[usize], relations: &Relations, est: &Estimate<T>, params: &ModelParams<T>) -> T {
    let ll = agent_log_likelihood(cells, goals, &est.fields, &est.cmap, params);
    let prior = relation_log_prior(relations, &smoothed_theta::<T>(relations)).unwrap_or(T::neg_infinity());
    ll + implied_behavior_log_prior(goals.len(), params.kappa) + prior
}

/// Relation-only Metropolis-Hastings moves on active agents given their tracks so far.
fn resample_relations<T: Scalar, R: Rng>(
    state: &mut OnlineState<T>,
    est: &Estimate<T>,
    params: &ModelParams<T>,
    proposals: usize,
    rng: &mut R,
) {
    let n = est.n_sources();
    let active: Vec<usize> = (0..state.agents.len()).filter(|&i| state.agents[i].is_active()).collect();
    for _ in 0..proposals {
        let Some(&i) = active.choose(rng) else { return };
        let goals = state.relations.goals(i);
        let count = goals.len();
        let mut moves = Vec::with_capacity(3);
        if count < n {
            moves.push(0);
            if count < params.max_goals {
                moves.push(1);
            }
        }
        if count > 1 {
            moves.push(2);
        }
        let Some(&m) = moves.choose(rng) else { continue };
        let others: Vec<usize> = (0..n).filter(|j| !goals.contains(j)).collect();
        let mut new_goals = goals.clone();
        match m {
            0 => {
                let k = rng.random_range(0..count);
                new_goals[k] = *others.choose(rng).expect("a free source exists");
            }
            1 => new_goals.push(*others.choose(rng).expect("a free source exists")),
            _ => {
                new_goals.remove(rng.random_range(0..count));
            }
        }
        let cells = &state.agents[i].cells;
        let cur = relation_target(cells, &goals, &state.relations, est, params);
        let mut cand_rel = state.relations.clone();
        cand_rel.set_goals(i, &new_goals);
        let cand = relation_target(cells, &new_goals, &cand_rel, est, params);
        let log_a = (cand - cur).to_f64_lossy();
        let ok = if cand == T::neg_infinity() || cand.is_nan() {
            false
        } else {
            cur == T::neg_infinity() || log_a >= 0.0 || rng.random::<f64>().ln() < log_a
        };
        if ok {
            state.relations = cand_rel;
            let a = &mut state.agents[i];
            a.remaining = new_goals.into_iter().filter(|j| !a.visited.contains(j)).collect();
        }
    }
}

/// Advances every active agent by one frame, then re-estimates relations.
pub fn online_step<T: Scalar, R: Rng>(
    mut state: OnlineState<T>,
    est: &Estimate<T>,
    params: &ModelParams<T>,
    config: &PredictConfig,
    rng: &mut R,
) -> OnlineState<T> {
    let lattice = est.cmap.lattice();
    let theta = smoothed_theta::<T>(&state.relations);
    for a in state.agents.iter_mut().filter(|a| a.is_active()) {
        let x = a.current();
        let next = closest_goal(&a.remaining, &est.fields, x)
            .and_then(|j| next_cell(&est.cmap, &est.fields[j], x, params, config, rng))
            .unwrap_or(x);
        a.cells.push(next);
        a.posterior.push(goal_posterior(&a.cells, est, &theta, params));
    }
    resample_relations(&mut state, est, params, config.relation_proposals, rng);
    for a in state.agents.iter_mut().filter(|a| a.is_active()) {
        a.settle(&est.fields, |c| lattice.on_boundary(c));
    }
    state.t += 1;
    state
}

/// Runs [`online_step`] until every agent has stopped.
pub fn online_run<T: Scalar, R: Rng>(
    scene: &Scene<T>,
    est: &Estimate<T>,
    params: &ModelParams<T>,
    config: &PredictConfig,
    rng: &mut R,
) -> Result<OnlineState<T>> {
    config.validate()?;
    let mut state = OnlineState::new(scene, est)?;
    while !state.is_finished() {
        state = online_step(state, est, params, config, rng);
    }
    Ok(state)
}

pub const PREDICTION_FORMAT: &str = "alm-prediction";

/// Serialized prediction of one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentPrediction {
    pub id: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub behavior: Option<Behavior>,
    pub goals: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub switch_point: Option<Cell>,
    pub t0: usize,
    pub cells: Vec<Cell>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub goal_posterior: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stop: Option<StopReason>,
    /// Posterior of single, sequential and change.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub behavior_scores: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionDocument {
    pub format: String,
    pub version: u32,
    pub method: String,
    pub agents: Vec<AgentPrediction>,
}

impl PredictionDocument {
    pub fn new(method: &str, agents: Vec<AgentPrediction>) -> Self {
        PredictionDocument { format: PREDICTION_FORMAT.into(), version: 1, method: method.into(), agents }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(crate::scene::to_pretty_json(&serde_json::to_value(self)?))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PredictionDocument = serde_json::from_str(text)?;
        if doc.format != PREDICTION_FORMAT || doc.version != 1 {
            return Err(AlmError::Format(format!("unsupported prediction document {:?} v{}", doc.format, doc.version)));
        }
        Ok(doc)
    }
}

impl<T: Scalar> From<&OfflinePrediction<T>> for AgentPrediction {
    fn from(p: &OfflinePrediction<T>) -> Self {
        AgentPrediction {
            id: p.agent,
            behavior: Some(p.behavior),
            goals: p.goals.clone(),
            switch_point: p.switch_point.map(|s| s.cell()),
            t0: p.t0,
            cells: p.cells.clone(),
            goal_posterior: Vec::new(),
            stop: None,
            behavior_scores: None,
        }
    }
}

impl<T: Scalar> From<&OnlineAgent<T>> for AgentPrediction {
    fn from(a: &OnlineAgent<T>) -> Self {
        AgentPrediction {
            id: a.id,
            behavior: None,
            goals: a.visited.iter().chain(&a.remaining).copied().collect(),
            switch_point: None,
            t0: a.t0,
            cells: a.cells.clone(),
            goal_posterior: a.posterior.iter().map(|p| p.iter().map(|v| v.to_f64_lossy()).collect()).collect(),
            stop: a.stop,
            behavior_scores: None,
        }
    }
}

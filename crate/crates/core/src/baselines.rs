//! Comparison predictors: straight line (SP), random walk (RW), physical move (PM) and greedy move (GM).

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AlmError, Result};
use crate::field::{lm_sum_field, VectorField};
use crate::model::{Estimate, ModelParams};
use crate::predict::{AgentPrediction, PredictionDocument};
use crate::scalar::Scalar;
use crate::scene::{Agent, Cell, ConstraintMap, Scene, NEIGHBOR_OFFSETS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Sp,
    Rw,
    Pm,
    Gm,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::Sp, Baseline::Rw, Baseline::Pm, Baseline::Gm];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Sp => "sp",
            Baseline::Rw => "rw",
            Baseline::Pm => "pm",
            Baseline::Gm => "gm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| AlmError::Input(format!("unknown baseline {s:?}")))
    }
}

/// Sharpness of the greedy goal posterior `exp(tau * (|x_j - x_t| - |x_j - x_0|))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GreedyParams<T: Scalar> {
    pub tau: T,
}

impl<T: Scalar> Default for GreedyParams<T> {
    fn default() -> Self {
        GreedyParams { tau: T::lit(-0.1) }
    }
}

impl<T: Scalar> GreedyParams<T> {
    /// Positive sharpness, rewarding goals the agent moved away from.
    pub fn literal_sign() -> Self {
        GreedyParams { tau: T::lit(0.1) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau == T::zero() || !self.tau.is_finite() {
            return Err(AlmError::Input("tau must be finite and non-zero".into()));
        }
        Ok(())
    }
}

fn pad(mut cells: Vec<Cell>, horizon: usize) -> Vec<Cell> {
    let last = *cells.last().expect("non-empty track");
    if cells.len() < horizon {
        cells.resize(horizon, last);
    }
    cells
}

/// 8-connected raster segment from `a` to `b`, both ends included.
pub fn raster_line(a: Cell, b: Cell) -> Vec<Cell> {
    let (dx, dy) = ((b.x - a.x).abs(), -(b.y - a.y).abs());
    let (sx, sy) = ((b.x - a.x).signum(), (b.y - a.y).signum());
    let mut err = dx + dy;
    let mut c = a;
    let mut out = vec![c];
    while c != b {
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            c.x += sx;
        }
        if e2 <= dx {
            err += dx;
            c.y += sy;
        }
        out.push(c);
    }
    out
}

fn nearest_goal<T: Scalar>(goals: &[usize], est: &Estimate<T>, from: Cell) -> Option<usize> {
    goals.iter().copied().min_by(|&a, &b| {
        let (da, db) = (from.euclidean::<f64>(est.fields[a].mu), from.euclidean::<f64>(est.fields[b].mu));
        da.total_cmp(&db).then(a.cmp(&b))
    })
}

/// Straight segment from the current cell to the nearest inferred goal, ignoring obstacles.
pub fn shortest_path_baseline<T: Scalar>(agent: &Agent, goals: &[usize], est: &Estimate<T>) -> Result<Vec<Cell>> {
    let prefix = agent.observed();
    let x = agent.current();
    let j = nearest_goal(goals, est, x).ok_or_else(|| AlmError::Prediction(format!("agent {} has no goal", agent.id)))?;
    let mut cells = prefix.to_vec();
    cells.extend_from_slice(&raster_line(x, est.fields[j].mu)[1..]);
    Ok(pad(cells, agent.trajectory.horizon))
}

/// Legal moves from `x`: stay and every walkable neighbour, stay first.
pub fn legal_moves(cmap: &ConstraintMap, x: Cell) -> Vec<Cell> {
    std::iter::once(x)
        .chain(NEIGHBOR_OFFSETS.iter().map(|&(dx, dy)| x.offset(dx, dy)))
        .filter(|&c| cmap.is_walkable(c))
        .collect()
}

/// Uniform walk over the 9 actions, redrawing moves onto non-walkable cells.
pub fn random_walk_baseline<R: Rng>(agent: &Agent, cmap: &ConstraintMap, horizon: usize, rng: &mut R) -> Vec<Cell> {
    let mut cells = agent.observed().to_vec();
    while cells.len() < horizon {
        let x = *cells.last().unwrap();
        let moves = legal_moves(cmap, x);
        cells.push(*moves.choose(rng).unwrap_or(&x));
    }
    cells
}

/// Mean per-step negative log-likelihood of `cells[t1..=t2]` under the random walk.
pub fn random_walk_nll<T: Scalar>(cmap: &ConstraintMap, cells: &[Cell], t1: usize, t2: usize) -> Result<T> {
    if t1 >= t2 || t2 >= cells.len() {
        return Err(AlmError::Metric(format!("invalid frame range {t1}..={t2} for {} frames", cells.len())));
    }
    let mut total = T::zero();
    for w in cells[t1..=t2].windows(2) {
        let moves = legal_moves(cmap, w[0]);
        if !moves.contains(&w[1]) {
            return Ok(T::infinity());
        }
        total = total + T::from_usize_lossy(moves.len()).ln();
    }
    Ok(total / T::from_usize_lossy(t2 - t1))
}

fn align_step<T: Scalar>(field: &VectorField<T>, cmap: &ConstraintMap, x: Cell) -> Cell {
    let f = field.at(x);
    if field.magnitude(x) <= T::lit(1e-12) {
        return x;
    }
    let mut best = (x, T::zero());
    for c in legal_moves(cmap, x).into_iter().skip(usize::from(cmap.is_walkable(x))) {
        let (dx, dy) = (T::from_i32(c.x - x.x).unwrap(), T::from_i32(c.y - x.y).unwrap());
        let a = (f[0] * dx + f[1] * dy) / dx.hypot(dy);
        if a > best.1 {
            best = (c, a);
        }
    }
    best.0
}

/// Follows the summed field of all sources and obstacles, one legal move per frame.
pub fn physical_move_baseline<T: Scalar>(agent: &Agent, field: &VectorField<T>, cmap: &ConstraintMap, horizon: usize) -> Vec<Cell> {
    let mut cells = agent.observed().to_vec();
    while cells.len() < horizon {
        let x = *cells.last().unwrap();
        cells.push(align_step(field, cmap, x));
    }
    cells
}

/// Goal index with the highest greedy score from `x`, ties to the lowest index.
pub fn greedy_goal<T: Scalar>(est: &Estimate<T>, start: Cell, x: Cell, gp: &GreedyParams<T>) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (j, sf) in est.fields.iter().enumerate() {
        let e = gp.tau * (x.euclidean::<T>(sf.mu) - start.euclidean::<T>(sf.mu));
        if best.is_none_or(|(_, b)| e > b) {
            best = Some((j, e));
        }
    }
    best.map(|b| b.0)
}

/// Steps along the optimal path toward the greedy goal, re-chosen every frame.
pub fn greedy_move_baseline<T: Scalar>(agent: &Agent, est: &Estimate<T>, gp: &GreedyParams<T>, horizon: usize) -> Result<(Vec<Cell>, Vec<usize>)> {
    gp.validate()?;
    if est.n_sources() == 0 {
        return Err(AlmError::Input("greedy move needs at least one source".into()));
    }
    let start = agent.start();
    let mut cells = agent.observed().to_vec();
    let mut goals = Vec::new();
    while cells.len() < horizon {
        let x = *cells.last().unwrap();
        let j = greedy_goal(est, start, x, gp).expect("at least one source");
        goals.push(j);
        cells.push(est.fields[j].c2g.next(x).unwrap_or(x));
    }
    Ok((cells, goals))
}

/// Runs one baseline on every agent and tags the document with its name.
pub fn baseline_document<T: Scalar, R: Rng>(
    which: Baseline,
    scene: &Scene<T>,
    est: &Estimate<T>,
    params: &ModelParams<T>,
    gp: &GreedyParams<T>,
    rng: &mut R,
) -> Result<PredictionDocument> {
    if est.relations.n_agents() != scene.agents.len() {
        return Err(AlmError::Dimension("relations do not match agents".into()));
    }
    let sum = (which == Baseline::Pm).then(|| lm_sum_field(&est.cmap, &est.mus(), &params.field));
    let mut out = Vec::with_capacity(scene.agents.len());
    for (i, a) in scene.agents.iter().enumerate() {
        let horizon = a.trajectory.horizon;
        let goals = est.relations.goals(i);
        let (cells, goals) = match which {
            Baseline::Sp => (shortest_path_baseline(a, &goals, est)?, goals),
            Baseline::Rw => (random_walk_baseline(a, &est.cmap, horizon, rng), Vec::new()),
            Baseline::Pm => (physical_move_baseline(a, sum.as_ref().unwrap(), &est.cmap, horizon), Vec::new()),
            Baseline::Gm => {
                let (cells, per_frame) = greedy_move_baseline(a, est, gp, horizon)?;
                (cells, per_frame.last().map(|&j| vec![j]).unwrap_or_default())
            }
        };
        out.push(AgentPrediction {
            id: a.id,
            behavior: None,
            goals,
            switch_point: None,
            t0: a.observed().len(),
            cells,
            goal_posterior: Vec::new(),
            stop: None,
            behavior_scores: None,
        });
    }
    Ok(PredictionDocument::new(which.name(), out))
}

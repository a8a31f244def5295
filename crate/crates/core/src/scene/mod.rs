//! Lattice world: cells, constraint map, sources, agents, trajectories and intents.

mod io;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{AlmError, Result};
use crate::scalar::Scalar;

pub use io::{read_scene, scene_from_str, scene_to_string, to_pretty_json, write_scene, SCENE_FORMAT, SCENE_VERSION};

/// Integer lattice coordinate. Ordered row-major: by `y`, then `x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(from = "(i32, i32)", into = "(i32, i32)")]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Cell { x, y }
    }

    pub fn offset(self, dx: i32, dy: i32) -> Cell {
        Cell::new(self.x + dx, self.y + dy)
    }

    /// Chebyshev (king-move) distance.
    pub fn chebyshev(self, other: Cell) -> i32 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }

    pub fn euclidean<T: Scalar>(self, other: Cell) -> T {
        let dx = T::from_i32(self.x - other.x).unwrap();
        let dy = T::from_i32(self.y - other.y).unwrap();
        dx.hypot(dy)
    }

    pub fn is_adjacent_or_same(self, other: Cell) -> bool {
        self.chebyshev(other) <= 1
    }
}

impl Ord for Cell {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.y, self.x).cmp(&(other.y, other.x))
    }
}

impl PartialOrd for Cell {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl From<(i32, i32)> for Cell {
    fn from((x, y): (i32, i32)) -> Self {
        Cell::new(x, y)
    }
}

impl From<Cell> for (i32, i32) {
    fn from(c: Cell) -> Self {
        (c.x, c.y)
    }
}

/// The eight king-move offsets in row-major order.
pub const NEIGHBOR_OFFSETS: [(i32, i32); 8] =
    [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// Rectangular 8-connected lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lattice {
    pub width: usize,
    pub height: usize,
}

impl Lattice {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(AlmError::Input(format!("lattice must be at least 2x2, got {width}x{height}")));
        }
        Ok(Lattice { width, height })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.width && (c.y as usize) < self.height
    }

    pub fn on_boundary(&self, c: Cell) -> bool {
        self.contains(c)
            && (c.x == 0 || c.y == 0 || c.x as usize == self.width - 1 || c.y as usize == self.height - 1)
    }

    /// Row-major index; caller guarantees `contains(c)`.
    #[inline]
    pub fn index(&self, c: Cell) -> usize {
        c.y as usize * self.width + c.x as usize
    }

    #[inline]
    pub fn cell(&self, idx: usize) -> Cell {
        Cell::new((idx % self.width) as i32, (idx / self.width) as i32)
    }

    pub fn checked_index(&self, c: Cell) -> Result<usize> {
        if self.contains(c) {
            Ok(self.index(c))
        } else {
            Err(AlmError::OutOfBounds { cell: c, width: self.width, height: self.height })
        }
    }

    /// In-lattice 8-neighbors of `c`, row-major.
    pub fn neighbors(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        NEIGHBOR_OFFSETS.iter().map(move |&(dx, dy)| c.offset(dx, dy)).filter(|n| self.contains(*n))
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.len()).map(|i| self.cell(i))
    }

    /// Diagonal extent of the lattice in cells.
    pub fn size<T: Scalar>(&self) -> T {
        T::from_usize_lossy(self.width).hypot(T::from_usize_lossy(self.height))
    }
}

/// Per-cell walkability labels: `+1` walkable, `-1` not.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConstraintMap {
    lattice: Lattice,
    labels: Vec<i8>,
}

impl ConstraintMap {
    pub fn all_walkable(lattice: Lattice) -> Self {
        ConstraintMap { lattice, labels: vec![1; lattice.len()] }
    }

    pub fn from_labels(lattice: Lattice, labels: Vec<i8>) -> Result<Self> {
        if labels.len() != lattice.len() {
            return Err(AlmError::Dimension(format!(
                "constraint map has {} labels for a {}-cell lattice",
                labels.len(),
                lattice.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != 1 && l != -1) {
            return Err(AlmError::Input(format!("constraint label {bad} is not +1/-1")));
        }
        Ok(ConstraintMap { lattice, labels })
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    /// Label at `c`; cells outside the lattice read as non-walkable.
    pub fn label(&self, c: Cell) -> i8 {
        if self.lattice.contains(c) {
            self.labels[self.lattice.index(c)]
        } else {
            -1
        }
    }

    pub fn is_walkable(&self, c: Cell) -> bool {
        self.label(c) == 1
    }

    pub fn set(&mut self, c: Cell, label: i8) {
        let i = self.lattice.index(c);
        self.labels[i] = if label >= 0 { 1 } else { -1 };
    }

    /// Negates the label at `c`.
    pub fn flip(&mut self, c: Cell) {
        let i = self.lattice.index(c);
        self.labels[i] = -self.labels[i];
    }

    pub fn walkable_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn walkable_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.lattice.cells().filter(|c| self.is_walkable(*c))
    }

    pub fn obstacle_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.lattice.cells().filter(|c| !self.is_walkable(*c))
    }

    /// Walkable in-lattice 8-neighbors of `c`, row-major.
    pub fn walkable_neighbors(&self, c: Cell) -> Result<Vec<Cell>> {
        self.lattice.checked_index(c)?;
        Ok(self.lattice.neighbors(c).filter(|n| self.is_walkable(*n)).collect())
    }

    /// Run-length encoding of each row as `(label, run)` pairs.
    pub fn to_rle_rows(&self) -> Vec<Vec<(i8, usize)>> {
        self.labels
            .chunks(self.lattice.width)
            .map(|row| {
                let mut runs: Vec<(i8, usize)> = Vec::new();
                for &l in row {
                    match runs.last_mut() {
                        Some((label, n)) if *label == l => *n += 1,
                        _ => runs.push((l, 1)),
                    }
                }
                runs
            })
            .collect()
    }

    pub fn from_rle_rows(lattice: Lattice, rows: &[Vec<(i8, usize)>]) -> Result<Self> {
        if rows.len() != lattice.height {
            return Err(AlmError::Dimension(format!("{} RLE rows for height {}", rows.len(), lattice.height)));
        }
        let mut labels = Vec::with_capacity(lattice.len());
        for (y, row) in rows.iter().enumerate() {
            let before = labels.len();
            for &(l, n) in row {
                labels.extend(std::iter::repeat_n(l, n));
            }
            if labels.len() - before != lattice.width {
                return Err(AlmError::Dimension(format!("RLE row {y} decodes to {} cells", labels.len() - before)));
            }
        }
        Self::from_labels(lattice, labels)
    }

    /// True if every walkable cell is reachable from every other (8-connectivity).
    pub fn walkable_connected(&self) -> bool {
        let Some(first) = self.walkable_cells().next() else {
            return true;
        };
        let mut seen = vec![false; self.lattice.len()];
        let mut stack = vec![first];
        seen[self.lattice.index(first)] = true;
        let mut count = 1;
        while let Some(c) = stack.pop() {
            for n in self.lattice.neighbors(c) {
                let i = self.lattice.index(n);
                if !seen[i] && self.labels[i] == 1 {
                    seen[i] = true;
                    count += 1;
                    stack.push(n);
                }
            }
        }
        count == self.walkable_count()
    }
}

/// Latent functional object: location and 2x2 spatial covariance (cell² units).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Source<T: Scalar> {
    pub mu: Cell,
    pub sigma: [[T; 2]; 2],
}

impl<T: Scalar> Source<T> {
    pub fn isotropic(mu: Cell, variance: T) -> Self {
        Source { mu, sigma: [[variance, T::zero()], [T::zero(), variance]] }
    }

    pub fn is_symmetric(&self) -> bool {
        self.sigma[0][1] == self.sigma[1][0]
    }

    /// Symmetric with strictly positive eigenvalues.
    pub fn is_positive_definite(&self) -> bool {
        let [[a, b], [_, d]] = self.sigma;
        self.is_symmetric() && a > T::zero() && a * d - b * b > T::zero() && a.is_finite() && d.is_finite()
    }

    /// Half-widths of the axis-aligned box around the `k`-sigma ellipse.
    pub fn ellipse_half_extent(&self, k: T) -> (T, T) {
        (k * self.sigma[0][0].sqrt(), k * self.sigma[1][1].sqrt())
    }
}

/// Trajectory over frames `0..cells.len()`; `cells[..t0]` is observed, `horizon` is the final frame count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    pub cells: Vec<Cell>,
    pub t0: usize,
    pub horizon: usize,
}

impl Trajectory {
    pub fn new(cells: Vec<Cell>, t0: usize, horizon: usize) -> Self {
        Trajectory { cells, t0, horizon }
    }

    /// Fully observed trajectory.
    pub fn observed(cells: Vec<Cell>) -> Self {
        let n = cells.len();
        Trajectory { cells, t0: n, horizon: n }
    }

    pub fn prefix(&self) -> &[Cell] {
        &self.cells[..self.t0.min(self.cells.len())]
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn first(&self) -> Option<Cell> {
        self.cells.first().copied()
    }

    /// Largest per-frame Chebyshev step.
    pub fn max_step(&self) -> i32 {
        self.cells.windows(2).map(|w| w[0].chebyshev(w[1])).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Agent {
    pub id: u32,
    pub trajectory: Trajectory,
}

impl Agent {
    pub fn observed(&self) -> &[Cell] {
        self.trajectory.prefix()
    }

    pub fn start(&self) -> Cell {
        self.trajectory.cells[0]
    }

    /// Last observed cell, i.e. the agent's location at `t0`.
    pub fn current(&self) -> Cell {
        *self.observed().last().expect("non-empty observed prefix")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    Single,
    Sequential,
    Change,
}

impl Behavior {
    pub const ALL: [Behavior; 3] = [Behavior::Single, Behavior::Sequential, Behavior::Change];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Behavior::Single => "single",
            Behavior::Sequential => "sequential",
            Behavior::Change => "change",
        }
    }
}

/// Binary agent x source relation matrix.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Relations {
    n_sources: usize,
    rows: Vec<Vec<bool>>,
}

impl Relations {
    pub fn new(n_agents: usize, n_sources: usize) -> Self {
        Relations { n_sources, rows: vec![vec![false; n_sources]; n_agents] }
    }

    pub fn from_goal_lists(n_sources: usize, goals: &[Vec<usize>]) -> Result<Self> {
        let mut r = Relations::new(goals.len(), n_sources);
        for (i, g) in goals.iter().enumerate() {
            for &j in g {
                if j >= n_sources {
                    return Err(AlmError::Dimension(format!("goal {j} >= {n_sources} sources")));
                }
                r.rows[i][j] = true;
            }
        }
        Ok(r)
    }

    pub fn n_agents(&self) -> usize {
        self.rows.len()
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn get(&self, agent: usize, source: usize) -> bool {
        self.rows[agent][source]
    }

    pub fn set(&mut self, agent: usize, source: usize, value: bool) {
        self.rows[agent][source] = value;
    }

    pub fn row(&self, agent: usize) -> &[bool] {
        &self.rows[agent]
    }

    pub fn goals(&self, agent: usize) -> Vec<usize> {
        self.rows[agent].iter().enumerate().filter(|(_, &r)| r).map(|(j, _)| j).collect()
    }

    pub fn count(&self, agent: usize) -> usize {
        self.rows[agent].iter().filter(|&&r| r).count()
    }

    pub fn set_goals(&mut self, agent: usize, goals: &[usize]) {
        self.rows[agent].iter_mut().for_each(|r| *r = false);
        for &j in goals {
            self.rows[agent][j] = true;
        }
    }

    /// `b_j`: number of agents selecting each source.
    pub fn column_counts(&self) -> Vec<usize> {
        let mut b = vec![0; self.n_sources];
        for row in &self.rows {
            for (j, &r) in row.iter().enumerate() {
                b[j] += r as usize;
            }
        }
        b
    }

    pub fn push_source(&mut self) {
        self.n_sources += 1;
        self.rows.iter_mut().for_each(|r| r.push(false));
    }

    pub fn remove_source(&mut self, j: usize) {
        self.n_sources -= 1;
        self.rows.iter_mut().for_each(|r| {
            r.remove(j);
        });
    }

    /// Every agent has between 1 and `max_goals` goals.
    pub fn is_valid(&self, max_goals: usize) -> bool {
        (0..self.n_agents()).all(|i| (1..=max_goals).contains(&self.count(i)))
    }
}

/// Relations plus per-agent behavior labels and their hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct IntentState<T: Scalar> {
    pub relations: Relations,
    pub behaviors: Vec<Behavior>,
    pub kappa: T,
    pub gamma: T,
    pub max_goals: usize,
}

impl<T: Scalar> IntentState<T> {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.behaviors.len() != self.relations.n_agents() {
            v.push("behavior count differs from agent count".to_string());
        }
        let unit = T::zero()..=T::one();
        if !unit.contains(&self.kappa) {
            v.push(format!("kappa {} outside [0,1]", self.kappa));
        }
        if !unit.contains(&self.gamma) {
            v.push(format!("gamma {} outside [0,1]", self.gamma));
        }
        for i in 0..self.relations.n_agents() {
            let n = self.relations.count(i);
            if n < 1 || n > self.max_goals {
                v.push(format!("agent {i} has {n} goals"));
            }
            if self.behaviors.get(i) == Some(&Behavior::Single) && n != 1 {
                v.push(format!("agent {i} is single with {n} goals"));
            }
        }
        v
    }
}

/// Optional per-cell appearance descriptor: RGB in [0,1] plus a ground-surface flag.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureChannel<T: Scalar> {
    pub values: Vec<[T; 4]>,
}

/// Axis-aligned inclusive cell box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl BBox {
    pub fn around(c: Cell, half: i32) -> Self {
        BBox { x0: c.x - half, y0: c.y - half, x1: c.x + half, y1: c.y + half }
    }

    pub fn clip(self, lattice: Lattice) -> Self {
        BBox {
            x0: self.x0.max(0),
            y0: self.y0.max(0),
            x1: self.x1.min(lattice.width as i32 - 1),
            y1: self.y1.min(lattice.height as i32 - 1),
        }
    }

    pub fn area(&self) -> i64 {
        if self.x1 < self.x0 || self.y1 < self.y0 {
            0
        } else {
            (self.x1 - self.x0 + 1) as i64 * (self.y1 - self.y0 + 1) as i64
        }
    }

    pub fn intersection(&self, o: &BBox) -> BBox {
        BBox { x0: self.x0.max(o.x0), y0: self.y0.max(o.y0), x1: self.x1.min(o.x1), y1: self.y1.min(o.y1) }
    }

    pub fn iou<T: Scalar>(&self, o: &BBox) -> T {
        let inter = self.intersection(o).area();
        let union = self.area() + o.area() - inter;
        if union == 0 {
            T::zero()
        } else {
            T::from_i64(inter).unwrap() / T::from_i64(union).unwrap()
        }
    }
}

/// Evaluation-only truth attached to synthetic scenes.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GroundTruth {
    pub sources: Vec<(Cell, BBox)>,
    /// Ordered goal sequence per agent.
    pub goals: Vec<Vec<usize>>,
    pub behaviors: Vec<Behavior>,
    pub switch_points: Vec<Option<Cell>>,
    /// Optional per-source class label (functional-clustering suites).
    pub source_labels: Vec<usize>,
}

impl GroundTruth {
    pub fn relations(&self) -> Relations {
        Relations::from_goal_lists(self.sources.len(), &self.goals).expect("ground-truth goals in range")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene<T: Scalar> {
    pub lattice: Lattice,
    pub cmap: ConstraintMap,
    pub sources: Vec<Source<T>>,
    pub agents: Vec<Agent>,
    pub features: Option<FeatureChannel<T>>,
    pub ground_truth: Option<GroundTruth>,
}

/// Outcome of [`validate_scene`]: hard violations and soft warnings.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Validation {
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl<T: Scalar> Scene<T> {
    pub fn new(cmap: ConstraintMap) -> Self {
        Scene {
            lattice: cmap.lattice(),
            cmap,
            sources: Vec::new(),
            agents: Vec::new(),
            features: None,
            ground_truth: None,
        }
    }

    pub fn walkable_neighbors(&self, cell: Cell) -> Result<Vec<Cell>> {
        self.cmap.walkable_neighbors(cell)
    }

    pub fn validate(&self) -> Validation {
        validate_scene(self)
    }
}

pub fn validate_scene<T: Scalar>(scene: &Scene<T>) -> Validation {
    let mut v = Validation::default();
    let lat = scene.lattice;
    if lat.width < 2 || lat.height < 2 {
        v.violations.push(format!("lattice {}x{} smaller than 2x2", lat.width, lat.height));
    }
    if scene.cmap.lattice() != lat {
        v.violations.push("constraint map lattice differs from scene lattice".into());
    }
    for (j, s) in scene.sources.iter().enumerate() {
        if !lat.contains(s.mu) {
            v.violations.push(format!("source {j} outside lattice"));
        } else if !scene.cmap.is_walkable(s.mu) {
            v.warnings.push(format!("source {j} on a non-walkable cell"));
        }
        if !s.is_positive_definite() {
            v.violations.push(format!("source {j} covariance not symmetric positive-definite"));
        }
    }
    for a in &scene.agents {
        let t = &a.trajectory;
        if t.cells.is_empty() || t.t0 == 0 {
            v.violations.push(format!("agent {}: empty observed prefix", a.id));
            continue;
        }
        if t.t0 > t.horizon {
            v.violations.push(format!("agent {}: t0 {} > horizon {}", a.id, t.t0, t.horizon));
        }
        if t.t0 > t.cells.len() || t.cells.len() > t.horizon {
            v.violations.push(format!("agent {}: {} frames inconsistent with t0/horizon", a.id, t.cells.len()));
        }
        if let Some(c) = t.cells.iter().find(|c| !lat.contains(**c)) {
            v.violations.push(format!("agent {}: cell ({}, {}) outside lattice", a.id, c.x, c.y));
        }
        if t.max_step() > 1 {
            v.violations.push(format!("agent {}: step > 1", a.id));
        }
    }
    if let Some(f) = &scene.features {
        if f.values.len() != lat.len() {
            v.violations.push(format!("feature channel has {} cells, lattice has {}", f.values.len(), lat.len()));
        }
    }
    if let Some(gt) = &scene.ground_truth {
        if gt.goals.len() != scene.agents.len() || gt.behaviors.len() != scene.agents.len() {
            v.violations.push("ground truth agent count mismatch".into());
        }
        if gt.goals.iter().flatten().any(|&j| j >= gt.sources.len()) {
            v.violations.push("ground truth goal index out of range".into());
        }
    }
    v
}

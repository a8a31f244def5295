//! Toy scene layouts and simulated agents with known intents.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cluster::Dihedral;
use crate::error::{AlmError, Result};
use crate::model::{source_fields, ModelParams, SourceField};
use crate::scalar::Scalar;
use crate::scene::{Agent, BBox, Behavior, Cell, ConstraintMap, FeatureChannel, GroundTruth, Lattice, Scene, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub n_sources: usize,
    pub n_agents: usize,
    pub obstacle_ratio: f64,
    /// Probability of stepping to a neighbor of the planned cell instead.
    pub jitter: f64,
    /// Cells per frame, at most 1.
    pub speed: f64,
    /// Probabilities of single, sequential and change behaviors.
    pub behavior_mix: [f64; 3],
    /// Frames spent at intermediate goals.
    pub dwell: usize,
    /// Frames spent at the final goal.
    pub end_dwell: usize,
    pub min_spawn_distance: f64,
    pub min_source_separation: f64,
    /// Smallest angle in degrees between the headings to the old and new goal at a change of intent.
    pub min_turn_degrees: f64,
    pub features: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 32,
            height: 32,
            n_sources: 2,
            n_agents: 20,
            obstacle_ratio: 0.15,
            jitter: 0.2,
            speed: 1.0,
            behavior_mix: [1.0, 0.0, 0.0],
            dwell: 10,
            end_dwell: 20,
            min_spawn_distance: 6.0,
            min_source_separation: 8.0,
            min_turn_degrees: 0.0,
            features: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.obstacle_ratio) {
            return Err(AlmError::Input("obstacle_ratio must lie in [0, 0.5]".into()));
        }
        let total: f64 = self.behavior_mix.iter().sum();
        if self.behavior_mix.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(AlmError::Input("behavior mix must lie on the simplex".into()));
        }
        if !(self.speed > 0.0 && self.speed <= 1.0) {
            return Err(AlmError::Input("speed must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(AlmError::Input("jitter must lie in [0, 1]".into()));
        }
        if !(0.0..=180.0).contains(&self.min_turn_degrees) {
            return Err(AlmError::Input("min_turn_degrees must lie in [0, 180]".into()));
        }
        if self.n_sources == 0 {
            return Err(AlmError::Input("at least one source is required".into()));
        }
        Lattice::new(self.width, self.height)?;
        Ok(())
    }
}

/// Ground-truth box half-width around each source.
pub const GT_BOX_HALF: i32 = 2;

fn obstacle_layout<R: Rng>(lat: Lattice, target: f64, rng: &mut R) -> Option<ConstraintMap> {
    let mut m = ConstraintMap::all_walkable(lat);
    if target <= 0.0 {
        return Some(m);
    }
    let n = lat.len() as f64;
    let (lo, hi) = (target - 0.02, target + 0.02);
    let mut failures = 0;
    while ((lat.len() - m.walkable_count()) as f64) / n < lo {
        let w = rng.random_range(2..=6.min(lat.width)) as i32;
        let h = rng.random_range(2..=6.min(lat.height)) as i32;
        let x0 = rng.random_range(0..=(lat.width as i32 - w));
        let y0 = rng.random_range(0..=(lat.height as i32 - h));
        let mut trial = m.clone();
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                trial.set(Cell::new(x, y), -1);
            }
        }
        let ratio = (lat.len() - trial.walkable_count()) as f64 / n;
        if ratio <= hi && trial.walkable_connected() {
            m = trial;
        } else {
            failures += 1;
            if failures > 200 {
                return None;
            }
        }
    }
    Some(m)
}

/// Lattice with rectangular obstacles and well-separated sources; no agents yet.
pub fn generate_scene<T: Scalar>(config: &SynthConfig) -> Result<Scene<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lat = Lattice::new(config.width, config.height)?;
    for _ in 0..100 {
        let Some(cmap) = obstacle_layout(lat, config.obstacle_ratio, &mut rng) else { continue };
        let Some(mus) = place_sources(&cmap, config.n_sources, config.min_source_separation, &mut rng) else { continue };
        let mut scene = Scene::new(cmap);
        scene.ground_truth = Some(GroundTruth {
            sources: mus.iter().map(|&mu| (mu, BBox::around(mu, GT_BOX_HALF).clip(lat))).collect(),
            ..GroundTruth::default()
        });
        if config.features {
            scene.features = Some(two_cluster_features(&scene.cmap, &mut rng));
        }
        return Ok(scene);
    }
    Err(AlmError::Generation(format!(
        "no feasible layout for ratio {} with {} sources after 100 attempts",
        config.obstacle_ratio, config.n_sources
    )))
}

fn place_sources<R: Rng>(cmap: &ConstraintMap, n: usize, sep: f64, rng: &mut R) -> Option<Vec<Cell>> {
    let lat = cmap.lattice();
    let margin = GT_BOX_HALF;
    let candidates: Vec<Cell> = cmap
        .walkable_cells()
        .filter(|c| c.x >= margin && c.y >= margin && c.x < lat.width as i32 - margin && c.y < lat.height as i32 - margin)
        .collect();
    let mut mus: Vec<Cell> = Vec::new();
    for _ in 0..2000 {
        if mus.len() == n {
            return Some(mus);
        }
        let c = *candidates.choose(rng)?;
        if mus.iter().all(|m| m.euclidean::<f64>(c) >= sep) {
            mus.push(c);
        }
    }
    (mus.len() == n).then_some(mus)
}

/// Color noise around one mean for walkable cells and another for obstacles.
pub fn two_cluster_features<T: Scalar, R: Rng>(cmap: &ConstraintMap, rng: &mut R) -> FeatureChannel<T> {
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let ground: [f64; 4] = [0.55, 0.5, 0.45, 0.8];
    let block = [0.2, 0.35, 0.2, 0.2];
    let values = cmap
        .lattice()
        .cells()
        .map(|c| {
            let m = if cmap.is_walkable(c) { ground } else { block };
            m.map(|v| T::lit((v + noise.sample(rng)).clamp(0.0, 1.0)))
        })
        .collect();
    FeatureChannel { values }
}

struct Walker<'a, T: Scalar, R: Rng> {
    cmap: &'a ConstraintMap,
    jitter: f64,
    speed: f64,
    progress: f64,
    rng: &'a mut R,
    cells: Vec<Cell>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar, R: Rng> Walker<'_, T, R> {
    fn here(&self) -> Cell {
        *self.cells.last().expect("walker starts somewhere")
    }

    fn stay(&mut self, frames: usize) {
        let c = self.here();
        self.cells.extend(std::iter::repeat_n(c, frames));
    }

    /// One frame toward `goal` along its cost-to-go table.
    fn frame(&mut self, table: &SourceField<T>) {
        let x = self.here();
        self.progress += self.speed;
        if self.progress < 1.0 - 1e-12 {
            self.cells.push(x);
            return;
        }
        self.progress -= 1.0;
        let Some(planned) = table.c2g.next(x) else {
            self.cells.push(x);
            return;
        };
        let mut next = planned;
        if planned != table.mu && self.rng.random_bool(self.jitter) {
            let options: Vec<Cell> = self
                .cmap
                .lattice()
                .neighbors(planned)
                .filter(|n| *n != x && n.chebyshev(x) == 1 && self.cmap.is_walkable(*n))
                .collect();
            if let Some(&n) = options.choose(self.rng) {
                next = n;
            }
        }
        self.cells.push(next);
    }

    fn walk_to(&mut self, table: &SourceField<T>, cap: usize) -> bool {
        let limit = self.cells.len() + cap;
        while self.here() != table.mu {
            if self.cells.len() >= limit {
                return false;
            }
            self.frame(table);
        }
        true
    }
}

fn sample_behavior<R: Rng>(mix: &[f64; 3], n_sources: usize, rng: &mut R) -> Behavior {
    let u: f64 = rng.random();
    let z = if u < mix[0] {
        Behavior::Single
    } else if u < mix[0] + mix[1] {
        Behavior::Sequential
    } else {
        Behavior::Change
    };
    if n_sources < 2 {
        Behavior::Single
    } else {
        z
    }
}

/// One simulated agent: behavior, goal sequence, switch cell and full trajectory.
pub struct SimulatedAgent {
    pub behavior: Behavior,
    pub goals: Vec<usize>,
    pub switch_point: Option<Cell>,
    pub cells: Vec<Cell>,
}

/// Simulates one agent with a prescribed behavior and goal sequence.
pub fn simulate_agent<T: Scalar, R: Rng>(
    cmap: &ConstraintMap,
    tables: &[SourceField<T>],
    behavior: Behavior,
    goals: &[usize],
    config: &SynthConfig,
    rng: &mut R,
) -> Result<SimulatedAgent> {
    let lat = cmap.lattice();
    let cap = 4 * (lat.width + lat.height);
    let walkable: Vec<Cell> = cmap.walkable_cells().collect();
    let first = &tables[goals[0]];
    for _ in 0..20 {
        let start = *walkable.choose(rng).ok_or_else(|| AlmError::Generation("no walkable cells".into()))?;
        if start.euclidean::<f64>(first.mu) < config.min_spawn_distance || !first.c2g.reachable(start) {
            continue;
        }
        if goals.iter().any(|&g| !tables[g].c2g.reachable(start)) {
            continue;
        }
        let mut w: Walker<T, R> = Walker {
            cmap,
            jitter: config.jitter,
            speed: config.speed,
            progress: 0.0,
            rng,
            cells: vec![start],
            _t: std::marker::PhantomData,
        };
        let mut switch_point = None;
        let ok = match behavior {
            Behavior::Single | Behavior::Sequential => {
                let mut ok = true;
                for (k, &g) in goals.iter().enumerate() {
                    ok &= w.walk_to(&tables[g], cap);
                    if k + 1 < goals.len() {
                        w.stay(config.dwell);
                    }
                }
                ok
            }
            Behavior::Change => {
                let steps = first.c2g.steps(start).unwrap_or(0) as f64;
                let lo = (0.2 * steps).ceil() as usize;
                let hi = ((0.8 * steps).floor() as usize).max(lo);
                let k = w.rng.random_range(lo.max(1)..=hi.max(1));
                let mut moved = 0;
                while moved < k && w.here() != first.mu {
                    let before = w.here();
                    w.frame(first);
                    moved += (w.here() != before) as usize;
                }
                let s = w.here();
                switch_point = Some(s);
                turn_degrees(s, first.mu, tables[goals[1]].mu) >= config.min_turn_degrees && w.walk_to(&tables[goals[1]], cap)
            }
        };
        if !ok {
            continue;
        }
        w.stay(config.end_dwell);
        return Ok(SimulatedAgent { behavior, goals: goals.to_vec(), switch_point, cells: w.cells });
    }
    Err(AlmError::Generation("no reachable spawn after 20 tries".into()))
}

/// Angle at `at` between the directions to `a` and to `b`.
fn turn_degrees(at: Cell, a: Cell, b: Cell) -> f64 {
    let (ax, ay) = (f64::from(a.x - at.x), f64::from(a.y - at.y));
    let (bx, by) = (f64::from(b.x - at.x), f64::from(b.y - at.y));
    let (na, nb) = (ax.hypot(ay), bx.hypot(by));
    if na == 0.0 || nb == 0.0 {
        return 180.0;
    }
    ((ax * bx + ay * by) / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

fn sample_goals<R: Rng>(behavior: Behavior, n_sources: usize, rng: &mut R) -> Vec<usize> {
    let k = match behavior {
        Behavior::Single => 1,
        Behavior::Change => 2,
        Behavior::Sequential => {
            if n_sources >= 3 && rng.random_bool(0.3) {
                3
            } else {
                2
            }
        }
    };
    let mut pool: Vec<usize> = (0..n_sources).collect();
    let mut goals = Vec::with_capacity(k);
    for _ in 0..k {
        let i = rng.random_range(0..pool.len());
        goals.push(pool.swap_remove(i));
    }
    goals
}

/// Adds `config.n_agents` fully observed agents and their ground truth.
pub fn simulate_agents<T: Scalar, R: Rng>(scene: &mut Scene<T>, config: &SynthConfig, rng: &mut R) -> Result<()> {
    let gt = scene.ground_truth.get_or_insert_with(GroundTruth::default);
    if gt.sources.is_empty() {
        return Err(AlmError::Input("scene has no ground-truth sources".into()));
    }
    let mus: Vec<Cell> = gt.sources.iter().map(|s| s.0).collect();
    let tables = source_fields(&scene.cmap, &mus, &ModelParams::<T>::default());
    for _ in 0..config.n_agents {
        let z = sample_behavior(&config.behavior_mix, mus.len(), rng);
        let mut attempt = 0;
        let a = loop {
            let goals = sample_goals(z, mus.len(), rng);
            match simulate_agent(&scene.cmap, &tables, z, &goals, config, rng) {
                Ok(a) => break a,
                Err(e) if attempt >= 20 => return Err(e),
                Err(_) => attempt += 1,
            }
        };
        let gt = scene.ground_truth.as_mut().expect("inserted above");
        gt.goals.push(a.goals);
        gt.behaviors.push(a.behavior);
        gt.switch_points.push(a.switch_point);
        let id = scene.agents.len() as u32;
        scene.agents.push(Agent { id, trajectory: Trajectory::observed(a.cells) });
    }
    Ok(())
}

/// Scene plus agents from one seed.
pub fn synthesize<T: Scalar>(config: &SynthConfig) -> Result<Scene<T>> {
    let mut scene = generate_scene(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_a9e7);
    simulate_agents(&mut scene, config, &mut rng)?;
    Ok(scene)
}

/// Number of observed frames for a track of `len` frames.
pub fn observed_length(len: usize, fraction: f64) -> usize {
    ((fraction * len as f64).ceil() as usize).clamp(1.min(len), len)
}

/// Marks the first `ceil(fraction * len)` frames of every agent as observed.
pub fn truncate_observations(agents: &mut [Agent], fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(AlmError::Input(format!("observation fraction {fraction} outside (0, 1]")));
    }
    for a in agents {
        a.trajectory.t0 = observed_length(a.trajectory.len(), fraction);
        a.trajectory.horizon = a.trajectory.len();
    }
    Ok(())
}

/// Seeds of the three layouts per grid setting.
pub const LAYOUT_SEED_OFFSETS: [u64; 3] = [0, 1, 2];

/// Scene-level seed for a sweep cell.
pub fn sweep_seed(base: u64, n_sources: usize, n_agents: usize, offset: u64) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add((n_sources as u64) * 10_007 + (n_agents as u64) * 101 + offset)
}

/// Source counts of the toy sweep grid.
pub const TOY_SOURCES: [usize; 4] = [2, 3, 5, 8];
/// Agent counts of the toy sweep grid.
pub const TOY_AGENTS: [usize; 4] = [10, 20, 50, 100];

/// Scene configuration of one toy sweep cell.
pub fn toy_config(n_sources: usize, n_agents: usize, base_seed: u64, layout: u64) -> SynthConfig {
    SynthConfig { n_sources, n_agents, seed: sweep_seed(base_seed, n_sources, n_agents, layout), ..SynthConfig::default() }
}

/// Model parameters of the toy protocol: one goal per agent and `eta` equal to the true source count.
pub fn toy_params<T: Scalar>(n_sources: usize) -> ModelParams<T> {
    ModelParams { eta: T::from_usize_lossy(n_sources), max_goals: 1, ..ModelParams::default() }
}

/// Motion pattern around a functional object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Archetype {
    /// Agents line up along one approach direction and shuffle forward.
    Queue,
    /// Agents arrive from anywhere, linger and mill about, then leave.
    Dwell,
    /// Agents stream in from one side at full speed and leave the scene.
    Exit,
}

impl Archetype {
    pub const ALL: [Archetype; 3] = [Archetype::Queue, Archetype::Dwell, Archetype::Exit];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeSource {
    pub kind: Archetype,
    pub center: Cell,
    pub orientation: Dihedral,
    pub tracks: Vec<Vec<Cell>>,
}

fn approach<R: Rng>(track: &mut Vec<Cell>, to: Cell, pause: f64, rng: &mut R) {
    let mut x = *track.last().expect("track starts somewhere");
    while x != to {
        if rng.random_bool(pause) {
            track.push(x);
            continue;
        }
        let (mut dx, mut dy) = ((to.x - x.x).signum(), (to.y - x.y).signum());
        if dx != 0 && dy != 0 && (to.x - x.x).abs() != (to.y - x.y).abs() && rng.random_bool(0.3) {
            if rng.random_bool(0.5) {
                dx = 0;
            } else {
                dy = 0;
            }
        }
        x = x.offset(dx, dy);
        track.push(x);
    }
}

fn ring_point<R: Rng>(w: i32, rng: &mut R) -> (i32, i32) {
    let a = rng.random::<f64>() * std::f64::consts::TAU;
    let r = f64::from(w);
    ((r * a.cos()).round() as i32, (r * a.sin()).round() as i32)
}

/// Tracks around a source at the origin, in canonical orientation.
fn archetype_offsets<R: Rng>(kind: Archetype, w: usize, rng: &mut R) -> Vec<Vec<Cell>> {
    let w = w.max(2) as i32;
    let o = Cell::new(0, 0);
    match kind {
        Archetype::Queue => (0..8)
            .map(|_| {
                let mut t = vec![Cell::new(w, 0)];
                let stop = Cell::new(rng.random_range(0..4), 0);
                approach(&mut t, stop, 0.6, rng);
                t.extend(std::iter::repeat_n(stop, 15));
                t
            })
            .collect(),
        Archetype::Dwell => (0..8)
            .map(|_| {
                let (sx, sy) = ring_point(w, rng);
                let mut t = vec![Cell::new(sx, sy)];
                approach(&mut t, o, 0.0, rng);
                let mut x = o;
                for _ in 0..30 {
                    let (dx, dy) = *crate::scene::NEIGHBOR_OFFSETS.choose(rng).expect("eight neighbors");
                    let next = x.offset(dx, dy);
                    x = if next.chebyshev(o) <= 1 { next } else { o };
                    t.push(x);
                }
                let (ex, ey) = ring_point(w, rng);
                approach(&mut t, Cell::new(ex, ey), 0.0, rng);
                t
            })
            .collect(),
        Archetype::Exit => (0..16)
            .map(|_| {
                let mut t = vec![Cell::new(rng.random_range(-w..=w), w)];
                approach(&mut t, o, 0.0, rng);
                t
            })
            .collect(),
    }
}

/// Tracks of one archetype around `center`, under a random rotation/mirroring.
pub fn archetype_source<R: Rng>(kind: Archetype, center: Cell, w: usize, rng: &mut R) -> ArchetypeSource {
    let orientation = Dihedral { rotation: rng.random_range(0..4), mirror: rng.random_bool(0.5) };
    let tracks = archetype_offsets(kind, w, rng)
        .into_iter()
        .map(|t| {
            t.into_iter()
                .map(|c| {
                    let (dx, dy) = orientation.apply(c.x, c.y);
                    center.offset(dx, dy)
                })
                .collect()
        })
        .collect();
    ArchetypeSource { kind, center, orientation, tracks }
}

/// `n_sources` sources cycling through the archetypes, each centered in its own window.
pub fn archetype_suite(n_sources: usize, w: usize, seed: u64) -> Vec<ArchetypeSource> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa7c4_e7e5);
    let c = Cell::new(w as i32, w as i32);
    (0..n_sources).map(|i| archetype_source(Archetype::ALL[i % 3], c, w, &mut rng)).collect()
}

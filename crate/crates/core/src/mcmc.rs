//! Data-driven Metropolis-Hastings over the constraint map, sources and relations.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use serde::{Deserialize, Serialize};

use crate::error::{AlmError, Result};
use crate::field::{attraction_field, repulsion_field, VectorField};
use crate::model::{
    agent_log_likelihood, appearance_log_likelihood, closest_goal, implied_behavior_log_prior, ising_flip_delta, relation_log_prior,
    smoothed_theta, source_log_prior, Estimate, Gmm, ModelParams, PosteriorTerms, SourceField,
};
use crate::planner::CostToGo;
use crate::scalar::Scalar;
use crate::scene::{Cell, ConstraintMap, Lattice, Relations, Scene, Source};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MoveKind {
    Flip,
    BirthDeath,
    Relation,
    Shift,
}

impl MoveKind {
    pub const ALL: [MoveKind; 4] = [MoveKind::Flip, MoveKind::BirthDeath, MoveKind::Relation, MoveKind::Shift];

    fn idx(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            MoveKind::Flip => "flip",
            MoveKind::BirthDeath => "birth_death",
            MoveKind::Relation => "relation",
            MoveKind::Shift => "shift",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProposalStats {
    pub proposed: [u64; 4],
    pub accepted: [u64; 4],
}

impl ProposalStats {
    pub fn record(&mut self, kind: MoveKind, accepted: bool) {
        self.proposed[kind.idx()] += 1;
        self.accepted[kind.idx()] += accepted as u64;
    }

    pub fn rate(&self, kind: MoveKind) -> f64 {
        let p = self.proposed[kind.idx()];
        if p == 0 {
            0.0
        } else {
            self.accepted[kind.idx()] as f64 / p as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub gmm_refit_period: usize,
    /// Relative weights of flip, birth-death, relation and shift moves.
    pub mix: [u32; 4],
    pub trace_every: usize,
    pub audit_every: usize,
    /// Mix stopping locations into the birth location proposal.
    pub data_driven_birth: bool,
    pub stop_speed: f64,
    pub stop_frames: usize,
    /// Chebyshev radius of a shift move.
    pub shift_radius: i32,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            iterations: 4000,
            burn_in: 1000,
            seed: 0,
            gmm_refit_period: 100,
            mix: [6, 1, 3, 2],
            shift_radius: 2,
            trace_every: 10,
            audit_every: 1000,
            data_driven_birth: true,
            stop_speed: 0.2,
            stop_frames: 10,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations > 0 && self.burn_in >= self.iterations {
            return Err(AlmError::Input("burn_in must be smaller than iterations".into()));
        }
        if self.mix.iter().all(|&w| w == 0) {
            return Err(AlmError::Input("proposal mix has no positive weight".into()));
        }
        Ok(())
    }
}

/// A cell where agents came to rest or left the scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoppingLocation {
    pub cell: Cell,
    /// Number of distinct agents stopping here.
    pub count: usize,
    pub first_time: usize,
}

/// Stopping locations of observed prefixes, most frequent first (ties: earlier, then row-major).
pub fn stopping_locations<T: Scalar>(scene: &Scene<T>, stop_speed: f64, stop_frames: usize) -> Vec<StoppingLocation> {
    let mut found: Vec<StoppingLocation> = Vec::new();
    let mut note = |cell: Cell, t: usize, agent_cells: &mut Vec<Cell>| {
        if agent_cells.contains(&cell) {
            return;
        }
        agent_cells.push(cell);
        match found.iter_mut().find(|s| s.cell == cell) {
            Some(s) => {
                s.count += 1;
                s.first_time = s.first_time.min(t);
            }
            None => found.push(StoppingLocation { cell, count: 1, first_time: t }),
        }
    };
    for a in &scene.agents {
        let p = a.observed();
        let mut seen = Vec::new();
        let mut run_start = 0;
        for t in 0..p.len() {
            let moving = t + 1 < p.len() && p[t].euclidean::<f64>(p[t + 1]) >= stop_speed;
            let end = t + 1 == p.len();
            if moving || end {
                if t + 1 - run_start >= stop_frames.max(1) {
                    note(p[run_start], run_start, &mut seen);
                }
                run_start = t + 1;
            }
        }
        if let Some(&last) = p.last() {
            if scene.lattice.on_boundary(last) {
                note(last, p.len() - 1, &mut seen);
            }
        }
    }
    found.sort_by(|a, b| b.count.cmp(&a.count).then(a.first_time.cmp(&b.first_time)).then(a.cell.cmp(&b.cell)));
    found
}

/// Proposal probability that a flipped cell becomes walkable, from observed speeds.
pub fn walkable_proposal_table<T: Scalar>(scene: &Scene<T>) -> Vec<f64> {
    let lat = scene.lattice;
    let mut sum = vec![0.0; lat.len()];
    let mut n = vec![0usize; lat.len()];
    for a in &scene.agents {
        for w in a.observed().windows(2) {
            if lat.contains(w[0]) {
                let i = lat.index(w[0]);
                sum[i] += w[0].euclidean::<f64>(w[1]);
                n[i] += 1;
            }
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&n).map(|(s, &k)| if k == 0 { 0.0 } else { s / k as f64 }).collect();
    let max = mean.iter().copied().fold(0.0, f64::max);
    mean.iter()
        .map(|&m| if max > 0.0 { (m / max).clamp(0.1, 0.99) } else { 0.1 })
        .collect()
}

/// One state of the chain with cached fields and posterior terms.
#[derive(Clone, Debug)]
pub struct ChainState<T: Scalar> {
    pub cmap: ConstraintMap,
    pub sources: Vec<Source<T>>,
    pub relations: Relations,
    pub terms: PosteriorTerms<T>,
    pub log_post: T,
    pub gmm: Option<Gmm<T>>,
    repulsion: Arc<VectorField<T>>,
    attraction: Vec<Arc<VectorField<T>>>,
    fields: Vec<Arc<SourceField<T>>>,
}

impl<T: Scalar> ChainState<T> {
    /// Builds every cache from scratch.
    pub fn from_parts(
        scene: &Scene<T>,
        params: &ModelParams<T>,
        cmap: ConstraintMap,
        sources: Vec<Source<T>>,
        relations: Relations,
        gmm: Option<Gmm<T>>,
    ) -> Result<Self> {
        if relations.n_sources() != sources.len() || relations.n_agents() != scene.agents.len() {
            return Err(AlmError::Dimension("relations do not match sources/agents".into()));
        }
        let repulsion = Arc::new(repulsion_field(&cmap, &params.field));
        let attraction: Vec<_> =
            sources.iter().map(|s| Arc::new(attraction_field(cmap.lattice(), s.mu, &params.field))).collect();
        let fields = attraction.iter().zip(&sources).map(|(a, s)| Arc::new(build_field(&cmap, a, &repulsion, s.mu, params))).collect();
        let mut st = ChainState {
            cmap,
            sources,
            relations,
            terms: PosteriorTerms {
                ising: T::zero(),
                sources: T::zero(),
                relations: T::zero(),
                behaviors: T::zero(),
                appearance: T::zero(),
                agents: vec![T::zero(); scene.agents.len()],
            },
            log_post: T::zero(),
            gmm,
            repulsion,
            attraction,
            fields,
        };
        st.terms.ising = crate::model::ising_log_prior(&st.cmap, params.beta);
        st.terms.appearance = appearance_log_likelihood(&st.cmap, scene.features.as_ref(), st.gmm.as_ref())?;
        st.refresh_source_terms(params);
        st.refresh_relation_terms(params);
        for i in 0..scene.agents.len() {
            st.refresh_agent(scene, params, i);
        }
        st.log_post = st.terms.total();
        Ok(st)
    }

    pub fn mus(&self) -> Vec<Cell> {
        self.sources.iter().map(|s| s.mu).collect()
    }

    /// Snapshot for prediction, sharing the cached fields.
    pub fn estimate(&self) -> Estimate<T> {
        Estimate { cmap: self.cmap.clone(), sources: self.sources.clone(), relations: self.relations.clone(), fields: self.fields() }
    }

    pub fn fields(&self) -> Vec<SourceField<T>> {
        self.fields.iter().map(|f| (**f).clone()).collect()
    }

    pub fn field(&self, j: usize) -> &SourceField<T> {
        &self.fields[j]
    }

    pub fn cost_to_go(&self, j: usize) -> &CostToGo<T> {
        &self.fields[j].c2g
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    fn refresh_source_terms(&mut self, params: &ModelParams<T>) {
        self.terms.sources = source_log_prior(&self.mus(), &self.cmap, params.eta, params.rho);
    }

    fn refresh_relation_terms(&mut self, params: &ModelParams<T>) {
        let theta = smoothed_theta(&self.relations);
        self.terms.relations = relation_log_prior(&self.relations, &theta).expect("theta sized to R");
        self.terms.behaviors = (0..self.relations.n_agents())
            .map(|i| implied_behavior_log_prior(self.relations.count(i), params.kappa))
            .sum();
    }

    fn refresh_agent(&mut self, scene: &Scene<T>, params: &ModelParams<T>, i: usize) {
        let goals = self.relations.goals(i);
        self.terms.agents[i] = agent_log_likelihood(scene.agents[i].observed(), &goals, &self.fields, &self.cmap, params);
    }

    fn refresh_all_agents(&mut self, scene: &Scene<T>, params: &ModelParams<T>) {
        for i in 0..self.terms.agents.len() {
            self.refresh_agent(scene, params, i);
        }
    }

    fn rebuild_fields(&mut self, params: &ModelParams<T>) {
        self.fields = self
            .attraction
            .iter()
            .zip(&self.sources)
            .map(|(a, s)| Arc::new(build_field(&self.cmap, a, &self.repulsion, s.mu, params)))
            .collect();
    }

    /// Largest absolute gap between cached and recomputed log-posterior.
    pub fn audit(&self, scene: &Scene<T>, params: &ModelParams<T>) -> Result<T> {
        let fresh = ChainState::from_parts(
            scene,
            params,
            self.cmap.clone(),
            self.sources.clone(),
            self.relations.clone(),
            self.gmm.clone(),
        )?;
        Ok(gap(self.log_post, fresh.log_post))
    }
}

fn gap<T: Scalar>(a: T, b: T) -> T {
    if a == b {
        T::zero()
    } else {
        (a - b).abs()
    }
}

fn build_field<T: Scalar>(
    cmap: &ConstraintMap,
    attraction: &VectorField<T>,
    repulsion: &VectorField<T>,
    mu: Cell,
    params: &ModelParams<T>,
) -> SourceField<T> {
    let field = attraction.add(repulsion).expect("fields share the lattice");
    let c2g = CostToGo::build(cmap, &field, mu, &params.path).expect("source inside lattice");
    SourceField { mu, field, c2g }
}

/// Candidate state plus the log proposal ratio `ln Q(y'->y) - ln Q(y->y')`.
#[derive(Clone, Debug)]
pub struct Proposal<T: Scalar> {
    pub kind: MoveKind,
    /// `None` for a move that could not be formed (counted as rejected).
    pub candidate: Option<ChainState<T>>,
    pub log_q_ratio: T,
}

/// Metropolis rule: accept iff `min(1, exp(log_q + dpost)) > u`.
pub fn accept<T: Scalar, R: Rng>(current: &ChainState<T>, candidate: &ChainState<T>, log_q_ratio: T, rng: &mut R) -> bool {
    let (a, b) = (current.log_post, candidate.log_post);
    if b.is_nan() || b == T::neg_infinity() {
        return false;
    }
    if a == T::neg_infinity() {
        return true;
    }
    let log_alpha = (log_q_ratio + b - a).min(T::zero());
    let u: f64 = rng.random();
    log_alpha.to_f64_lossy().exp() > u
}

#[derive(Clone, Debug)]
pub struct TraceRecord {
    pub iteration: usize,
    pub log_post: f64,
    pub n_sources: usize,
    pub rates: [f64; 4],
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    /// Largest cached-vs-recomputed posterior gap seen at audits.
    pub max_audit_gap: f64,
    pub audits: usize,
}

impl Trace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,log_posterior,n_sources,flip_rate,birth_death_rate,relation_rate,shift_rate\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.iteration, r.log_post, r.n_sources, r.rates[0], r.rates[1], r.rates[2], r.rates[3]);
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct ChainOutput<T: Scalar> {
    pub map: ChainState<T>,
    pub last: ChainState<T>,
    pub stats: ProposalStats,
    pub trace: Trace,
}

/// Sampler over `{C, S, R}` for one scene.
pub struct Chain<'a, T: Scalar> {
    pub scene: &'a Scene<T>,
    pub params: ModelParams<T>,
    pub config: ChainConfig,
    q_walkable: Vec<f64>,
    stops: Vec<StoppingLocation>,
    /// Cells covered by any observed prefix.
    observed: Vec<bool>,
}

impl<'a, T: Scalar> Chain<'a, T> {
    pub fn new(scene: &'a Scene<T>, params: ModelParams<T>, config: ChainConfig) -> Result<Self> {
        params.validate()?;
        config.validate()?;
        if scene.agents.is_empty() || scene.agents.iter().any(|a| a.observed().is_empty()) {
            return Err(AlmError::Input("scene has no observed trajectories".into()));
        }
        let lat = scene.lattice;
        let mut observed = vec![false; lat.len()];
        for a in &scene.agents {
            for &c in a.observed() {
                if !lat.contains(c) {
                    return Err(AlmError::OutOfBounds { cell: c, width: lat.width, height: lat.height });
                }
                observed[lat.index(c)] = true;
            }
        }
        Ok(Chain {
            scene,
            q_walkable: walkable_proposal_table(scene),
            stops: stopping_locations(scene, config.stop_speed, config.stop_frames),
            params,
            config,
            observed,
        })
    }

    pub fn lattice(&self) -> Lattice {
        self.scene.lattice
    }

    pub fn stopping_locations(&self) -> &[StoppingLocation] {
        &self.stops
    }

    pub fn walkable_proposal(&self, c: Cell) -> f64 {
        self.q_walkable[self.lattice().index(c)]
    }

    /// Data-driven initial state.
    pub fn initialize<R: Rng>(&self, rng: &mut R) -> Result<ChainState<T>> {
        let lat = self.lattice();
        let labels = (0..lat.len())
            .map(|i| if self.observed[i] || rng.random_bool(0.5) { 1 } else { -1 })
            .collect();
        let cmap = ConstraintMap::from_labels(lat, labels)?;
        let eta = self.params.eta.to_f64_lossy();
        let drawn = Poisson::new(eta).map_err(|e| AlmError::Input(format!("poisson rate: {e}")))?.sample(rng) as usize;
        let n = drawn.max(1);
        let mut mus: Vec<Cell> = self.stops.iter().take(n).map(|s| s.cell).collect();
        let walkable: Vec<Cell> = cmap.walkable_cells().collect();
        while mus.len() < n {
            let c = *walkable.choose(rng).expect("observed cells are walkable");
            if !mus.contains(&c) {
                mus.push(c);
            }
        }
        let sources: Vec<Source<T>> = mus.iter().map(|&mu| Source::isotropic(mu, T::one())).collect();
        let mut relations = Relations::new(self.scene.agents.len(), n);
        for i in 0..self.scene.agents.len() {
            relations.set(i, rng.random_range(0..n), true);
        }
        let gmm = match &self.scene.features {
            Some(f) => Some(Gmm::fit_walkable(&cmap, f)?),
            None => None,
        };
        ChainState::from_parts(self.scene, &self.params, cmap, sources, relations, gmm)
    }

    /// Negates one cell's label drawn from its data-driven proposal.
    pub fn propose_flip<R: Rng>(&self, state: &ChainState<T>, rng: &mut R) -> Proposal<T> {
        let lat = self.lattice();
        let c = lat.cell(rng.random_range(0..lat.len()));
        let q = self.walkable_proposal(c);
        let new_label: i8 = if rng.random_bool(q) { 1 } else { -1 };
        let old_label = state.cmap.label(c);
        if new_label == old_label {
            return Proposal { kind: MoveKind::Flip, candidate: Some(state.clone()), log_q_ratio: T::zero() };
        }
        let q_of = |l: i8| if l == 1 { q } else { 1.0 - q };
        let log_q = T::lit(q_of(old_label).ln() - q_of(new_label).ln());
        Proposal { kind: MoveKind::Flip, candidate: Some(self.flipped(state, c)), log_q_ratio: log_q }
    }

    /// The state with the label at `c` negated, caches updated.
    pub fn flipped(&self, state: &ChainState<T>, c: Cell) -> ChainState<T> {
        let p = &self.params;
        let mut s = state.clone();
        s.terms.ising = s.terms.ising + ising_flip_delta(&s.cmap, c, p.beta);
        s.cmap.flip(c);
        if let (Some(f), Some(g)) = (&self.scene.features, &s.gmm) {
            let v = g.log_density(&f.values[self.lattice().index(c)]);
            s.terms.appearance = if s.cmap.is_walkable(c) { s.terms.appearance + v } else { s.terms.appearance - v };
        }
        s.refresh_source_terms(p);
        if !s.cmap.is_walkable(c) && self.observed[self.lattice().index(c)] {
            // An observed cell became an obstacle: impossible, caches left stale.
            s.log_post = T::neg_infinity();
            return s;
        }
        s.repulsion = Arc::new(repulsion_field(&s.cmap, &p.field));
        s.rebuild_fields(p);
        s.refresh_all_agents(self.scene, p);
        s.log_post = s.terms.total();
        s
    }

    fn birth_location<R: Rng>(&self, state: &ChainState<T>, rng: &mut R) -> Option<Cell> {
        let c = if self.config.data_driven_birth && !self.stops.is_empty() && rng.random_bool(0.5) {
            self.stops.choose(rng)?.cell
        } else {
            let walkable: Vec<Cell> = state.cmap.walkable_cells().collect();
            *walkable.choose(rng)?
        };
        (!state.sources.iter().any(|s| s.mu == c)).then_some(c)
    }

    /// Birth or death with equal probability; the proposal ratio is taken as 1.
    pub fn propose_birth_death<R: Rng>(&self, state: &ChainState<T>, rng: &mut R) -> Proposal<T> {
        let birth = rng.random_bool(0.5);
        let candidate = if birth {
            self.birth_location(state, rng).map(|mu| {
                let size = self.lattice().size::<T>();
                self.with_birth(state, Source::isotropic(mu, size * size))
            })
        } else if state.n_sources() <= 1 {
            None
        } else {
            let j = rng.random_range(0..state.n_sources());
            Some(self.with_death(state, j))
        };
        Proposal { kind: MoveKind::BirthDeath, candidate, log_q_ratio: T::zero() }
    }

    pub fn with_birth(&self, state: &ChainState<T>, source: Source<T>) -> ChainState<T> {
        let p = &self.params;
        let mut s = state.clone();
        let att = Arc::new(attraction_field(s.cmap.lattice(), source.mu, &p.field));
        s.fields.push(Arc::new(build_field(&s.cmap, &att, &s.repulsion, source.mu, p)));
        s.attraction.push(att);
        s.sources.push(source);
        s.relations.push_source();
        s.refresh_source_terms(p);
        s.refresh_relation_terms(p);
        s.log_post = s.terms.total();
        s
    }

    /// Removes source `j`; agents left without goals move to their nearest remaining source.
    pub fn with_death(&self, state: &ChainState<T>, j: usize) -> ChainState<T> {
        let p = &self.params;
        let mut s = state.clone();
        let affected: Vec<usize> = (0..s.relations.n_agents()).filter(|&i| s.relations.get(i, j)).collect();
        s.sources.remove(j);
        s.attraction.remove(j);
        s.fields.remove(j);
        s.relations.remove_source(j);
        let all: Vec<usize> = (0..s.n_sources()).collect();
        for &i in &affected {
            if s.relations.count(i) == 0 {
                let xt = self.scene.agents[i].current();
                let best = closest_goal(&all, &s.fields, xt).expect("at least one source remains");
                s.relations.set(i, best, true);
            }
            s.refresh_agent(self.scene, p, i);
        }
        s.refresh_source_terms(p);
        s.refresh_relation_terms(p);
        s.log_post = s.terms.total();
        s
    }

    /// Moves one source to a free walkable cell within `shift_radius`; symmetric.
    pub fn propose_shift<R: Rng>(&self, state: &ChainState<T>, rng: &mut R) -> Proposal<T> {
        let r = self.config.shift_radius.max(1);
        let j = rng.random_range(0..state.n_sources());
        let (dx, dy) = loop {
            let d = (rng.random_range(-r..=r), rng.random_range(-r..=r));
            if d != (0, 0) {
                break d;
            }
        };
        let mu = state.sources[j].mu;
        let to = Cell::new(mu.x + dx, mu.y + dy);
        let free = self.lattice().contains(to) && state.cmap.is_walkable(to) && !state.sources.iter().any(|s| s.mu == to);
        let candidate = free.then(|| self.with_shift(state, j, to));
        Proposal { kind: MoveKind::Shift, candidate, log_q_ratio: T::zero() }
    }

    /// Source `j` moved to `to`, keeping its covariance and agents.
    pub fn with_shift(&self, state: &ChainState<T>, j: usize, to: Cell) -> ChainState<T> {
        let p = &self.params;
        let mut s = state.clone();
        s.sources[j].mu = to;
        let att = Arc::new(attraction_field(s.cmap.lattice(), to, &p.field));
        s.fields[j] = Arc::new(build_field(&s.cmap, &att, &s.repulsion, to, p));
        s.attraction[j] = att;
        for i in 0..s.relations.n_agents() {
            if s.relations.get(i, j) {
                s.refresh_agent(self.scene, p, i);
            }
        }
        s.refresh_source_terms(p);
        s.log_post = s.terms.total();
        s
    }

    /// Change, add or remove one goal of one agent; the proposal ratio is taken as 1.
    pub fn propose_relation<R: Rng>(&self, state: &ChainState<T>, rng: &mut R) -> Proposal<T> {
        let n_agents = state.relations.n_agents();
        let i = rng.random_range(0..n_agents);
        let n = state.n_sources();
        let count = state.relations.count(i);
        let mut moves = Vec::with_capacity(3);
        if count < n {
            moves.push(0);
            if count < self.params.max_goals {
                moves.push(1);
            }
        }
        if count > 1 {
            moves.push(2);
        }
        let Some(&m) = moves.choose(rng) else {
            return Proposal { kind: MoveKind::Relation, candidate: Some(state.clone()), log_q_ratio: T::zero() };
        };
        let goals = state.relations.goals(i);
        let others: Vec<usize> = (0..n).filter(|j| !goals.contains(j)).collect();
        let mut new_goals = goals.clone();
        match m {
            0 => {
                let k = rng.random_range(0..goals.len());
                new_goals[k] = *others.choose(rng).expect("a free source exists");
            }
            1 => new_goals.push(*others.choose(rng).expect("a free source exists")),
            _ => {
                new_goals.remove(rng.random_range(0..goals.len()));
            }
        }
        Proposal { kind: MoveKind::Relation, candidate: Some(self.with_goals(state, i, &new_goals)), log_q_ratio: T::zero() }
    }

    pub fn with_goals(&self, state: &ChainState<T>, agent: usize, goals: &[usize]) -> ChainState<T> {
        let mut s = state.clone();
        s.relations.set_goals(agent, goals);
        s.refresh_agent(self.scene, &self.params, agent);
        s.refresh_relation_terms(&self.params);
        s.log_post = s.terms.total();
        s
    }

    fn draw_kind<R: Rng>(&self, rng: &mut R) -> MoveKind {
        let total: u32 = self.config.mix.iter().sum();
        let mut u = rng.random_range(0..total);
        for k in MoveKind::ALL {
            let w = self.config.mix[k.idx()];
            if u < w {
                return k;
            }
            u -= w;
        }
        MoveKind::Relation
    }

    /// One proposal plus accept/reject; returns the next state and whether it moved.
    pub fn step<R: Rng>(&self, state: ChainState<T>, rng: &mut R, stats: &mut ProposalStats) -> ChainState<T> {
        let kind = self.draw_kind(rng);
        let prop = match kind {
            MoveKind::Flip => self.propose_flip(&state, rng),
            MoveKind::BirthDeath => self.propose_birth_death(&state, rng),
            MoveKind::Relation => self.propose_relation(&state, rng),
            MoveKind::Shift => self.propose_shift(&state, rng),
        };
        match prop.candidate {
            Some(c) if accept(&state, &c, prop.log_q_ratio, rng) => {
                stats.record(kind, true);
                c
            }
            _ => {
                stats.record(kind, false);
                state
            }
        }
    }

    fn refit_gmm(&self, state: &mut ChainState<T>) -> Result<()> {
        if let Some(f) = &self.scene.features {
            let g = Gmm::fit_walkable(&state.cmap, f)?;
            state.terms.appearance = appearance_log_likelihood(&state.cmap, Some(f), Some(&g))?;
            state.gmm = Some(g);
            state.log_post = state.terms.total();
        }
        Ok(())
    }

    /// Runs the chain from a fresh initialization seeded by `config.seed`.
    pub fn run(&self) -> Result<ChainOutput<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let init = self.initialize(&mut rng)?;
        self.run_from(init, &mut rng)
    }

    pub fn run_from<R: Rng>(&self, init: ChainState<T>, rng: &mut R) -> Result<ChainOutput<T>> {
        let mut stats = ProposalStats::default();
        let mut trace = Trace::default();
        let mut state = init;
        let mut map: Option<ChainState<T>> = None;
        for it in 0..self.config.iterations {
            state = self.step(state, rng, &mut stats);
            if self.config.gmm_refit_period > 0 && (it + 1) % self.config.gmm_refit_period == 0 {
                self.refit_gmm(&mut state)?;
            }
            if self.config.audit_every > 0 && (it + 1) % self.config.audit_every == 0 {
                let g = state.audit(self.scene, &self.params)?.to_f64_lossy();
                trace.max_audit_gap = trace.max_audit_gap.max(g);
                trace.audits += 1;
                if !state.relations.is_valid(self.params.max_goals) {
                    return Err(AlmError::Model(format!("relation invariant broken at iteration {it}")));
                }
            }
            if it >= self.config.burn_in && map.as_ref().is_none_or(|m| state.log_post > m.log_post) {
                map = Some(state.clone());
            }
            if self.config.trace_every > 0 && it % self.config.trace_every == 0 {
                trace.records.push(TraceRecord {
                    iteration: it,
                    log_post: state.log_post.to_f64_lossy(),
                    n_sources: state.n_sources(),
                    rates: MoveKind::ALL.map(|k| stats.rate(k)),
                });
            }
        }
        let map = map.unwrap_or_else(|| state.clone());
        Ok(ChainOutput { map, last: state, stats, trace })
    }
}

/// Replaces each source covariance with one fitted to the stopping cells of its agents.
///
/// Uses cells within `radius` of the source; the result is at least the identity.
pub fn refit_source_covariances<T: Scalar>(state: &mut ChainState<T>, stops: &[StoppingLocation], radius: i32) {
    for s in state.sources.iter_mut() {
        let near: Vec<Cell> = stops.iter().map(|l| l.cell).filter(|c| c.chebyshev(s.mu) <= radius).collect();
        let n = T::from_usize_lossy(near.len().max(1));
        let (mut sxx, mut syy, mut sxy) = (T::zero(), T::zero(), T::zero());
        for c in &near {
            let dx = T::from_i32(c.x - s.mu.x).unwrap();
            let dy = T::from_i32(c.y - s.mu.y).unwrap();
            sxx = sxx + dx * dx;
            syy = syy + dy * dy;
            sxy = sxy + dx * dy;
        }
        s.sigma = [[T::one() + sxx / n, sxy / n], [sxy / n, T::one() + syy / n]];
    }
}

/// Chebyshev radius of the stopping cells used by [`infer_scene`] to refit covariances.
pub const COVARIANCE_RADIUS: i32 = 2;

/// Runs a chain on `scene` and refits the MAP source covariances to nearby stopping cells.
pub fn infer_scene<T: Scalar>(scene: &Scene<T>, params: ModelParams<T>, config: ChainConfig) -> Result<ChainOutput<T>> {
    let chain = Chain::new(scene, params, config)?;
    let mut out = chain.run()?;
    refit_source_covariances(&mut out.map, chain.stopping_locations(), COVARIANCE_RADIUS);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::joint_log_posterior;
    use crate::scene::{Agent, Trajectory};

    fn corridor(n_agents: usize) -> Scene<f64> {
        let m = ConstraintMap::all_walkable(Lattice::new(10, 6).unwrap());
        let mut s = Scene::new(m);
        for k in 0..n_agents {
            let y = (k % 4) as i32 + 1;
            let mut cells: Vec<Cell> = (0..8).map(|x| Cell::new(x, y)).collect();
            cells.extend(std::iter::repeat_n(Cell::new(8, y), 12));
            s.agents.push(Agent { id: k as u32, trajectory: Trajectory::observed(cells) });
        }
        s
    }

    #[test]
    fn stopping_locations_count_agents_and_exits() {
        let mut s = corridor(5);
        s.agents.push(Agent {
            id: 9,
            trajectory: Trajectory::observed(vec![Cell::new(4, 4), Cell::new(4, 5)]),
        });
        let stops = stopping_locations(&s, 0.2, 10);
        assert_eq!((stops[0].cell, stops[0].count), (Cell::new(8, 1), 2));
        assert_eq!(stops.len(), 5);
        assert_eq!(stops[1].cell, Cell::new(4, 5));
        assert!(stops.iter().any(|l| l.cell == Cell::new(4, 5)));
    }

    #[test]
    fn single_stationary_agent_seeds_its_source() {
        let s = corridor(1);
        let p = ModelParams { eta: 1e-9, ..ModelParams::default() };
        let chain = Chain::new(&s, p, ChainConfig::default()).unwrap();
        let st = chain.initialize(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(st.mus(), vec![Cell::new(8, 1)]);
        assert!(s.agents[0].observed().iter().all(|c| st.cmap.is_walkable(*c)));
    }

    #[test]
    fn initialization_is_reproducible() {
        let s = corridor(4);
        let chain = Chain::new(&s, ModelParams::default(), ChainConfig::default()).unwrap();
        let a = chain.initialize(&mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = chain.initialize(&mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!((&a.cmap, a.mus(), &a.relations, a.log_post), (&b.cmap, b.mus(), &b.relations, b.log_post));
    }

    #[test]
    fn flip_twice_restores_state() {
        let s = corridor(3);
        let chain = Chain::new(&s, ModelParams::default(), ChainConfig::default()).unwrap();
        let st = chain.initialize(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = Cell::new(5, 5);
        let back = chain.flipped(&chain.flipped(&st, c), c);
        assert_eq!(back.cmap, st.cmap);
        assert!((back.log_post - st.log_post).abs() < 1e-9);
    }

    #[test]
    fn flip_ratios_cancel() {
        let s = corridor(3);
        let chain = Chain::new(&s, ModelParams::default(), ChainConfig::default()).unwrap();
        let c = Cell::new(3, 1);
        let q = chain.walkable_proposal(c);
        assert!(q > 0.9);
        let fwd = (1.0 - q).ln() - q.ln();
        let bwd = q.ln() - (1.0 - q).ln();
        assert_eq!(fwd + bwd, 0.0);
    }

    #[test]
    fn birth_then_death_restores_count() {
        let s = corridor(3);
        let chain = Chain::new(&s, ModelParams::default(), ChainConfig::default()).unwrap();
        let st = chain.initialize(&mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let n = st.n_sources();
        let b = chain.with_birth(&st, Source::isotropic(Cell::new(0, 0), 4.0));
        assert_eq!(b.n_sources(), n + 1);
        let d = chain.with_death(&b, n);
        assert_eq!(d.n_sources(), n);
        assert!((d.log_post - st.log_post).abs() < 1e-9);
    }

    #[test]
    fn death_of_only_goal_reassigns() {
        let s = corridor(2);
        let chain = Chain::new(&s, ModelParams::default(), ChainConfig::default()).unwrap();
        let cmap = ConstraintMap::all_walkable(s.lattice);
        let srcs = vec![Source::isotropic(Cell::new(8, 1), 1.0), Source::isotropic(Cell::new(0, 5), 1.0)];
        let r = Relations::from_goal_lists(2, &[vec![0], vec![0]]).unwrap();
        let st = ChainState::from_parts(&s, &ModelParams::default(), cmap, srcs, r, None).unwrap();
        let d = chain.with_death(&st, 0);
        assert!(d.relations.is_valid(3));
        assert_eq!(d.relations.goals(0), vec![0]);
    }

    #[test]
    fn relation_moves_respect_bounds() {
        let s = corridor(1);
        let chain = Chain::new(&s, ModelParams::default(), ChainConfig::default()).unwrap();
        let cmap = ConstraintMap::all_walkable(s.lattice);
        let st = ChainState::from_parts(
            &s,
            &ModelParams::default(),
            cmap,
            vec![Source::isotropic(Cell::new(8, 1), 1.0)],
            Relations::from_goal_lists(1, &[vec![0]]).unwrap(),
            None,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let p = chain.propose_relation(&st, &mut rng);
            assert_eq!(p.candidate.unwrap().relations, st.relations);
        }
    }

    #[test]
    fn identical_candidate_is_always_accepted() {
        let s = corridor(2);
        let chain = Chain::new(&s, ModelParams::default(), ChainConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let st = chain.initialize(&mut rng).unwrap();
        assert!((0..100).all(|_| accept(&st, &st.clone(), 0.0, &mut rng)));
    }

    #[test]
    fn cached_posterior_tracks_recomputation() {
        let s = corridor(6);
        let cfg = ChainConfig { iterations: 600, burn_in: 100, audit_every: 50, seed: 11, ..ChainConfig::default() };
        let chain = Chain::new(&s, ModelParams::default(), cfg).unwrap();
        let out = chain.run().unwrap();
        assert!(out.trace.audits > 0);
        assert!(out.trace.max_audit_gap < 1e-6, "gap {}", out.trace.max_audit_gap);
        let m = &out.map;
        let fresh = joint_log_posterior(&m.cmap, &m.mus(), &m.relations, &s, &ModelParams::default(), None).unwrap();
        assert!((fresh - m.log_post).abs() < 1e-6);
        assert!(out.stats.proposed.iter().zip(&out.stats.accepted).all(|(p, a)| a <= p));
    }

    #[test]
    fn shift_and_back_restores_state() {
        let s = corridor(4);
        let p = ModelParams::default();
        let chain = Chain::new(&s, p.clone(), ChainConfig::default()).unwrap();
        let st = chain.initialize(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let from = st.sources[0].mu;
        let to = Cell::new(from.x - 1, from.y);
        let moved = chain.with_shift(&st, 0, to);
        assert_eq!((moved.mus()[0], &moved.relations, moved.n_sources()), (to, &st.relations, st.n_sources()));
        let fresh = joint_log_posterior(&moved.cmap, &moved.mus(), &moved.relations, &s, &p, None).unwrap();
        assert!((fresh - moved.log_post).abs() < 1e-9);
        let back = chain.with_shift(&moved, 0, from);
        assert!((back.log_post - st.log_post).abs() < 1e-9);
    }

    #[test]
    fn shift_moves_pull_a_misplaced_source_home() {
        let s = corridor(4);
        let p = ModelParams { eta: 1.0, ..ModelParams::default() };
        let cfg = ChainConfig { mix: [0, 0, 0, 1], ..ChainConfig::default() };
        let chain = Chain::new(&s, p.clone(), cfg).unwrap();
        let lat = s.lattice;
        let relations = Relations::from_goal_lists(1, &vec![vec![0]; 4]).unwrap();
        let cmap = ConstraintMap::all_walkable(lat);
        let mut st = ChainState::from_parts(&s, &p, cmap, vec![Source::isotropic(Cell::new(1, 5), 1.0)], relations, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut stats = ProposalStats::default();
        let mut best = st.clone();
        for _ in 0..400 {
            st = chain.step(st, &mut rng, &mut stats);
            if st.log_post > best.log_post {
                best = st.clone();
            }
        }
        assert!(best.mus()[0].x >= 8, "{:?}", best.mus());
        assert!(stats.rate(MoveKind::Shift) > 0.0);
    }

    #[test]
    fn zero_iterations_returns_initial_state() {
        let s = corridor(2);
        let cfg = ChainConfig { iterations: 0, burn_in: 0, seed: 4, ..ChainConfig::default() };
        let chain = Chain::new(&s, ModelParams::default(), cfg).unwrap();
        let out = chain.run().unwrap();
        let init = chain.initialize(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(out.map.cmap, init.cmap);
        assert_eq!(out.map.mus(), init.mus());
    }

    #[test]
    fn fixed_seed_gives_identical_trace() {
        let s = corridor(3);
        let cfg = ChainConfig { iterations: 300, burn_in: 50, seed: 2, ..ChainConfig::default() };
        let chain = Chain::new(&s, ModelParams::default(), cfg).unwrap();
        assert_eq!(chain.run().unwrap().trace.to_csv(), chain.run().unwrap().trace.to_csv());
    }

    #[test]
    fn no_observations_is_an_input_error() {
        let s = Scene::<f64>::new(ConstraintMap::all_walkable(Lattice::new(3, 3).unwrap()));
        assert!(matches!(Chain::new(&s, ModelParams::default(), ChainConfig::default()), Err(AlmError::Input(_))));
    }
}

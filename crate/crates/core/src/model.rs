//! Priors, appearance likelihood, agent likelihood and the joint log-posterior.

use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

use crate::error::{AlmError, Result};
use crate::field::{attraction_field, cumulative_field, repulsion_field, FieldParams, VectorField};
use crate::planner::{path_weight, CostToGo, PathCostParams};
use crate::scalar::Scalar;
use crate::scene::{Behavior, Cell, ConstraintMap, FeatureChannel, Relations, Scene, Source};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", default, deny_unknown_fields)]
pub struct ModelParams<T: Scalar> {
    pub beta: T,
    pub eta: T,
    pub rho: T,
    pub kappa: T,
    pub gamma: T,
    /// Maximum number of goals per agent.
    pub max_goals: usize,
    pub field: FieldParams<T>,
    pub path: PathCostParams<T>,
    /// Extra detour charged when a goal cannot be reached on the current map.
    pub unreachable_energy: T,
    /// Energy per stationary frame, times the local force magnitude.
    pub stall_energy: T,
}

impl<T: Scalar> Default for ModelParams<T> {
    fn default() -> Self {
        ModelParams {
            beta: T::lit(0.05),
            eta: T::lit(3.0),
            rho: T::lit(0.95),
            kappa: T::lit(0.3),
            gamma: T::lit(0.1),
            max_goals: 3,
            field: FieldParams::default(),
            path: PathCostParams::default(),
            unreachable_energy: T::lit(50.0),
            stall_energy: T::one(),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn validate(&self) -> Result<()> {
        let unit = T::zero()..=T::one();
        if self.beta <= T::zero() || self.eta <= T::zero() {
            return Err(AlmError::Input("beta and eta must be positive".into()));
        }
        if self.rho <= T::zero() || self.rho >= T::one() {
            return Err(AlmError::Input("rho must lie in (0,1)".into()));
        }
        if !unit.contains(&self.kappa) || !unit.contains(&self.gamma) {
            return Err(AlmError::Input("kappa and gamma must lie in [0,1]".into()));
        }
        if self.stall_energy < T::zero() || self.unreachable_energy < T::zero() {
            return Err(AlmError::Input("stall and unreachable energies must be non-negative".into()));
        }
        if self.max_goals == 0 {
            return Err(AlmError::Input("max_goals must be at least 1".into()));
        }
        self.field.validate()?;
        self.path.validate()
    }
}

/// `beta * sum c(x)c(x')` over unordered 4-neighbor pairs.
pub fn ising_log_prior<T: Scalar>(cmap: &ConstraintMap, beta: T) -> T {
    let lat = cmap.lattice();
    let l = cmap.labels();
    let mut s: i64 = 0;
    for y in 0..lat.height {
        for x in 0..lat.width {
            let c = l[y * lat.width + x] as i64;
            if x + 1 < lat.width {
                s += c * l[y * lat.width + x + 1] as i64;
            }
            if y + 1 < lat.height {
                s += c * l[(y + 1) * lat.width + x] as i64;
            }
        }
    }
    beta * T::from_i64(s).unwrap()
}

/// Change in the Ising term when the label at `c` is negated.
pub fn ising_flip_delta<T: Scalar>(cmap: &ConstraintMap, c: Cell, beta: T) -> T {
    let own = cmap.label(c) as i64;
    let lat = cmap.lattice();
    let s: i64 = [(0, -1), (-1, 0), (1, 0), (0, 1)]
        .iter()
        .map(|&(dx, dy)| c.offset(dx, dy))
        .filter(|n| lat.contains(*n))
        .map(|n| cmap.label(n) as i64)
        .sum();
    beta * T::from_i64(-2 * own * s).unwrap()
}

fn ln_factorial<T: Scalar>(n: usize) -> T {
    (2..=n).map(|k| T::from_usize_lossy(k).ln()).sum()
}

/// Poisson count prior plus Bernoulli placement prior.
pub fn source_log_prior<T: Scalar>(sources: &[Cell], cmap: &ConstraintMap, eta: T, rho: T) -> T {
    let n = sources.len();
    let poisson = T::from_usize_lossy(n) * eta.ln() - ln_factorial::<T>(n) - eta;
    poisson + sources.iter().map(|&mu| placement_log_prior(cmap.is_walkable(mu), rho)).sum::<T>()
}

pub fn placement_log_prior<T: Scalar>(walkable: bool, rho: T) -> T {
    if walkable {
        rho.ln()
    } else {
        (T::one() - rho).ln()
    }
}

/// Multinomial weights fitted from `R` with add-one smoothing.
pub fn smoothed_theta<T: Scalar>(relations: &Relations) -> Vec<T> {
    let b = relations.column_counts();
    let total = b.iter().sum::<usize>() + b.len();
    b.iter().map(|&bj| T::from_usize_lossy(bj + 1) / T::from_usize_lossy(total)).collect()
}

/// `sum_j b_j ln theta_j`.
pub fn relation_log_prior<T: Scalar>(relations: &Relations, theta: &[T]) -> Result<T> {
    if theta.len() != relations.n_sources() {
        return Err(AlmError::Dimension(format!("{} weights for {} sources", theta.len(), relations.n_sources())));
    }
    Ok(relations
        .column_counts()
        .iter()
        .zip(theta)
        .filter(|(&b, _)| b > 0)
        .map(|(&b, &t)| T::from_usize_lossy(b) * t.ln())
        .sum())
}

pub fn behavior_log_prior<T: Scalar>(z: Behavior, n_goals: usize, kappa: T, gamma: T, n_sources: usize) -> Result<T> {
    match z {
        Behavior::Single => Ok((T::one() - kappa).ln()),
        Behavior::Sequential => {
            let n = n_goals.max(1) - 1;
            Ok(T::from_usize_lossy(n) * kappa.ln() + (T::one() - kappa).ln())
        }
        Behavior::Change => {
            if n_sources < 2 {
                return Err(AlmError::Domain("change of intent needs at least two sources".into()));
            }
            Ok((gamma / T::from_usize_lossy(n_sources - 1)).ln())
        }
    }
}

/// Behavior prior used while sampling: one goal is single, more are sequential.
pub fn implied_behavior_log_prior<T: Scalar>(n_goals: usize, kappa: T) -> T {
    let z = if n_goals <= 1 { Behavior::Single } else { Behavior::Sequential };
    behavior_log_prior(z, n_goals, kappa, T::zero(), 2).expect("single/sequential are total")
}

/// Two-component mixture with diagonal covariances over 4-channel descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct Gmm<T: Scalar> {
    pub weights: [T; 2],
    pub means: [[T; 4]; 2],
    pub variances: [[T; 4]; 2],
}

pub const GMM_VARIANCE_FLOOR: f64 = 1e-6;

impl<T: Scalar> Gmm<T> {
    pub fn validate(&self) -> Result<()> {
        let ok_w = self.weights.iter().all(|w| w.is_finite() && *w >= T::zero());
        let ok_v = self.variances.iter().flatten().all(|v| v.is_finite() && *v > T::zero());
        if ok_w && ok_v {
            Ok(())
        } else {
            Err(AlmError::Model("degenerate mixture covariance or weights".into()))
        }
    }

    fn component_log_density(&self, k: usize, x: &[T; 4]) -> T {
        let two_pi = T::TAU();
        (0..4)
            .map(|d| {
                let v = self.variances[k][d];
                let r = x[d] - self.means[k][d];
                -T::lit(0.5) * ((two_pi * v).ln() + r * r / v)
            })
            .sum()
    }

    pub fn log_density(&self, x: &[T; 4]) -> T {
        crate::scalar::log_sum_exp((0..2).map(|k| self.weights[k].ln() + self.component_log_density(k, x)))
    }

    /// Expectation-maximization from a deterministic split on channel sum.
    pub fn fit(samples: &[[T; 4]], iterations: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(AlmError::Model("no samples for mixture fit".into()));
        }
        let floor = T::lit(GMM_VARIANCE_FLOOR);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let key = |i: usize| samples[i].iter().copied().sum::<T>();
        order.sort_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap_or(std::cmp::Ordering::Equal));
        let half = samples.len().div_ceil(2);
        let mut resp: Vec<[T; 2]> = vec![[T::zero(); 2]; samples.len()];
        for (rank, &i) in order.iter().enumerate() {
            resp[i] = if rank < half || samples.len() == 1 { [T::one(), T::zero()] } else { [T::zero(), T::one()] };
        }
        let mut gmm = Gmm { weights: [T::lit(0.5); 2], means: [[T::zero(); 4]; 2], variances: [[T::one(); 4]; 2] };
        let mut prev = T::neg_infinity();
        for _ in 0..iterations.max(1) {
            // M step.
            for k in 0..2 {
                let nk: T = resp.iter().map(|r| r[k]).sum();
                let nk_safe = nk.max(T::lit(1e-12));
                gmm.weights[k] = (nk / T::from_usize_lossy(samples.len())).max(T::lit(1e-12));
                for d in 0..4 {
                    let m = samples.iter().zip(&resp).map(|(x, r)| r[k] * x[d]).sum::<T>() / nk_safe;
                    let v = samples.iter().zip(&resp).map(|(x, r)| r[k] * (x[d] - m) * (x[d] - m)).sum::<T>() / nk_safe;
                    gmm.means[k][d] = m;
                    gmm.variances[k][d] = v.max(floor);
                }
            }
            let wsum = gmm.weights[0] + gmm.weights[1];
            gmm.weights = [gmm.weights[0] / wsum, gmm.weights[1] / wsum];
            // E step.
            let mut ll = T::zero();
            for (x, r) in samples.iter().zip(resp.iter_mut()) {
                let a = gmm.weights[0].ln() + gmm.component_log_density(0, x);
                let b = gmm.weights[1].ln() + gmm.component_log_density(1, x);
                let z = crate::scalar::log_sum_exp([a, b]);
                *r = [(a - z).exp(), (b - z).exp()];
                ll = ll + z;
            }
            if (ll - prev).abs() < T::lit(1e-9) * (T::one() + ll.abs()) {
                break;
            }
            prev = ll;
        }
        gmm.validate()?;
        Ok(gmm)
    }

    /// Fit on the descriptors of currently walkable cells.
    pub fn fit_walkable(cmap: &ConstraintMap, features: &FeatureChannel<T>) -> Result<Self> {
        let s: Vec<[T; 4]> = cmap.walkable_cells().map(|c| features.values[cmap.lattice().index(c)]).collect();
        Self::fit(&s, 100)
    }
}

/// `sum over walkable cells of ln p(phi(x))`; zero without a feature channel.
pub fn appearance_log_likelihood<T: Scalar>(
    cmap: &ConstraintMap,
    features: Option<&FeatureChannel<T>>,
    gmm: Option<&Gmm<T>>,
) -> Result<T> {
    let (Some(f), Some(g)) = (features, gmm) else {
        return Ok(T::zero());
    };
    g.validate()?;
    if f.values.len() != cmap.lattice().len() {
        return Err(AlmError::Dimension("feature channel size differs from lattice".into()));
    }
    Ok(cmap.walkable_cells().map(|c| g.log_density(&f.values[cmap.lattice().index(c)])).sum())
}

/// Cumulative field and cost-to-go table toward one source.
#[derive(Clone, Debug)]
pub struct SourceField<T: Scalar> {
    pub mu: Cell,
    pub field: VectorField<T>,
    pub c2g: CostToGo<T>,
}

impl<T: Scalar> SourceField<T> {
    pub fn build(cmap: &ConstraintMap, repulsion: &VectorField<T>, mu: Cell, params: &ModelParams<T>) -> Self {
        let field = cumulative_field(&attraction_field(cmap.lattice(), mu, &params.field), repulsion)
            .expect("fields share the lattice");
        let c2g = CostToGo::build(cmap, &field, mu, &params.path).expect("source inside lattice");
        SourceField { mu, field, c2g }
    }
}

/// Builds [`SourceField`]s for every source on a map.
pub fn source_fields<T: Scalar>(cmap: &ConstraintMap, sources: &[Cell], params: &ModelParams<T>) -> Vec<SourceField<T>> {
    let rep = repulsion_field(cmap, &params.field);
    sources.iter().map(|&mu| SourceField::build(cmap, &rep, mu, params)).collect()
}

/// Energy of standing still: `stall_energy * |F(x)|` per stationary frame.
///
/// Zero at the source itself, where the field vanishes.
pub fn stall_energy<T: Scalar>(prefix: &[Cell], field: &VectorField<T>, params: &ModelParams<T>) -> T {
    if params.stall_energy == T::zero() {
        return T::zero();
    }
    let s: T = prefix.windows(2).filter(|w| w[0] == w[1]).map(|w| field.magnitude(w[0])).sum();
    params.stall_energy * s
}

/// Excess action of an observed prefix over the optimal path toward the source.
///
/// `W(prefix) + stall + C(x_t0) - C(x_0)`, zero for a prefix that follows an optimal
/// path and only rests on the source. `None` if the prefix crosses a non-walkable cell.
pub fn prefix_detour<T: Scalar>(prefix: &[Cell], sf: &SourceField<T>, cmap: &ConstraintMap, params: &ModelParams<T>) -> Option<T> {
    let (&x0, &xt) = (prefix.first()?, prefix.last()?);
    if prefix.iter().any(|c| !cmap.is_walkable(*c)) {
        return None;
    }
    let w = path_weight(prefix, &sf.field, &params.path) + stall_energy(prefix, &sf.field, params);
    let (c0, ct) = (sf.c2g.cost(x0), sf.c2g.cost(xt));
    let d = if c0.is_finite() && ct.is_finite() {
        w + ct - c0
    } else {
        w + xt.euclidean::<T>(sf.mu) - x0.euclidean::<T>(sf.mu) + params.unreachable_energy
    };
    Some(d.max(T::zero()))
}

/// Index into `goals` of the goal closest to `from`: reachable goals by cost-to-go,
/// otherwise by Euclidean distance; ties to the lowest source index.
pub fn closest_goal<T: Scalar, F: Borrow<SourceField<T>>>(goals: &[usize], fields: &[F], from: Cell) -> Option<usize> {
    let key = |j: usize| {
        let f = fields[j].borrow();
        let c = f.c2g.cost(from);
        if c.is_finite() {
            (0u8, c)
        } else {
            (1u8, from.euclidean::<T>(f.mu))
        }
    };
    goals
        .iter()
        .copied()
        .min_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)))
}

/// Agent log-likelihood under its closest selected source: `-lambda * detour`.
pub fn agent_log_likelihood<T: Scalar, F: Borrow<SourceField<T>>>(
    prefix: &[Cell],
    goals: &[usize],
    fields: &[F],
    cmap: &ConstraintMap,
    params: &ModelParams<T>,
) -> T {
    let Some(&xt) = prefix.last() else { return T::zero() };
    let Some(j) = closest_goal(goals, fields, xt) else { return T::neg_infinity() };
    match prefix_detour(prefix, fields[j].borrow(), cmap, params) {
        Some(d) => -params.path.lambda * d,
        None => T::neg_infinity(),
    }
}

/// Inferred `{C, S, R}` with fields rebuilt for prediction.
#[derive(Clone, Debug)]
pub struct Estimate<T: Scalar> {
    pub cmap: ConstraintMap,
    pub sources: Vec<Source<T>>,
    pub relations: Relations,
    pub fields: Vec<SourceField<T>>,
}

impl<T: Scalar> Estimate<T> {
    pub fn new(cmap: ConstraintMap, sources: Vec<Source<T>>, relations: Relations, params: &ModelParams<T>) -> Result<Self> {
        if relations.n_sources() != sources.len() {
            return Err(AlmError::Dimension("relations do not match sources".into()));
        }
        for s in &sources {
            cmap.lattice().checked_index(s.mu)?;
        }
        let mus: Vec<Cell> = sources.iter().map(|s| s.mu).collect();
        let fields = source_fields(&cmap, &mus, params);
        Ok(Estimate { cmap, sources, relations, fields })
    }

    pub fn mus(&self) -> Vec<Cell> {
        self.sources.iter().map(|s| s.mu).collect()
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = EstimateFile {
            format: ESTIMATE_FORMAT.into(),
            version: 1,
            lattice: self.cmap.lattice(),
            constraint_map: self.cmap.to_rle_rows(),
            sources: self.sources.clone(),
            goals: (0..self.relations.n_agents()).map(|i| self.relations.goals(i)).collect(),
        };
        Ok(crate::scene::to_pretty_json(&serde_json::to_value(file)?))
    }

    pub fn from_json(text: &str, params: &ModelParams<T>) -> Result<Self> {
        let f: EstimateFile<T> = serde_json::from_str(text)?;
        if f.format != ESTIMATE_FORMAT || f.version != 1 {
            return Err(AlmError::Format(format!("unsupported estimate document {:?} v{}", f.format, f.version)));
        }
        let cmap = ConstraintMap::from_rle_rows(crate::scene::Lattice::new(f.lattice.width, f.lattice.height)?, &f.constraint_map)?;
        let relations = Relations::from_goal_lists(f.sources.len(), &f.goals)?;
        Self::new(cmap, f.sources, relations, params)
    }
}

pub const ESTIMATE_FORMAT: &str = "alm-estimate";

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct EstimateFile<T: Scalar> {
    format: String,
    version: u32,
    lattice: crate::scene::Lattice,
    constraint_map: Vec<Vec<(i8, usize)>>,
    sources: Vec<Source<T>>,
    goals: Vec<Vec<usize>>,
}

/// Individual terms of the joint log-posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorTerms<T: Scalar> {
    pub ising: T,
    pub sources: T,
    pub relations: T,
    pub behaviors: T,
    pub appearance: T,
    pub agents: Vec<T>,
}

impl<T: Scalar> PosteriorTerms<T> {
    pub fn total(&self) -> T {
        let t = self.ising + self.sources + self.relations + self.behaviors + self.appearance
            + self.agents.iter().copied().sum::<T>();
        if t.is_nan() {
            T::neg_infinity()
        } else {
            t
        }
    }
}

/// Full recomputation of every posterior term for a state `{C, S, R}`.
///
/// Behaviors are implied by goal counts (one goal single, more sequential).
pub fn posterior_terms<T: Scalar>(
    cmap: &ConstraintMap,
    sources: &[Cell],
    relations: &Relations,
    scene: &Scene<T>,
    params: &ModelParams<T>,
    gmm: Option<&Gmm<T>>,
) -> Result<PosteriorTerms<T>> {
    if relations.n_sources() != sources.len() || relations.n_agents() != scene.agents.len() {
        return Err(AlmError::Dimension("relations do not match sources/agents".into()));
    }
    let fields = source_fields(cmap, sources, params);
    let theta = smoothed_theta(relations);
    let agents = scene
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| agent_log_likelihood(a.observed(), &relations.goals(i), &fields, cmap, params))
        .collect();
    Ok(PosteriorTerms {
        ising: ising_log_prior(cmap, params.beta),
        sources: source_log_prior(sources, cmap, params.eta, params.rho),
        relations: relation_log_prior(relations, &theta)?,
        behaviors: (0..relations.n_agents()).map(|i| implied_behavior_log_prior(relations.count(i), params.kappa)).sum(),
        appearance: appearance_log_likelihood(cmap, scene.features.as_ref(), gmm)?,
        agents,
    })
}

pub fn joint_log_posterior<T: Scalar>(
    cmap: &ConstraintMap,
    sources: &[Cell],
    relations: &Relations,
    scene: &Scene<T>,
    params: &ModelParams<T>,
    gmm: Option<&Gmm<T>>,
) -> Result<T> {
    Ok(posterior_terms(cmap, sources, relations, scene, params, gmm)?.total())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Agent, Lattice, Trajectory};
    use proptest::prelude::*;

    fn map(w: usize, h: usize, labels: &[i8]) -> ConstraintMap {
        ConstraintMap::from_labels(Lattice::new(w, h).unwrap(), labels.to_vec()).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn ising_hand_values() {
        assert!(close(ising_log_prior(&map(2, 2, &[1, 1, 1, 1]), 0.05), 0.2));
        assert!(close(ising_log_prior(&map(2, 2, &[1, 1, 1, -1]), 0.05), 0.0));
        assert!(close(ising_log_prior(&map(2, 2, &[1, -1, -1, 1]), 0.05), -0.2));
    }

    #[test]
    fn source_prior_hand_values() {
        let m = map(3, 3, &[1, 1, 1, 1, -1, 1, 1, 1, 1]);
        let (eta, rho) = (2.0, 0.95);
        assert!(close(source_log_prior::<f64>(&[], &m, eta, rho), -eta));
        let on = source_log_prior(&[Cell::new(0, 0)], &m, eta, rho);
        let off = source_log_prior(&[Cell::new(1, 1)], &m, eta, rho);
        assert!(close(off - on, -(19.0f64).ln()));
        let two = source_log_prior(&[Cell::new(0, 0), Cell::new(2, 2)], &m, eta, rho);
        assert!(close(two - on, (eta / 2.0).ln() + rho.ln()));
    }

    #[test]
    fn relation_prior_hand_values() {
        let r = Relations::from_goal_lists(2, &[vec![0], vec![1]]).unwrap();
        assert!(close(relation_log_prior(&r, &[0.5, 0.5]).unwrap(), 0.25f64.ln()));
        assert_eq!(relation_log_prior(&Relations::new(2, 2), &[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(relation_log_prior(&r, &[1.0, 0.0]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn smoothed_theta_adds_one() {
        let r = Relations::from_goal_lists(3, &[vec![0], vec![0, 1]]).unwrap();
        assert_eq!(smoothed_theta::<f64>(&r), vec![3.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0]);
    }

    #[test]
    fn behavior_prior_hand_values() {
        assert!(close(behavior_log_prior(Behavior::Single, 1, 0.3, 0.1, 2).unwrap(), 0.7f64.ln()));
        assert!(close(behavior_log_prior(Behavior::Sequential, 2, 0.3, 0.1, 2).unwrap(), 0.21f64.ln()));
        assert!(close(behavior_log_prior(Behavior::Change, 2, 0.3, 0.1, 3).unwrap(), 0.05f64.ln()));
        assert!(matches!(behavior_log_prior(Behavior::Change, 2, 0.3, 0.1f64, 1), Err(AlmError::Domain(_))));
        assert_eq!(
            behavior_log_prior(Behavior::Sequential, 1, 0.3, 0.1f64, 2).unwrap(),
            behavior_log_prior(Behavior::Single, 1, 0.3, 0.1, 2).unwrap()
        );
    }

    #[test]
    fn appearance_cases() {
        let m = map(2, 2, &[-1, -1, -1, 1]);
        let f = FeatureChannel { values: vec![[0.1, 0.2, 0.3, 1.0]; 4] };
        let g = Gmm { weights: [1.0, 0.0], means: [[0.0; 4], [0.0; 4]], variances: [[1.0; 4]; 2] };
        assert_eq!(appearance_log_likelihood(&m, None, Some(&g)).unwrap(), 0.0);
        let none = map(2, 2, &[-1; 4]);
        assert_eq!(appearance_log_likelihood(&none, Some(&f), Some(&g)).unwrap(), 0.0);
        let x: [f64; 4] = [0.1, 0.2, 0.3, 1.0];
        let p: f64 = x.iter().map(|v| (-v * v / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()).product();
        assert!(close(appearance_log_likelihood(&m, Some(&f), Some(&g)).unwrap(), p.ln()));
        let bad = Gmm { variances: [[0.0; 4]; 2], ..g };
        assert!(matches!(appearance_log_likelihood(&m, Some(&f), Some(&bad)), Err(AlmError::Model(_))));
    }

    #[test]
    fn gmm_separates_two_clusters() {
        let jitter = |k: usize| ((k * 37 % 11) as f64 - 5.0) * 0.01;
        let mut s: Vec<[f64; 4]> = (0..30).map(|k| [0.1 + jitter(k), 0.1, 0.1 - jitter(k + 3), 1.0]).collect();
        s.extend((0..10).map(|k| [0.9 + jitter(k), 0.8 - jitter(k + 1), 0.7, 0.0]));
        let g = Gmm::<f64>::fit(&s, 100).unwrap();
        assert!((g.weights[0] - 0.75).abs() < 1e-6);
        assert!(g.variances.iter().flatten().all(|&v| v >= GMM_VARIANCE_FLOOR));
    }

    fn corridor_scene() -> (Scene<f64>, ConstraintMap) {
        let m = ConstraintMap::all_walkable(Lattice::new(8, 3).unwrap());
        let mut s = Scene::new(m.clone());
        let cells = (0..4).map(|x| Cell::new(x, 1)).collect();
        s.agents.push(Agent { id: 0, trajectory: Trajectory::observed(cells) });
        (s, m)
    }

    #[test]
    fn straight_approach_has_zero_detour() {
        let (s, m) = corridor_scene();
        let p = ModelParams::<f64>::default();
        let f = source_fields(&m, &[Cell::new(7, 1)], &p);
        let d = prefix_detour(s.agents[0].observed(), &f[0], &m, &p).unwrap();
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn prefix_through_obstacle_is_impossible() {
        let (s, mut m) = corridor_scene();
        m.set(Cell::new(2, 1), -1);
        let p = ModelParams::<f64>::default();
        let f = source_fields(&m, &[Cell::new(7, 1)], &p);
        assert_eq!(agent_log_likelihood(s.agents[0].observed(), &[0], &f, &m, &p), f64::NEG_INFINITY);
    }

    #[test]
    fn posterior_without_agents_is_priors_only() {
        let m = ConstraintMap::all_walkable(Lattice::new(4, 4).unwrap());
        let s = Scene::<f64>::new(m.clone());
        let p = ModelParams::<f64>::default();
        let t = posterior_terms(&m, &[Cell::new(1, 1)], &Relations::new(0, 1), &s, &p, None).unwrap();
        assert!(t.agents.is_empty());
        let want = ising_log_prior(&m, p.beta) + source_log_prior(&[Cell::new(1, 1)], &m, p.eta, p.rho);
        assert!(close(t.total(), want));
    }

    #[test]
    fn posterior_difference_is_minus_lambda_delta_energy() {
        let (mut s, m) = corridor_scene();
        let p = ModelParams::<f64>::default();
        let r = Relations::from_goal_lists(1, &[vec![0]]).unwrap();
        let src = [Cell::new(7, 1)];
        let a = joint_log_posterior(&m, &src, &r, &s, &p, None).unwrap();
        s.agents[0].trajectory = Trajectory::observed(vec![Cell::new(0, 1), Cell::new(1, 0), Cell::new(2, 1), Cell::new(3, 1)]);
        let b = joint_log_posterior(&m, &src, &r, &s, &p, None).unwrap();
        let f = source_fields(&m, &src, &p);
        let d = prefix_detour(s.agents[0].observed(), &f[0], &m, &p).unwrap();
        assert!(d > 0.0);
        assert!(close(b - a, -p.path.lambda * d));
    }

    proptest! {
        #[test]
        fn flip_delta_matches_recompute(labels in proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], 20), k in 0usize..20) {
            let m = map(5, 4, &labels);
            let c = m.lattice().cell(k);
            let mut f = m.clone();
            f.flip(c);
            let want = ising_log_prior(&f, 0.05) - ising_log_prior(&m, 0.05);
            prop_assert!((ising_flip_delta(&m, c, 0.05f64) - want).abs() < 1e-12);
        }

        #[test]
        fn priors_are_shift_invariant(labels in proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], 16), a in 1i32..3, b in 1i32..3, k in 0usize..16) {
            let embed = |ox: i32, oy: i32| {
                let mut m = ConstraintMap::from_labels(Lattice::new(7, 7).unwrap(), vec![-1; 49]).unwrap();
                for (i, &l) in labels.iter().enumerate() {
                    m.set(Cell::new(i as i32 % 4 + ox, i as i32 / 4 + oy), l);
                }
                m
            };
            let (m1, m2) = (embed(1, 1), embed(a, b));
            prop_assert_eq!(ising_log_prior(&m1, 0.05f64), ising_log_prior(&m2, 0.05f64));
            let c = Cell::new(k as i32 % 4, k as i32 / 4);
            let s1 = source_log_prior(&[c.offset(1, 1)], &m1, 2.0f64, 0.95);
            let s2 = source_log_prior(&[c.offset(a, b)], &m2, 2.0f64, 0.95);
            prop_assert_eq!(s1, s2);
        }

        #[test]
        fn posterior_is_never_nan(labels in proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], 24), sx in 0i32..6, sy in 0i32..4) {
            let (mut s, _) = corridor_scene();
            s.agents[0].trajectory = Trajectory::observed(vec![Cell::new(0, 0), Cell::new(1, 1)]);
            let m = ConstraintMap::from_labels(Lattice::new(8, 3).unwrap(), labels).unwrap();
            let r = Relations::from_goal_lists(1, &[vec![0]]).unwrap();
            let v = joint_log_posterior(&m, &[Cell::new(sx, sy % 3)], &r, &s, &ModelParams::default(), None).unwrap();
            prop_assert!(!v.is_nan());
        }
    }
}

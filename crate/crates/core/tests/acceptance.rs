use std::cmp::Ordering;
use std::sync::OnceLock;
use std::time::Instant;

use alm::baselines::{baseline_document, random_walk_nll, Baseline, GreedyParams};
use alm::cluster::{cluster, descriptor, feature_maps, purity, KMeansConfig, DEFAULT_WINDOW};
use alm::eval::{behavior_scores, evaluate, mhd, model_nll, score_sources_and_relations};
use alm::field::VectorField;
use alm::mcmc::{infer_scene, Chain, ChainConfig, ProposalStats};
use alm::model::ModelParams;
use alm::planner::{dijkstra_path, path_energy, PathCostParams};
use alm::predict::{infer_intents, offline_document, PredictConfig};
use alm::scene::{scene_to_string, Scene};
use alm::synth::{
    archetype_suite, synthesize, toy_config, toy_params, truncate_observations, SynthConfig, TOY_AGENTS, TOY_SOURCES,
};
use alm::{Agent, BBox, Behavior, Cell, ConstraintMap, Lattice, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: usize, pass: bool, detail: impl std::fmt::Display, start: Instant) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n}: {verdict} {detail} ({:.1}s)", start.elapsed().as_secs_f64());
}

// Exhaustive simple-path search with the planner's tie-break order.
fn folded_weight(cells: &[Cell], field: &VectorField<f64>, p: &PathCostParams<f64>) -> f64 {
    cells
        .windows(2)
        .rev()
        .fold(0.0, |acc, w| p.edge_weight(field, w[0], w[1].x - w[0].x, w[1].y - w[0].y) + acc)
}

type Best = Option<(f64, usize, Vec<Cell>)>;

#[allow(clippy::too_many_arguments)]
fn search(
    cmap: &ConstraintMap,
    field: &VectorField<f64>,
    goal: Cell,
    p: &PathCostParams<f64>,
    path: &mut Vec<Cell>,
    visited: &mut [bool],
    partial: f64,
    best: &mut Best,
) {
    let cur = *path.last().unwrap();
    if cur == goal {
        let cand = (folded_weight(path, field, p), path.len(), path.clone());
        let better = match best {
            None => true,
            Some(b) => (cand.0, cand.1, &cand.2).partial_cmp(&(b.0, b.1, &b.2)) == Some(Ordering::Less),
        };
        if better {
            *best = Some(cand);
        }
        return;
    }
    if let Some(b) = best {
        if partial > b.0 * (1.0 + 1e-9) + 1e-12 {
            return;
        }
    }
    let lat = cmap.lattice();
    let mut nexts: Vec<Cell> = lat.neighbors(cur).filter(|n| cmap.is_walkable(*n) || *n == goal).collect();
    nexts.sort_by_key(|n| n.chebyshev(goal));
    for n in nexts {
        let i = lat.index(n);
        if visited[i] {
            continue;
        }
        visited[i] = true;
        path.push(n);
        let w = p.edge_weight(field, cur, n.x - cur.x, n.y - cur.y);
        search(cmap, field, goal, p, path, visited, partial + w, best);
        path.pop();
        visited[i] = false;
    }
}

fn exhaustive_best(
    cmap: &ConstraintMap,
    field: &VectorField<f64>,
    start: Cell,
    goal: Cell,
    p: &PathCostParams<f64>,
) -> Option<(Vec<Cell>, f64)> {
    let lat = cmap.lattice();
    let mut visited = vec![false; lat.len()];
    visited[lat.index(start)] = true;
    let mut best = None;
    search(cmap, field, goal, p, &mut vec![start], &mut visited, 0.0, &mut best);
    best.map(|(_, _, cells)| {
        let e = path_energy(&cells, field);
        (cells, e)
    })
}

fn random_instance(seed: u64, max: usize) -> (ConstraintMap, VectorField<f64>, Cell, Cell) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rng.random_range(2..=max);
    let h = rng.random_range(2..=max);
    let lat = Lattice::new(w, h).unwrap();
    let mut m = ConstraintMap::all_walkable(lat);
    for c in lat.cells().collect::<Vec<_>>() {
        if rng.random_bool(0.25) {
            m.set(c, -1);
        }
    }
    let v = (0..lat.len()).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let f = VectorField::from_vec(lat, v).unwrap();
    let walk: Vec<Cell> = m.walkable_cells().collect();
    let start = if walk.is_empty() { Cell::new(0, 0) } else { walk[rng.random_range(0..walk.len())] };
    m.set(start, 1);
    let goal = lat.cell(rng.random_range(0..lat.len()));
    (m, f, start, goal)
}

#[test]
fn criterion_1_planner_matches_exhaustive_search() {
    let t = Instant::now();
    let p = PathCostParams::default();
    let mut mismatches = Vec::new();
    let mut reachable = 0;
    for seed in 0..100 {
        let (m, f, s, g) = random_instance(seed, 6);
        let got = dijkstra_path(&m, &f, s, g, &p).ok().map(|p| (p.cells, p.energy));
        let want = exhaustive_best(&m, &f, s, g, &p);
        reachable += usize::from(want.is_some());
        if got != want {
            mismatches.push(seed);
        }
    }
    let pass = mismatches.is_empty() && t.elapsed().as_secs() < 60;
    report(1, pass, format!("100 scenes, {reachable} reachable, mismatched seeds {mismatches:?}"), t);
    assert!(pass);
}

struct SweepRow {
    n_sources: usize,
    n_agents: usize,
    sr: f64,
}

fn toy_sweep(fraction: f64) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for &ns in &TOY_SOURCES {
        for &na in &TOY_AGENTS {
            for layout in 0..3 {
                let synth = toy_config(ns, na, 0, layout);
                let mut scene: Scene<f64> = synthesize(&synth).unwrap();
                truncate_observations(&mut scene.agents, fraction).unwrap();
                let chain = ChainConfig { iterations: 20000, burn_in: 5000, seed: synth.seed, ..ChainConfig::default() };
                let est = infer_scene(&scene, toy_params::<f64>(ns), chain).unwrap().map.estimate();
                let gt = scene.ground_truth.as_ref().unwrap();
                let rows_pred: Vec<Vec<bool>> = (0..na).map(|i| est.relations.row(i).to_vec()).collect();
                let boxes: Vec<BBox> = gt.sources.iter().map(|s| s.1).collect();
                let (_, _, sr) = score_sources_and_relations(&est.sources, &rows_pred, &boxes, &gt.goals, scene.lattice);
                rows.push(SweepRow { n_sources: ns, n_agents: na, sr });
            }
        }
    }
    rows
}

fn cell_mean(rows: &[SweepRow], ns: usize, na: usize) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| r.n_sources == ns && r.n_agents == na).map(|r| r.sr).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn overall_mean(rows: &[SweepRow]) -> f64 {
    rows.iter().map(|r| r.sr).sum::<f64>() / rows.len() as f64
}

static HALF_SWEEP: OnceLock<(Vec<SweepRow>, f64)> = OnceLock::new();

fn half_sweep() -> &'static (Vec<SweepRow>, f64) {
    HALF_SWEEP.get_or_init(|| {
        let t = Instant::now();
        let rows = toy_sweep(0.5);
        (rows, t.elapsed().as_secs_f64())
    })
}

#[test]
fn criterion_2_toy_sweep_trend() {
    let t = Instant::now();
    let (rows, secs) = half_sweep();
    let two: Vec<f64> = TOY_AGENTS.iter().map(|&na| cell_mean(rows, 2, na)).collect();
    let at50: Vec<f64> = TOY_SOURCES.iter().map(|&ns| cell_mean(rows, ns, 50)).collect();
    let floor = two.iter().all(|&a| a >= 0.85);
    let trend = at50.windows(2).all(|w| w[1] <= w[0] + 0.05);
    let pass = floor && trend && *secs < 1800.0;
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ");
    report(
        2,
        pass,
        format!("|S|=2 over |A| [{}], |A|=50 over |S| [{}], sweep {secs:.0}s", fmt(&two), fmt(&at50)),
        t,
    );
    assert!(pass);
}

fn interior(cmap: &ConstraintMap, c: Cell) -> bool {
    (-1..=1).all(|dx| (-1..=1).all(|dy| {
        let n = Cell::new(c.x + dx, c.y + dy);
        cmap.lattice().contains(n) && cmap.is_walkable(n)
    }))
}

#[test]
fn criterion_3_random_walk_nll_is_ln_9() {
    let t = Instant::now();
    let want = 9f64.ln();
    let (mut worst, mut runs) = (0f64, 0usize);
    for seed in 0..5 {
        let scene: Scene<f64> = synthesize(&SynthConfig { n_agents: 40, seed, ..SynthConfig::default() }).unwrap();
        for a in &scene.agents {
            let cells = a.trajectory.cells.as_slice();
            let mut t1 = 0;
            while t1 + 1 < cells.len() {
                if !interior(&scene.cmap, cells[t1]) {
                    t1 += 1;
                    continue;
                }
                let mut t2 = t1 + 1;
                while t2 + 1 < cells.len() && interior(&scene.cmap, cells[t2]) {
                    t2 += 1;
                }
                let v: f64 = random_walk_nll(&scene.cmap, cells, t1, t2).unwrap();
                worst = worst.max((v - want).abs());
                runs += 1;
                t1 = t2;
            }
        }
    }
    let pass = runs > 0 && worst <= 1e-3;
    report(3, pass, format!("{runs} interior segments, max |NLL - ln 9| = {worst:.2e}"), t);
    assert!(pass);
}

fn toy_scene(track: Vec<Cell>) -> Scene<f64> {
    let m = ConstraintMap::all_walkable(Lattice::new(2, 2).unwrap());
    let mut s = Scene::new(m);
    s.agents.push(Agent { id: 0, trajectory: Trajectory::observed(track) });
    s
}

// Total variation between the empirical label frequencies and the enumerated posterior.
fn stationarity_gap(track: Vec<Cell>, steps: usize, seed: u64) -> (usize, f64) {
    let scene = toy_scene(track);
    let params = ModelParams { eta: 1e-9, ..ModelParams::default() };
    let config = ChainConfig { mix: [1, 0, 0, 0], gmm_refit_period: 0, ..ChainConfig::default() };
    let chain = Chain::new(&scene, params, config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = chain.initialize(&mut rng).unwrap();
    let seen = scene.agents[0].observed().to_vec();
    let free: Vec<Cell> = scene.lattice.cells().filter(|c| !seen.contains(c)).collect();
    let key = |m: &ConstraintMap| free.iter().enumerate().map(|(b, &c)| usize::from(m.is_walkable(c)) << b).sum::<usize>();
    let n_states = 1usize << free.len();
    let mut log_post = vec![f64::NEG_INFINITY; n_states];
    for mask in 0..n_states {
        let mut st = init.clone();
        for (b, &c) in free.iter().enumerate() {
            if ((mask >> b) & 1 == 1) != st.cmap.is_walkable(c) {
                st = chain.flipped(&st, c);
            }
        }
        log_post[key(&st.cmap)] = st.log_post;
    }
    let top = log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_post.iter().map(|&l| (l - top).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut counts = vec![0usize; n_states];
    let mut stats = ProposalStats::default();
    let mut st = init;
    for _ in 0..steps {
        st = chain.step(st, &mut rng, &mut stats);
        counts[key(&st.cmap)] += 1;
    }
    let tv = 0.5 * counts.iter().zip(&weights).map(|(&n, &w)| (n as f64 / steps as f64 - w / z).abs()).sum::<f64>();
    (n_states, tv)
}

#[test]
fn criterion_4_chain_matches_enumerated_posterior() {
    let t = Instant::now();
    let mut walk = vec![Cell::new(0, 0), Cell::new(1, 0)];
    walk.extend([Cell::new(1, 1); 12]);
    let (s1, tv1) = stationarity_gap(walk, 100_000, 11);
    let (s2, tv2) = stationarity_gap(vec![Cell::new(0, 0); 12], 100_000, 12);
    let pass = tv1 <= 0.05 && tv2 <= 0.05 && t.elapsed().as_secs() < 60;
    report(4, pass, format!("TV {tv1:.4} over {s1} states, {tv2:.4} over {s2} states after 1e5 steps"), t);
    assert!(pass);
}

#[test]
fn criterion_5_intent_behavior_average_precision() {
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 0..3 {
        let cfg = SynthConfig {
            n_sources: 4,
            n_agents: 500,
            behavior_mix: [0.96, 0.026, 0.014],
            min_turn_degrees: 120.0,
            seed,
            ..SynthConfig::default()
        };
        let scene: Scene<f64> = synthesize(&cfg).unwrap();
        let gt = scene.ground_truth.clone().unwrap();
        let params = ModelParams { eta: 4.0, ..ModelParams::default() };
        let chain = ChainConfig { iterations: 20000, burn_in: 5000, seed, ..ChainConfig::default() };
        let est = infer_scene(&scene, params.clone(), chain).unwrap().map.estimate();
        let intents = infer_intents(&scene, &est, &params, &PredictConfig::default()).unwrap();
        let pred: Vec<Behavior> = intents.iter().map(|e| e.best.behavior).collect();
        let scores: Vec<[f64; 3]> = intents.iter().map(|e| e.class_posterior()).collect();
        let rep = behavior_scores(&gt.behaviors, &pred, &scores).unwrap();
        let ap = |b: Behavior| rep.ap[b.index()].unwrap_or(0.0);
        let (seq, change) = (ap(Behavior::Sequential), ap(Behavior::Change));
        let counts: Vec<usize> = [Behavior::Sequential, Behavior::Change]
            .iter()
            .map(|b| gt.behaviors.iter().filter(|z| *z == b).count())
            .collect();
        pass &= seq >= 0.8 && change >= 0.6;
        lines.push(format!("seed {seed}: AP seq {seq:.3} ({}), change {change:.3} ({})", counts[0], counts[1]));
    }
    pass &= t.elapsed().as_secs() < 1200;
    report(5, pass, lines.join("; "), t);
    assert!(pass);
}

#[test]
fn criterion_6_metric_anchors() {
    let t = Instant::now();
    let c = Cell::new;
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let m1: f64 = mhd(&[c(0, 0), c(2, 0)], &[c(0, 1)]).unwrap();
    let m2: f64 = mhd(&[c(0, 0)], &[c(3, 4)]).unwrap();
    let a = BBox { x0: 0, y0: 0, x1: 3, y1: 3 };
    let iou: f64 = a.iou(&BBox { x0: 2, y0: 0, x1: 5, y1: 3 });
    let l = Lattice::new(3, 3).unwrap();
    let mut f = VectorField::<f64>::zeros(l);
    let track = [c(0, 0), c(1, 0)];
    let zero = model_nll(&track, 0, 1, &f, 0.5).unwrap();
    f.set(c(0, 0), [1.0, 0.0]);
    let aligned = model_nll(&track, 0, 1, &f, 0.5).unwrap();
    let perpendicular = model_nll(&[c(0, 0), c(0, 1)], 0, 1, &f, 0.5).unwrap();
    let checks = [
        ("mhd golden", m1, golden),
        ("mhd 3-4-5", m2, 5.0),
        ("iou shifted", iou, 1.0 / 3.0),
        ("nll zero field", zero, 0.0),
        ("nll aligned", aligned, 0.5),
        ("nll perpendicular", perpendicular, 0.0),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, got, want)| (got - want).abs() > 1e-9).map(|k| k.0).collect();
    let pass = failed.is_empty();
    report(6, pass, format!("{} anchors, failed {failed:?}", checks.len()), t);
    assert!(pass);
}

#[test]
fn criterion_7_archetype_clustering_purity() {
    let t = Instant::now();
    let mut purities = Vec::new();
    for seed in 0..10 {
        let suite = archetype_suite(30, DEFAULT_WINDOW, seed);
        let ds: Vec<Vec<f64>> = suite
            .iter()
            .map(|s| {
                let tracks: Vec<&[Cell]> = s.tracks.iter().map(|t| t.as_slice()).collect();
                descriptor(&feature_maps::<f64>(s.center, DEFAULT_WINDOW, &tracks))
            })
            .collect();
        let truth: Vec<usize> = suite.iter().map(|s| s.kind.index()).collect();
        let c = cluster(&ds, 3, &KMeansConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        purities.push(purity(&c.labels, &truth));
    }
    let pass = purities.iter().all(|&p| p >= 0.9) && t.elapsed().as_secs() < 300;
    let min = purities.iter().cloned().fold(1.0, f64::min);
    report(7, pass, format!("10 seeds, min purity {min:.3}"), t);
    assert!(pass);
}

fn end_to_end(seed: u64) -> Vec<String> {
    let cfg = SynthConfig { n_sources: 3, n_agents: 30, seed, ..SynthConfig::default() };
    let mut scene: Scene<f64> = synthesize(&cfg).unwrap();
    truncate_observations(&mut scene.agents, 0.5).unwrap();
    let params = ModelParams { eta: 3.0, ..ModelParams::default() };
    let chain = ChainConfig { iterations: 3000, burn_in: 750, seed, ..ChainConfig::default() };
    let out = infer_scene(&scene, params.clone(), chain).unwrap();
    let est = out.map.estimate();
    let offline = offline_document(&scene, &est, &params, &PredictConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rw = baseline_document(Baseline::Rw, &scene, &est, &params, &GreedyParams::default(), &mut rng).unwrap();
    let report = evaluate(&scene, &offline, Some(&est), &params).unwrap();
    vec![
        scene_to_string(&scene).unwrap(),
        est.to_json().unwrap(),
        out.trace.to_csv(),
        offline.to_json().unwrap(),
        rw.to_json().unwrap(),
        serde_json::to_string(&report).unwrap(),
    ]
}

#[test]
fn criterion_8_seeded_runs_are_byte_identical() {
    let t = Instant::now();
    let a = end_to_end(5);
    let b = end_to_end(5);
    let differing: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
    let pass = differing.is_empty();
    report(8, pass, format!("{} artifacts, differing {differing:?}", a.len()), t);
    assert!(pass);
}

#[test]
fn criterion_9_accuracy_degrades_with_less_observation() {
    let t = Instant::now();
    let (rows, _) = half_sweep();
    let half = overall_mean(rows);
    let f45 = overall_mean(&toy_sweep(0.45));
    let f40 = overall_mean(&toy_sweep(0.40));
    let pass = f45 <= half && f40 <= half;
    report(9, pass, format!("mean S&R 50% {half:.3}, 45% {f45:.3}, 40% {f40:.3}"), t);
    assert!(pass);
}

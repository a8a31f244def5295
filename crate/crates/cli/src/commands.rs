use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use alm::baselines::{baseline_document, Baseline};
use alm::cluster::{build_feature_maps, cluster, descriptor, feature_maps, mean_maps, purity, FeatureMaps, KMeansConfig};
use alm::eval::{evaluate, score_sources_and_relations, EvalReport};
use alm::field::lm_sum_field;
use alm::mcmc::{infer_scene, ChainOutput, MoveKind};
use alm::model::{Estimate, ModelParams};
use alm::predict::{offline_document, online_run, AgentPrediction, PredictionDocument};
use alm::raster::{feature_maps_raster, field_arrows, field_heatmap, likelihood_overlay, obstacle_mask, trajectory_overlay, Raster};
use alm::scene::{scene_from_str, scene_to_string, to_pretty_json};
use alm::synth::{archetype_suite, synthesize, toy_config, toy_params, truncate_observations};
use alm::{AlmError, Cell, Result, Scene};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest::{default_manifest_path, Recorder};
use crate::{ClusterArgs, Command, Common, EvalArgs, InferArgs, PredictArgs, PredictMode, RenderArgs, RenderKind, SweepArgs, SynthArgs};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Infer(a) => infer(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Cluster(a) => cluster_cmd(a),
        Command::Render(a) => render(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn start(name: &str, common: &Common) -> Result<(Recorder, RunConfig)> {
    let mut rec = Recorder::new(name);
    let (cfg, text) = RunConfig::load(common.config.as_deref())?;
    if let (Some(p), Some(t)) = (&common.config, text) {
        rec.record_input(p, &t);
    }
    Ok((rec, cfg))
}

fn manifest_path(common: &Common, out: &Path) -> PathBuf {
    common.manifest.clone().unwrap_or_else(|| default_manifest_path(out))
}

fn load_scene(rec: &mut Recorder, path: &Path) -> Result<Scene> {
    let text = rec.read(path)?;
    let scene: Scene = scene_from_str(&text)?;
    let v = scene.validate();
    if !v.is_ok() {
        return Err(AlmError::Input(format!("{}: {}", path.display(), v.violations.join("; "))));
    }
    Ok(scene)
}

fn load_estimate(rec: &mut Recorder, path: &Path, params: &ModelParams<f64>) -> Result<Estimate<f64>> {
    Estimate::from_json(&rec.read(path)?, params)
}

fn synth(a: SynthArgs) -> Result<()> {
    let (mut rec, mut cfg) = start("synth", &a.common)?;
    let s = &mut cfg.synth;
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.width {
        s.width = v;
    }
    if let Some(v) = a.height {
        s.height = v;
    }
    if let Some(v) = a.sources {
        s.n_sources = v;
    }
    if let Some(v) = a.agents {
        s.n_agents = v;
    }
    if let Some(v) = a.obstacle_ratio {
        s.obstacle_ratio = v;
    }
    if let Some(m) = &a.mix {
        s.behavior_mix = [m[0], m[1], m[2]];
    }
    if let Some(f) = a.observed {
        cfg.observed_fraction = f;
    }
    cfg.synth.validate()?;
    rec.config(&json!({ "synth": cfg.synth, "observed_fraction": cfg.observed_fraction }))?;
    rec.seed(cfg.synth.seed);
    let mut scene: Scene = synthesize(&cfg.synth)?;
    truncate_observations(&mut scene.agents, cfg.observed_fraction)?;
    rec.write(&a.out, scene_to_string(&scene)?.as_bytes())?;
    rec.finish(&manifest_path(&a.common, &a.out))?;
    Ok(())
}

fn diagnostics(out: &ChainOutput<f64>, cfg: &alm::mcmc::ChainConfig) -> serde_json::Value {
    let rates: serde_json::Map<String, serde_json::Value> =
        MoveKind::ALL.iter().map(|&k| (k.name().to_string(), json!(out.stats.rate(k)))).collect();
    json!({
        "iterations": cfg.iterations,
        "burn_in": cfg.burn_in,
        "map_log_posterior": out.map.log_post,
        "last_log_posterior": out.last.log_post,
        "n_sources": out.map.n_sources(),
        "acceptance": rates,
        "proposed": out.stats.proposed,
        "audits": out.trace.audits,
        "max_audit_gap": out.trace.max_audit_gap,
    })
}

fn infer(a: InferArgs) -> Result<()> {
    let (mut rec, mut cfg) = start("infer", &a.common)?;
    let scene = load_scene(&mut rec, &a.scene)?;
    if scene.agents.is_empty() || scene.agents.iter().any(|ag| ag.observed().is_empty()) {
        return Err(AlmError::Input("scene has agents without observed frames".into()));
    }
    if let Some(v) = a.seed {
        cfg.chain.seed = v;
    }
    if let Some(v) = a.iterations {
        cfg.chain.iterations = v;
        if a.burn_in.is_none() && cfg.chain.burn_in >= v {
            cfg.chain.burn_in = v / 4;
        }
    }
    if let Some(v) = a.burn_in {
        cfg.chain.burn_in = v;
    }
    if let Some(v) = a.max_goals {
        cfg.model.max_goals = v;
    }
    if let Some(v) = a.eta {
        cfg.model.eta = v;
    }
    cfg.model.validate()?;
    cfg.chain.validate()?;
    rec.config(&json!({ "model": cfg.model, "chain": cfg.chain }))?;
    rec.seed(cfg.chain.seed);
    let out = infer_scene(&scene, cfg.model.clone(), cfg.chain.clone())?;
    let est = out.map.estimate();
    rec.write(&a.out, est.to_json()?.as_bytes())?;
    if let Some(p) = &a.trace {
        rec.write(p, out.trace.to_csv().as_bytes())?;
    }
    if let Some(p) = &a.diagnostics {
        rec.write(p, to_pretty_json(&diagnostics(&out, &cfg.chain)).as_bytes())?;
    }
    rec.finish(&manifest_path(&a.common, &a.out))?;
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let (mut rec, cfg) = start("predict", &a.common)?;
    cfg.model.validate()?;
    cfg.predict.validate()?;
    let mut scene = load_scene(&mut rec, &a.scene)?;
    let est = load_estimate(&mut rec, &a.estimate, &cfg.model)?;
    if est.cmap.lattice() != scene.lattice || est.relations.n_agents() != scene.agents.len() {
        return Err(AlmError::Input("estimate does not belong to this scene".into()));
    }
    if let Some(h) = a.horizon {
        for ag in &mut scene.agents {
            ag.trajectory.horizon = h.max(ag.observed().len());
        }
    }
    let seed = a.seed.unwrap_or(cfg.chain.seed);
    rec.config(&json!({ "mode": format!("{:?}", a.mode).to_lowercase(), "horizon": a.horizon, "model": cfg.model, "predict": cfg.predict, "greedy": cfg.greedy }))?;
    rec.seed(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let doc = match a.mode {
        PredictMode::Offline => offline_document(&scene, &est, &cfg.model, &cfg.predict)?,
        PredictMode::Online => {
            let state = online_run(&scene, &est, &cfg.model, &cfg.predict, &mut rng)?;
            PredictionDocument::new("online", state.agents.iter().map(AgentPrediction::from).collect())
        }
        PredictMode::Sp | PredictMode::Rw | PredictMode::Pm | PredictMode::Gm => {
            let which = Baseline::parse(&format!("{:?}", a.mode))?;
            baseline_document(which, &scene, &est, &cfg.model, &cfg.greedy, &mut rng)?
        }
    };
    rec.write(&a.out, doc.to_json()?.as_bytes())?;
    rec.finish(&manifest_path(&a.common, &a.out))?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (mut rec, cfg) = start("eval", &a.common)?;
    let scene = load_scene(&mut rec, &a.scene)?;
    let doc = PredictionDocument::from_json(&rec.read(&a.prediction)?)?;
    let est = match &a.estimate {
        Some(p) => Some(load_estimate(&mut rec, p, &cfg.model)?),
        None => None,
    };
    rec.config(&json!({ "model": cfg.model }))?;
    let report = evaluate(&scene, &doc, est.as_ref(), &cfg.model)?;
    rec.write(&a.out, to_pretty_json(&serde_json::to_value(&report)?).as_bytes())?;
    let csv = format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row());
    if let Some(p) = &a.csv {
        rec.write(p, csv.as_bytes())?;
    }
    print!("{csv}");
    rec.finish(&manifest_path(&a.common, &a.out))?;
    Ok(())
}

fn cluster_cmd(a: ClusterArgs) -> Result<()> {
    let (mut rec, mut cfg) = start("cluster", &a.common)?;
    if let Some(k) = a.k {
        cfg.cluster.k = k;
    }
    if let Some(w) = a.window {
        cfg.cluster.window = w;
    }
    let seed = a.seed.unwrap_or(cfg.chain.seed);
    let w = cfg.cluster.window;
    let (centers, maps, truth): (Vec<Cell>, Vec<FeatureMaps<f64>>, Option<Vec<usize>>) = match (a.archetypes, &a.scene, &a.estimate) {
        (Some(n), _, _) => {
            let suite = archetype_suite(n, w, seed);
            let maps = suite
                .iter()
                .map(|s| {
                    let tracks: Vec<&[Cell]> = s.tracks.iter().map(Vec::as_slice).collect();
                    feature_maps(s.center, w, &tracks)
                })
                .collect();
            (suite.iter().map(|s| s.center).collect(), maps, Some(suite.iter().map(|s| s.kind.index()).collect()))
        }
        (None, Some(sp), Some(ep)) => {
            let scene = load_scene(&mut rec, sp)?;
            let est = load_estimate(&mut rec, ep, &cfg.model)?;
            if est.relations.n_agents() != scene.agents.len() {
                return Err(AlmError::Input("estimate does not belong to this scene".into()));
            }
            let mus = est.mus();
            let maps = mus
                .iter()
                .enumerate()
                .map(|(j, &mu)| build_feature_maps(&scene, &est.relations, mu, j, w))
                .collect::<Result<Vec<_>>>()?;
            let truth = scene.ground_truth.as_ref().map(|g| g.source_labels.clone()).filter(|l| l.len() == mus.len());
            (mus, maps, truth)
        }
        _ => return Err(AlmError::Input("cluster needs --archetypes or both --scene and --estimate".into())),
    };
    rec.config(&json!({ "cluster": cfg.cluster, "archetypes": a.archetypes, "cell_size": cfg.cell_size }))?;
    rec.seed(seed);
    let descriptors: Vec<Vec<f64>> = maps.iter().map(descriptor).collect();
    let km = KMeansConfig { restarts: cfg.cluster.restarts, max_iterations: cfg.cluster.max_iterations };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let result = cluster(&descriptors, cfg.cluster.k, &km, &mut rng)?;
    let mut csv = String::from(if truth.is_some() { "source,x,y,label,truth\n" } else { "source,x,y,label\n" });
    for (j, (c, l)) in centers.iter().zip(&result.labels).enumerate() {
        let _ = write!(csv, "{j},{},{},{l}", c.x, c.y);
        if let Some(t) = &truth {
            let _ = write!(csv, ",{}", t[j]);
        }
        csv.push('\n');
    }
    rec.write(&a.out, csv.as_bytes())?;
    println!("inertia,{}", result.inertia);
    if let Some(t) = &truth {
        println!("purity,{}", purity(&result.labels, t));
    }
    if let Some(dir) = &a.maps_dir {
        for (c, m) in mean_maps(&maps, &result.labels, cfg.cluster.k).iter().enumerate() {
            let r = feature_maps_raster(m, cfg.cell_size)?;
            rec.write(&dir.join(format!("cluster_{c}.pgm")), r.to_pgm().as_bytes())?;
        }
    }
    rec.finish(&manifest_path(&a.common, &a.out))?;
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let (mut rec, mut cfg) = start("render", &a.common)?;
    if let Some(s) = a.cell_size {
        cfg.cell_size = s;
    }
    let scene = load_scene(&mut rec, &a.scene)?;
    let est = match &a.estimate {
        Some(p) => Some(load_estimate(&mut rec, p, &cfg.model)?),
        None => None,
    };
    let doc = match &a.prediction {
        Some(p) => Some(PredictionDocument::from_json(&rec.read(p)?)?),
        None => None,
    };
    rec.config(&json!({ "kind": format!("{:?}", a.kind).to_lowercase(), "cell_size": cfg.cell_size }))?;
    let cmap = est.as_ref().map_or(&scene.cmap, |e| &e.cmap);
    let mus: Vec<Cell> = match (&est, &scene.ground_truth) {
        (Some(e), _) => e.mus(),
        (None, Some(gt)) if scene.sources.is_empty() => gt.sources.iter().map(|s| s.0).collect(),
        _ => scene.sources.iter().map(|s| s.mu).collect(),
    };
    let tracks: Vec<&[Cell]> = match &doc {
        Some(d) => d.agents.iter().map(|p| p.cells.as_slice()).collect(),
        None => scene.agents.iter().map(|ag| ag.trajectory.cells.as_slice()).collect(),
    };
    let s = cfg.cell_size;
    let raster: Raster = match a.kind {
        RenderKind::Obstacles => obstacle_mask(cmap, s)?,
        RenderKind::Field => field_heatmap(&lm_sum_field(cmap, &mus, &cfg.model.field), cmap, s)?,
        RenderKind::Arrows => field_arrows(&lm_sum_field(cmap, &mus, &cfg.model.field), cmap, s)?,
        RenderKind::Tracks => trajectory_overlay(cmap, &mus, &tracks, s)?,
        RenderKind::Likelihood => likelihood_overlay(cmap, &tracks, s)?,
    };
    let gray = a.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let text = if gray { raster.to_pgm() } else { raster.to_ppm() };
    rec.write(&a.out, text.as_bytes())?;
    rec.finish(&manifest_path(&a.common, &a.out))?;
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let (mut rec, mut cfg) = start("sweep", &a.common)?;
    let base = a.seed.unwrap_or(cfg.synth.seed);
    if let Some(v) = a.iterations {
        cfg.chain.iterations = v;
        if cfg.chain.burn_in >= v {
            cfg.chain.burn_in = v / 4;
        }
    }
    if a.sources.is_empty() || a.agents.is_empty() || a.layouts == 0 {
        return Err(AlmError::Input("sweep grid is empty".into()));
    }
    cfg.chain.validate()?;
    rec.config(&json!({
        "sources": a.sources, "agents": a.agents, "layouts": a.layouts, "infer": a.infer,
        "observed_fraction": cfg.observed_fraction, "chain": cfg.chain,
    }))?;
    rec.seed(base);
    let mut table = String::from("n_sources,n_agents,layout,seed,s_accuracy,r_accuracy,sr_accuracy\n");
    for &ns in &a.sources {
        for &na in &a.agents {
            for layout in 0..a.layouts {
                let synth = toy_config(ns, na, base, layout);
                let mut scene: Scene = synthesize(&synth)?;
                truncate_observations(&mut scene.agents, cfg.observed_fraction)?;
                let name = format!("scene_s{ns}_a{na}_l{layout}");
                rec.write(&a.out_dir.join(format!("{name}.json")), scene_to_string(&scene)?.as_bytes())?;
                if !a.infer {
                    continue;
                }
                let chain = alm::mcmc::ChainConfig { seed: synth.seed, ..cfg.chain.clone() };
                let out = infer_scene(&scene, toy_params::<f64>(ns), chain)?;
                let est = out.map.estimate();
                rec.write(&a.out_dir.join(format!("{name}.estimate.json")), est.to_json()?.as_bytes())?;
                let gt = scene.ground_truth.as_ref().ok_or_else(|| AlmError::Model("synthetic scene without ground truth".into()))?;
                let rows: Vec<Vec<bool>> = (0..na).map(|i| est.relations.row(i).to_vec()).collect();
                let boxes: Vec<_> = gt.sources.iter().map(|s| s.1).collect();
                let (loc, r, sr) = score_sources_and_relations(&est.sources, &rows, &boxes, &gt.goals, scene.lattice);
                let _ = writeln!(table, "{ns},{na},{layout},{},{},{r},{sr}", synth.seed, loc.accuracy);
            }
        }
    }
    if a.infer {
        rec.write(&a.out_dir.join("table.csv"), table.as_bytes())?;
        print!("{table}");
    }
    let manifest = a.common.manifest.clone().unwrap_or_else(|| a.out_dir.join("manifest.json"));
    rec.finish(&manifest)?;
    Ok(())
}

//! Versioned, human-readable JSON scene files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Agent, BBox, Behavior, Cell, ConstraintMap, FeatureChannel, GroundTruth, Lattice, Scene, Source, Trajectory};
use crate::error::{AlmError, Result};
use crate::scalar::Scalar;

pub const SCENE_FORMAT: &str = "alm-scene";
pub const SCENE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct SceneFile<T: Scalar> {
    format: String,
    version: u32,
    lattice: Lattice,
    /// Per row, `[label, run]` pairs.
    constraint_map: Vec<Vec<(i8, usize)>>,
    #[serde(default)]
    sources: Vec<Source<T>>,
    #[serde(default)]
    agents: Vec<AgentFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<[T; 4]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<GroundTruthFile>,
}

#[derive(Serialize, Deserialize)]
struct AgentFile {
    id: u32,
    t0: usize,
    horizon: usize,
    /// `[t, x, y]` per frame.
    frames: Vec<(usize, i32, i32)>,
}

#[derive(Serialize, Deserialize)]
struct GtSourceFile {
    mu: Cell,
    bbox: (i32, i32, i32, i32),
}

#[derive(Serialize, Deserialize)]
struct GroundTruthFile {
    sources: Vec<GtSourceFile>,
    goals: Vec<Vec<usize>>,
    behaviors: Vec<Behavior>,
    switch_points: Vec<Option<Cell>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    source_labels: Vec<usize>,
}

impl<T: Scalar> SceneFile<T> {
    fn from_scene(s: &Scene<T>) -> Self {
        SceneFile {
            format: SCENE_FORMAT.into(),
            version: SCENE_VERSION,
            lattice: s.lattice,
            constraint_map: s.cmap.to_rle_rows(),
            sources: s.sources.clone(),
            agents: s
                .agents
                .iter()
                .map(|a| AgentFile {
                    id: a.id,
                    t0: a.trajectory.t0,
                    horizon: a.trajectory.horizon,
                    frames: a.trajectory.cells.iter().enumerate().map(|(t, c)| (t, c.x, c.y)).collect(),
                })
                .collect(),
            features: s.features.as_ref().map(|f| f.values.clone()),
            ground_truth: s.ground_truth.as_ref().map(|g| GroundTruthFile {
                sources: g
                    .sources
                    .iter()
                    .map(|(mu, b)| GtSourceFile { mu: *mu, bbox: (b.x0, b.y0, b.x1, b.y1) })
                    .collect(),
                goals: g.goals.clone(),
                behaviors: g.behaviors.clone(),
                switch_points: g.switch_points.clone(),
                source_labels: g.source_labels.clone(),
            }),
        }
    }

    fn into_scene(self) -> Result<Scene<T>> {
        if self.format != SCENE_FORMAT {
            return Err(AlmError::Format(format!("unknown format tag {:?}", self.format)));
        }
        if self.version != SCENE_VERSION {
            return Err(AlmError::Format(format!("unsupported scene version {}", self.version)));
        }
        let lattice = Lattice::new(self.lattice.width, self.lattice.height)?;
        let cmap = ConstraintMap::from_rle_rows(lattice, &self.constraint_map)?;
        let mut agents = Vec::with_capacity(self.agents.len());
        for a in self.agents {
            let mut cells = Vec::with_capacity(a.frames.len());
            for (k, &(t, x, y)) in a.frames.iter().enumerate() {
                if t != k {
                    return Err(AlmError::Format(format!("agent {}: frame {k} has timestamp {t}", a.id)));
                }
                cells.push(Cell::new(x, y));
            }
            agents.push(Agent { id: a.id, trajectory: Trajectory::new(cells, a.t0, a.horizon) });
        }
        let ground_truth = self.ground_truth.map(|g| GroundTruth {
            sources: g
                .sources
                .into_iter()
                .map(|s| (s.mu, BBox { x0: s.bbox.0, y0: s.bbox.1, x1: s.bbox.2, y1: s.bbox.3 }))
                .collect(),
            goals: g.goals,
            behaviors: g.behaviors,
            switch_points: g.switch_points,
            source_labels: g.source_labels,
        });
        Ok(Scene {
            lattice,
            cmap,
            sources: self.sources,
            agents,
            features: self.features.map(|values| FeatureChannel { values }),
            ground_truth,
        })
    }
}

pub fn scene_to_string<T: Scalar>(scene: &Scene<T>) -> Result<String> {
    let v = serde_json::to_value(SceneFile::from_scene(scene))?;
    Ok(to_pretty_json(&v))
}

pub fn scene_from_str<T: Scalar>(s: &str) -> Result<Scene<T>> {
    let f: SceneFile<T> = serde_json::from_str(s)?;
    f.into_scene()
}

pub fn write_scene<T: Scalar>(scene: &Scene<T>, path: &Path) -> Result<()> {
    std::fs::write(path, scene_to_string(scene)?)?;
    Ok(())
}

pub fn read_scene<T: Scalar>(path: &Path) -> Result<Scene<T>> {
    scene_from_str(&std::fs::read_to_string(path)?)
}

fn is_flat(v: &Value) -> bool {
    match v {
        Value::Array(xs) => xs.iter().all(|x| !x.is_array() && !x.is_object()),
        Value::Object(_) => false,
        _ => true,
    }
}

/// Pretty JSON that keeps scalar arrays and arrays of scalar arrays on one line.
pub fn to_pretty_json(v: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, v, 0);
    out.push('\n');
    out
}

fn write_value(out: &mut String, v: &Value, indent: usize) {
    match v {
        Value::Object(map) if !map.is_empty() => {
            out.push_str("{\n");
            for (k, (key, val)) in map.iter().enumerate() {
                let _ = write!(out, "{:w$}{}: ", "", Value::String(key.clone()), w = indent + 2);
                write_value(out, val, indent + 2);
                if k + 1 < map.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            let _ = write!(out, "{:w$}}}", "", w = indent);
        }
        Value::Array(xs) if !xs.is_empty() && !xs.iter().all(is_flat) => {
            out.push_str("[\n");
            for (k, x) in xs.iter().enumerate() {
                let _ = write!(out, "{:w$}", "", w = indent + 2);
                write_value(out, x, indent + 2);
                if k + 1 < xs.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            let _ = write!(out, "{:w$}]", "", w = indent);
        }
        Value::Array(xs) => {
            out.push('[');
            for (k, x) in xs.iter().enumerate() {
                if k > 0 {
                    out.push_str(", ");
                }
                write_value(out, x, indent);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

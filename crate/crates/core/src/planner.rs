//! Least-action paths on the lattice: reverse Dijkstra tables, paths, energies.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{AlmError, Result};
use crate::field::VectorField;
use crate::scalar::Scalar;
use crate::scene::{Cell, ConstraintMap, Lattice, NEIGHBOR_OFFSETS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", default, deny_unknown_fields)]
pub struct PathCostParams<T: Scalar> {
    pub lambda: T,
    pub epsilon: T,
}

impl<T: Scalar> Default for PathCostParams<T> {
    fn default() -> Self {
        PathCostParams { lambda: T::lit(0.5), epsilon: T::lit(1e-3) }
    }
}

impl<T: Scalar> PathCostParams<T> {
    pub fn validate(&self) -> Result<()> {
        if self.lambda > T::zero() && self.epsilon > T::zero() {
            Ok(())
        } else {
            Err(AlmError::Input("lambda and epsilon must be positive".into()))
        }
    }

    /// Full edge weight `|F(x).d| + eps*|d|` of a step `d` leaving `x`.
    #[inline]
    pub fn edge_weight(&self, field: &VectorField<T>, x: Cell, dx: i32, dy: i32) -> T {
        field.step_work(x, dx, dy) + self.epsilon * step_length::<T>(dx, dy)
    }
}

#[inline]
pub fn step_length<T: Scalar>(dx: i32, dy: i32) -> T {
    match dx.abs() + dy.abs() {
        0 => T::zero(),
        1 => T::one(),
        _ => T::SQRT_2(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannedPath<T: Scalar> {
    pub cells: Vec<Cell>,
    /// Action along the path, regularizer excluded.
    pub energy: T,
    pub reachable: bool,
}

const NO_SUCC: u32 = u32::MAX;

struct HeapItem<T> {
    cost: T,
    steps: u32,
    idx: u32,
}

impl<T: Scalar> PartialEq for HeapItem<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: Scalar> Eq for HeapItem<T> {}

impl<T: Scalar> PartialOrd for HeapItem<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Scalar> Ord for HeapItem<T> {
    // Reversed: BinaryHeap pops the smallest key.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .partial_cmp(&self.cost)
            .unwrap_or(Ordering::Equal)
            .then(other.steps.cmp(&self.steps))
            .then(other.idx.cmp(&self.idx))
    }
}

/// Optimal cost-to-go from every cell to one goal, with successor pointers.
///
/// Keys are compared as `(cost, steps)`; equal keys resolve to the row-major
/// smallest successor. Following successors from any cell reproduces
/// [`dijkstra_path`].
#[derive(Clone, Debug)]
pub struct CostToGo<T: Scalar> {
    lattice: Lattice,
    goal: Cell,
    cost: Vec<T>,
    steps: Vec<u32>,
    succ: Vec<u32>,
}

impl<T: Scalar> CostToGo<T> {
    /// Paths may end on a non-walkable goal; every other cell must be walkable.
    pub fn build(cmap: &ConstraintMap, field: &VectorField<T>, goal: Cell, params: &PathCostParams<T>) -> Result<Self> {
        let lat = cmap.lattice();
        if field.lattice() != lat {
            return Err(AlmError::Dimension("field and constraint map lattices differ".into()));
        }
        let g = lat.checked_index(goal)?;
        let n = lat.len();
        let mut cost = vec![T::infinity(); n];
        let mut steps = vec![u32::MAX; n];
        let mut succ = vec![NO_SUCC; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        cost[g] = T::zero();
        steps[g] = 0;
        heap.push(HeapItem { cost: T::zero(), steps: 0, idx: g as u32 });
        let labels = cmap.labels();
        while let Some(HeapItem { idx, .. }) = heap.pop() {
            let u = idx as usize;
            if done[u] {
                continue;
            }
            done[u] = true;
            let uc = lat.cell(u);
            for &(ox, oy) in &NEIGHBOR_OFFSETS {
                let p = uc.offset(ox, oy);
                if !lat.contains(p) {
                    continue;
                }
                let pi = lat.index(p);
                if done[pi] || labels[pi] != 1 {
                    continue;
                }
                // Edge p -> u, field sampled at the tail p.
                let c = params.edge_weight(field, p, -ox, -oy) + cost[u];
                let s = steps[u] + 1;
                let better = match c.partial_cmp(&cost[pi]) {
                    Some(Ordering::Less) => true,
                    Some(Ordering::Equal) => s < steps[pi] || (s == steps[pi] && (u as u32) < succ[pi]),
                    _ => false,
                };
                if better {
                    cost[pi] = c;
                    steps[pi] = s;
                    succ[pi] = u as u32;
                    heap.push(HeapItem { cost: c, steps: s, idx: pi as u32 });
                }
            }
        }
        Ok(CostToGo { lattice: lat, goal, cost, steps, succ })
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    /// Optimal weight to the goal (regularizer included); `inf` if unreachable or outside.
    pub fn cost(&self, c: Cell) -> T {
        if self.lattice.contains(c) {
            self.cost[self.lattice.index(c)]
        } else {
            T::infinity()
        }
    }

    pub fn steps(&self, c: Cell) -> Option<u32> {
        self.reachable(c).then(|| self.steps[self.lattice.index(c)])
    }

    pub fn reachable(&self, c: Cell) -> bool {
        self.cost(c).is_finite()
    }

    pub fn next(&self, c: Cell) -> Option<Cell> {
        if !self.lattice.contains(c) {
            return None;
        }
        let s = self.succ[self.lattice.index(c)];
        (s != NO_SUCC).then(|| self.lattice.cell(s as usize))
    }

    /// Optimal path from `c` to the goal, both ends included.
    pub fn path_from(&self, c: Cell) -> Option<Vec<Cell>> {
        if !self.reachable(c) {
            return None;
        }
        let mut path = vec![c];
        let mut cur = c;
        while cur != self.goal {
            cur = self.next(cur)?;
            path.push(cur);
        }
        Some(path)
    }
}

/// `sum |F(x).dx|` over consecutive steps, field sampled at each tail.
pub fn path_energy<T: Scalar>(cells: &[Cell], field: &VectorField<T>) -> T {
    cells.windows(2).map(|w| field.step_work(w[0], w[1].x - w[0].x, w[1].y - w[0].y)).sum()
}

/// Path energy plus the length regularizer.
pub fn path_weight<T: Scalar>(cells: &[Cell], field: &VectorField<T>, params: &PathCostParams<T>) -> T {
    cells
        .windows(2)
        .map(|w| params.edge_weight(field, w[0], w[1].x - w[0].x, w[1].y - w[0].y))
        .sum()
}

pub fn dijkstra_path<T: Scalar>(
    cmap: &ConstraintMap,
    field: &VectorField<T>,
    start: Cell,
    goal: Cell,
    params: &PathCostParams<T>,
) -> Result<PlannedPath<T>> {
    cmap.lattice().checked_index(start)?;
    if !cmap.is_walkable(start) && start != goal {
        return Err(AlmError::Input(format!("start ({}, {}) is not walkable", start.x, start.y)));
    }
    let table = CostToGo::build(cmap, field, goal, params)?;
    let cells = table.path_from(start).ok_or(AlmError::Unreachable { start, goal })?;
    let energy = path_energy(&cells, field);
    Ok(PlannedPath { cells, energy, reachable: true })
}

/// Concatenated per-leg optimal paths through `waypoints`, leg `k` planned in `fields[k]`.
pub fn multi_goal_path<T: Scalar>(
    cmap: &ConstraintMap,
    fields: &[VectorField<T>],
    start: Cell,
    waypoints: &[Cell],
    params: &PathCostParams<T>,
) -> Result<PlannedPath<T>> {
    if waypoints.is_empty() || fields.len() != waypoints.len() {
        return Err(AlmError::Dimension(format!("{} fields for {} waypoints", fields.len(), waypoints.len())));
    }
    let mut cells = vec![start];
    let mut energy = T::zero();
    let mut from = start;
    for (field, &wp) in fields.iter().zip(waypoints) {
        let leg = dijkstra_path(cmap, field, from, wp, params)?;
        energy = energy + leg.energy;
        cells.extend_from_slice(&leg.cells[1..]);
        from = wp;
    }
    Ok(PlannedPath { cells, energy, reachable: true })
}

/// Unnormalized log-likelihood `-lambda * energy`.
pub fn trajectory_log_likelihood<T: Scalar>(energy: T, params: &PathCostParams<T>) -> T {
    -params.lambda * energy
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Exhaustive simple-path enumeration, independent of the Dijkstra table.
    use super::*;

    /// Right-fold sum, the accumulation order of a backward search.
    fn folded_weight<T: Scalar>(cells: &[Cell], field: &VectorField<T>, p: &PathCostParams<T>) -> T {
        cells
            .windows(2)
            .rev()
            .fold(T::zero(), |acc, w| p.edge_weight(field, w[0], w[1].x - w[0].x, w[1].y - w[0].y) + acc)
    }

    /// Lexicographically best `(weight, steps, cell sequence)` simple path, if any.
    pub fn best_path<T: Scalar>(
        cmap: &ConstraintMap,
        field: &VectorField<T>,
        start: Cell,
        goal: Cell,
        p: &PathCostParams<T>,
    ) -> Option<(Vec<Cell>, T)> {
        let lat = cmap.lattice();
        let mut best: Option<(T, usize, Vec<Cell>)> = None;
        let mut visited = vec![false; lat.len()];
        let mut path = vec![start];
        visited[lat.index(start)] = true;
        fn rec<T: Scalar>(
            cmap: &ConstraintMap,
            field: &VectorField<T>,
            goal: Cell,
            p: &PathCostParams<T>,
            path: &mut Vec<Cell>,
            visited: &mut Vec<bool>,
            partial: T,
            best: &mut Option<(T, usize, Vec<Cell>)>,
        ) {
            let cur = *path.last().unwrap();
            if cur == goal {
                let w = folded_weight(path, field, p);
                let cand = (w, path.len(), path.clone());
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
                if partial > b.0 * T::lit(1.0 + 1e-9) + T::lit(1e-12) {
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
                rec(cmap, field, goal, p, path, visited, partial + w, best);
                path.pop();
                visited[i] = false;
            }
        }
        rec(cmap, field, goal, p, &mut path, &mut visited, T::zero(), &mut best);
        best.map(|(_, _, cells)| {
            let e = path_energy(&cells, field);
            (cells, e)
        })
    }
}

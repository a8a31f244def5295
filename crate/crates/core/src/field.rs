//! Repulsion and attraction fields over the lattice.

use serde::{Deserialize, Serialize};

use crate::error::{AlmError, Result};
use crate::scalar::Scalar;
use crate::scene::{Cell, ConstraintMap, Lattice};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", default, deny_unknown_fields)]
pub struct FieldParams<T: Scalar> {
    pub sigma_r_sq: T,
    pub sigma_a_sq: T,
}

impl<T: Scalar> Default for FieldParams<T> {
    fn default() -> Self {
        FieldParams { sigma_r_sq: T::lit(1e-2), sigma_a_sq: T::lit(1e4) }
    }
}

impl<T: Scalar> FieldParams<T> {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_r_sq > T::zero() && self.sigma_a_sq > T::zero() {
            Ok(())
        } else {
            Err(AlmError::Input("field variances must be positive".into()))
        }
    }

    /// Chebyshev radius beyond which repulsion is exactly zero.
    pub fn repulsion_cutoff(&self) -> i32 {
        let r = (T::lit(4.0) * self.sigma_r_sq.sqrt()).ceil().to_i32().unwrap_or(1);
        r.max(1)
    }
}

/// One 2D vector per lattice cell.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField<T: Scalar> {
    lattice: Lattice,
    v: Vec<[T; 2]>,
}

impl<T: Scalar> VectorField<T> {
    pub fn zeros(lattice: Lattice) -> Self {
        VectorField { lattice, v: vec![[T::zero(); 2]; lattice.len()] }
    }

    pub fn from_vec(lattice: Lattice, v: Vec<[T; 2]>) -> Result<Self> {
        if v.len() != lattice.len() {
            return Err(AlmError::Dimension(format!("{} vectors for {} cells", v.len(), lattice.len())));
        }
        Ok(VectorField { lattice, v })
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    #[inline]
    pub fn at(&self, c: Cell) -> [T; 2] {
        self.v[self.lattice.index(c)]
    }

    pub fn set(&mut self, c: Cell, value: [T; 2]) {
        let i = self.lattice.index(c);
        self.v[i] = value;
    }

    pub fn values(&self) -> &[[T; 2]] {
        &self.v
    }

    pub fn magnitude(&self, c: Cell) -> T {
        let [x, y] = self.at(c);
        x.hypot(y)
    }

    /// Per-cell sum; lattices must match.
    pub fn add(&self, other: &VectorField<T>) -> Result<Self> {
        if self.lattice != other.lattice {
            return Err(AlmError::Dimension("field lattices differ".into()));
        }
        let v = self.v.iter().zip(&other.v).map(|(a, b)| [a[0] + b[0], a[1] + b[1]]).collect();
        Ok(VectorField { lattice: self.lattice, v })
    }

    fn add_assign(&mut self, other: &VectorField<T>) {
        for (a, b) in self.v.iter_mut().zip(&other.v) {
            a[0] = a[0] + b[0];
            a[1] = a[1] + b[1];
        }
    }

    /// `|F(x) . d|` for a step `d` leaving cell `x`.
    #[inline]
    pub fn step_work(&self, x: Cell, dx: i32, dy: i32) -> T {
        let [fx, fy] = self.at(x);
        (fx * T::from_i32(dx).unwrap() + fy * T::from_i32(dy).unwrap()).abs()
    }
}

fn gaussian<T: Scalar>(d_sq: T, var: T) -> T {
    (-d_sq / (T::lit(2.0) * var)).exp()
}

/// Sum of short-range pushes away from every non-walkable cell.
pub fn repulsion_field<T: Scalar>(cmap: &ConstraintMap, params: &FieldParams<T>) -> VectorField<T> {
    let lat = cmap.lattice();
    let mut f = VectorField::zeros(lat);
    let r = params.repulsion_cutoff();
    for ob in cmap.obstacle_cells() {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let c = ob.offset(dx, dy);
                if !lat.contains(c) {
                    continue;
                }
                let (fx, fy) = (T::from_i32(dx).unwrap(), T::from_i32(dy).unwrap());
                let d = fx.hypot(fy);
                let g = gaussian(d * d, params.sigma_r_sq);
                let i = lat.index(c);
                f.v[i][0] = f.v[i][0] + g * fx / d;
                f.v[i][1] = f.v[i][1] + g * fy / d;
            }
        }
    }
    f
}

/// Long-range pull toward `mu`; zero at `mu` itself.
pub fn attraction_field<T: Scalar>(lattice: Lattice, mu: Cell, params: &FieldParams<T>) -> VectorField<T> {
    let v = lattice
        .cells()
        .map(|c| {
            if c == mu {
                return [T::zero(); 2];
            }
            let dx = T::from_i32(mu.x - c.x).unwrap();
            let dy = T::from_i32(mu.y - c.y).unwrap();
            let d = dx.hypot(dy);
            let g = gaussian(d * d, params.sigma_a_sq);
            [g * dx / d, g * dy / d]
        })
        .collect();
    VectorField { lattice, v }
}

pub fn cumulative_field<T: Scalar>(attraction: &VectorField<T>, repulsion: &VectorField<T>) -> Result<VectorField<T>> {
    attraction.add(repulsion)
}

/// Attraction of every source plus repulsion.
pub fn lm_sum_field<T: Scalar>(cmap: &ConstraintMap, sources: &[Cell], params: &FieldParams<T>) -> VectorField<T> {
    let mut f = repulsion_field(cmap, params);
    for &mu in sources {
        f.add_assign(&attraction_field(cmap.lattice(), mu, params));
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lat(w: usize, h: usize) -> Lattice {
        Lattice::new(w, h).unwrap()
    }

    fn graded() -> FieldParams<f64> {
        FieldParams { sigma_r_sq: 1.0, sigma_a_sq: 1e4 }
    }

    #[test]
    fn open_map_has_no_repulsion() {
        let m = ConstraintMap::all_walkable(lat(6, 6));
        assert!(repulsion_field(&m, &graded()).values().iter().all(|v| *v == [0.0, 0.0]));
    }

    #[test]
    fn repulsion_mirrors_about_obstacle() {
        let mut m = ConstraintMap::all_walkable(lat(9, 9));
        m.set(Cell::new(4, 4), -1);
        let f = repulsion_field(&m, &graded());
        let a = f.at(Cell::new(2, 3));
        let b = f.at(Cell::new(6, 5));
        assert!((a[0] + b[0]).abs() < 1e-15 && (a[1] + b[1]).abs() < 1e-15);
        assert!(a[0] < 0.0);
    }

    #[test]
    fn repulsion_cancels_between_twin_obstacles() {
        let mut m = ConstraintMap::all_walkable(lat(9, 9));
        m.set(Cell::new(2, 4), -1);
        m.set(Cell::new(6, 4), -1);
        let v = repulsion_field(&m, &graded()).at(Cell::new(4, 4));
        assert!(v[0].abs() < 1e-15 && v[1].abs() < 1e-15);
    }

    #[test]
    fn default_repulsion_is_contact_only() {
        let p = FieldParams::<f64>::default();
        assert_eq!(p.repulsion_cutoff(), 1);
        let mut m = ConstraintMap::all_walkable(lat(5, 5));
        m.set(Cell::new(2, 2), -1);
        let f = repulsion_field(&m, &p);
        assert!((f.at(Cell::new(3, 2))[0] - (-50.0f64).exp()).abs() < 1e-30);
        assert_eq!(f.at(Cell::new(4, 2)), [0.0, 0.0]);
    }

    #[test]
    fn repulsion_is_zero_beyond_cutoff() {
        let p = graded();
        let r = p.repulsion_cutoff();
        assert_eq!(r, 4);
        let mut m = ConstraintMap::all_walkable(lat(12, 12));
        m.set(Cell::new(0, 0), -1);
        let f = repulsion_field(&m, &p);
        for c in m.lattice().cells() {
            if c.chebyshev(Cell::new(0, 0)) > r {
                assert_eq!(f.at(c), [0.0, 0.0]);
            }
        }
    }

    #[test]
    fn attraction_peak_and_tail() {
        let p = FieldParams::<f64>::default();
        let l = lat(201, 1 + 1);
        let f = attraction_field(l, Cell::new(200, 0), &p);
        assert_eq!(f.at(Cell::new(200, 0)), [0.0, 0.0]);
        assert!((f.magnitude(Cell::new(100, 0)) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((f.magnitude(Cell::new(100, 0)) - 0.60653).abs() < 1e-5);
        assert!(f.at(Cell::new(0, 0))[0] > 0.0);
        let far: f64 = (-(1e12) / 2e4_f64).exp();
        assert_eq!(far, 0.0);
    }

    #[test]
    fn cumulative_identities_and_mismatch() {
        let l = lat(5, 5);
        let a = attraction_field(l, Cell::new(1, 1), &graded());
        let z = VectorField::zeros(l);
        assert_eq!(cumulative_field(&a, &z).unwrap(), a);
        assert_eq!(cumulative_field(&z, &a).unwrap(), a);
        let other = VectorField::<f64>::zeros(lat(4, 5));
        assert!(matches!(cumulative_field(&a, &other), Err(AlmError::Dimension(_))));
    }

    #[test]
    fn lm_sum_cases() {
        let m = ConstraintMap::all_walkable(lat(9, 5));
        let p = graded();
        assert_eq!(lm_sum_field(&m, &[], &p), repulsion_field(&m, &p));
        let one = lm_sum_field(&m, &[Cell::new(2, 2)], &p);
        let cum = cumulative_field(&attraction_field(m.lattice(), Cell::new(2, 2), &p), &repulsion_field(&m, &p)).unwrap();
        assert_eq!(one, cum);
        let two = lm_sum_field(&m, &[Cell::new(0, 2), Cell::new(8, 2)], &p);
        assert!(two.at(Cell::new(4, 2))[0].abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn attraction_strictly_decreases_with_distance(d1 in 1i32..150, d2 in 1i32..150) {
            prop_assume!(d1 != d2);
            let l = lat(301, 2);
            let f = attraction_field(l, Cell::new(150, 0), &FieldParams::<f64>::default());
            let m1 = f.magnitude(Cell::new(150 + d1, 0));
            let m2 = f.magnitude(Cell::new(150 - d2, 0));
            prop_assert_eq!(d1 < d2, m1 > m2);
        }

        #[test]
        fn cumulative_is_linear(ax in 0i32..7, ay in 0i32..7, bx in 0i32..7, by in 0i32..7) {
            let l = lat(7, 7);
            let p = graded();
            let mut m = ConstraintMap::all_walkable(l);
            m.set(Cell::new(3, 3), -1);
            let r = repulsion_field(&m, &p);
            let a = attraction_field(l, Cell::new(ax, ay), &p);
            let b = attraction_field(l, Cell::new(bx, by), &p);
            let lhs = cumulative_field(&a.add(&b).unwrap(), &r).unwrap();
            let rhs = cumulative_field(&a, &r).unwrap().add(&b).unwrap();
            for (u, v) in lhs.values().iter().zip(rhs.values()) {
                prop_assert!((u[0] - v[0]).abs() < 1e-12 && (u[1] - v[1]).abs() < 1e-12);
            }
        }
    }
}

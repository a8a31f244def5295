//! Functional classes of sources: local density, activeness and entropy maps,
//! log-polar descriptors and K-means under rotation and mirroring.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AlmError, Result};
use crate::scalar::Scalar;
use crate::scene::{Cell, Relations, Scene};

pub const DEFAULT_WINDOW: usize = 10;
pub const RADIAL_BINS: usize = 5;
pub const ANGULAR_BINS: usize = 8;
pub const BLOCK_LEN: usize = RADIAL_BINS * ANGULAR_BINS;
pub const DESCRIPTOR_LEN: usize = 3 * BLOCK_LEN;

/// One of the 8 symmetries of the square: `mirror` (x -> -x) applied first, then
/// `rotation` quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Dihedral {
    pub rotation: u8,
    pub mirror: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { rotation: 0, mirror: false };

    pub fn all() -> impl Iterator<Item = Dihedral> {
        [false, true].into_iter().flat_map(|mirror| (0..4).map(move |rotation| Dihedral { rotation, mirror }))
    }

    /// Image of an offset from the window center.
    pub fn apply(self, dx: i32, dy: i32) -> (i32, i32) {
        let (mut x, mut y) = if self.mirror { (-dx, dy) } else { (dx, dy) };
        for _ in 0..self.rotation {
            (x, y) = (-y, x);
        }
        (x, y)
    }

    /// Image of an angular bin.
    pub fn angular_bin(self, k: usize) -> usize {
        let k = if self.mirror { (ANGULAR_BINS + 4 - k) % ANGULAR_BINS } else { k };
        (k + 2 * self.rotation as usize) % ANGULAR_BINS
    }
}

/// Density, activeness and entropy over a `(2w+1)^2` window, row-major from the top-left corner.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(bound = "")]
pub struct FeatureMaps<T: Scalar> {
    pub center: Cell,
    pub w: usize,
    pub density: Vec<T>,
    pub activeness: Vec<T>,
    pub entropy: Vec<T>,
}

impl<T: Scalar> FeatureMaps<T> {
    pub fn zeros(center: Cell, w: usize) -> Self {
        let n = (2 * w + 1) * (2 * w + 1);
        FeatureMaps { center, w, density: vec![T::zero(); n], activeness: vec![T::zero(); n], entropy: vec![T::zero(); n] }
    }

    pub fn side(&self) -> usize {
        2 * self.w + 1
    }

    /// Index of an offset from the center, if inside the window.
    pub fn offset_index(&self, dx: i32, dy: i32) -> Option<usize> {
        let w = self.w as i32;
        (dx.abs() <= w && dy.abs() <= w).then(|| ((dy + w) as usize) * self.side() + (dx + w) as usize)
    }

    fn offset_of(&self, idx: usize) -> (i32, i32) {
        let s = self.side();
        ((idx % s) as i32 - self.w as i32, (idx / s) as i32 - self.w as i32)
    }

    pub fn maps(&self) -> [&[T]; 3] {
        [&self.density, &self.activeness, &self.entropy]
    }

    /// The maps with every offset moved by `g`.
    pub fn transformed(&self, g: Dihedral) -> Self {
        let mut out = Self::zeros(self.center, self.w);
        for idx in 0..self.density.len() {
            let (dx, dy) = self.offset_of(idx);
            let (tx, ty) = g.apply(dx, dy);
            let j = out.offset_index(tx, ty).expect("square window is closed under symmetries");
            out.density[j] = self.density[idx];
            out.activeness[j] = self.activeness[idx];
            out.entropy[j] = self.entropy[idx];
        }
        out
    }
}

/// 8-bin direction of a unit step, in the angular-bin convention (bin 0 along +x, counter-clockwise in `(x, y)`).
fn direction_bin(dx: i32, dy: i32) -> Option<usize> {
    if dx == 0 && dy == 0 {
        return None;
    }
    Some(angular_bin(dx, dy))
}

/// Maps from the frames of `tracks` within `w` cells of `center`.
///
/// Activeness is the mean step length leaving a cell; entropy is that of the
/// histogram of non-stationary step directions leaving it.
pub fn feature_maps<T: Scalar>(center: Cell, w: usize, tracks: &[&[Cell]]) -> FeatureMaps<T> {
    let mut maps = FeatureMaps::zeros(center, w);
    let n = maps.density.len();
    let mut speed_sum = vec![0.0f64; n];
    let mut speed_count = vec![0usize; n];
    let mut dirs = vec![[0usize; ANGULAR_BINS]; n];
    for track in tracks {
        for (t, &c) in track.iter().enumerate() {
            let Some(idx) = maps.offset_index(c.x - center.x, c.y - center.y) else { continue };
            maps.density[idx] = maps.density[idx] + T::one();
            if let Some(&next) = track.get(t + 1) {
                let (dx, dy) = (next.x - c.x, next.y - c.y);
                speed_sum[idx] += f64::from(dx).hypot(f64::from(dy));
                speed_count[idx] += 1;
                if let Some(b) = direction_bin(dx, dy) {
                    dirs[idx][b] += 1;
                }
            }
        }
    }
    for idx in 0..n {
        if speed_count[idx] > 0 {
            maps.activeness[idx] = T::lit(speed_sum[idx] / speed_count[idx] as f64);
        }
        let total: usize = dirs[idx].iter().sum();
        if total > 0 {
            let h: f64 = dirs[idx]
                .iter()
                .filter(|&&k| k > 0)
                .map(|&k| {
                    let p = k as f64 / total as f64;
                    -p * p.ln()
                })
                .sum();
            maps.entropy[idx] = T::lit(h.max(0.0));
        }
    }
    maps
}

/// Maps of source `j` from the observed tracks of agents related to it.
pub fn build_feature_maps<T: Scalar>(scene: &Scene<T>, relations: &Relations, center: Cell, j: usize, w: usize) -> Result<FeatureMaps<T>> {
    if relations.n_agents() != scene.agents.len() {
        return Err(AlmError::Dimension("relations do not match agents".into()));
    }
    if j >= relations.n_sources() {
        return Err(AlmError::Dimension(format!("source {j} out of range")));
    }
    let tracks: Vec<&[Cell]> = scene
        .agents
        .iter()
        .enumerate()
        .filter(|(i, _)| relations.get(*i, j))
        .map(|(_, a)| a.observed())
        .collect();
    Ok(feature_maps(center, w, &tracks))
}

fn angular_bin(dx: i32, dy: i32) -> usize {
    let a = f64::from(dy).atan2(f64::from(dx));
    let k = ((a / std::f64::consts::FRAC_PI_4) + 0.5).floor() as i64;
    k.rem_euclid(ANGULAR_BINS as i64) as usize
}

fn radial_bin(r: f64, r_max: f64) -> usize {
    if r <= 1.0 {
        return 0;
    }
    let k = 1 + ((r.ln() / r_max.ln()) * (RADIAL_BINS - 1) as f64).floor() as usize;
    k.min(RADIAL_BINS - 1)
}

/// Concatenated log-polar histograms of density, activeness and entropy, each L1-normalized.
///
/// Angular bins are centered on the 8 compass directions; the center cell is spread
/// evenly over the innermost ring.
pub fn descriptor<T: Scalar>(maps: &FeatureMaps<T>) -> Vec<T> {
    let r_max = (maps.w.max(1) as f64) * std::f64::consts::SQRT_2 + 1e-9;
    let mut out = vec![T::zero(); DESCRIPTOR_LEN];
    let eighth = T::one() / T::from_usize_lossy(ANGULAR_BINS);
    for (m, values) in maps.maps().into_iter().enumerate() {
        let block = &mut out[m * BLOCK_LEN..(m + 1) * BLOCK_LEN];
        for (idx, &v) in values.iter().enumerate() {
            if v == T::zero() {
                continue;
            }
            let (dx, dy) = maps.offset_of(idx);
            if dx == 0 && dy == 0 {
                for b in block.iter_mut().take(ANGULAR_BINS) {
                    *b = *b + v * eighth;
                }
                continue;
            }
            let r = f64::from(dx).hypot(f64::from(dy));
            let k = radial_bin(r, r_max) * ANGULAR_BINS + angular_bin(dx, dy);
            block[k] = block[k] + v;
        }
        let sum: T = block.iter().copied().sum();
        if sum > T::zero() {
            for b in block.iter_mut() {
                *b = *b / sum;
            }
        }
    }
    out
}

/// The descriptor of the maps transformed by `g`, obtained by permuting angular bins.
pub fn permute_descriptor<T: Scalar>(d: &[T], g: Dihedral) -> Vec<T> {
    let mut out = vec![T::zero(); d.len()];
    for (i, &v) in d.iter().enumerate() {
        let (ring, k) = (i / ANGULAR_BINS, i % ANGULAR_BINS);
        out[ring * ANGULAR_BINS + g.angular_bin(k)] = v;
    }
    out
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(bound = "")]
pub struct Clustering<T: Scalar> {
    pub labels: Vec<usize>,
    /// Symmetry aligning each descriptor with its centroid.
    pub transforms: Vec<Dihedral>,
    pub centroids: Vec<Vec<T>>,
    pub inertia: T,
    /// Inertia after each assignment of the kept restart.
    pub history: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iterations: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { restarts: 10, max_iterations: 100 }
    }
}

struct Aligned<T> {
    variants: Vec<(Dihedral, Vec<T>)>,
    canonical: usize,
}

impl<T: Scalar> Aligned<T> {
    fn new(d: &[T]) -> Self {
        let variants: Vec<(Dihedral, Vec<T>)> = Dihedral::all().map(|g| (g, permute_descriptor(d, g))).collect();
        let mut canonical = 0;
        for (i, (_, v)) in variants.iter().enumerate().skip(1) {
            if v.partial_cmp(&variants[canonical].1) == Some(std::cmp::Ordering::Less) {
                canonical = i;
            }
        }
        Aligned { variants, canonical }
    }

    fn seed(&self) -> Vec<T> {
        self.variants[self.canonical].1.clone()
    }

    /// Closest `(centroid, symmetry, distance)`, ties to the lowest centroid and the first symmetry.
    fn nearest(&self, centroids: &[Vec<T>]) -> (usize, usize, T) {
        let mut best = (0, 0, T::infinity());
        for (c, mu) in centroids.iter().enumerate() {
            for (g, (_, v)) in self.variants.iter().enumerate() {
                let d = sq_dist(v, mu);
                if d < best.2 {
                    best = (c, g, d);
                }
            }
        }
        best
    }
}

fn kmeans_once<T: Scalar, R: Rng>(items: &[Aligned<T>], k: usize, cfg: &KMeansConfig, rng: &mut R) -> Clustering<T> {
    let n = items.len();
    let first = rng.random_range(0..n);
    let mut centroids = vec![items[first].seed()];
    while centroids.len() < k {
        let d: Vec<f64> = items.iter().map(|it| it.nearest(&centroids).2.to_f64_lossy()).collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            d.iter().position(|&x| {
                u -= x;
                u < 0.0
            })
            .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        centroids.push(items[pick].seed());
    }
    let mut assign: Vec<(usize, usize)> = Vec::new();
    let mut history = Vec::new();
    for _ in 0..cfg.max_iterations.max(1) {
        let near: Vec<(usize, usize, T)> = items.iter().map(|it| it.nearest(&centroids)).collect();
        history.push(near.iter().map(|x| x.2).sum());
        let next: Vec<(usize, usize)> = near.iter().map(|x| (x.0, x.1)).collect();
        if next == assign {
            break;
        }
        assign = next;
        for (c, mu) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<T>> =
                items.iter().zip(&assign).filter(|(_, a)| a.0 == c).map(|(it, a)| &it.variants[a.1].1).collect();
            if members.is_empty() {
                continue;
            }
            let m = T::from_usize_lossy(members.len());
            for (i, x) in mu.iter_mut().enumerate() {
                *x = members.iter().map(|v| v[i]).sum::<T>() / m;
            }
        }
    }
    let near: Vec<(usize, usize, T)> = items.iter().map(|it| it.nearest(&centroids)).collect();
    let inertia = near.iter().map(|x| x.2).sum();
    if history.last() != Some(&inertia) {
        history.push(inertia);
    }
    Clustering {
        labels: near.iter().map(|x| x.0).collect(),
        transforms: near.iter().map(|x| items[0].variants[x.1].0).collect(),
        centroids,
        inertia,
        history,
    }
}

/// K-means with k-means++ seeding where each descriptor is compared to centroids
/// under its best rotation/mirroring; the restart with the lowest inertia is kept.
pub fn cluster<T: Scalar, R: Rng>(descriptors: &[Vec<T>], k: usize, cfg: &KMeansConfig, rng: &mut R) -> Result<Clustering<T>> {
    if k == 0 || k > descriptors.len() {
        return Err(AlmError::Input(format!("k = {k} must lie in 1..={}", descriptors.len())));
    }
    let len = descriptors[0].len();
    if len % ANGULAR_BINS != 0 || descriptors.iter().any(|d| d.len() != len) {
        return Err(AlmError::Dimension("descriptors must share a length divisible by 8".into()));
    }
    let items: Vec<Aligned<T>> = descriptors.iter().map(|d| Aligned::new(d)).collect();
    let mut best: Option<Clustering<T>> = None;
    for _ in 0..cfg.restarts.max(1) {
        let c = kmeans_once(&items, k, cfg, rng);
        if best.as_ref().is_none_or(|b| c.inertia < b.inertia) {
            best = Some(c);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Fraction of items whose cluster's majority truth label equals their own.
pub fn purity(labels: &[usize], truth: &[usize]) -> f64 {
    if labels.is_empty() {
        return 1.0;
    }
    let k = labels.iter().max().unwrap() + 1;
    let t = truth.iter().max().copied().unwrap_or(0) + 1;
    let mut counts = vec![vec![0usize; t]; k];
    for (&l, &g) in labels.iter().zip(truth) {
        counts[l][g] += 1;
    }
    counts.iter().map(|row| row.iter().max().copied().unwrap_or(0)).sum::<usize>() as f64 / labels.len() as f64
}

/// Element-wise mean of the maps of each cluster's members.
pub fn mean_maps<T: Scalar>(maps: &[FeatureMaps<T>], labels: &[usize], k: usize) -> Vec<FeatureMaps<T>> {
    let w = maps.first().map_or(DEFAULT_WINDOW, |m| m.w);
    (0..k)
        .map(|c| {
            let mut out = FeatureMaps::zeros(Cell::default(), w);
            let members: Vec<&FeatureMaps<T>> = maps.iter().zip(labels).filter(|(_, &l)| l == c).map(|(m, _)| m).collect();
            if members.is_empty() {
                return out;
            }
            let n = T::from_usize_lossy(members.len());
            for m in members {
                for i in 0..out.density.len() {
                    out.density[i] = out.density[i] + m.density[i] / n;
                    out.activeness[i] = out.activeness[i] + m.activeness[i] / n;
                    out.entropy[i] = out.entropy[i] + m.entropy[i] / n;
                }
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn no_tracks_give_zero_maps_and_descriptor() {
        let m: FeatureMaps<f64> = feature_maps(Cell::new(5, 5), 3, &[]);
        assert!(m.density.iter().chain(&m.activeness).chain(&m.entropy).all(|&v| v == 0.0));
        let d = descriptor(&m);
        assert_eq!(d.len(), DESCRIPTOR_LEN);
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stationary_frames_concentrate_at_one_cell() {
        let c = Cell::new(5, 5);
        let track = vec![Cell::new(7, 5); 6];
        let m: FeatureMaps<f64> = feature_maps(c, 3, &[&track]);
        let idx = m.offset_index(2, 0).unwrap();
        assert_eq!(m.density[idx], 6.0);
        assert_eq!(m.density.iter().sum::<f64>(), 6.0);
        assert_eq!(m.activeness[idx], 0.0);
        assert_eq!(m.entropy[idx], 0.0);
        let d = descriptor(&m);
        let nz: Vec<f64> = d[..BLOCK_LEN].iter().copied().filter(|&v| v != 0.0).collect();
        assert_eq!(nz, vec![1.0]);
    }

    #[test]
    fn circling_in_all_directions_has_maximal_entropy() {
        let c = Cell::new(5, 5);
        let mut track = Vec::new();
        for &(dx, dy) in &crate::scene::NEIGHBOR_OFFSETS {
            track.push(c);
            track.push(c.offset(dx, dy));
        }
        track.push(c);
        let m: FeatureMaps<f64> = feature_maps(c, 3, &[&track]);
        let idx = m.offset_index(0, 0).unwrap();
        assert!((m.entropy[idx] - 8f64.ln()).abs() < 1e-12);
        assert!(m.entropy.iter().all(|&h| (0.0..=8f64.ln() + 1e-12).contains(&h)));
    }

    #[test]
    fn quarter_turn_shifts_angular_bins_by_two() {
        let mut m: FeatureMaps<f64> = FeatureMaps::zeros(Cell::new(0, 0), 4);
        let idx = m.offset_index(3, 1).unwrap();
        m.density[idx] = 2.0;
        let g = Dihedral { rotation: 1, mirror: false };
        let d = descriptor(&m);
        let k = d.iter().position(|&v| v == 1.0).unwrap();
        let dr = descriptor(&m.transformed(g));
        let kr = dr.iter().position(|&v| v == 1.0).unwrap();
        assert_eq!(kr / ANGULAR_BINS, k / ANGULAR_BINS);
        assert_eq!(kr % ANGULAR_BINS, (k % ANGULAR_BINS + 2) % ANGULAR_BINS);
    }

    fn random_maps(seed: u64, w: usize) -> FeatureMaps<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = FeatureMaps::zeros(Cell::new(0, 0), w);
        for i in 0..m.density.len() {
            if rng.random_bool(0.3) {
                m.density[i] = rng.random_range(0.0..5.0);
                m.activeness[i] = rng.random_range(0.0..1.5);
                m.entropy[i] = rng.random_range(0.0..2.0);
            }
        }
        m
    }

    proptest! {
        #[test]
        fn dihedral_maps_permute_descriptors(seed in 0u64..10_000, rot in 0u8..4, mirror: bool) {
            let g = Dihedral { rotation: rot, mirror };
            let m = random_maps(seed, 5);
            let d = descriptor(&m);
            let dt = descriptor(&m.transformed(g));
            prop_assert!(close(&dt, &permute_descriptor(&d, g)));
            for block in dt.chunks(BLOCK_LEN) {
                let s: f64 = block.iter().sum();
                prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn labels_ignore_symmetries_of_inputs(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds: Vec<Vec<f64>> = (0..9).map(|i| descriptor(&random_maps(seed * 31 + i % 3, 4))).map(|mut d| {
                for v in d.iter_mut() { *v += rng.random_range(0.0..1e-3); }
                d
            }).collect();
            let gs: Vec<Dihedral> = (0..9).map(|_| Dihedral { rotation: rng.random_range(0..4), mirror: rng.random_bool(0.5) }).collect();
            let moved: Vec<Vec<f64>> = ds.iter().zip(&gs).map(|(d, &g)| permute_descriptor(d, g)).collect();
            let a = cluster(&ds, 3, &KMeansConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = cluster(&moved, 3, &KMeansConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a.labels, b.labels);
            prop_assert!((a.inertia - b.inertia).abs() < 1e-9);
        }

        #[test]
        fn inertia_never_increases(seed in 0u64..1000, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ds: Vec<Vec<f64>> = (0..12).map(|i| descriptor(&random_maps(seed * 13 + i, 4))).collect();
            let c = cluster(&ds, k, &KMeansConfig::default(), &mut rng).unwrap();
            prop_assert!(c.history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
            prop_assert_eq!(*c.history.last().unwrap(), c.inertia);
        }
    }

    #[test]
    fn one_cluster_per_descriptor_has_zero_inertia() {
        let ds: Vec<Vec<f64>> = (0..5).map(|i| descriptor(&random_maps(i, 3))).collect();
        let c = cluster(&ds, 5, &KMeansConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(c.inertia.abs() < 1e-24);
        let mut l = c.labels.clone();
        l.sort();
        l.dedup();
        assert_eq!(l.len(), 5);
        assert!(cluster(&ds, 6, &KMeansConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn single_cluster_centroid_is_the_mean() {
        let d = descriptor(&random_maps(4, 3));
        let ds = vec![d.clone(), d.clone(), d.clone()];
        let c = cluster(&ds, 1, &KMeansConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let g = c.transforms[0];
        assert!(close(&c.centroids[0], &permute_descriptor(&d, g)));
        assert_eq!(c.labels, vec![0, 0, 0]);
        assert!(c.inertia.abs() < 1e-24);
    }

    #[test]
    fn archetypes_separate() {
        for seed in 0..3 {
            let suite = crate::synth::archetype_suite(30, DEFAULT_WINDOW, seed);
            let ds: Vec<Vec<f64>> = suite
                .iter()
                .map(|s| {
                    let tracks: Vec<&[Cell]> = s.tracks.iter().map(|t| t.as_slice()).collect();
                    descriptor(&feature_maps::<f64>(s.center, DEFAULT_WINDOW, &tracks))
                })
                .collect();
            let truth: Vec<usize> = suite.iter().map(|s| s.kind.index()).collect();
            let c = cluster(&ds, 3, &KMeansConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(purity(&c.labels, &truth) >= 0.9, "seed {seed}: {}", purity(&c.labels, &truth));
        }
    }

    #[test]
    fn purity_counts_majorities() {
        assert_eq!(purity(&[0, 0, 1, 1], &[2, 2, 0, 1]), 0.75);
        assert_eq!(purity(&[0, 1, 2], &[0, 1, 2]), 1.0);
    }
}

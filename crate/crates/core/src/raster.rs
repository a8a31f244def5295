//! Plain portable graymap/pixmap rendering of scenes, fields, tracks and feature maps.

use std::fmt::Write as _;

use crate::baselines::raster_line;
use crate::cluster::FeatureMaps;
use crate::error::{AlmError, Result};
use crate::field::VectorField;
use crate::scalar::Scalar;
use crate::scene::{Cell, ConstraintMap};

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const GRAY: Rgb = [128, 128, 128];
pub const SOURCE: Rgb = [220, 30, 30];

/// Distinct colors for tracks, cycled by index.
pub const PALETTE: [Rgb; 6] = [[31, 119, 180], [44, 160, 44], [255, 127, 14], [148, 103, 189], [23, 190, 207], [188, 189, 34]];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        Raster { width, height, pixels: vec![color; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn put(&mut self, x: i64, y: i64, color: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = color;
        }
    }

    /// Fills the `scale`-by-`scale` block of lattice cell `c`.
    pub fn fill_cell(&mut self, c: Cell, scale: usize, color: Rgb) {
        let s = scale as i64;
        for dy in 0..s {
            for dx in 0..s {
                self.put(i64::from(c.x) * s + dx, i64::from(c.y) * s + dy, color);
            }
        }
    }

    pub fn line(&mut self, a: (i32, i32), b: (i32, i32), color: Rgb) {
        for p in raster_line(Cell::new(a.0, a.1), Cell::new(b.0, b.1)) {
            self.put(i64::from(p.x), i64::from(p.y), color);
        }
    }

    /// Plain-text pixmap (P3).
    pub fn to_ppm(&self) -> String {
        let mut out = format!("P3\n{} {}\n255\n", self.width, self.height);
        for row in self.pixels.chunks(self.width.max(1)) {
            let line: Vec<String> = row.iter().map(|p| format!("{} {} {}", p[0], p[1], p[2])).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    /// Plain-text graymap (P2) of the luminance.
    pub fn to_pgm(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.width, self.height);
        for row in self.pixels.chunks(self.width.max(1)) {
            let line: Vec<String> = row.iter().map(|&p| luminance(p).to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    /// Parses a plain P2 or P3 document.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let magic = tokens.next().ok_or_else(|| AlmError::Format("empty raster".into()))?;
        let channels = match magic {
            "P2" => 1,
            "P3" => 3,
            other => return Err(AlmError::Format(format!("unsupported raster magic {other}"))),
        };
        let mut num = || -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| AlmError::Format("truncated raster".into()))?
                .parse()
                .map_err(|e| AlmError::Format(format!("raster value: {e}")))
        };
        let (width, height, max) = (num()?, num()?, num()?);
        if max != 255 {
            return Err(AlmError::Format(format!("unsupported maxval {max}")));
        }
        let mut pixels = Vec::with_capacity(width * height);
        for _ in 0..width * height {
            let mut p = [0u8; 3];
            for v in p.iter_mut().take(channels) {
                *v = u8::try_from(num()?).map_err(|e| AlmError::Format(e.to_string()))?;
            }
            if channels == 1 {
                p = [p[0]; 3];
            }
            pixels.push(p);
        }
        Ok(Raster { width, height, pixels })
    }
}

pub fn luminance(p: Rgb) -> u8 {
    ((299 * u32::from(p[0]) + 587 * u32::from(p[1]) + 114 * u32::from(p[2]) + 500) / 1000) as u8
}

/// Gray level for `v / max`, dark for large values.
fn heat(v: f64, max: f64) -> Rgb {
    let g = if max > 0.0 { 255.0 * (1.0 - (v / max).clamp(0.0, 1.0)) } else { 255.0 };
    let g = g.round() as u8;
    [g, g, g]
}

fn check_scale(scale: usize) -> Result<()> {
    if scale == 0 {
        return Err(AlmError::Input("cell size must be positive".into()));
    }
    Ok(())
}

/// Walkable cells white, obstacles black.
pub fn obstacle_mask(cmap: &ConstraintMap, scale: usize) -> Result<Raster> {
    check_scale(scale)?;
    let lat = cmap.lattice();
    let mut r = Raster::filled(lat.width * scale, lat.height * scale, WHITE);
    for c in cmap.obstacle_cells() {
        r.fill_cell(c, scale, BLACK);
    }
    Ok(r)
}

/// Field magnitude as a heatmap, obstacles drawn in mid gray.
pub fn field_heatmap<T: Scalar>(field: &VectorField<T>, cmap: &ConstraintMap, scale: usize) -> Result<Raster> {
    check_scale(scale)?;
    let lat = cmap.lattice();
    if field.lattice() != lat {
        return Err(AlmError::Dimension("field and constraint map lattices differ".into()));
    }
    let max = lat.cells().map(|c| field.magnitude(c).to_f64_lossy()).fold(0.0, f64::max);
    let mut r = Raster::filled(lat.width * scale, lat.height * scale, WHITE);
    for c in lat.cells() {
        let color = if cmap.is_walkable(c) { heat(field.magnitude(c).to_f64_lossy(), max) } else { GRAY };
        r.fill_cell(c, scale, color);
    }
    Ok(r)
}

/// Obstacle mask with one segment per walkable cell along the field direction.
pub fn field_arrows<T: Scalar>(field: &VectorField<T>, cmap: &ConstraintMap, scale: usize) -> Result<Raster> {
    let mut r = obstacle_mask(cmap, scale)?;
    if field.lattice() != cmap.lattice() {
        return Err(AlmError::Dimension("field and constraint map lattices differ".into()));
    }
    let half = (scale as f64 - 1.0) / 2.0;
    for c in cmap.walkable_cells() {
        let [fx, fy] = field.at(c);
        let (fx, fy) = (fx.to_f64_lossy(), fy.to_f64_lossy());
        let m = fx.hypot(fy);
        if m <= 1e-12 || scale < 3 {
            continue;
        }
        let cx = c.x as f64 * scale as f64 + half;
        let cy = c.y as f64 * scale as f64 + half;
        let tip = ((cx + half * fx / m).round() as i32, (cy + half * fy / m).round() as i32);
        r.line((cx.round() as i32, cy.round() as i32), tip, PALETTE[0]);
        r.put(i64::from(tip.0), i64::from(tip.1), SOURCE);
    }
    Ok(r)
}

/// Tracks in palette colors and sources in red over the obstacle mask.
pub fn trajectory_overlay(cmap: &ConstraintMap, sources: &[Cell], tracks: &[&[Cell]], scale: usize) -> Result<Raster> {
    let mut r = obstacle_mask(cmap, scale)?;
    let s = scale as i32;
    let center = |c: Cell| (c.x * s + s / 2, c.y * s + s / 2);
    for (i, t) in tracks.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for w in t.windows(2) {
            r.line(center(w[0]), center(w[1]), color);
        }
        if let [only] = t {
            let (x, y) = center(*only);
            r.put(i64::from(x), i64::from(y), color);
        }
    }
    for &mu in sources {
        r.fill_cell(mu, scale, SOURCE);
    }
    Ok(r)
}

/// Per-cell visit frequency of `tracks` as a heatmap over the obstacle mask.
pub fn likelihood_overlay(cmap: &ConstraintMap, tracks: &[&[Cell]], scale: usize) -> Result<Raster> {
    let mut r = obstacle_mask(cmap, scale)?;
    let lat = cmap.lattice();
    let mut counts = vec![0usize; lat.len()];
    for t in tracks {
        for &c in t.iter().filter(|&&c| lat.contains(c)) {
            counts[lat.index(c)] += 1;
        }
    }
    let max = counts.iter().copied().max().unwrap_or(0) as f64;
    for (i, &n) in counts.iter().enumerate() {
        if n > 0 {
            let g = heat(n as f64, max)[0];
            r.fill_cell(lat.cell(i), scale, [255, g, g]);
        }
    }
    Ok(r)
}

/// Density, activeness and entropy side by side, each scaled to its own maximum.
pub fn feature_maps_raster<T: Scalar>(maps: &FeatureMaps<T>, scale: usize) -> Result<Raster> {
    check_scale(scale)?;
    let side = maps.side();
    let gap = 1;
    let mut r = Raster::filled((3 * side + 2 * gap) * scale, side * scale, SOURCE);
    for (m, values) in maps.maps().into_iter().enumerate() {
        let max = values.iter().map(|v| v.to_f64_lossy()).fold(0.0, f64::max);
        let x0 = (m * (side + gap)) as i32;
        for (i, v) in values.iter().enumerate() {
            let c = Cell::new(x0 + (i % side) as i32, (i / side) as i32);
            r.fill_cell(c, scale, heat(v.to_f64_lossy(), max));
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{lm_sum_field, FieldParams};
    use crate::scene::Lattice;

    fn cmap() -> ConstraintMap {
        let mut m = ConstraintMap::all_walkable(Lattice::new(6, 4).unwrap());
        m.set(Cell::new(2, 1), -1);
        m
    }

    #[test]
    fn dimensions_scale_with_cell_size() {
        let m = cmap();
        for scale in [1, 3, 8] {
            let r = obstacle_mask(&m, scale).unwrap();
            assert_eq!((r.width, r.height), (6 * scale, 4 * scale));
            let f = lm_sum_field::<f64>(&m, &[Cell::new(5, 3)], &FieldParams::default());
            let h = field_heatmap(&f, &m, scale).unwrap();
            assert_eq!((h.width, h.height), (6 * scale, 4 * scale));
        }
        assert!(obstacle_mask(&m, 0).is_err());
    }

    #[test]
    fn obstacles_are_black() {
        let r = obstacle_mask(&cmap(), 2).unwrap();
        assert_eq!(r.get(4, 2), BLACK);
        assert_eq!(r.get(5, 3), BLACK);
        assert_eq!(r.get(0, 0), WHITE);
        assert_eq!(r.pixels.iter().filter(|&&p| p == BLACK).count(), 4);
    }

    #[test]
    fn plain_formats_round_trip() {
        let m = cmap();
        let t = [Cell::new(0, 0), Cell::new(1, 1), Cell::new(2, 2)];
        let r = trajectory_overlay(&m, &[Cell::new(5, 3)], &[&t], 3).unwrap();
        let ppm = r.to_ppm();
        assert!(ppm.starts_with("P3\n18 12\n255\n"));
        assert_eq!(Raster::parse(&ppm).unwrap(), r);
        let gray = Raster::parse(&r.to_pgm()).unwrap();
        assert_eq!((gray.width, gray.height), (18, 12));
        assert!(gray.pixels.iter().all(|p| p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn visits_darken_cells() {
        let m = cmap();
        let t = [Cell::new(0, 0), Cell::new(0, 0), Cell::new(1, 0)];
        let r = likelihood_overlay(&m, &[&t], 1).unwrap();
        assert_eq!(r.get(0, 0), [255, 0, 0]);
        assert!(r.get(1, 0)[1] > 0 && r.get(1, 0)[1] < 255);
        assert_eq!(r.get(3, 3), WHITE);
    }

    #[test]
    fn feature_raster_layout() {
        let maps: FeatureMaps<f64> = FeatureMaps::zeros(Cell::new(0, 0), 2);
        let r = feature_maps_raster(&maps, 2).unwrap();
        assert_eq!((r.width, r.height), ((3 * 5 + 2) * 2, 10));
    }
}

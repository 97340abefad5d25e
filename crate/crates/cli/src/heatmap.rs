//! Allocation heatmaps of single-bidder, two-item mechanisms.
//!
//! The mechanism is evaluated on a regular `(v1, v2)` mesh spanning the value
//! support. For the unit-uniform setting the optimal mechanism is known: it
//! posts price 2/3 for each item and `(4 - √2)/3` for the bundle, which
//! splits the square into four regions whose boundaries are exported as
//! overlay segments.

use std::fmt::Write as _;
use std::path::Path;

use diffcore::{Real, Tensor};
use mechnet::architectures::Mechanism;
use mechnet::data::SettingSpec;

use crate::CliError;

/// Allocation probabilities on a `resolution x resolution` mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub resolution: usize,
    /// Mesh coordinates of the first item's value.
    pub v1: Vec<f64>,
    /// Mesh coordinates of the second item's value.
    pub v2: Vec<f64>,
    /// Per item, `z[b * resolution + a]` at `(v1[a], v2[b])`.
    pub items: Vec<Vec<f64>>,
}

/// A straight boundary piece in value space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Segment {
    fn distance(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (self.x1 - self.x0, self.y1 - self.y0);
        let len2 = dx * dx + dy * dy;
        let t = if len2 == 0.0 { 0.0 } else { (((x - self.x0) * dx + (y - self.y0) * dy) / len2).clamp(0.0, 1.0) };
        let (px, py) = (self.x0 + t * dx, self.y0 + t * dy);
        ((x - px).powi(2) + (y - py).powi(2)).sqrt()
    }
}

/// Region boundaries of the optimal mechanism for one bidder with two
/// `U[0, 1]` items.
pub fn manelli_vincent_boundary() -> Vec<Segment> {
    let p = 2.0 / 3.0;
    let c = (2.0 - 2f64.sqrt()) / 3.0;
    vec![
        // nothing | first item only
        Segment { x0: p, y0: 0.0, x1: p, y1: c },
        // first item only | bundle
        Segment { x0: p, y0: c, x1: 1.0, y1: c },
        // nothing | second item only
        Segment { x0: 0.0, y0: p, x1: c, y1: p },
        // second item only | bundle
        Segment { x0: c, y0: p, x1: c, y1: 1.0 },
        // nothing | bundle, along v1 + v2 = (4 - √2)/3
        Segment { x0: c, y0: p, x1: p, y1: c },
    ]
}

/// Known optimal-region boundaries for `setting`, if any.
pub fn known_boundary(setting: &SettingSpec) -> Option<Vec<Segment>> {
    (setting.n == 1 && setting.m == 2 && setting.is_unit_uniform()).then(manelli_vincent_boundary)
}

/// Evaluates the first bidder's allocation over the support of `setting`.
pub fn allocation_heatmap<T: Real, M: Mechanism<T> + ?Sized>(
    mech: &M,
    setting: &SettingSpec,
    resolution: usize,
) -> Result<Heatmap, CliError> {
    if setting.n != 1 || setting.m != 2 {
        return Err(CliError::Unsupported(format!(
            "heatmaps need one bidder and two items, got {}x{}",
            setting.n, setting.m
        )));
    }
    if resolution < 2 {
        return Err(CliError::Usage("heatmap resolution must be at least 2".into()));
    }
    mech.check_shape(1, 2)?;
    let axis = |j: usize| -> Vec<f64> {
        let (lo, hi) = (setting.lo[j], setting.hi[j]);
        (0..resolution).map(|a| lo + (hi - lo) * a as f64 / (resolution - 1) as f64).collect()
    };
    let (v1, v2) = (axis(0), axis(1));
    let points = resolution * resolution;
    let mut items = vec![Vec::with_capacity(points); 2];
    const CHUNK: usize = 4096;
    for start in (0..points).step_by(CHUNK) {
        let len = CHUNK.min(points - start);
        let profiles = Tensor::from_fn([len, 1, 2], |f| {
            let k = start + f / 2;
            T::c(if f % 2 == 0 { v1[k % resolution] } else { v2[k / resolution] })
        });
        let out = mech.outcome(&profiles)?;
        for l in 0..len {
            for (j, item) in items.iter_mut().enumerate() {
                item.push(out.allocation.at(&[l, 0, j]).f64());
            }
        }
    }
    Ok(Heatmap { resolution, v1, v2, items })
}

impl Heatmap {
    /// Mean over items and mesh points of `min(z, 1 - z)`, the distance of the
    /// allocation from a deterministic one, counting only points farther than
    /// `band` from every boundary segment.
    pub fn interior_deviation(&self, boundary: &[Segment], band: f64) -> f64 {
        let r = self.resolution;
        let (mut total, mut count) = (0.0, 0usize);
        for b in 0..r {
            for a in 0..r {
                let (x, y) = (self.v1[a], self.v2[b]);
                if boundary.iter().any(|s| s.distance(x, y) <= band) {
                    continue;
                }
                for item in &self.items {
                    let z = item[b * r + a];
                    total += z.min(1.0 - z).abs();
                    count += 1;
                }
            }
        }
        if count == 0 {
            f64::NAN
        } else {
            total / count as f64
        }
    }

    /// One long-form CSV per item with columns `v1,v2,allocation`.
    pub fn write_csv(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>, CliError> {
        let r = self.resolution;
        let mut paths = Vec::new();
        for (j, item) in self.items.iter().enumerate() {
            let path = dir.join(format!("allocation_item{}.csv", j + 1));
            let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::csv(&path, e))?;
            w.write_record(["v1", "v2", "allocation"]).map_err(|e| CliError::csv(&path, e))?;
            for b in 0..r {
                for a in 0..r {
                    let row = [self.v1[a].to_string(), self.v2[b].to_string(), item[b * r + a].to_string()];
                    w.write_record(&row).map_err(|e| CliError::csv(&path, e))?;
                }
            }
            w.flush().map_err(|e| CliError::io(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Greyscale rendering of each item's allocation with the boundary drawn
    /// on top; black is probability one.
    pub fn write_svg(&self, dir: &Path, boundary: &[Segment]) -> Result<Vec<std::path::PathBuf>, CliError> {
        const SIZE: f64 = 400.0;
        let r = self.resolution;
        let (x_lo, x_hi) = (self.v1[0], self.v1[r - 1]);
        let (y_lo, y_hi) = (self.v2[0], self.v2[r - 1]);
        let sx = |x: f64| (x - x_lo) / (x_hi - x_lo) * SIZE;
        let sy = |y: f64| SIZE - (y - y_lo) / (y_hi - y_lo) * SIZE;
        let cell = SIZE / r as f64;
        let mut paths = Vec::new();
        for (j, item) in self.items.iter().enumerate() {
            let mut svg = String::new();
            let _ = writeln!(
                svg,
                r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
            );
            for b in 0..r {
                for a in 0..r {
                    let shade = (255.0 * (1.0 - item[b * r + a].clamp(0.0, 1.0))).round() as u8;
                    let _ = writeln!(
                        svg,
                        r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="rgb({shade},{shade},{shade})"/>"#,
                        a as f64 * cell,
                        SIZE - (b + 1) as f64 * cell,
                        cell + 0.1,
                        cell + 0.1
                    );
                }
            }
            for s in boundary {
                let _ = writeln!(
                    svg,
                    r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="red" stroke-width="2"/>"#,
                    sx(s.x0),
                    sy(s.y0),
                    sx(s.x1),
                    sy(s.y1)
                );
            }
            svg.push_str("</svg>\n");
            let path = dir.join(format!("allocation_item{}.svg", j + 1));
            std::fs::write(&path, svg).map_err(|e| CliError::io(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Boundary segments as CSV with columns `x0,y0,x1,y1`.
pub fn write_overlay(path: &Path, boundary: &[Segment]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    w.write_record(["x0", "y0", "x1", "y1"]).map_err(|e| CliError::csv(path, e))?;
    for s in boundary {
        let row = [s.x0.to_string(), s.y0.to_string(), s.x1.to_string(), s.y1.to_string()];
        w.write_record(&row).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

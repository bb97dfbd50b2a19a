use std::f64::consts::PI;

use rand::Rng;

use crate::pointcloud::Point;

/// Primitive families objects are built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Box,
    Cylinder,
    Sphere,
}

/// One semantic class: name, shape family, size range (meters, per axis
/// `[x/y extent, height]`) and the color range its instances draw from.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStyle {
    pub name: &'static str,
    pub shape: Shape,
    pub size: [(f64, f64); 2],
    pub color_lo: [f64; 3],
    pub color_hi: [f64; 3],
}

pub const FLOOR: u8 = 0;
pub const WALL: u8 = 1;

/// Eight classes with color ranges that stay disjoint even after jitter.
pub fn default_palette() -> Vec<ClassStyle> {
    let style = |name, shape, size, lo: [f64; 3]| ClassStyle {
        name,
        shape,
        size,
        color_lo: lo,
        color_hi: lo.map(|c| c + 0.12),
    };
    vec![
        style("floor", Shape::Box, [(0.0, 0.0), (0.0, 0.0)], [0.45, 0.30, 0.10]),
        style("wall", Shape::Box, [(0.0, 0.0), (0.0, 0.0)], [0.80, 0.80, 0.80]),
        style("table", Shape::Box, [(0.8, 1.6), (0.7, 0.8)], [0.80, 0.45, 0.05]),
        style("chair", Shape::Box, [(0.4, 0.6), (0.8, 1.0)], [0.05, 0.40, 0.10]),
        style("cabinet", Shape::Box, [(0.5, 1.0), (1.2, 2.0)], [0.10, 0.10, 0.50]),
        style("lamp", Shape::Cylinder, [(0.15, 0.3), (1.2, 1.8)], [0.85, 0.85, 0.05]),
        style("sofa", Shape::Box, [(1.0, 2.0), (0.6, 0.9)], [0.50, 0.05, 0.45]),
        style("clutter", Shape::Sphere, [(0.3, 0.6), (0.3, 0.6)], [0.05, 0.65, 0.70]),
    ]
}

/// A colored, labeled surface sample of one room before viewpoint cropping.
pub struct RoomSurface {
    pub points: Vec<Point>,
    pub colors: Vec<[f64; 3]>,
    pub labels: Vec<u8>,
}

impl RoomSurface {
    fn new() -> Self {
        Self { points: Vec::new(), colors: Vec::new(), labels: Vec::new() }
    }

    fn push(&mut self, p: Point, color: [f64; 3], label: u8) {
        self.points.push(p);
        self.colors.push(color);
        self.labels.push(label);
    }
}

fn count_for(area: f64, spacing: f64, rng: &mut impl Rng) -> usize {
    let expected = area / (spacing * spacing);
    let base = expected.floor();
    base as usize + usize::from(rng.random::<f64>() < expected - base)
}

fn draw_color(style: &ClassStyle, rng: &mut impl Rng) -> [f64; 3] {
    std::array::from_fn(|i| rng.random_range(style.color_lo[i]..=style.color_hi[i]))
}

/// Uniform samples on an axis-aligned rectangle spanned by `origin + s·u + t·v`.
#[allow(clippy::too_many_arguments)]
fn rect(out: &mut RoomSurface, origin: Point, u: Point, v: Point, color: [f64; 3], label: u8, spacing: f64, rng: &mut impl Rng) {
    let len = |a: Point| (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let n = count_for(len(u) * len(v), spacing, rng);
    for _ in 0..n {
        let (s, t) = (rng.random::<f64>(), rng.random::<f64>());
        out.push(std::array::from_fn(|i| origin[i] + s * u[i] + t * v[i]), color, label);
    }
}

/// Sample the floor, four walls and `objects` primitives of a room spanning
/// `[0, extent.0] × [0, extent.1]`.
pub fn sample_room(
    extent: (f64, f64),
    height: f64,
    objects: usize,
    palette: &[ClassStyle],
    spacing: f64,
    rng: &mut impl Rng,
) -> RoomSurface {
    let (ex, ey) = extent;
    let mut out = RoomSurface::new();
    let floor = draw_color(&palette[FLOOR as usize], rng);
    rect(&mut out, [0.0; 3], [ex, 0.0, 0.0], [0.0, ey, 0.0], floor, FLOOR, spacing, rng);
    let wall = draw_color(&palette[WALL as usize], rng);
    let z = [0.0, 0.0, height];
    rect(&mut out, [0.0; 3], [ex, 0.0, 0.0], z, wall, WALL, spacing, rng);
    rect(&mut out, [0.0, ey, 0.0], [ex, 0.0, 0.0], z, wall, WALL, spacing, rng);
    rect(&mut out, [0.0; 3], [0.0, ey, 0.0], z, wall, WALL, spacing, rng);
    rect(&mut out, [ex, 0.0, 0.0], [0.0, ey, 0.0], z, wall, WALL, spacing, rng);
    let object_classes = palette.len() as u8 - 2;
    for _ in 0..objects {
        let class = 2 + rng.random_range(0..object_classes);
        let style = &palette[class as usize];
        let color = draw_color(style, rng);
        let w = rng.random_range(style.size[0].0..=style.size[0].1);
        let d = rng.random_range(style.size[0].0..=style.size[0].1);
        let h = rng.random_range(style.size[1].0..=style.size[1].1);
        let margin = w.max(d) / 2.0 + 0.1;
        let cx = rng.random_range(margin..(ex - margin).max(margin + 1e-3));
        let cy = rng.random_range(margin..(ey - margin).max(margin + 1e-3));
        match style.shape {
            Shape::Box => {
                let o = [cx - w / 2.0, cy - d / 2.0, 0.0];
                let (u, v, up) = ([w, 0.0, 0.0], [0.0, d, 0.0], [0.0, 0.0, h]);
                rect(&mut out, [o[0], o[1], h], u, v, color, class, spacing, rng);
                rect(&mut out, o, u, up, color, class, spacing, rng);
                rect(&mut out, [o[0], o[1] + d, 0.0], u, up, color, class, spacing, rng);
                rect(&mut out, o, v, up, color, class, spacing, rng);
                rect(&mut out, [o[0] + w, o[1], 0.0], v, up, color, class, spacing, rng);
            }
            Shape::Cylinder => {
                let r = w / 2.0;
                let n = count_for(2.0 * PI * r * h + PI * r * r, spacing, rng);
                for _ in 0..n {
                    let a = rng.random_range(0.0..2.0 * PI);
                    if rng.random::<f64>() * (2.0 * h + r) < r {
                        let rr = r * rng.random::<f64>().sqrt();
                        out.push([cx + rr * a.cos(), cy + rr * a.sin(), h], color, class);
                    } else {
                        out.push([cx + r * a.cos(), cy + r * a.sin(), rng.random_range(0.0..h)], color, class);
                    }
                }
            }
            Shape::Sphere => {
                let r = h.min(w) / 2.0;
                let n = count_for(4.0 * PI * r * r, spacing, rng);
                for _ in 0..n {
                    let zc = rng.random_range(-1.0f64..1.0);
                    let a = rng.random_range(0.0..2.0 * PI);
                    let s = (1.0 - zc * zc).sqrt();
                    out.push([cx + r * s * a.cos(), cy + r * s * a.sin(), r + r * zc], color, class);
                }
            }
        }
    }
    out
}

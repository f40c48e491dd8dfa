use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{class, SceneError, IGNORE, NUM_CLASSES};
use crate::rng::{stream, Stream};

/// Inclusive object-count range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl CountRange {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn draw(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub buildings: CountRange,
    pub vegetation: CountRange,
    pub fences: CountRange,
    pub cars: CountRange,
    pub persons: CountRange,
    pub poles: CountRange,
    pub signs: CountRange,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 96,
            buildings: CountRange::new(2, 5),
            vegetation: CountRange::new(1, 4),
            fences: CountRange::new(0, 2),
            cars: CountRange::new(1, 4),
            persons: CountRange::new(0, 3),
            poles: CountRange::new(1, 3),
            signs: CountRange::new(0, 2),
        }
    }
}

impl SceneConfig {
    pub fn with_size(width: usize, height: usize) -> Self {
        Self { width, height, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.width == 0 || self.height == 0 {
            return Err(SceneError::Config(format!("zero resolution {}x{}", self.width, self.height)));
        }
        for (name, r) in [
            ("buildings", self.buildings),
            ("vegetation", self.vegetation),
            ("fences", self.fences),
            ("cars", self.cars),
            ("persons", self.persons),
            ("poles", self.poles),
            ("signs", self.signs),
        ] {
            if r.min > r.max {
                return Err(SceneError::Config(format!("{name} range {}..={} is empty", r.min, r.max)));
            }
        }
        Ok(())
    }
}

/// Geometric primitive in pixel coordinates; a pixel `(x, y)` is sampled at its
/// centre `(x + 0.5, y + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    /// Horizontal top and bottom edges, each given as `(left, right)`.
    Trapezoid { y_top: f64, y_bottom: f64, top: (f64, f64), bottom: (f64, f64) },
    Disc { cx: f64, cy: f64, r: f64 },
    Polyline { points: Vec<(f64, f64)>, half_width: f64 },
}

impl Primitive {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Primitive::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
            Primitive::Trapezoid { y_top, y_bottom, top, bottom } => {
                if py < y_top || py >= y_bottom {
                    return false;
                }
                let t = (py - y_top) / (y_bottom - y_top);
                let left = top.0 + t * (bottom.0 - top.0);
                let right = top.1 + t * (bottom.1 - top.1);
                px >= left && px < right
            }
            Primitive::Disc { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Primitive::Polyline { ref points, half_width } => points
                .windows(2)
                .any(|s| segment_distance_sq((px, py), s[0], s[1]) <= half_width * half_width),
        }
    }

    /// Conservative pixel bounding box `(x0, y0, x1, y1)`, half-open and unclipped.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Primitive::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            Primitive::Trapezoid { y_top, y_bottom, top, bottom } => {
                (top.0.min(bottom.0), y_top, top.1.max(bottom.1), y_bottom)
            }
            Primitive::Disc { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
            Primitive::Polyline { ref points, half_width } => {
                let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
                for &(x, y) in points {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
                (x0 - half_width, y0 - half_width, x1 + half_width, y1 + half_width)
            }
        }
    }
}

fn segment_distance_sq(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    (p.0 - cx).powi(2) + (p.1 - cy).powi(2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: u8,
    pub shape: Primitive,
    /// Distance from the camera in meters, constant over the object.
    pub depth: f64,
    pub albedo: [f64; 3],
    /// Whether the object stands on the ground and casts a shadow.
    pub casts_shadow: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub layout_index: u64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Back-to-front: non-increasing depth.
    pub objects: Vec<SceneObject>,
}

impl Layout {
    pub fn count(&self, class_id: u8) -> usize {
        self.objects.iter().filter(|o| o.class_id == class_id).count()
    }

    /// Index of the front-most object covering each pixel, row-major.
    pub(crate) fn coverage(&self) -> Vec<Option<u32>> {
        let (w, h) = (self.width, self.height);
        let mut cover = vec![None; w * h];
        for (i, obj) in self.objects.iter().enumerate() {
            let (x0, y0, x1, y1) = obj.shape.bounds();
            let (xa, xb) = (clip(x0.floor(), w), clip(x1.ceil(), w));
            let (ya, yb) = (clip(y0.floor(), h), clip(y1.ceil(), h));
            for y in ya..yb {
                for x in xa..xb {
                    if obj.shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                        cover[y * w + x] = Some(i as u32);
                    }
                }
            }
        }
        cover
    }
}

fn clip(v: f64, limit: usize) -> usize {
    v.max(0.0).min(limit as f64) as usize
}

/// Deterministic layout for `(seed, layout_index)`.
pub fn generate_layout(seed: u64, layout_index: u64, config: &SceneConfig) -> Result<Layout, SceneError> {
    config.validate()?;
    let mut rng = stream(Stream::Layout, &[seed, layout_index]);
    let (w, h) = (config.width as f64, config.height as f64);
    let horizon = h * rng.random_range(0.38..0.52);
    let mut objects = Vec::new();
    let jitter = |rng: &mut crate::rng::StreamRng, base: [f64; 3], amount: f64| {
        base.map(|c| (c + rng.random_range(-amount..amount)).clamp(0.02, 0.98))
    };

    let sky = jitter(&mut rng, [0.55, 0.72, 0.95], 0.05);
    objects.push(SceneObject {
        class_id: class::SKY,
        shape: Primitive::Rect { x0: 0.0, y0: 0.0, x1: w, y1: h },
        depth: 200.0,
        albedo: sky,
        casts_shadow: false,
    });

    for _ in 0..config.buildings.draw(&mut rng) {
        let bw = w * rng.random_range(0.1..0.32);
        let x0 = rng.random_range(-0.1 * w..w - 0.5 * bw);
        let top = horizon - h * rng.random_range(0.12..0.4);
        let grey = rng.random_range(0.3..0.6);
        objects.push(SceneObject {
            class_id: class::BUILDING,
            shape: Primitive::Rect { x0, y0: top, x1: x0 + bw, y1: horizon + 0.02 * h },
            depth: rng.random_range(20.0..60.0),
            albedo: jitter(&mut rng, [grey * 1.1, grey, grey * 0.85], 0.06),
            casts_shadow: false,
        });
    }

    for _ in 0..config.vegetation.draw(&mut rng) {
        let r = h * rng.random_range(0.06..0.16);
        objects.push(SceneObject {
            class_id: class::VEGETATION,
            shape: Primitive::Disc {
                cx: rng.random_range(0.0..w),
                cy: horizon - h * rng.random_range(0.0..0.15),
                r,
            },
            depth: rng.random_range(12.0..40.0),
            albedo: jitter(&mut rng, [0.2, 0.55, 0.15], 0.07),
            casts_shadow: false,
        });
    }

    objects.push(SceneObject {
        class_id: class::SIDEWALK,
        shape: Primitive::Rect { x0: 0.0, y0: horizon, x1: w, y1: h },
        depth: 11.0,
        albedo: jitter(&mut rng, [0.62, 0.58, 0.52], 0.05),
        casts_shadow: false,
    });
    let vanish = w * rng.random_range(0.35..0.65);
    let top_half = w * rng.random_range(0.03..0.08);
    let road_left = w * rng.random_range(0.02..0.22);
    let road_right = w * rng.random_range(0.78..0.98);
    let road = Primitive::Trapezoid {
        y_top: horizon,
        y_bottom: h,
        top: (vanish - top_half, vanish + top_half),
        bottom: (road_left, road_right),
    };
    objects.push(SceneObject {
        class_id: class::ROAD,
        shape: road,
        depth: 10.0,
        albedo: jitter(&mut rng, [0.28, 0.28, 0.3], 0.04),
        casts_shadow: false,
    });

    // Standing objects: ground contact row and size follow a simple pinhole
    // model, scale = NEAR / depth.
    const NEAR: f64 = 3.0;
    let ground_row = |d: f64| horizon + (h - horizon) * (NEAR / d);
    let road_edges = |y: f64| {
        let t = ((y - horizon) / (h - horizon)).clamp(0.0, 1.0);
        (vanish - top_half + t * (road_left - vanish + top_half), vanish + top_half + t * (road_right - vanish - top_half))
    };

    for _ in 0..config.fences.draw(&mut rng) {
        let d = rng.random_range(6.0..9.5);
        let yb = ground_row(d);
        let fh = h * 0.12 * NEAR / d * 2.0;
        let (rl, rr) = road_edges(yb);
        let (x0, x1) = if rng.random_bool(0.5) { (0.0, (rl - 1.0).max(2.0)) } else { ((rr + 1.0).min(w - 2.0), w) };
        objects.push(SceneObject {
            class_id: class::FENCE,
            shape: Primitive::Rect { x0, y0: yb - fh, x1, y1: yb },
            depth: d,
            albedo: jitter(&mut rng, [0.55, 0.42, 0.3], 0.06),
            casts_shadow: true,
        });
    }

    let mut pole_tops = Vec::new();
    for _ in 0..config.poles.draw(&mut rng) {
        let d = rng.random_range(4.0..15.0);
        let yb = ground_row(d);
        let (rl, rr) = road_edges(yb);
        let x = if rng.random_bool(0.5) { rl - rng.random_range(1.0..6.0) } else { rr + rng.random_range(1.0..6.0) };
        let top = yb - h * 0.9 * NEAR / d;
        let half_width = (1.6 * NEAR / d).max(0.6);
        objects.push(SceneObject {
            class_id: class::POLE,
            shape: Primitive::Polyline { points: vec![(x, yb), (x, top)], half_width },
            depth: d,
            albedo: jitter(&mut rng, [0.45, 0.45, 0.48], 0.05),
            casts_shadow: true,
        });
        pole_tops.push((x, top, d));
    }

    for k in 0..config.signs.draw(&mut rng) {
        let (cx, cy, d) = match pole_tops.get(k) {
            Some(&(x, top, d)) => (x, top, d - 0.05),
            None => {
                let d = rng.random_range(5.0..15.0);
                (rng.random_range(0.0..w), ground_row(d) - h * 0.7 * NEAR / d, d)
            }
        };
        let sign_colour = if rng.random_bool(0.5) { [0.85, 0.15, 0.1] } else { [0.9, 0.8, 0.1] };
        objects.push(SceneObject {
            class_id: class::TRAFFIC_SIGN,
            shape: Primitive::Disc { cx, cy, r: (h * 0.09 * NEAR / d).max(1.2) },
            depth: d,
            albedo: jitter(&mut rng, sign_colour, 0.05),
            casts_shadow: false,
        });
    }

    for _ in 0..config.cars.draw(&mut rng) {
        let d = rng.random_range(NEAR..16.0);
        let yb = ground_row(d);
        let ch = h * 0.4 * NEAR / d * rng.random_range(0.85..1.1);
        let cw = ch * rng.random_range(1.3..1.9);
        let (rl, rr) = road_edges(yb);
        let cx = rng.random_range(rl..rr.max(rl + 1.0));
        let hue = rng.random_range(0..4);
        let paint = [[0.75, 0.12, 0.1], [0.12, 0.2, 0.7], [0.85, 0.85, 0.85], [0.1, 0.1, 0.12]][hue];
        objects.push(SceneObject {
            class_id: class::CAR,
            shape: Primitive::Rect { x0: cx - cw / 2.0, y0: yb - ch, x1: cx + cw / 2.0, y1: yb },
            depth: d,
            albedo: jitter(&mut rng, paint, 0.06),
            casts_shadow: true,
        });
    }

    for _ in 0..config.persons.draw(&mut rng) {
        let d = rng.random_range(NEAR..14.0);
        let yb = ground_row(d);
        let ph = h * 0.55 * NEAR / d;
        let (rl, rr) = road_edges(yb);
        let x = if rng.random_bool(0.5) {
            rng.random_range(0.0..rl.max(1.0))
        } else {
            rng.random_range(rr.min(w - 1.0)..w)
        };
        let shoulders = ph * 0.16;
        let feet = ph * 0.12;
        objects.push(SceneObject {
            class_id: class::PERSON,
            shape: Primitive::Trapezoid {
                y_top: yb - ph,
                y_bottom: yb,
                top: (x - shoulders, x + shoulders),
                bottom: (x - feet, x + feet),
            },
            depth: d,
            albedo: jitter(&mut rng, [0.6, 0.35, 0.3], 0.15),
            casts_shadow: true,
        });
    }

    // Stable sort keeps generation order among equal depths.
    objects.sort_by(|a, b| b.depth.partial_cmp(&a.depth).expect("finite depth"));
    debug_assert!(objects.iter().all(|o| (o.class_id as usize) < NUM_CLASSES && (1.0..=200.0).contains(&o.depth)));

    Ok(Layout { layout_index, seed, width: config.width, height: config.height, objects })
}

/// Painter's-algorithm label map: each pixel takes the class of the front-most
/// covering object, or [`IGNORE`] where nothing covers it.
pub fn rasterize_labels(layout: &Layout) -> Vec<u8> {
    layout
        .coverage()
        .into_iter()
        .map(|c| c.map_or(IGNORE, |i| layout.objects[i as usize].class_id))
        .collect()
}

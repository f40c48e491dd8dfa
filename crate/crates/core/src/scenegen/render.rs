use rand_distr::{Distribution, Normal};

use super::appearance::AppearanceCondition;
use super::layout::{rasterize_labels, Layout};
use super::class;
use crate::rng::{stream, Stream};

const SHADOW_FACTOR: f64 = 0.55;

/// One rendered view of a layout together with its (shared) label map.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub width: usize,
    pub height: usize,
    /// Interleaved `H x W x 3`, values in `[0, 1]`.
    pub rgb: Vec<f64>,
    /// `H x W` class ids, 255 = ignore.
    pub labels: Vec<u8>,
    pub layout_index: u64,
    pub appearance_id: usize,
    pub seed: u64,
}

/// Atmospheric scattering: `rgb * e^(-beta d) + fog * (1 - e^(-beta d))`.
pub fn fog_composite(rgb: [f64; 3], depth: f64, beta: f64, fog: [f64; 3]) -> [f64; 3] {
    let t = (-beta * depth).exp();
    [0, 1, 2].map(|c| rgb[c] * t + fog[c] * (1.0 - t))
}

fn shadow_mask(layout: &Layout, cover: &[Option<u32>], cond: &AppearanceCondition) -> Vec<bool> {
    let (w, h) = (layout.width, layout.height);
    let mut mask = vec![false; w * h];
    if cond.sun_elevation <= 0.02 {
        return mask;
    }
    let cot = cond.sun_elevation.cos() / cond.sun_elevation.sin();
    let (dir_x, dir_y) = (cond.sun_azimuth.cos(), 0.3 * cond.sun_azimuth.sin().abs());
    for (i, obj) in layout.objects.iter().enumerate() {
        if !obj.casts_shadow {
            continue;
        }
        let (x0, y0, x1, y1) = obj.shape.bounds();
        let height = y1 - y0;
        let length = (0.5 * height * cot).min(2.0 * w as f64);
        let thickness = (0.12 * height).max(1.0);
        let steps = length.ceil() as usize;
        for s in 0..=steps {
            let t = if steps == 0 { 0.0 } else { length * s as f64 / steps as f64 };
            let (ox, oy) = (t * dir_x, t * dir_y);
            let ya = (y1 - thickness + oy).floor().max(0.0) as usize;
            let yb = ((y1 + oy).ceil().max(0.0) as usize).min(h);
            let xa = (x0 + ox).floor().max(0.0) as usize;
            let xb = ((x1 + ox).ceil().max(0.0) as usize).min(w);
            for y in ya..yb {
                for x in xa..xb {
                    let p = y * w + x;
                    let on_ground = cover[p].is_some_and(|c| {
                        let front = &layout.objects[c as usize];
                        c as usize != i && matches!(front.class_id, class::ROAD | class::SIDEWALK)
                    });
                    if on_ground {
                        mask[p] = true;
                    }
                }
            }
        }
    }
    mask
}

/// Renders `layout` under `cond` to interleaved RGB.
///
/// Per pixel: albedo, sun gain, cast shadows, tint, fog at the covering
/// object's depth, additive lamp glows, seeded Gaussian noise, clamp.
pub fn render(layout: &Layout, cond: &AppearanceCondition) -> Vec<f64> {
    let (w, h) = (layout.width, layout.height);
    let cover = layout.coverage();
    let shadows = shadow_mask(layout, &cover, cond);
    let gain = cond.ambient_gain + (1.0 - cond.ambient_gain) * cond.sun_elevation.sin().max(0.0);
    let mut rng = stream(Stream::RenderNoise, &[layout.seed, layout.layout_index, cond.appearance_id as u64]);
    let noise = Normal::new(0.0, cond.noise_sigma.max(0.0)).expect("finite sigma");

    let mut out = vec![0.0; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (albedo, depth) = match cover[p] {
                Some(i) => {
                    let o = &layout.objects[i as usize];
                    (o.albedo, o.depth)
                }
                None => ([0.0; 3], 200.0),
            };
            let shade = if shadows[p] { SHADOW_FACTOR } else { 1.0 };
            let lit = [0, 1, 2].map(|c| albedo[c] * gain * shade * cond.color_tint[c]);
            let mut rgb = if cond.fog_density > 0.0 {
                fog_composite(lit, depth, cond.fog_density, cond.fog_color)
            } else {
                lit
            };
            for l in &cond.light_sources {
                let d2 = (x as f64 + 0.5 - l.x).powi(2) + (y as f64 + 0.5 - l.y).powi(2);
                let glow = l.intensity * (-d2 / (l.radius * l.radius)).exp();
                for c in 0..3 {
                    rgb[c] += glow * cond.light_color[c];
                }
            }
            for c in 0..3 {
                let n = if cond.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                out[p * 3 + c] = (rgb[c] + n).clamp(0.0, 1.0);
            }
        }
    }
    out
}

pub fn render_sample(layout: &Layout, cond: &AppearanceCondition) -> LabeledSample {
    LabeledSample {
        width: layout.width,
        height: layout.height,
        rgb: render(layout, cond),
        labels: rasterize_labels(layout),
        layout_index: layout.layout_index,
        appearance_id: cond.appearance_id,
        seed: layout.seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_layout, Appearance, Primitive, SceneConfig, SceneObject};

    fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    fn flat_layout(depth: f64) -> Layout {
        Layout {
            layout_index: 0,
            seed: 0,
            width: 4,
            height: 4,
            objects: vec![SceneObject {
                class_id: class::BUILDING,
                shape: Primitive::Rect { x0: 0.0, y0: 0.0, x1: 4.0, y1: 4.0 },
                depth,
                albedo: [0.5; 3],
                casts_shadow: false,
            }],
        }
    }

    #[test]
    fn zero_density_fog_is_identity() {
        assert_eq!(fog_composite([0.2, 0.4, 0.9], 150.0, 0.0, [1.0; 3]), [0.2, 0.4, 0.9]);
    }

    #[test]
    fn fog_matches_closed_form() {
        let expected = 0.5 * (-1.0f64).exp() + 0.8 * (1.0 - (-1.0f64).exp());
        assert!((expected - 0.6896).abs() < 1e-4);
        let cond = AppearanceCondition { fog_density: 0.1, fog_color: [0.8; 3], ..AppearanceCondition::neutral(1) };
        let rgb = render(&flat_layout(10.0), &cond);
        assert!(rgb.iter().all(|&v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn fog_brightens_monotonically_with_depth() {
        let mut last = 0.0;
        for d in 1..=200 {
            let v = fog_composite([0.3; 3], d as f64, 0.07, [0.8; 3])[0];
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn appearances_change_pixels_but_not_labels() {
        let cfg = SceneConfig::default();
        for i in 0..100 {
            let layout = generate_layout(21, i, &cfg).unwrap();
            let noon = render_sample(&layout, &AppearanceCondition::preset(Appearance::Noon, 21, i, 128, 96));
            let night = render_sample(&layout, &AppearanceCondition::preset(Appearance::Night, 21, i, 128, 96));
            assert_eq!(noon.labels, night.labels);
            assert!(mean_abs_diff(&noon.rgb, &night.rgb) > 0.05);
        }
    }

    #[test]
    fn rendering_is_deterministic_and_clamped() {
        let cfg = SceneConfig::default();
        let layout = generate_layout(2, 9, &cfg).unwrap();
        let cond = AppearanceCondition::preset(Appearance::Fog, 2, 9, 128, 96);
        let a = render(&layout, &cond);
        assert_eq!(a, render(&layout, &cond));
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn shadows_only_touch_rgb() {
        let cfg = SceneConfig::default();
        let layout = generate_layout(4, 3, &cfg).unwrap();
        let lit = AppearanceCondition { sun_elevation: 0.3, ..AppearanceCondition::neutral(0) };
        let flat = AppearanceCondition { sun_elevation: std::f64::consts::FRAC_PI_2, ambient_gain: 1.0, ..lit.clone() };
        let with = render_sample(&layout, &lit);
        let without = render_sample(&layout, &flat);
        assert_eq!(with.labels, without.labels);
        let cover = layout.coverage();
        assert!(shadow_mask(&layout, &cover, &lit).iter().any(|&s| s));
    }
}

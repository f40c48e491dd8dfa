use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, stream_key, Stream};

/// The four capture setups every layout is rendered under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Appearance {
    Sunset = 0,
    Noon = 1,
    Night = 2,
    Fog = 3,
}

impl Appearance {
    pub const ALL: [Appearance; 4] = [Appearance::Sunset, Appearance::Noon, Appearance::Night, Appearance::Fog];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Appearance::Sunset => "sunset",
            Appearance::Noon => "noon",
            Appearance::Night => "night",
            Appearance::Fog => "fog",
        }
    }
}

impl fmt::Display for Appearance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Appearance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sunset" | "0" => Ok(Appearance::Sunset),
            "noon" | "1" => Ok(Appearance::Noon),
            "night" | "nighttime" | "2" => Ok(Appearance::Night),
            "fog" | "foggy" | "3" => Ok(Appearance::Fog),
            other => Err(format!("unknown appearance `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightSource {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub intensity: f64,
}

/// Photometric rendering parameters. Nothing here can move or relabel geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceCondition {
    /// 0..=3 for the training presets; 4 for the held-out dusk preset.
    pub appearance_id: usize,
    pub sun_azimuth: f64,
    pub sun_elevation: f64,
    pub ambient_gain: f64,
    pub color_tint: [f64; 3],
    /// Extinction per meter.
    pub fog_density: f64,
    pub fog_color: [f64; 3],
    pub light_color: [f64; 3],
    pub light_sources: Vec<LightSource>,
    pub noise_sigma: f64,
}

/// Identifier of the evaluation-only dusk preset.
pub const DUSK_ID: usize = 4;

impl AppearanceCondition {
    /// Neutral condition: full light, no tint, fog, shadows, lights or noise.
    pub fn neutral(appearance_id: usize) -> Self {
        Self {
            appearance_id,
            sun_azimuth: 0.0,
            sun_elevation: PI / 2.0,
            ambient_gain: 1.0,
            color_tint: [1.0; 3],
            fog_density: 0.0,
            fog_color: [0.8; 3],
            light_color: [1.0, 0.85, 0.6],
            light_sources: Vec::new(),
            noise_sigma: 0.0,
        }
    }

    /// Preset for `appearance` instantiated for one layout. Per-layout draws
    /// (fog density, lamp placement) come from their own stream.
    pub fn preset(appearance: Appearance, seed: u64, layout_index: u64, width: usize, height: usize) -> Self {
        let mut rng = stream(Stream::AppearanceParams, &[seed, layout_index, appearance.id() as u64]);
        let (w, h) = (width as f64, height as f64);
        let id = appearance.id();
        match appearance {
            Appearance::Sunset => Self {
                sun_azimuth: rng.random_range(-0.3..0.3),
                sun_elevation: 0.2,
                ambient_gain: 0.55,
                color_tint: [1.0, 0.85, 0.7],
                fog_density: 0.004,
                fog_color: [0.9, 0.7, 0.55],
                noise_sigma: 0.015,
                ..Self::neutral(id)
            },
            Appearance::Noon => Self {
                sun_azimuth: rng.random_range(-PI..PI),
                sun_elevation: 1.2,
                ambient_gain: 0.35,
                noise_sigma: 0.01,
                ..Self::neutral(id)
            },
            Appearance::Night => {
                let lamps = rng.random_range(3..=6);
                let light_sources = (0..lamps)
                    .map(|_| LightSource {
                        x: rng.random_range(0.0..w),
                        y: rng.random_range(0.2 * h..0.9 * h),
                        radius: h * rng.random_range(0.08..0.18),
                        intensity: rng.random_range(0.25..0.5),
                    })
                    .collect();
                Self {
                    sun_elevation: -0.3,
                    ambient_gain: 0.15,
                    color_tint: [0.75, 0.8, 1.0],
                    light_sources,
                    noise_sigma: 0.03,
                    ..Self::neutral(id)
                }
            }
            Appearance::Fog => Self {
                sun_azimuth: rng.random_range(-PI..PI),
                sun_elevation: 0.6,
                ambient_gain: 0.7,
                color_tint: [0.95, 0.97, 1.0],
                fog_density: rng.random_range(0.05..0.2),
                fog_color: [0.75, 0.77, 0.8],
                noise_sigma: 0.02,
                ..Self::neutral(id)
            },
        }
    }

    /// Held-out dusk preset used only for evaluation: low purple light, light
    /// haze and a few lamps.
    pub fn dusk(seed: u64, layout_index: u64, width: usize, height: usize) -> Self {
        let mut rng = stream(Stream::AppearanceParams, &[seed, layout_index, DUSK_ID as u64]);
        let (w, h) = (width as f64, height as f64);
        let lamps = rng.random_range(1..=3);
        let light_sources = (0..lamps)
            .map(|_| LightSource {
                x: rng.random_range(0.0..w),
                y: rng.random_range(0.2 * h..0.9 * h),
                radius: h * rng.random_range(0.06..0.12),
                intensity: rng.random_range(0.15..0.3),
            })
            .collect();
        Self {
            sun_azimuth: rng.random_range(-0.5..0.5),
            sun_elevation: 0.05,
            ambient_gain: 0.35,
            color_tint: [0.8, 0.7, 0.95],
            fog_density: 0.02,
            fog_color: [0.45, 0.4, 0.55],
            light_sources,
            noise_sigma: 0.02,
            ..Self::neutral(DUSK_ID)
        }
    }
}

/// How the two appearances of a training layout are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AppearanceProtocol {
    /// One predefined pair per layout, constant across epochs.
    Fixed,
    /// A fresh uniformly drawn ordered pair at every step.
    Random,
    /// Always `(j, j)`; only valid without alignment.
    Single(Appearance),
}

impl fmt::Display for AppearanceProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppearanceProtocol::Fixed => f.write_str("fixed"),
            AppearanceProtocol::Random => f.write_str("random"),
            AppearanceProtocol::Single(a) => write!(f, "single:{a}"),
        }
    }
}

impl FromStr for AppearanceProtocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "fixed" => Ok(Self::Fixed),
            "random" => Ok(Self::Random),
            _ => {
                let name = s.strip_prefix("single:").unwrap_or(&s);
                name.parse().map(Self::Single).map_err(|_| format!("unknown appearance protocol `{s}`"))
            }
        }
    }
}

/// The 12 ordered pairs `(j, j')` with `j != j'`.
pub const ORDERED_PAIRS: [(usize, usize); 12] = [
    (0, 1),
    (0, 2),
    (0, 3),
    (1, 0),
    (1, 2),
    (1, 3),
    (2, 0),
    (2, 1),
    (2, 3),
    (3, 0),
    (3, 1),
    (3, 2),
];

/// Draws the appearance pair for one layout visit.
///
/// `Fixed` assigns pairs round-robin over layout indices from a seed-dependent
/// offset, so each pair covers 1/12 of the dataset and `rng` is not consumed.
pub fn sample_appearance_pair(
    protocol: AppearanceProtocol,
    dataset_seed: u64,
    layout_index: u64,
    rng: &mut impl Rng,
) -> (usize, usize) {
    match protocol {
        AppearanceProtocol::Fixed => {
            let offset = stream_key(Stream::FixedPairs, &[dataset_seed]) % 12;
            ORDERED_PAIRS[((layout_index % 12 + offset) % 12) as usize]
        }
        AppearanceProtocol::Random => ORDERED_PAIRS[rng.random_range(0..12)],
        AppearanceProtocol::Single(a) => (a.id(), a.id()),
    }
}

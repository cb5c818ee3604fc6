use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::geometry::CameraModel;
use crate::scene_graph::DEFAULT_FRAMES;

/// Closed interval `[lo, hi]`.
pub type Range = [f64; 2];

/// World speeds in m/s. Margins are added to a reference speed (the ego
/// speed, or the overtaken vehicle's speed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedRanges {
    /// How much faster than the ego a moving-away vehicle drives.
    pub away_margin: Range,
    /// Oncoming speed magnitude.
    pub towards: Range,
    pub lane_change: Range,
    /// Speed of the overtaken vehicle above the ego speed.
    pub overtaken_margin: Range,
    /// Speed of the overtaker above the overtaken vehicle.
    pub overtake_margin: Range,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    /// Mounting height above the road in metres.
    pub height: f64,
}

impl CameraConfig {
    pub fn model(&self) -> Result<CameraModel, SimError> {
        CameraModel::level_pinhole(self.focal, self.cx, self.cy, self.height)
            .map_err(|e| SimError::Config(format!("camera: {e}")))
    }
}

/// Road layout, traffic statistics and sensing parameters.
///
/// World frame: `x` lateral (right positive), `y` along the road. Same-
/// direction lanes `0..lane_count` run left to right starting at `x = 0`;
/// the oncoming lane lies left of `x = 0` and the parking shoulder right of
/// the last lane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub distribution_id: String,
    pub lane_count: usize,
    pub lane_width: f64,
    /// Landmarks per metre of road inside the observed segment.
    pub landmark_density: f64,
    /// Share of the landmark budget spent on roadside poles; the rest are
    /// lane-marking dashes.
    pub pole_share: f64,
    pub speeds: SpeedRanges,
    pub ego_speed: Range,
    /// Unscripted vehicles per scene, inclusive bounds.
    pub background_vehicles: [usize; 2],
    #[serde(rename = "T")]
    pub frames: usize,
    pub frame_dt: f64,
    pub noise_sigma: f64,
    /// Longitudinal window ahead of the ego (at frame 0) where landmarks lie
    /// and vehicles start.
    pub segment: Range,
    pub camera: CameraConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Preset::ApolloLike.config()
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.lane_count < 2 {
            return bad(format!("lane_count must be at least 2, got {}", self.lane_count));
        }
        if self.frames < 2 {
            return bad("need at least two frames".into());
        }
        let positive = [
            ("lane_width", self.lane_width),
            ("landmark_density", self.landmark_density),
            ("frame_dt", self.frame_dt),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.pole_share) {
            return bad(format!("pole_share must lie in [0, 1], got {}", self.pole_share));
        }
        let [lo, hi] = self.ego_speed;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("ego_speed must be a non-negative range lo <= hi, got [{lo}, {hi}]"));
        }
        let ranges = [
            ("speeds.away_margin", self.speeds.away_margin),
            ("speeds.towards", self.speeds.towards),
            ("speeds.lane_change", self.speeds.lane_change),
            ("speeds.overtaken_margin", self.speeds.overtaken_margin),
            ("speeds.overtake_margin", self.speeds.overtake_margin),
            ("segment", self.segment),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} must be a positive range lo <= hi, got [{lo}, {hi}]"));
            }
        }
        if self.background_vehicles[0] > self.background_vehicles[1] {
            return bad("background_vehicles must be [min, max]".into());
        }
        self.camera.model()?;
        Ok(())
    }

    /// Lane-centre lateral coordinate. Lane `-1` is oncoming traffic and
    /// lane `lane_count` is the parking shoulder.
    pub fn lane_center(&self, lane: i32) -> f64 {
        (lane as f64 + 0.5) * self.lane_width
    }

    /// Lateral coordinates of the painted lines, left to right: the outer
    /// edge of the oncoming lane, the centre line, the lane dividers and the
    /// shoulder line.
    pub fn marking_lines(&self) -> Vec<f64> {
        (-1..=self.lane_count as i32).map(|k| k as f64 * self.lane_width).collect()
    }

    pub fn duration(&self) -> f64 {
        (self.frames - 1) as f64 * self.frame_dt
    }

    /// Stable content hash of the serialized config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::seed::sha256_hex(&json)
    }
}

/// Named scene-statistics distributions used for transfer experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "apollo-like")]
    ApolloLike,
    #[serde(rename = "kitti-like")]
    KittiLike,
    #[serde(rename = "indian-like")]
    IndianLike,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::ApolloLike, Preset::KittiLike, Preset::IndianLike];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ApolloLike => "apollo-like",
            Preset::KittiLike => "kitti-like",
            Preset::IndianLike => "indian-like",
        }
    }

    /// Single-letter alias: A, B or C.
    pub fn letter(self) -> char {
        match self {
            Preset::ApolloLike => 'A',
            Preset::KittiLike => 'B',
            Preset::IndianLike => 'C',
        }
    }

    pub fn config(self) -> WorldConfig {
        let base = WorldConfig {
            distribution_id: self.name().to_string(),
            lane_count: 3,
            lane_width: 3.5,
            landmark_density: 0.5,
            pole_share: 0.2,
            speeds: SpeedRanges {
                away_margin: [2.0, 6.0],
                towards: [6.0, 12.0],
                lane_change: [6.0, 11.0],
                overtaken_margin: [0.5, 2.5],
                overtake_margin: [3.0, 6.0],
            },
            ego_speed: [6.0, 10.0],
            background_vehicles: [1, 3],
            frames: DEFAULT_FRAMES,
            frame_dt: 0.4,
            noise_sigma: 0.15,
            segment: [4.0, 45.0],
            camera: CameraConfig { focal: 720.0, cx: 640.0, cy: 360.0, height: 1.6 },
        };
        match self {
            Preset::ApolloLike => base,
            Preset::KittiLike => WorldConfig {
                lane_count: 2,
                lane_width: 3.7,
                landmark_density: 0.42,
                pole_share: 0.3,
                ego_speed: [7.0, 12.0],
                background_vehicles: [1, 4],
                camera: CameraConfig { focal: 721.5, cx: 609.6, cy: 172.9, height: 1.65 },
                ..base
            },
            Preset::IndianLike => WorldConfig {
                lane_count: 2,
                lane_width: 3.1,
                landmark_density: 0.36,
                pole_share: 0.4,
                speeds: SpeedRanges {
                    away_margin: [1.5, 5.0],
                    towards: [4.0, 9.0],
                    lane_change: [4.0, 8.0],
                    overtaken_margin: [0.5, 2.0],
                    overtake_margin: [2.5, 5.0],
                },
                ego_speed: [4.0, 8.0],
                background_vehicles: [2, 4],
                camera: CameraConfig { focal: 1000.0, cx: 960.0, cy: 540.0, height: 1.4 },
                ..base
            },
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s) || s.eq_ignore_ascii_case(&p.letter().to_string()))
            .ok_or_else(|| SimError::Config(format!("unknown preset {s:?} (expected A, B, C or a preset name)")))
    }
}

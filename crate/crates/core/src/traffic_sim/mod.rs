//! Scripted synthetic traffic: a straight multi-lane road with painted
//! markings and poles, a camera-carrying ego vehicle and labelled vehicles
//! whose world-frame motion defines their behavior class.

mod config;
mod dataset;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project_to_image, CameraModel, GeometryError, ImagePoint};
use crate::scene_graph::{Behavior, NodeType, SceneError, SceneSequence, NUM_CLASSES};

pub use config::{CameraConfig, Preset, Range, SpeedRanges, WorldConfig};
pub use dataset::{
    generate_dataset, load_dataset, stratified_counts, write_dataset, Dataset, DatasetManifest,
    Split, DATASET_FORMAT, DATASET_VERSION, MANIFEST_FILE, SEQUENCES_FILE,
};

/// Minimum speed for a vehicle to count as moving.
pub const MOVING_SPEED: f64 = 0.5;
/// Points closer than this in front of the camera are not imaged.
pub const MIN_IMAGE_DEPTH: f64 = 0.5;

const PLACEMENT_ATTEMPTS: usize = 200;
/// Classes an unscripted vehicle may take; overtaking needs a scripted partner.
const BACKGROUND_CLASSES: [Behavior; 5] = [
    Behavior::MovingAway,
    Behavior::MovingTowards,
    Behavior::Parked,
    Behavior::LaneChangeLeftToRight,
    Behavior::LaneChangeRightToLeft,
];
const MIN_GAP_LONGITUDINAL: f64 = 6.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("could not place a {0} vehicle without conflicts")]
    Placement(Behavior),
    #[error("label check failed for vehicle {id} ({behavior}): {detail}")]
    Label { id: u32, behavior: Behavior, detail: String },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("dataset: {0}")]
    Dataset(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub x: f64,
    pub y: f64,
    /// Counter-clockwise angle of the forward axis from world `+y`.
    pub heading: f64,
}

impl EgoPose {
    /// World point expressed as camera-frame `[lateral, forward]`.
    pub fn to_camera(&self, p: [f64; 2]) -> [f64; 2] {
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        let (s, c) = self.heading.sin_cos();
        [dx * c + dy * s, -dx * s + dy * c]
    }
}

/// Kinematic script of one vehicle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleScript {
    pub id: u32,
    pub behavior: Behavior,
    /// Lane index; `-1` is the oncoming lane, `lane_count` the shoulder.
    pub lane: i32,
    /// World `y` at frame 0.
    pub initial_offset: f64,
    /// Signed speed along `+y` per frame; frame `t` moves with `speed[t]`
    /// until frame `t + 1`.
    pub speed: Vec<f64>,
    /// Offset from the starting lane centre per frame.
    pub lateral: Vec<f64>,
}

impl VehicleScript {
    pub fn trajectory(&self, config: &WorldConfig) -> Vec<[f64; 2]> {
        let x0 = config.lane_center(self.lane);
        let mut y = self.initial_offset;
        self.lateral
            .iter()
            .zip(&self.speed)
            .map(|(dx, v)| {
                let p = [x0 + dx, y];
                y += v * config.frame_dt;
                p
            })
            .collect()
    }

    fn constant(id: u32, behavior: Behavior, lane: i32, y0: f64, speed: f64, frames: usize) -> Self {
        Self {
            id,
            behavior,
            lane,
            initial_offset: y0,
            speed: vec![speed; frames],
            lateral: vec![0.0; frames],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkKind {
    LaneDash,
    Pole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u32,
    pub kind: LandmarkKind,
    pub position: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub config: WorldConfig,
    pub camera: CameraModel,
    pub ego: Vec<EgoPose>,
    pub vehicles: Vec<VehicleScript>,
    pub landmarks: Vec<Landmark>,
    /// The scripted overtaker and the vehicle it passes, if any.
    pub overtake: Option<(u32, u32)>,
    pub noise_seed: u64,
}

impl Scenario {
    /// Noise-free camera-frame positions, vehicles first then landmarks.
    pub fn camera_positions(&self) -> Vec<Vec<[f64; 2]>> {
        let world = self.world_positions();
        self.ego
            .iter()
            .enumerate()
            .map(|(t, pose)| world.iter().map(|track| pose.to_camera(track[t])).collect())
            .collect()
    }

    /// Per-node world tracks, vehicles first then landmarks.
    pub fn world_positions(&self) -> Vec<Vec<[f64; 2]>> {
        let frames = self.ego.len();
        self.vehicles
            .iter()
            .map(|v| v.trajectory(&self.config))
            .chain(self.landmarks.iter().map(|l| vec![l.position; frames]))
            .collect()
    }

    pub fn node_ids(&self) -> Vec<u32> {
        self.vehicles.iter().map(|v| v.id).chain(self.landmarks.iter().map(|l| l.id)).collect()
    }

    pub fn node_types(&self) -> Vec<NodeType> {
        std::iter::repeat_n(NodeType::Vehicle, self.vehicles.len())
            .chain(std::iter::repeat_n(NodeType::Landmark, self.landmarks.len()))
            .collect()
    }
}

fn check_mix(class_mix: &[f64; NUM_CLASSES]) -> Result<(), SimError> {
    let total: f64 = class_mix.iter().sum();
    if class_mix.iter().any(|&w| !w.is_finite() || w < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(SimError::Config(format!("class_mix must be non-negative and sum to 1, got {class_mix:?}")));
    }
    Ok(())
}

/// Draws a scenario whose primary vehicle's class is sampled from `class_mix`.
pub fn generate_scenario(
    class_mix: &[f64; NUM_CLASSES],
    config: &WorldConfig,
    seed: u64,
) -> Result<Scenario, SimError> {
    check_mix(class_mix)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = rng.random_range(0.0..1.0);
    let mut class = Behavior::ALL[NUM_CLASSES - 1];
    for (b, &w) in Behavior::ALL.iter().zip(class_mix) {
        if pick < w {
            class = *b;
            break;
        }
        pick -= w;
    }
    if class_mix[class.index()] == 0.0 {
        class = Behavior::ALL[class_mix.iter().rposition(|&w| w > 0.0).expect("mix sums to 1")];
    }
    generate_scenario_for(class, config, rng.random())
}

/// Draws a scenario around one scripted vehicle of class `primary`, plus
/// background traffic.
pub fn generate_scenario_for(
    primary: Behavior,
    config: &WorldConfig,
    seed: u64,
) -> Result<Scenario, SimError> {
    config.validate()?;
    let camera = config.camera.model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = config.frames;
    let dt = config.frame_dt;

    let ego_lane = rng.random_range(0..config.lane_count as i32);
    let ego_speed = sample(&mut rng, config.ego_speed);
    let ego: Vec<EgoPose> = (0..frames)
        .map(|t| EgoPose { x: config.lane_center(ego_lane), y: ego_speed * dt * t as f64, heading: 0.0 })
        .collect();
    let ego_track: Vec<[f64; 2]> = ego.iter().map(|p| [p.x, p.y]).collect();

    let mut scripted = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let candidate = scripted_vehicles(primary, config, ego_speed, &mut rng);
        let (vehicles, pair) = &candidate;
        let tracks: Vec<_> = vehicles.iter().map(|v| v.trajectory(config)).collect();
        let ok = (0..vehicles.len()).all(|i| {
            !conflicts_with_ego(config, &tracks[i], &ego_track)
                && (0..i).all(|j| !conflicts(config, &vehicles[i], &tracks[i], &vehicles[j], &tracks[j], *pair))
        });
        if ok {
            scripted = Some(candidate);
            break;
        }
    }
    let (mut vehicles, overtake) = scripted.ok_or(SimError::Placement(primary))?;
    let mut tracks: Vec<_> = vehicles.iter().map(|v| v.trajectory(config)).collect();

    let background = rng.random_range(config.background_vehicles[0]..=config.background_vehicles[1]);
    for _ in 0..background {
        for _ in 0..PLACEMENT_ATTEMPTS / 4 {
            let class = BACKGROUND_CLASSES[rng.random_range(0..BACKGROUND_CLASSES.len())];
            let id = vehicles.len() as u32;
            let v = single_vehicle(class, id, config, ego_speed, &mut rng);
            let track = v.trajectory(config);
            let ok = !conflicts_with_ego(config, &track, &ego_track)
                && vehicles
                    .iter()
                    .zip(&tracks)
                    .all(|(o, ot)| !conflicts(config, &v, &track, o, ot, overtake));
            if ok {
                vehicles.push(v);
                tracks.push(track);
                break;
            }
        }
    }

    let first_landmark = vehicles.len() as u32;
    let landmarks = place_landmarks(config, first_landmark, &mut rng);
    let scenario = Scenario {
        config: config.clone(),
        camera,
        ego,
        vehicles,
        landmarks,
        overtake,
        noise_seed: rng.random(),
    };
    validate_labels(&scenario)?;
    Ok(scenario)
}

fn sample(rng: &mut ChaCha8Rng, [lo, hi]: Range) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn start_offset(config: &WorldConfig, rng: &mut ChaCha8Rng) -> f64 {
    sample(rng, config.segment)
}

fn simple_vehicle(class: Behavior, id: u32, config: &WorldConfig, ego_speed: f64, rng: &mut ChaCha8Rng) -> VehicleScript {
    let frames = config.frames;
    match class {
        Behavior::Parked => {
            let y0 = start_offset(config, rng);
            VehicleScript::constant(id, class, config.lane_count as i32, y0, 0.0, frames)
        }
        Behavior::MovingTowards => {
            let speed = sample(rng, config.speeds.towards);
            let [lo, hi] = config.segment;
            // Start far enough ahead to stay in view for part of the window.
            let y0 = sample(rng, [lo + 0.3 * (hi - lo), hi + 0.3 * speed * config.duration()]);
            VehicleScript::constant(id, class, -1, y0, -speed, frames)
        }
        _ => {
            let lane = rng.random_range(0..config.lane_count as i32);
            let speed = ego_speed + sample(rng, config.speeds.away_margin);
            let y0 = start_offset(config, rng);
            VehicleScript::constant(id, Behavior::MovingAway, lane, y0, speed, frames)
        }
    }
}

/// Any class except overtaking, which needs a partner.
fn single_vehicle(class: Behavior, id: u32, config: &WorldConfig, ego_speed: f64, rng: &mut ChaCha8Rng) -> VehicleScript {
    let frames = config.frames;
    let lanes = config.lane_count as i32;
    match class {
        Behavior::LaneChangeLeftToRight | Behavior::LaneChangeRightToLeft => {
            let rightward = class == Behavior::LaneChangeLeftToRight;
            let lane = if rightward { rng.random_range(0..lanes - 1) } else { rng.random_range(1..lanes) };
            let speed = sample(rng, config.speeds.lane_change);
            let span = (frames - 1) as f64;
            let window = sample(rng, [0.4, 0.8]) * span;
            let start = sample(rng, [0.0, span - window].map(|v: f64| v.max(0.0)));
            let sign = if rightward { 1.0 } else { -1.0 };
            let lateral = (0..frames)
                .map(|t| sign * config.lane_width * smoothstep((t as f64 - start) / window))
                .collect();
            let mut v = VehicleScript::constant(id, class, lane, start_offset(config, rng), speed, frames);
            v.lateral = lateral;
            v
        }
        _ => simple_vehicle(class, id, config, ego_speed, rng),
    }
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

type Scripted = (Vec<VehicleScript>, Option<(u32, u32)>);

fn scripted_vehicles(primary: Behavior, config: &WorldConfig, ego_speed: f64, rng: &mut ChaCha8Rng) -> Scripted {
    let frames = config.frames;
    let lanes = config.lane_count as i32;
    match primary {
        Behavior::Overtaking => {
            let reference_lane = rng.random_range(0..lanes);
            let lane = if reference_lane == 0 {
                1
            } else if reference_lane == lanes - 1 || rng.random_bool(0.5) {
                reference_lane - 1
            } else {
                reference_lane + 1
            };
            let reference_speed = ego_speed + sample(rng, config.speeds.overtaken_margin);
            let speed = reference_speed + sample(rng, config.speeds.overtake_margin);
            let pass_time = sample(rng, [0.3, 0.7]) * config.duration();
            let lead = (speed - reference_speed) * pass_time;
            let [lo, hi] = config.segment;
            let reference_y0 = sample(rng, [lo + lead, (lo + lead).max(hi)]);
            let overtaker = VehicleScript::constant(0, primary, lane, reference_y0 - lead, speed, frames);
            let reference =
                VehicleScript::constant(1, Behavior::MovingAway, reference_lane, reference_y0, reference_speed, frames);
            (vec![overtaker, reference], Some((0, 1)))
        }
        class => (vec![single_vehicle(class, 0, config, ego_speed, rng)], None),
    }
}

fn too_close(config: &WorldConfig, a: &[[f64; 2]], b: &[[f64; 2]]) -> bool {
    a.iter().zip(b).any(|(p, q)| {
        (p[0] - q[0]).abs() < 0.75 * config.lane_width && (p[1] - q[1]).abs() < MIN_GAP_LONGITUDINAL
    })
}

fn conflicts_with_ego(config: &WorldConfig, track: &[[f64; 2]], ego: &[[f64; 2]]) -> bool {
    too_close(config, track, ego)
}

fn is_moving_forward(v: &VehicleScript) -> bool {
    v.speed.iter().all(|&s| s > MOVING_SPEED)
}

fn order_flips(a: &[[f64; 2]], b: &[[f64; 2]]) -> bool {
    let first = a[0][1] - b[0][1];
    a.iter().zip(b).any(|(p, q)| (p[1] - q[1]).signum() != first.signum())
}

/// Spatial overlap, or an unscripted overtake between forward-moving vehicles.
fn conflicts(
    config: &WorldConfig,
    a: &VehicleScript,
    at: &[[f64; 2]],
    b: &VehicleScript,
    bt: &[[f64; 2]],
    overtake: Option<(u32, u32)>,
) -> bool {
    if too_close(config, at, bt) {
        return true;
    }
    let scripted = overtake.is_some_and(|(x, y)| (x, y) == (a.id, b.id) || (y, x) == (a.id, b.id));
    !scripted && is_moving_forward(a) && is_moving_forward(b) && order_flips(at, bt)
}

fn place_landmarks(config: &WorldConfig, first_id: u32, rng: &mut ChaCha8Rng) -> Vec<Landmark> {
    let [lo, hi] = config.segment;
    let lines = config.marking_lines();
    let dash_density = config.landmark_density * (1.0 - config.pole_share);
    let mut positions = Vec::new();
    if dash_density > 0.0 {
        let spacing = lines.len() as f64 / dash_density;
        for &x in &lines {
            let mut y = lo + rng.random_range(0.0..spacing);
            while y <= hi {
                positions.push((LandmarkKind::LaneDash, [x, y]));
                y += spacing;
            }
        }
    }
    let pole_rate = config.landmark_density * config.pole_share * (hi - lo);
    let poles = if pole_rate > 0.0 {
        Poisson::new(pole_rate).expect("positive rate").sample(rng) as usize
    } else {
        0
    };
    let left = -config.lane_width - 1.0;
    let right = (config.lane_count as f64 + 1.0) * config.lane_width + 1.0;
    for _ in 0..poles {
        let x = if rng.random_bool(0.5) { left } else { right };
        positions.push((LandmarkKind::Pole, [x, rng.random_range(lo..hi)]));
    }
    // Degenerate scenes need at least two references.
    while positions.len() < 2 {
        positions.push((LandmarkKind::Pole, [right, rng.random_range(lo..hi)]));
    }
    positions
        .into_iter()
        .enumerate()
        .map(|(k, (kind, position))| Landmark { id: first_id + k as u32, kind, position })
        .collect()
}

/// Camera-frame sequence with Gaussian position jitter.
pub fn simulate(scenario: &Scenario) -> Result<SceneSequence, SimError> {
    let mut positions = scenario.camera_positions();
    let sigma = scenario.config.noise_sigma;
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.noise_seed);
        let noise = Normal::new(0.0, sigma).expect("valid sigma");
        for frame in &mut positions {
            for p in frame.iter_mut() {
                p[0] += noise.sample(&mut rng);
                p[1] += noise.sample(&mut rng);
            }
        }
    }
    let labels: BTreeMap<u32, Behavior> = scenario.vehicles.iter().map(|v| (v.id, v.behavior)).collect();
    Ok(SceneSequence::new(scenario.node_ids(), scenario.node_types(), positions, labels)?)
}

/// Per-frame image reference points of every node (`None` when the point
/// is behind or too close to the camera).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageView {
    pub camera: CameraModel,
    pub node_ids: Vec<u32>,
    pub frames: Vec<Vec<Option<ImagePoint>>>,
}

/// Projects the noise-free ground reference points into the image.
pub fn image_space_view(scenario: &Scenario) -> Result<ImageView, SimError> {
    let camera = scenario.camera.clone();
    let mut dropped = 0usize;
    let frames = scenario
        .camera_positions()
        .into_iter()
        .map(|frame| {
            frame
                .into_iter()
                .map(|[lateral, forward]| {
                    if forward < MIN_IMAGE_DEPTH {
                        dropped += 1;
                        return Ok(None);
                    }
                    let ground = camera.ground_point(lateral, forward);
                    Ok(Some(project_to_image(&ground, &camera)?))
                })
                .collect::<Result<Vec<_>, GeometryError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    if dropped > 0 {
        log::warn!("image view: dropped {dropped} reference points behind the camera");
    }
    Ok(ImageView { camera, node_ids: scenario.node_ids(), frames })
}

fn lines_crossed(lines: &[f64], track: &[[f64; 2]]) -> Vec<(f64, f64)> {
    let mut crossings = Vec::new();
    for pair in track.windows(2) {
        let (a, b) = (pair[0][0], pair[1][0]);
        for &line in lines {
            if (a < line) != (b < line) {
                crossings.push((line, b - a));
            }
        }
    }
    crossings
}

/// Checks every vehicle's script against the world-frame definition of its label.
pub fn validate_labels(scenario: &Scenario) -> Result<(), SimError> {
    let config = &scenario.config;
    let dt = config.frame_dt;
    let lines = config.marking_lines();
    let ego_speeds: Vec<f64> = scenario.ego.windows(2).map(|w| (w[1].y - w[0].y) / dt).collect();
    let tracks: Vec<_> = scenario.vehicles.iter().map(|v| v.trajectory(config)).collect();
    let speeds = |track: &[[f64; 2]]| -> Vec<f64> { track.windows(2).map(|w| (w[1][1] - w[0][1]) / dt).collect() };
    for (v, track) in scenario.vehicles.iter().zip(&tracks) {
        let fail = |detail: String| Err(SimError::Label { id: v.id, behavior: v.behavior, detail });
        let crossings = lines_crossed(&lines, track);
        let forward = speeds(track);
        match v.behavior {
            Behavior::Parked => {
                let moved = track.iter().map(|p| (p[0] - track[0][0]).hypot(p[1] - track[0][1])).fold(0.0, f64::max);
                if moved >= 1e-9 {
                    return fail(format!("parked vehicle moved {moved} m"));
                }
            }
            Behavior::MovingAway => {
                if !crossings.is_empty() {
                    return fail("crosses a lane boundary".into());
                }
                if forward.iter().zip(&ego_speeds).any(|(s, e)| s <= e) {
                    return fail("not faster than the ego vehicle".into());
                }
            }
            Behavior::MovingTowards => {
                if !crossings.is_empty() || forward.iter().any(|&s| s >= 0.0) {
                    return fail("not moving steadily against the road direction".into());
                }
            }
            Behavior::LaneChangeLeftToRight | Behavior::LaneChangeRightToLeft => {
                let rightward = v.behavior == Behavior::LaneChangeLeftToRight;
                if crossings.len() != 1 || (crossings[0].1 > 0.0) != rightward {
                    return fail(format!("expected exactly one {} crossing, got {crossings:?}", if rightward { "rightward" } else { "leftward" }));
                }
                let monotone = track.windows(2).all(|w| if rightward { w[1][0] >= w[0][0] } else { w[1][0] <= w[0][0] });
                if !monotone || forward.iter().any(|&s| s <= MOVING_SPEED) {
                    return fail("lateral motion not monotone or vehicle not moving".into());
                }
            }
            Behavior::Overtaking => {
                let moving = |s: &[f64]| s.iter().all(|&x| x > MOVING_SPEED);
                let passes = scenario.vehicles.iter().zip(&tracks).any(|(o, ot)| {
                    o.id != v.id && moving(&forward) && moving(&speeds(ot)) && {
                        let before = track[0][1] - ot[0][1];
                        let after = track[track.len() - 1][1] - ot[ot.len() - 1][1];
                        before < 0.0 && after > 0.0
                    }
                });
                if !passes {
                    return fail("never moves ahead of another moving vehicle".into());
                }
            }
        }
    }
    Ok(())
}

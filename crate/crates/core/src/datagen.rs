//! Synthetic expert trajectories for pretraining.
//!
//! Position experts come from an elastic band pulled straight by contraction
//! and bent by repel/attract objects. Orientation experts follow whichever
//! considered node currently governs the agent, with slerp windows at the
//! hand-over points.

use crate::par::Exec;
use crate::policy::anchors;
use crate::rotmath::{interpolate, random_rotation, Dim, Rotation};
use crate::scene::{dist, Action, Pose, Scene, SceneObject, Trajectory};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Cursor, Read};
use std::path::Path;
use thiserror::Error;

pub const DATASET_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("could not place objects after {0} attempts")]
    PlacementFailure(usize),
    #[error("elastic band did not converge in {0} iterations")]
    NonConvergence(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unsupported dataset version {0}")]
    VersionMismatch(u8),
    #[error("corrupt dataset file: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionClass {
    Attract,
    Repel,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrientationClass {
    Ignore,
    Consider,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationLabel {
    pub position: PositionClass,
    pub orientation: OrientationClass,
}

/// Which network a dataset supervises; decides the objects' type indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Position,
    Orientation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandConfig {
    pub contraction: f64,
    pub strength: f64,
    pub d_cut: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Required clearance to repel objects as a fraction of `s_r + s_i`.
    pub min_clearance: f64,
}

impl Default for BandConfig {
    fn default() -> Self {
        BandConfig {
            contraction: 0.5,
            strength: 0.3,
            d_cut: 3.0,
            max_iters: 500,
            tol: 1e-4,
            min_clearance: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    pub dim: Dim,
    pub kind: DatasetKind,
    pub alpha: f64,
    pub agent_radius: f64,
    pub goal_radius: f64,
    pub min_length: f64,
    pub max_length: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub object_radius: (f64, f64),
    pub corridor_radius: f64,
    /// Attract, repel, ignore.
    pub position_priors: [f64; 3],
    /// Probability that an object's orientation is considered.
    pub consider_prob: f64,
    /// `d_rel` below which a considered object governs the orientation.
    pub orientation_influence: f64,
    pub blend_window: usize,
    pub band: BandConfig,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig::position(Dim::Two)
    }
}

impl DatagenConfig {
    pub fn position(dim: Dim) -> Self {
        DatagenConfig {
            dim,
            kind: DatasetKind::Position,
            alpha: 0.1,
            agent_radius: 0.05,
            goal_radius: 0.2,
            min_length: 1.2,
            max_length: 2.0,
            min_objects: 1,
            max_objects: 4,
            object_radius: (0.1, 0.25),
            corridor_radius: 0.4,
            position_priors: [0.3, 0.3, 0.4],
            consider_prob: 0.5,
            orientation_influence: 2.0,
            blend_window: 5,
            band: BandConfig::default(),
        }
    }

    /// One object per scene, as in the ignore/consider orientation scenarios.
    pub fn orientation(dim: Dim) -> Self {
        DatagenConfig {
            kind: DatasetKind::Orientation,
            min_objects: 1,
            max_objects: 1,
            corridor_radius: 0.25,
            ..DatagenConfig::position(dim)
        }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::InvalidConfig(m.to_string()));
        if self.alpha <= 0.0 || self.agent_radius <= 0.0 || self.goal_radius <= 0.0 {
            return bad("alpha and radii must be positive");
        }
        if self.min_length <= 0.0 || self.max_length < self.min_length {
            return bad("length range");
        }
        if self.max_objects < self.min_objects {
            return bad("object count range");
        }
        if self.object_radius.0 <= 0.0 || self.object_radius.1 < self.object_radius.0 {
            return bad("object radius range");
        }
        if self.position_priors.iter().any(|p| *p < 0.0) || self.position_priors.iter().sum::<f64>() <= 0.0 {
            return bad("position priors");
        }
        if !(0.0..=1.0).contains(&self.consider_prob) {
            return bad("consider_prob");
        }
        if self.band.max_iters == 0 || self.band.tol <= 0.0 {
            return bad("band iteration limits");
        }
        Ok(())
    }
}

/// A generated scene with its expert labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub scene: Scene,
    /// Parallel to `scene.objects`.
    pub labels: Vec<RelationLabel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSample {
    /// Agent pose is the trajectory start.
    pub scene: Scene,
    pub labels: Vec<RelationLabel>,
    pub true_offset: Rotation,
    pub trajectory: Trajectory,
}

impl ExpertSample {
    /// `(v*, w*)` per step: direction to the next waypoint and its orientation.
    pub fn actions(&self) -> Vec<Action> {
        expert_actions(&self.trajectory)
    }
}

/// Consecutive-waypoint actions. Zero-length steps yield a zero `v`.
pub fn expert_actions(traj: &Trajectory) -> Vec<Action> {
    traj.waypoints
        .windows(2)
        .map(|w| {
            let d: Vec<f64> = w[1].p.iter().zip(&w[0].p).map(|(a, b)| a - b).collect();
            let n = crate::grad::norm(&d);
            let v = if n > 0.0 { d.iter().map(|x| x / n).collect() } else { vec![0.0; d.len()] };
            Action { v, w: w[1].r }
        })
        .collect()
}

fn position_type(c: PositionClass) -> u32 {
    match c {
        PositionClass::Repel => anchors::REPEL,
        PositionClass::Attract => anchors::ATTRACT,
        PositionClass::Ignore => anchors::IGNORE,
    }
}

fn orientation_type(c: OrientationClass) -> u32 {
    match c {
        OrientationClass::Ignore => anchors::ORIENT_IGNORE,
        OrientationClass::Consider => anchors::ORIENT_CONSIDER,
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = crate::grad::norm(&v);
        if m > 0.1 && m <= 1.0 {
            return v.into_iter().map(|x| x / m).collect();
        }
    }
}

/// A unit vector orthogonal to `u`, chosen at random.
fn random_perpendicular<R: Rng + ?Sized>(rng: &mut R, u: &[f64]) -> Vec<f64> {
    loop {
        let v = random_unit(rng, u.len());
        let k: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        let w: Vec<f64> = v.iter().zip(u).map(|(a, b)| a - k * b).collect();
        let m = crate::grad::norm(&w);
        if m > 0.1 {
            return w.into_iter().map(|x| x / m).collect();
        }
    }
}

/// Distance from `p` to the segment `a`-`b`.
pub fn segment_distance(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let ab: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
    let ap: Vec<f64> = p.iter().zip(a).map(|(x, y)| x - y).collect();
    let l2: f64 = ab.iter().map(|x| x * x).sum();
    let t = if l2 > 0.0 {
        (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q: Vec<f64> = a.iter().zip(&ab).map(|(x, y)| x + t * y).collect();
    dist(p, &q)
}

fn pick_class<R: Rng + ?Sized>(rng: &mut R, priors: &[f64; 3]) -> PositionClass {
    let total: f64 = priors.iter().sum();
    let u = rng.random_range(0.0..total);
    if u < priors[0] {
        PositionClass::Attract
    } else if u < priors[0] + priors[1] {
        PositionClass::Repel
    } else {
        PositionClass::Ignore
    }
}

const PLACEMENT_ATTEMPTS: usize = 100;

/// Random start/goal and objects inside the start-goal corridor.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, config: &DatagenConfig) -> Result<LabeledScene, DatagenError> {
    config.validate()?;
    let dim = config.dim;
    let n = dim.n();
    let start_p: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let length = rng.random_range(config.min_length..=config.max_length);
    let heading = random_unit(rng, n);
    let goal_p: Vec<f64> = start_p.iter().zip(&heading).map(|(s, h)| s + length * h).collect();
    let agent = Pose::new(start_p.clone(), random_rotation(rng, dim));
    let goal = SceneObject {
        id: 0,
        type_index: anchors::GOAL,
        pose: Pose::new(goal_p.clone(), random_rotation(rng, dim)),
        radius: config.goal_radius,
    };
    let count = rng.random_range(config.min_objects..=config.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for k in 0..count {
        let label = RelationLabel {
            position: pick_class(rng, &config.position_priors),
            orientation: if rng.random_bool(config.consider_prob) {
                OrientationClass::Consider
            } else {
                OrientationClass::Ignore
            },
        };
        let radius = rng.random_range(config.object_radius.0..=config.object_radius.1);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            // keep clear of both endpoints so the band has room to bend
            let t = rng.random_range(0.25..0.75);
            let side = random_perpendicular(rng, &heading);
            let r = rng.random_range(0.0..config.corridor_radius);
            let p: Vec<f64> = (0..n).map(|i| start_p[i] + t * length * heading[i] + r * side[i]).collect();
            let clear_of_objects = objects.iter().all(|o| dist(&o.pose.p, &p) > o.radius + radius);
            if clear_of_objects && dist(&p, &goal_p) > radius + config.goal_radius + config.agent_radius {
                placed = Some(p);
                break;
            }
        }
        let p = placed.ok_or(DatagenError::PlacementFailure(PLACEMENT_ATTEMPTS))?;
        let type_index = match config.kind {
            DatasetKind::Position => position_type(label.position),
            DatasetKind::Orientation => orientation_type(label.orientation),
        };
        objects.push(SceneObject {
            id: k as u32 + 1,
            type_index,
            pose: Pose::new(p, random_rotation(rng, dim)),
            radius,
        });
        labels.push(label);
    }
    let scene = Scene::new(agent, config.agent_radius, goal, objects, config.alpha)
        .map_err(|e| DatagenError::InvalidConfig(e.to_string()))?;
    Ok(LabeledScene { scene, labels })
}

/// Resamples a polyline to uniform spacing no larger than `alpha`, keeping both endpoints.
pub fn resample(points: &[Vec<f64>], alpha: f64) -> Vec<Vec<f64>> {
    let mut cum = vec![0.0];
    for w in points.windows(2) {
        cum.push(cum.last().unwrap() + dist(&w[0], &w[1]));
    }
    let total = *cum.last().unwrap();
    if total == 0.0 {
        return vec![points[0].clone()];
    }
    let segs = (total / alpha - 1e-9).ceil().max(1.0) as usize;
    let step = total / segs as f64;
    let mut out = Vec::with_capacity(segs + 1);
    let mut j = 0;
    for k in 0..=segs {
        if k == segs {
            out.push(points.last().unwrap().clone());
            break;
        }
        let s = k as f64 * step;
        while j + 1 < cum.len() - 1 && cum[j + 1] < s {
            j += 1;
        }
        let seg = cum[j + 1] - cum[j];
        let t = if seg > 0.0 { (s - cum[j]) / seg } else { 0.0 };
        out.push(points[j].iter().zip(&points[j + 1]).map(|(a, b)| a + t * (b - a)).collect());
    }
    out
}

/// Straight start-goal band deformed by repel/attract objects, resampled to spacing ~alpha.
pub fn elastic_band_trajectory(scene: &Scene, labels: &[RelationLabel], band: &BandConfig) -> Result<Vec<Vec<f64>>, DatagenError> {
    let a = scene.agent.p.clone();
    let b = scene.goal.pose.p.clone();
    let n = a.len();
    let length = dist(&a, &b);
    let segs = (length / scene.alpha).ceil().max(1.0) as usize;
    let dirv: Vec<f64> = b.iter().zip(&a).map(|(x, y)| (x - y) / length.max(1e-12)).collect();
    // deterministic lateral bump so a repel object sitting exactly on the
    // segment still has a preferred side
    let mut lateral = vec![0.0; n];
    lateral[if dirv[0].abs() < 0.9 { 0 } else { 1 }] = 1.0;
    let k: f64 = lateral.iter().zip(&dirv).map(|(x, y)| x * y).sum();
    let mut lateral: Vec<f64> = lateral.iter().zip(&dirv).map(|(x, y)| x - k * y).collect();
    let lm = crate::grad::norm(&lateral);
    lateral.iter_mut().for_each(|x| *x /= lm);
    let interacting: Vec<(&SceneObject, PositionClass)> = scene
        .objects
        .iter()
        .zip(labels)
        .filter(|(_, l)| l.position != PositionClass::Ignore)
        .map(|(o, l)| (o, l.position))
        .collect();
    let mut pts: Vec<Vec<f64>> = (0..=segs)
        .map(|i| {
            let t = i as f64 / segs as f64;
            let bump = if interacting.is_empty() { 0.0 } else { 1e-3 * (std::f64::consts::PI * t).sin() };
            (0..n).map(|d| a[d] + t * (b[d] - a[d]) + bump * lateral[d]).collect()
        })
        .collect();
    let mut converged = false;
    for _ in 0..band.max_iters {
        let mut max_move: f64 = 0.0;
        for i in 1..segs {
            let mut delta: Vec<f64> = (0..n)
                .map(|d| band.contraction * (0.5 * (pts[i - 1][d] + pts[i + 1][d]) - pts[i][d]))
                .collect();
            for (o, class) in &interacting {
                let to: Vec<f64> = o.pose.p.iter().zip(&pts[i]).map(|(x, y)| x - y).collect();
                let sep = crate::grad::norm(&to);
                let d_rel = sep / (scene.agent_radius + o.radius);
                let mag = band.strength * scene.alpha * (1.0 - d_rel / band.d_cut).max(0.0);
                if mag == 0.0 || sep < 1e-12 {
                    continue;
                }
                let sign = match class {
                    PositionClass::Repel => -1.0,
                    // taper inside the radius so waypoints settle on the object
                    // instead of oscillating around its center
                    _ => d_rel.min(1.0),
                };
                for d in 0..n {
                    delta[d] += sign * mag * to[d] / sep;
                }
            }
            for d in 0..n {
                pts[i][d] += delta[d];
            }
            max_move = max_move.max(crate::grad::norm(&delta));
        }
        if max_move < band.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(DatagenError::NonConvergence(band.max_iters));
    }
    Ok(resample(&pts, scene.alpha))
}

/// Expert orientation at every waypoint.
pub fn orientation_trajectory(
    scene: &Scene,
    labels: &[RelationLabel],
    true_offset: &Rotation,
    positions: &[Vec<f64>],
    influence: f64,
    blend_window: usize,
) -> Vec<Rotation> {
    let start = &scene.agent;
    let goal = &scene.goal;
    // node 0 start, 1 goal, 2.. considered objects
    let mut targets = vec![start.r, goal.pose.r];
    let considered: Vec<&SceneObject> = scene
        .objects
        .iter()
        .zip(labels)
        .filter(|(_, l)| l.orientation == OrientationClass::Consider)
        .map(|(o, _)| o)
        .collect();
    targets.extend(considered.iter().map(|o| o.pose.r.compose(true_offset)));
    let governing: Vec<usize> = positions
        .iter()
        .map(|p| {
            let near = considered
                .iter()
                .enumerate()
                .map(|(k, o)| (k, dist(p, &o.pose.p) / (scene.agent_radius + o.radius)))
                .filter(|(_, d)| *d <= influence)
                .min_by(|x, y| x.1.total_cmp(&y.1));
            match near {
                Some((k, _)) => k + 2,
                None if dist(p, &start.p) < dist(p, &goal.pose.p) => 0,
                None => 1,
            }
        })
        .collect();
    let mut out: Vec<Rotation> = governing.iter().map(|&g| targets[g]).collect();
    // slerp windows centered on every hand-over
    let half = blend_window / 2;
    for t in 1..governing.len() {
        if governing[t] == governing[t - 1] {
            continue;
        }
        let from = targets[governing[t - 1]];
        let to = targets[governing[t]];
        let lo = t.saturating_sub(half);
        let hi = (t + blend_window - half).min(governing.len());
        for (j, slot) in (lo..hi).enumerate() {
            let f = (j + 1) as f64 / (blend_window + 1) as f64;
            out[slot] = interpolate(&from, &to, f);
        }
    }
    if let Some(first) = out.first_mut() {
        *first = start.r;
    }
    out
}

/// Failure counts accumulated while building a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FailureStats {
    pub placement: u64,
    pub non_convergence: u64,
    pub clearance: u64,
}

/// Minimum clearance of a path to an object, relative to `s_r + s_i`.
pub fn relative_clearance(path: &[Vec<f64>], obj: &SceneObject, agent_radius: f64) -> f64 {
    let m = path.windows(2).map(|w| segment_distance(&obj.pose.p, &w[0], &w[1])).fold(f64::INFINITY, f64::min);
    let m = if path.len() == 1 { dist(&path[0], &obj.pose.p) } else { m };
    m / (agent_radius + obj.radius)
}

/// One expert sample, or the reason it was rejected.
pub fn generate_sample<R: Rng + ?Sized>(rng: &mut R, config: &DatagenConfig, true_offset: &Rotation) -> Result<ExpertSample, DatagenError> {
    let LabeledScene { scene, labels } = sample_scene(rng, config)?;
    let positions = match config.kind {
        DatasetKind::Position => elastic_band_trajectory(&scene, &labels, &config.band)?,
        DatasetKind::Orientation => {
            let straight = vec![scene.agent.p.clone(), scene.goal.pose.p.clone()];
            resample(&straight, scene.alpha)
        }
    };
    if config.kind == DatasetKind::Position {
        for (o, l) in scene.objects.iter().zip(&labels) {
            if l.position == PositionClass::Repel && relative_clearance(&positions, o, scene.agent_radius) < config.band.min_clearance {
                return Err(DatagenError::InvalidConfig("clearance".into()));
            }
        }
    }
    let rots = orientation_trajectory(&scene, &labels, true_offset, &positions, config.orientation_influence, config.blend_window);
    let waypoints = positions.into_iter().zip(rots).map(|(p, r)| Pose::new(p, r)).collect();
    Ok(ExpertSample {
        scene,
        labels,
        true_offset: *true_offset,
        trajectory: Trajectory { waypoints },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub version: u8,
    pub dim: Dim,
    pub kind: DatasetKind,
    pub seed: u64,
    pub config: DatagenConfig,
    pub true_offset: Rotation,
    pub failures: FailureStats,
    pub samples: Vec<ExpertSample>,
}

const MAX_SAMPLE_ATTEMPTS: usize = 1000;

/// Per-index generator so serial and parallel builds agree.
fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// The offset shared by every considered object in a dataset with this seed.
pub fn dataset_true_offset(seed: u64, dim: Dim) -> Rotation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    random_rotation(&mut rng, dim)
}

/// `n` samples; rejected draws are retried from the same per-index stream.
pub fn build_dataset(n: usize, config: &DatagenConfig, seed: u64, exec: Exec) -> Result<DatasetFile, DatagenError> {
    if n == 0 {
        return Err(DatagenError::InvalidConfig("n must be at least 1".into()));
    }
    config.validate()?;
    let true_offset = dataset_true_offset(seed, config.dim);
    let results = exec.map(n, |i| {
        let mut rng = sample_rng(seed, i as u64);
        let mut stats = FailureStats::default();
        for _ in 0..MAX_SAMPLE_ATTEMPTS {
            match generate_sample(&mut rng, config, &true_offset) {
                Ok(s) => return Ok((s, stats)),
                Err(DatagenError::PlacementFailure(_)) => stats.placement += 1,
                Err(DatagenError::NonConvergence(_)) => stats.non_convergence += 1,
                Err(DatagenError::InvalidConfig(m)) if m == "clearance" => stats.clearance += 1,
                Err(e) => return Err(e),
            }
        }
        Err(DatagenError::PlacementFailure(MAX_SAMPLE_ATTEMPTS))
    });
    let mut failures = FailureStats::default();
    let mut samples = Vec::with_capacity(n);
    for r in results {
        let (s, st) = r?;
        failures.placement += st.placement;
        failures.non_convergence += st.non_convergence;
        failures.clearance += st.clearance;
        samples.push(s);
    }
    Ok(DatasetFile {
        version: DATASET_VERSION,
        dim: config.dim,
        kind: config.kind,
        seed,
        config: config.clone(),
        true_offset,
        failures,
        samples,
    })
}

// ---- binary format ------------------------------------------------------------
//
// u8 version | u8 dim | u8 kind | u64 seed | u32 len + config JSON
// | rotation true_offset | u64 x3 failure counts | u32 n | n x (u32 len + sample)
//
// rotation: 2 f64 (cos, sin) in 2D, 9 f64 row-major in 3D.
// sample: pose agent | f64 agent_radius | f64 alpha | object goal
// | u32 count + objects | u32 count + labels (u8 position, u8 orientation)
// | u32 count + waypoint poses
// pose: D f64 position + rotation. object: u32 id | u32 type | f64 radius | pose.
// All little-endian.

fn put_rot(buf: &mut Vec<u8>, r: &Rotation) {
    match r {
        Rotation::Planar(p) => {
            buf.write_f64::<LittleEndian>(p.c).unwrap();
            buf.write_f64::<LittleEndian>(p.s).unwrap();
        }
        Rotation::Spatial(m) => {
            for i in 0..3 {
                for j in 0..3 {
                    buf.write_f64::<LittleEndian>(m[(i, j)]).unwrap();
                }
            }
        }
    }
}

fn put_pose(buf: &mut Vec<u8>, p: &Pose) {
    for x in &p.p {
        buf.write_f64::<LittleEndian>(*x).unwrap();
    }
    put_rot(buf, &p.r);
}

fn put_object(buf: &mut Vec<u8>, o: &SceneObject) {
    buf.write_u32::<LittleEndian>(o.id).unwrap();
    buf.write_u32::<LittleEndian>(o.type_index).unwrap();
    buf.write_f64::<LittleEndian>(o.radius).unwrap();
    put_pose(buf, &o.pose);
}

fn corrupt(m: impl Into<String>) -> DatagenError {
    DatagenError::CorruptFile(m.into())
}

fn get_f64(c: &mut Cursor<&[u8]>) -> Result<f64, DatagenError> {
    c.read_f64::<LittleEndian>().map_err(|_| corrupt("truncated"))
}

fn get_u32(c: &mut Cursor<&[u8]>) -> Result<u32, DatagenError> {
    c.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated"))
}

fn get_rot(c: &mut Cursor<&[u8]>, dim: Dim) -> Result<Rotation, DatagenError> {
    match dim {
        Dim::Two => {
            let (co, si) = (get_f64(c)?, get_f64(c)?);
            if ((co * co + si * si) - 1.0).abs() > 1e-9 {
                return Err(corrupt("invalid planar rotation"));
            }
            Ok(Rotation::Planar(crate::rotmath::Rot2 { c: co, s: si }))
        }
        Dim::Three => {
            let mut m = nalgebra::Matrix3::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    m[(i, j)] = get_f64(c)?;
                }
            }
            Ok(Rotation::Spatial(m))
        }
    }
}

fn get_pose(c: &mut Cursor<&[u8]>, dim: Dim) -> Result<Pose, DatagenError> {
    let p = (0..dim.n()).map(|_| get_f64(c)).collect::<Result<Vec<_>, _>>()?;
    Ok(Pose::new(p, get_rot(c, dim)?))
}

fn get_object(c: &mut Cursor<&[u8]>, dim: Dim) -> Result<SceneObject, DatagenError> {
    let id = get_u32(c)?;
    let type_index = get_u32(c)?;
    let radius = get_f64(c)?;
    Ok(SceneObject {
        id,
        type_index,
        pose: get_pose(c, dim)?,
        radius,
    })
}

fn encode_sample(s: &ExpertSample) -> Vec<u8> {
    let mut b = Vec::new();
    put_pose(&mut b, &s.scene.agent);
    b.write_f64::<LittleEndian>(s.scene.agent_radius).unwrap();
    b.write_f64::<LittleEndian>(s.scene.alpha).unwrap();
    put_object(&mut b, &s.scene.goal);
    b.write_u32::<LittleEndian>(s.scene.objects.len() as u32).unwrap();
    for o in &s.scene.objects {
        put_object(&mut b, o);
    }
    b.write_u32::<LittleEndian>(s.labels.len() as u32).unwrap();
    for l in &s.labels {
        b.push(match l.position {
            PositionClass::Attract => 0,
            PositionClass::Repel => 1,
            PositionClass::Ignore => 2,
        });
        b.push(match l.orientation {
            OrientationClass::Ignore => 0,
            OrientationClass::Consider => 1,
        });
    }
    b.write_u32::<LittleEndian>(s.trajectory.waypoints.len() as u32).unwrap();
    for w in &s.trajectory.waypoints {
        put_pose(&mut b, w);
    }
    b
}

fn decode_sample(bytes: &[u8], dim: Dim, true_offset: Rotation) -> Result<ExpertSample, DatagenError> {
    let mut c = Cursor::new(bytes);
    let agent = get_pose(&mut c, dim)?;
    let agent_radius = get_f64(&mut c)?;
    let alpha = get_f64(&mut c)?;
    let goal = get_object(&mut c, dim)?;
    let n = get_u32(&mut c)? as usize;
    let objects = (0..n).map(|_| get_object(&mut c, dim)).collect::<Result<Vec<_>, _>>()?;
    let n = get_u32(&mut c)? as usize;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pair = [0u8; 2];
        c.read_exact(&mut pair).map_err(|_| corrupt("truncated"))?;
        labels.push(RelationLabel {
            position: match pair[0] {
                0 => PositionClass::Attract,
                1 => PositionClass::Repel,
                2 => PositionClass::Ignore,
                _ => return Err(corrupt("bad position label")),
            },
            orientation: match pair[1] {
                0 => OrientationClass::Ignore,
                1 => OrientationClass::Consider,
                _ => return Err(corrupt("bad orientation label")),
            },
        });
    }
    let n = get_u32(&mut c)? as usize;
    let waypoints = (0..n).map(|_| get_pose(&mut c, dim)).collect::<Result<Vec<_>, _>>()?;
    if c.position() as usize != bytes.len() {
        return Err(corrupt("trailing bytes in sample"));
    }
    let scene = Scene::new(agent, agent_radius, goal, objects, alpha).map_err(|e| corrupt(e.to_string()))?;
    Ok(ExpertSample {
        scene,
        labels,
        true_offset,
        trajectory: Trajectory { waypoints },
    })
}

impl DatasetFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = vec![self.version, self.dim.n() as u8];
        b.push(match self.kind {
            DatasetKind::Position => 0,
            DatasetKind::Orientation => 1,
        });
        b.write_u64::<LittleEndian>(self.seed).unwrap();
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        b.write_u32::<LittleEndian>(cfg.len() as u32).unwrap();
        b.extend(cfg);
        put_rot(&mut b, &self.true_offset);
        for f in [self.failures.placement, self.failures.non_convergence, self.failures.clearance] {
            b.write_u64::<LittleEndian>(f).unwrap();
        }
        b.write_u32::<LittleEndian>(self.samples.len() as u32).unwrap();
        for s in &self.samples {
            let enc = encode_sample(s);
            b.write_u32::<LittleEndian>(enc.len() as u32).unwrap();
            b.extend(enc);
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<DatasetFile, DatagenError> {
        let mut c = Cursor::new(bytes);
        let version = c.read_u8().map_err(|_| corrupt("empty file"))?;
        if version != DATASET_VERSION {
            return Err(DatagenError::VersionMismatch(version));
        }
        let dim = Dim::from_usize(c.read_u8().map_err(|_| corrupt("truncated"))? as usize).ok_or_else(|| corrupt("bad dimension"))?;
        let kind = match c.read_u8().map_err(|_| corrupt("truncated"))? {
            0 => DatasetKind::Position,
            1 => DatasetKind::Orientation,
            _ => return Err(corrupt("bad kind")),
        };
        let seed = c.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated"))?;
        let len = get_u32(&mut c)? as usize;
        let mut cfg = vec![0u8; len];
        c.read_exact(&mut cfg).map_err(|_| corrupt("truncated config"))?;
        let config: DatagenConfig = serde_json::from_slice(&cfg).map_err(|e| corrupt(e.to_string()))?;
        let true_offset = get_rot(&mut c, dim)?;
        let mut f = [0u64; 3];
        for x in &mut f {
            *x = c.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated"))?;
        }
        let n = get_u32(&mut c)? as usize;
        let mut samples = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = get_u32(&mut c)? as usize;
            let start = c.position() as usize;
            let end = start.checked_add(len).filter(|e| *e <= bytes.len()).ok_or_else(|| corrupt("truncated sample"))?;
            samples.push(decode_sample(&bytes[start..end], dim, true_offset)?);
            c.set_position(end as u64);
        }
        if c.position() as usize != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(DatasetFile {
            version,
            dim,
            kind,
            seed,
            config,
            true_offset,
            failures: FailureStats {
                placement: f[0],
                non_convergence: f[1],
                clearance: f[2],
            },
            samples,
        })
    }

    pub fn load(path: &Path) -> Result<DatasetFile, DatagenError> {
        DatasetFile::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotmath::geodesic_angle;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Next scene that places successfully.
    fn placed(r: &mut ChaCha8Rng, cfg: &DatagenConfig) -> Scene {
        loop {
            match sample_scene(r, cfg) {
                Ok(s) => return s.scene,
                Err(DatagenError::PlacementFailure(_)) => continue,
                Err(e) => panic!("{e}"),
            }
        }
    }

    fn straight_scene(objects: Vec<SceneObject>) -> Scene {
        Scene::new(
            Pose::planar(0.0, 0.0, 0.0),
            0.05,
            SceneObject {
                id: 0,
                type_index: anchors::GOAL,
                pose: Pose::planar(1.6, 0.0, 0.0),
                radius: 0.2,
            },
            objects,
            0.1,
        )
        .unwrap()
    }

    fn obj(id: u32, x: f64, y: f64, r: f64, theta: f64) -> SceneObject {
        SceneObject {
            id,
            type_index: anchors::IGNORE,
            pose: Pose::planar(x, y, theta),
            radius: r,
        }
    }

    fn label(p: PositionClass, o: OrientationClass) -> RelationLabel {
        RelationLabel { position: p, orientation: o }
    }

    #[test]
    fn zero_objects_gives_goal_only_scene() {
        let cfg = DatagenConfig {
            min_objects: 0,
            max_objects: 0,
            ..DatagenConfig::position(Dim::Two)
        };
        let s = sample_scene(&mut rng(1), &cfg).unwrap();
        assert!(s.scene.objects.is_empty());
        assert!(dist(&s.scene.agent.p, &s.scene.goal.pose.p) >= cfg.min_length - 1e-12);
    }

    #[test]
    fn seeded_scenes_repeat() {
        let cfg = DatagenConfig::position(Dim::Three);
        assert_eq!(sample_scene(&mut rng(5), &cfg).unwrap(), sample_scene(&mut rng(5), &cfg).unwrap());
    }

    #[test]
    fn objects_stay_in_corridor() {
        let cfg = DatagenConfig::position(Dim::Two);
        let mut r = rng(2);
        for _ in 0..1000 {
            let s = placed(&mut r, &cfg);
            for o in &s.objects {
                assert!(segment_distance(&o.pose.p, &s.agent.p, &s.goal.pose.p) <= cfg.corridor_radius + 1e-9);
            }
        }
    }

    #[test]
    fn object_orientations_are_uniform() {
        let cfg = DatagenConfig::position(Dim::Two);
        let mut r = rng(3);
        let (mut c, mut s, mut n) = (0.0, 0.0, 0.0);
        for _ in 0..1000 {
            for o in placed(&mut r, &cfg).objects {
                let a = o.pose.r.angle().unwrap();
                c += a.cos();
                s += a.sin();
                n += 1.0;
            }
        }
        assert!(((c / n).powi(2) + (s / n).powi(2)).sqrt() < 0.1);
    }

    #[test]
    fn band_without_objects_is_straight() {
        let scene = straight_scene(vec![]);
        let pts = elastic_band_trajectory(&scene, &[], &BandConfig::default()).unwrap();
        for p in &pts {
            assert!(segment_distance(p, &scene.agent.p, &scene.goal.pose.p) < 1e-6);
        }
        assert_eq!(pts.len(), 17);
    }

    #[test]
    fn band_clears_centered_repel_object() {
        let o = obj(1, 0.8, 0.0, 0.2, 0.0);
        let scene = straight_scene(vec![o.clone()]);
        let pts = elastic_band_trajectory(&scene, &[label(PositionClass::Repel, OrientationClass::Ignore)], &BandConfig::default()).unwrap();
        let c = relative_clearance(&pts, &o, scene.agent_radius);
        assert!(c >= 0.8, "clearance {c}");
    }

    #[test]
    fn band_approaches_attract_object() {
        let o = obj(1, 0.8, 0.3, 0.15, 0.0);
        let scene = straight_scene(vec![o.clone()]);
        let pts = elastic_band_trajectory(&scene, &[label(PositionClass::Attract, OrientationClass::Ignore)], &BandConfig::default()).unwrap();
        let straight = segment_distance(&o.pose.p, &scene.agent.p, &scene.goal.pose.p);
        let bent = pts.windows(2).map(|w| segment_distance(&o.pose.p, &w[0], &w[1])).fold(f64::INFINITY, f64::min);
        assert!(bent < straight, "{bent} vs {straight}");
    }

    #[test]
    fn orientation_follows_considered_object_with_offset() {
        let o = obj(1, 0.8, 0.0, 0.2, 1.0);
        let scene = straight_scene(vec![o.clone()]);
        let labels = [label(PositionClass::Ignore, OrientationClass::Consider)];
        let pts = resample(&[scene.agent.p.clone(), scene.goal.pose.p.clone()], 0.1);
        let off = Rotation::from_angle(-std::f64::consts::FRAC_PI_2);
        let rots = orientation_trajectory(&scene, &labels, &off, &pts, 2.0, 5);
        let mid = rots[pts.len() / 2];
        assert!((mid.angle().unwrap() - (1.0 - std::f64::consts::FRAC_PI_2)).abs() < 1e-12);
        // plateau waypoints are exact
        let target = o.pose.r.compose(&off);
        assert_eq!(rots[8], target);
    }

    #[test]
    fn ignored_object_does_not_change_orientations() {
        let scene0 = straight_scene(vec![]);
        let scene1 = straight_scene(vec![obj(1, 0.8, 0.0, 0.2, 2.9)]);
        let pts = resample(&[scene0.agent.p.clone(), scene0.goal.pose.p.clone()], 0.1);
        let off = Rotation::from_angle(0.7);
        let a = orientation_trajectory(&scene0, &[], &off, &pts, 2.0, 5);
        let b = orientation_trajectory(&scene1, &[label(PositionClass::Repel, OrientationClass::Ignore)], &off, &pts, 2.0, 5);
        assert_eq!(a, b);
        for (i, r) in a.iter().enumerate() {
            let close_to_one = geodesic_angle(r, &scene0.agent.r).min(geodesic_angle(r, &scene0.goal.pose.r));
            if i < 5 || i > 11 {
                assert!(close_to_one < 1e-12);
            }
        }
    }

    #[test]
    fn actions_are_consistent() {
        let cfg = DatagenConfig::position(Dim::Two);
        let ds = build_dataset(5, &cfg, 11, Exec::Serial).unwrap();
        for s in &ds.samples {
            for (a, w) in s.actions().iter().zip(s.trajectory.waypoints.windows(2)) {
                let d: Vec<f64> = w[1].p.iter().zip(&w[0].p).map(|(x, y)| x - y).collect();
                let n = crate::grad::norm(&d);
                for k in 0..2 {
                    assert!((a.v[k] - d[k] / n).abs() < 1e-12);
                }
                assert_eq!(a.w, w[1].r);
            }
        }
    }

    #[test]
    fn dataset_bytes_roundtrip_and_repeat() {
        for (dim, kind) in [(Dim::Two, DatasetKind::Position), (Dim::Three, DatasetKind::Orientation)] {
            let cfg = match kind {
                DatasetKind::Position => DatagenConfig::position(dim),
                DatasetKind::Orientation => DatagenConfig::orientation(dim),
            };
            let a = build_dataset(8, &cfg, 42, Exec::Serial).unwrap();
            let b = build_dataset(8, &cfg, 42, Exec::Parallel).unwrap();
            let bytes = a.to_bytes();
            assert_eq!(bytes, b.to_bytes());
            let back = DatasetFile::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes(), bytes);
            assert_eq!(back.samples.len(), 8);
        }
    }

    #[test]
    fn dataset_rejects_bad_version_and_truncation() {
        let ds = build_dataset(1, &DatagenConfig::position(Dim::Two), 1, Exec::Serial).unwrap();
        let mut bytes = ds.to_bytes();
        bytes[0] = 7;
        assert!(matches!(DatasetFile::from_bytes(&bytes), Err(DatagenError::VersionMismatch(7))));
        let bytes = ds.to_bytes();
        assert!(matches!(DatasetFile::from_bytes(&bytes[..bytes.len() - 3]), Err(DatagenError::CorruptFile(_))));
    }
}

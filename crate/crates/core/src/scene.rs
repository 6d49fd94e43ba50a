//! World state, dynamics and the hand-designed state features.

use crate::rotmath::{apply_offset, quat_from_wxyz, quat_to_wxyz, Dim, Rotation};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

/// Below this separation two points are treated as coincident.
pub const COINCIDENT_EPS: f64 = 1e-8;

/// Version written into every scene, trajectory and perturbation document.
pub const DOC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("scene mixes 2D and 3D poses")]
    MixedDimension,
    #[error("step size alpha must be positive, got {0}")]
    NonPositiveAlpha(f64),
    #[error("object {0} has a non-positive radius")]
    NonPositiveRadius(u32),
    #[error("duplicate object id {0}")]
    DuplicateId(u32),
    #[error("unsupported document version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed document: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub p: Vec<f64>,
    pub r: Rotation,
}

impl Pose {
    pub fn new(p: Vec<f64>, r: Rotation) -> Self {
        Pose { p, r }
    }

    /// Planar pose from `(x, y, heading)`.
    pub fn planar(x: f64, y: f64, theta: f64) -> Self {
        Pose::new(vec![x, y], Rotation::from_angle(theta))
    }

    pub fn dim(&self) -> Dim {
        self.r.dim()
    }

    fn is_consistent(&self) -> bool {
        self.p.len() == self.r.dim().n()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub id: u32,
    pub type_index: u32,
    pub pose: Pose,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub agent: Pose,
    pub agent_radius: f64,
    pub goal: SceneObject,
    pub objects: Vec<SceneObject>,
    pub alpha: f64,
}

impl Scene {
    pub fn new(
        agent: Pose,
        agent_radius: f64,
        goal: SceneObject,
        objects: Vec<SceneObject>,
        alpha: f64,
    ) -> Result<Self, SceneError> {
        let s = Scene {
            agent,
            agent_radius,
            goal,
            objects,
            alpha,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn dim(&self) -> Dim {
        self.agent.dim()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let d = self.dim();
        let poses = std::iter::once(&self.agent)
            .chain(std::iter::once(&self.goal.pose))
            .chain(self.objects.iter().map(|o| &o.pose));
        for p in poses {
            if p.dim() != d || !p.is_consistent() {
                return Err(SceneError::MixedDimension);
            }
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(SceneError::NonPositiveAlpha(self.alpha));
        }
        if self.agent_radius.is_nan() || self.agent_radius <= 0.0 {
            return Err(SceneError::NonPositiveRadius(u32::MAX));
        }
        let mut ids = HashSet::new();
        for o in std::iter::once(&self.goal).chain(&self.objects) {
            if o.radius.is_nan() || o.radius <= 0.0 {
                return Err(SceneError::NonPositiveRadius(o.id));
            }
            if !ids.insert(o.id) {
                return Err(SceneError::DuplicateId(o.id));
            }
        }
        Ok(())
    }

    /// Goal followed by the objects: every node with a position edge.
    pub fn nodes(&self) -> impl Iterator<Item = &SceneObject> {
        std::iter::once(&self.goal).chain(self.objects.iter())
    }

    pub fn with_agent(&self, agent: Pose) -> Scene {
        Scene {
            agent,
            ..self.clone()
        }
    }

    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.nodes().find(|o| o.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SceneDoc::from(self)).expect("scene serializes")
    }

    pub fn from_json(s: &str) -> Result<Scene, SceneError> {
        let doc: SceneDoc = serde_json::from_str(s).map_err(|e| SceneError::Malformed(e.to_string()))?;
        doc.try_into()
    }
}

/// Translation direction plus the next-step orientation target.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub v: Vec<f64>,
    pub w: Rotation,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub waypoints: Vec<Pose>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    /// Total arc length of the position path.
    pub fn path_length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| dist(&w[0].p, &w[1].p)).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&TrajectoryDoc::from(self)).expect("trajectory serializes")
    }

    pub fn from_json(s: &str) -> Result<Trajectory, SceneError> {
        let doc: TrajectoryDoc = serde_json::from_str(s).map_err(|e| SceneError::Malformed(e.to_string()))?;
        doc.try_into()
    }
}

/// `p' = p + alpha v`; the orientation target is adopted directly.
pub fn step_dynamics(x: &Pose, u: &Action, alpha: f64) -> Pose {
    let p = x.p.iter().zip(&u.v).map(|(p, v)| p + alpha * v).collect();
    Pose::new(p, u.w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionFeatures {
    /// Separation over the sum of radii.
    pub d_rel: f64,
    /// Unit vector from agent to object (zero when coincident).
    pub dir: Vec<f64>,
    /// Alignment of `dir` with the agent-to-goal direction, in `[-1, 1]`.
    pub g_dot: f64,
    /// Set when the agent sits on the object or on the goal.
    pub coincident: bool,
}

impl PositionFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dir.len() + 2);
        v.push(self.d_rel);
        v.extend_from_slice(&self.dir);
        v.push(self.g_dot);
        v
    }
}

pub fn position_state_features(agent: &Pose, agent_radius: f64, obj: &SceneObject, goal_pos: &[f64]) -> PositionFeatures {
    let delta = sub(&obj.pose.p, &agent.p);
    let sep = norm(&delta);
    let d_rel = sep / (agent_radius + obj.radius);
    if sep < COINCIDENT_EPS {
        return PositionFeatures {
            d_rel,
            dir: vec![0.0; delta.len()],
            g_dot: 0.0,
            coincident: true,
        };
    }
    let dir: Vec<f64> = delta.iter().map(|v| v / sep).collect();
    let to_goal = sub(goal_pos, &agent.p);
    let gn = norm(&to_goal);
    if gn < COINCIDENT_EPS {
        return PositionFeatures {
            d_rel,
            dir,
            g_dot: 0.0,
            coincident: true,
        };
    }
    let g_dot = dir.iter().zip(&to_goal).map(|(a, b)| a * b / gn).sum::<f64>().clamp(-1.0, 1.0);
    PositionFeatures {
        d_rel,
        dir,
        g_dot,
        coincident: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrientationFeatures {
    pub d_rel: f64,
    /// Encoded axes of the offset-rotated object orientation.
    pub mod_r: Vec<f64>,
}

pub fn orientation_state_features(agent: &Pose, agent_radius: f64, obj: &SceneObject, offset: &Rotation) -> OrientationFeatures {
    let d_rel = dist(&obj.pose.p, &agent.p) / (agent_radius + obj.radius);
    OrientationFeatures {
        d_rel,
        mod_r: apply_offset(&obj.pose.r, offset).encode(),
    }
}

pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

// ---- documents -------------------------------------------------------------

/// Rotation as a planar angle (radians) or a unit quaternion `[w, x, y, z]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RotationDoc {
    Angle(f64),
    Quat([f64; 4]),
}

impl From<&Rotation> for RotationDoc {
    fn from(r: &Rotation) -> Self {
        match r {
            Rotation::Planar(p) => RotationDoc::Angle(round_doc(p.angle())),
            Rotation::Spatial(_) => RotationDoc::Quat(quat_to_wxyz(&r.to_quat()).map(round_doc)),
        }
    }
}

/// Rotations are written at 1e-12 resolution so that the matrix round trip
/// (which perturbs the last bits) still reproduces the same text.
fn round_doc(x: f64) -> f64 {
    let r = (x * 1e12).round() / 1e12;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

impl From<&RotationDoc> for Rotation {
    fn from(d: &RotationDoc) -> Self {
        match d {
            RotationDoc::Angle(a) => Rotation::from_angle(*a),
            RotationDoc::Quat(q) => Rotation::from_quat(&quat_from_wxyz(*q)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseDoc {
    pub p: Vec<f64>,
    #[serde(rename = "R")]
    pub r: RotationDoc,
}

impl From<&Pose> for PoseDoc {
    fn from(p: &Pose) -> Self {
        PoseDoc {
            p: p.p.clone(),
            r: (&p.r).into(),
        }
    }
}

impl TryFrom<&PoseDoc> for Pose {
    type Error = SceneError;
    fn try_from(d: &PoseDoc) -> Result<Self, SceneError> {
        let pose = Pose::new(d.p.clone(), (&d.r).into());
        if !pose.is_consistent() {
            return Err(SceneError::MixedDimension);
        }
        Ok(pose)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectDoc {
    pub id: u32,
    pub type_index: u32,
    pub pose: PoseDoc,
    pub radius: f64,
}

impl From<&SceneObject> for ObjectDoc {
    fn from(o: &SceneObject) -> Self {
        ObjectDoc {
            id: o.id,
            type_index: o.type_index,
            pose: (&o.pose).into(),
            radius: o.radius,
        }
    }
}

impl TryFrom<&ObjectDoc> for SceneObject {
    type Error = SceneError;
    fn try_from(d: &ObjectDoc) -> Result<Self, SceneError> {
        Ok(SceneObject {
            id: d.id,
            type_index: d.type_index,
            pose: (&d.pose).try_into()?,
            radius: d.radius,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneDoc {
    pub version: u32,
    pub agent: PoseDoc,
    pub agent_radius: f64,
    pub goal: ObjectDoc,
    pub objects: Vec<ObjectDoc>,
    pub alpha: f64,
}

impl From<&Scene> for SceneDoc {
    fn from(s: &Scene) -> Self {
        SceneDoc {
            version: DOC_VERSION,
            agent: (&s.agent).into(),
            agent_radius: s.agent_radius,
            goal: (&s.goal).into(),
            objects: s.objects.iter().map(Into::into).collect(),
            alpha: s.alpha,
        }
    }
}

impl TryFrom<SceneDoc> for Scene {
    type Error = SceneError;
    fn try_from(d: SceneDoc) -> Result<Self, SceneError> {
        if d.version != DOC_VERSION {
            return Err(SceneError::UnsupportedVersion(d.version));
        }
        Scene::new(
            (&d.agent).try_into()?,
            d.agent_radius,
            (&d.goal).try_into()?,
            d.objects.iter().map(TryInto::try_into).collect::<Result<_, _>>()?,
            d.alpha,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryDoc {
    pub version: u32,
    pub waypoints: Vec<PoseDoc>,
}

impl From<&Trajectory> for TrajectoryDoc {
    fn from(t: &Trajectory) -> Self {
        TrajectoryDoc {
            version: DOC_VERSION,
            waypoints: t.waypoints.iter().map(Into::into).collect(),
        }
    }
}

impl TryFrom<TrajectoryDoc> for Trajectory {
    type Error = SceneError;
    fn try_from(d: TrajectoryDoc) -> Result<Self, SceneError> {
        if d.version != DOC_VERSION {
            return Err(SceneError::UnsupportedVersion(d.version));
        }
        Ok(Trajectory {
            waypoints: d.waypoints.iter().map(TryInto::try_into).collect::<Result<_, _>>()?,
        })
    }
}

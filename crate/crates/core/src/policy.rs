//! The relation-network policy.
//!
//! Every node (goal, objects, and for orientation the start pose) is run
//! through a shared pair of MLPs: a feature net producing a candidate action
//! and a gate net producing an unconstrained scalar weight. The gated edges
//! are summed and normalized. Everything is built on a [`Tape`] so the same
//! code serves inference, teacher-forced training and differentiable rollouts.

use crate::grad::{GradError, Parameter, Tape, Var};
use crate::rotmath::{quat_from_wxyz, quat_to_wxyz, Dim, Rotation, EPS};
use crate::scene::{dist, step_dynamics, Action, Pose, Scene, SceneObject, Trajectory, COINCIDENT_EPS};
use nalgebra::UnitQuaternion;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Aggregated edge sums below this norm cannot be normalized.
pub const ZERO_SUM_EPS: f64 = 1e-12;

/// Type indices of the trained anchors.
pub mod anchors {
    pub const REPEL: u32 = 0;
    pub const ATTRACT: u32 = 1;
    pub const IGNORE: u32 = 2;
    pub const GOAL: u32 = 3;
    pub const START: u32 = 4;
    pub const ORIENT_IGNORE: u32 = 5;
    pub const ORIENT_CONSIDER: u32 = 6;
    pub const ALL: [u32; 7] = [REPEL, ATTRACT, IGNORE, GOAL, START, ORIENT_IGNORE, ORIENT_CONSIDER];
    /// First index free for scene-specific objects.
    pub const FIRST_FREE: u32 = 16;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("no preference feature for type index {0}")]
    MissingType(u32),
    #[error("edge sum vanished")]
    ZeroSum,
    #[error("orientation edges are degenerate")]
    DegenerateAxes,
    #[error("scene dimension {scene:?} does not match the network ({net:?})")]
    DimMismatch { scene: Dim, net: Dim },
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Network shape. Input widths follow from the dimension and latent sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub dim: Dim,
    pub k_p: usize,
    pub k_r: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl Architecture {
    pub fn new(dim: Dim) -> Self {
        Architecture {
            dim,
            k_p: 1,
            k_r: 1,
            hidden: 64,
            hidden_layers: 2,
        }
    }

    /// `[d_rel, dir.., g_dot, c_P..]`
    pub fn position_input(&self) -> usize {
        self.dim.n() + 2 + self.k_p
    }

    /// `[d_rel, mod_R.., c_R..]`
    pub fn orientation_input(&self) -> usize {
        1 + self.dim.w_len() + self.k_r
    }

    fn sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(std::iter::repeat_n(self.hidden, self.hidden_layers));
        s.push(output);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out x in`, row-major.
    pub w: Parameter,
    pub b: Parameter,
}

/// Tanh MLP with a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(name: &str, sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, io)| {
                let (n_in, n_out) = (io[0], io[1]);
                let lim = (6.0 / (n_in + n_out) as f64).sqrt();
                let w = (0..n_in * n_out).map(|_| rng.random_range(-lim..lim)).collect();
                Dense {
                    w: Parameter::new(format!("{name}.{i}.w"), w, n_out, n_in),
                    b: Parameter::vector(format!("{name}.{i}.b"), vec![0.0; n_out]),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].w.cols
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().expect("non-empty mlp").w.rows
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b])
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(&l.w), tape.param(&l.b))
                } else {
                    (
                        tape.constant(l.w.value.clone(), l.w.rows, l.w.cols),
                        tape.constant(l.b.value.clone(), l.b.rows, l.b.cols),
                    )
                }
            })
            .collect();
        BoundMlp { layers }
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, GradError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matvec(w, h)?;
            let z = tape.add(z, b)?;
            h = if i == last { z } else { tape.tanh(z) };
        }
        Ok(h)
    }
}

/// Feature net `f1` and gate net `f2` for one kind of edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationNet {
    pub feature: Mlp,
    pub gate: Mlp,
}

impl RelationNet {
    fn new<R: Rng + ?Sized>(name: &str, arch: &Architecture, input: usize, output: usize, rng: &mut R) -> Self {
        RelationNet {
            feature: Mlp::new(&format!("{name}.f1"), &arch.sizes(input, output), rng),
            gate: Mlp::new(&format!("{name}.f2"), &arch.sizes(input, 1), rng),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.feature.params().chain(self.gate.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.feature.params_mut().chain(self.gate.params_mut())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundRelation {
        BoundRelation {
            feature: self.feature.bind(tape, trainable),
            gate: self.gate.bind(tape, trainable),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundRelation {
    pub feature: BoundMlp,
    pub gate: BoundMlp,
}

impl BoundRelation {
    /// Gated edge `alpha~ * e~` plus the raw gate value.
    pub fn edge(&self, tape: &mut Tape, input: Var) -> Result<(Var, Var), GradError> {
        let e = self.feature.forward(tape, input)?;
        let a = self.gate.forward(tape, input)?;
        Ok((tape.scale(e, a)?, a))
    }
}

/// Weights of both relation networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationNetParams {
    pub arch: Architecture,
    pub position: RelationNet,
    pub orientation: RelationNet,
}

impl RelationNetParams {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        RelationNetParams {
            arch,
            position: RelationNet::new("pos", &arch, arch.position_input(), arch.dim.n(), rng),
            orientation: RelationNet::new("rot", &arch, arch.orientation_input(), arch.dim.w_len(), rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundNets {
        BoundNets {
            dim: self.arch.dim,
            position: self.position.bind(tape, trainable),
            orientation: self.orientation.bind(tape, trainable),
        }
    }

    /// Raw bit patterns of every weight, for exact-equality checks.
    pub fn fingerprint(&self) -> Vec<u64> {
        self.position
            .params()
            .chain(self.orientation.params())
            .flat_map(|p| p.value.iter().map(|v| v.to_bits()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct BoundNets {
    pub dim: Dim,
    pub position: BoundRelation,
    pub orientation: BoundRelation,
}

/// Learned rotational offset: an angle in the plane, a quaternion in space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RotOffset {
    Planar(f64),
    Spatial([f64; 4]),
}

impl RotOffset {
    pub fn identity(dim: Dim) -> Self {
        match dim {
            Dim::Two => RotOffset::Planar(0.0),
            Dim::Three => RotOffset::Spatial([1.0, 0.0, 0.0, 0.0]),
        }
    }

    pub fn from_rotation(r: &Rotation) -> Self {
        match r {
            Rotation::Planar(p) => RotOffset::Planar(p.angle()),
            Rotation::Spatial(_) => RotOffset::Spatial(quat_to_wxyz(&r.to_quat())),
        }
    }

    pub fn to_rotation(&self) -> Rotation {
        match self {
            RotOffset::Planar(a) => Rotation::from_angle(*a),
            RotOffset::Spatial(q) => Rotation::from_quat(&quat_from_wxyz(*q)),
        }
    }

    pub fn as_vec(&self) -> Vec<f64> {
        match self {
            RotOffset::Planar(a) => vec![*a],
            RotOffset::Spatial(q) => q.to_vec(),
        }
    }

    pub fn from_slice(dim: Dim, v: &[f64]) -> Self {
        match dim {
            Dim::Two => RotOffset::Planar(v[0]),
            Dim::Three => RotOffset::Spatial([v[0], v[1], v[2], v[3]]),
        }
    }

    /// Projects a quaternion back onto the unit sphere; no-op in the plane.
    pub fn renormalized(&self) -> Self {
        match self {
            RotOffset::Planar(a) => RotOffset::Planar(*a),
            RotOffset::Spatial(q) => {
                let u: UnitQuaternion<f64> = quat_from_wxyz(*q);
                RotOffset::Spatial(quat_to_wxyz(&u))
            }
        }
    }
}

/// Per-object-type preference vector `c = [c_P, c_R_latent, c_R_delta]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceFeature {
    pub c_p: Vec<f64>,
    pub c_r_latent: Vec<f64>,
    pub c_r_delta: RotOffset,
}

impl PreferenceFeature {
    pub fn new(c_p: Vec<f64>, c_r_latent: Vec<f64>, c_r_delta: RotOffset) -> Self {
        PreferenceFeature {
            c_p,
            c_r_latent,
            c_r_delta,
        }
    }
}

/// Type index to preference feature.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PreferenceTable {
    pub entries: BTreeMap<u32, PreferenceFeature>,
}

impl PreferenceTable {
    /// Anchor table with small random latents and identity offsets.
    pub fn anchors<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let mut entries = BTreeMap::new();
        for idx in anchors::ALL {
            let c_p = (0..arch.k_p).map(|_| rng.random_range(-0.1..0.1)).collect();
            let c_r = (0..arch.k_r).map(|_| rng.random_range(-0.1..0.1)).collect();
            entries.insert(idx, PreferenceFeature::new(c_p, c_r, RotOffset::identity(arch.dim)));
        }
        PreferenceTable { entries }
    }

    pub fn get(&self, idx: u32) -> Result<&PreferenceFeature, PolicyError> {
        self.entries.get(&idx).ok_or(PolicyError::MissingType(idx))
    }

    pub fn insert(&mut self, idx: u32, f: PreferenceFeature) {
        self.entries.insert(idx, f);
    }

    pub fn covers(&self, scene: &Scene) -> Result<(), PolicyError> {
        self.get(anchors::START)?;
        for o in scene.nodes() {
            self.get(o.type_index)?;
        }
        Ok(())
    }

    /// Binds every entry; entries listed in `trainable` become variables.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(u32) -> bool) -> TableBinding {
        let entries = self
            .entries
            .iter()
            .map(|(&idx, f)| {
                let t = trainable(idx);
                let mk = |tape: &mut Tape, v: Vec<f64>| {
                    let n = v.len();
                    if t {
                        tape.var(v, n, 1)
                    } else {
                        tape.constant(v, n, 1)
                    }
                };
                let c_p = mk(tape, f.c_p.clone());
                let c_r_latent = mk(tape, f.c_r_latent.clone());
                // the start node's offset is pinned to identity
                let delta = if idx == anchors::START || !t {
                    None
                } else {
                    Some(mk(tape, f.c_r_delta.as_vec()))
                };
                (
                    idx,
                    BoundPreference {
                        c_p,
                        c_r_latent,
                        delta,
                        fixed_delta: f.c_r_delta,
                    },
                )
            })
            .collect();
        TableBinding { entries }
    }
}

/// A preference feature on a tape. `delta` is `None` when the offset is a constant.
#[derive(Debug, Clone, Copy)]
pub struct BoundPreference {
    pub c_p: Var,
    pub c_r_latent: Var,
    pub delta: Option<Var>,
    pub fixed_delta: RotOffset,
}

#[derive(Debug, Clone)]
pub struct TableBinding {
    pub entries: BTreeMap<u32, BoundPreference>,
}

impl TableBinding {
    pub fn get(&self, idx: u32) -> Result<&BoundPreference, PolicyError> {
        self.entries.get(&idx).ok_or(PolicyError::MissingType(idx))
    }
}

/// Position edge for one node: `b_P` from the (possibly differentiable)
/// agent position, concatenated with `c_P`.
fn position_edge(
    tape: &mut Tape,
    net: &BoundRelation,
    pref: &BoundPreference,
    agent_radius: f64,
    node: &SceneObject,
    agent_p: Var,
    goal_dir: Option<Var>,
) -> Result<(Var, Var), PolicyError> {
    let obj_p = tape.vector(&node.pose.p);
    let delta = tape.sub(obj_p, agent_p)?;
    let sep = tape.l2norm(delta);
    let d_rel = tape.scale_const(sep, 1.0 / (agent_radius + node.radius));
    let n = node.pose.p.len();
    let (dir, g_dot) = if tape.scalar(sep) < COINCIDENT_EPS {
        (tape.vector(&vec![0.0; n]), tape.scalar_const(0.0))
    } else {
        let dir = tape.normalize(delta)?;
        let g = match goal_dir {
            Some(gd) => tape.dot(dir, gd)?,
            None => tape.scalar_const(0.0),
        };
        (dir, g)
    };
    let input = tape.concat(&[d_rel, dir, g_dot, pref.c_p]);
    Ok(net.edge(tape, input)?)
}

/// Offset-rotated node orientation, encoded as the action vector.
fn modified_orientation(tape: &mut Tape, dim: Dim, node_r: &Rotation, pref: &BoundPreference, pinned: bool) -> Result<Var, PolicyError> {
    match (pref.delta, pinned) {
        (Some(delta), false) => match (dim, node_r) {
            (Dim::Two, Rotation::Planar(r)) => {
                let base = tape.scalar_const(r.angle());
                let th = tape.add(base, delta)?;
                Ok(tape.cos_sin(th))
            }
            (Dim::Three, Rotation::Spatial(m)) => {
                let qn = tape.normalize(delta)?;
                let rq = tape.quat_to_mat(qn)?;
                let rows: Vec<f64> = (0..3).flat_map(|i| (0..3).map(move |j| m[(i, j)])).collect();
                let base = tape.constant(rows, 3, 3);
                let prod = tape.matmul(base, rq)?;
                Ok(tape.gather(prod, &[0, 3, 6, 1, 4, 7]))
            }
            _ => Err(PolicyError::DimMismatch {
                scene: node_r.dim(),
                net: dim,
            }),
        },
        _ => {
            let off = if pinned {
                Rotation::identity(dim)
            } else {
                pref.fixed_delta.to_rotation()
            };
            Ok(tape.vector(&node_r.compose(&off).encode()))
        }
    }
}

fn orientation_edge(
    tape: &mut Tape,
    dim: Dim,
    net: &BoundRelation,
    pref: &BoundPreference,
    agent_radius: f64,
    node_p: &[f64],
    node_r: &Rotation,
    node_radius: f64,
    agent_p: Var,
    pinned: bool,
) -> Result<(Var, Var), PolicyError> {
    let np = tape.vector(node_p);
    let delta = tape.sub(np, agent_p)?;
    let sep = tape.l2norm(delta);
    let d_rel = tape.scale_const(sep, 1.0 / (agent_radius + node_radius));
    let mod_r = modified_orientation(tape, dim, node_r, pref, pinned)?;
    let input = tape.concat(&[d_rel, mod_r, pref.c_r_latent]);
    Ok(net.edge(tape, input)?)
}

/// Per-node gates of the last forward, in node order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GateTrace {
    pub position: Vec<f64>,
    pub orientation: Vec<f64>,
}

/// Predicted translation direction, or `None` when the edge sum vanishes.
pub fn position_action(
    tape: &mut Tape,
    net: &BoundRelation,
    table: &TableBinding,
    scene: &Scene,
    agent_p: Var,
    trace: Option<&mut Vec<f64>>,
) -> Result<Option<Var>, PolicyError> {
    let goal_p = tape.vector(&scene.goal.pose.p);
    let to_goal = tape.sub(goal_p, agent_p)?;
    let goal_sep = tape.l2norm(to_goal);
    let goal_dir = if tape.scalar(goal_sep) < COINCIDENT_EPS {
        None
    } else {
        Some(tape.normalize(to_goal)?)
    };
    let mut edges = Vec::with_capacity(scene.objects.len() + 1);
    let mut gates = Vec::new();
    for node in scene.nodes() {
        let pref = table.get(node.type_index)?;
        let (e, a) = position_edge(tape, net, pref, scene.agent_radius, node, agent_p, goal_dir)?;
        edges.push(e);
        gates.push(tape.scalar(a));
    }
    if let Some(t) = trace {
        *t = gates;
    }
    let sum = tape.add_all(&edges)?;
    if crate::grad::norm(tape.value(sum)) < ZERO_SUM_EPS {
        return Ok(None);
    }
    Ok(Some(tape.normalize(sum)?))
}

/// Predicted next orientation encoding, or `None` on degenerate aggregation.
/// `start` is the pose the episode started from; it acts as an extra node
/// with an identity offset.
pub fn orientation_action(
    tape: &mut Tape,
    dim: Dim,
    net: &BoundRelation,
    table: &TableBinding,
    scene: &Scene,
    start: &Pose,
    agent_p: Var,
    trace: Option<&mut Vec<f64>>,
) -> Result<Option<Var>, PolicyError> {
    
    let mut edges = Vec::with_capacity(scene.objects.len() + 2);
    let mut gates = Vec::new();
    let start_pref = table.get(anchors::START)?;
    let (e, a) = orientation_edge(
        tape,
        dim,
        net,
        start_pref,
        scene.agent_radius,
        &start.p,
        &start.r,
        scene.goal.radius,
        agent_p,
        true,
    )?;
    edges.push(e);
    gates.push(tape.scalar(a));
    for node in scene.nodes() {
        let pref = table.get(node.type_index)?;
        let (e, a) = orientation_edge(
            tape,
            dim,
            net,
            pref,
            scene.agent_radius,
            &node.pose.p,
            &node.pose.r,
            node.radius,
            agent_p,
            false,
        )?;
        edges.push(e);
        gates.push(tape.scalar(a));
    }
    if let Some(t) = trace {
        *t = gates;
    }
    let sum = tape.add_all(&edges)?;
    aggregate_orientation_on_tape(tape, dim, sum)
}

/// Normalize (2D) or normalize halves then Gram-Schmidt (3D).
pub fn aggregate_orientation_on_tape(tape: &mut Tape, dim: Dim, sum: Var) -> Result<Option<Var>, PolicyError> {
    match dim {
        Dim::Two => {
            if crate::grad::norm(tape.value(sum)) < EPS {
                return Ok(None);
            }
            Ok(Some(tape.normalize(sum)?))
        }
        Dim::Three => {
            let a = tape.slice(sum, 0, 3);
            let b = tape.slice(sum, 3, 3);
            if crate::grad::norm(tape.value(a)) < EPS || crate::grad::norm(tape.value(b)) < EPS {
                return Ok(None);
            }
            let rx = tape.normalize(a)?;
            let by = tape.normalize(b)?;
            // rx is unit length, so the projection denominator is 1
            let num = tape.dot(rx, by)?;
            let par = tape.scale(rx, num)?;
            let proj = tape.sub(by, par)?;
            if crate::grad::norm(tape.value(proj)) < EPS {
                return Ok(None);
            }
            let ry = tape.normalize(proj)?;
            Ok(Some(tape.concat(&[rx, ry])))
        }
    }
}

/// Plain-value aggregation of position edges.
pub fn aggregate_position(edges: &[Vec<f64>]) -> Result<Vec<f64>, PolicyError> {
    let n = edges.first().map(|e| e.len()).ok_or(PolicyError::ZeroSum)?;
    let mut s = vec![0.0; n];
    for e in edges {
        for (a, b) in s.iter_mut().zip(e) {
            *a += b;
        }
    }
    let m = crate::grad::norm(&s);
    if m < ZERO_SUM_EPS {
        return Err(PolicyError::ZeroSum);
    }
    Ok(s.into_iter().map(|v| v / m).collect())
}

/// Plain-value aggregation of orientation edges.
pub fn aggregate_orientation(dim: Dim, edges: &[Vec<f64>]) -> Result<Rotation, PolicyError> {
    let n = edges.first().map(|e| e.len()).ok_or(PolicyError::DegenerateAxes)?;
    let mut s = vec![0.0; n];
    for e in edges {
        for (a, b) in s.iter_mut().zip(e) {
            *a += b;
        }
    }
    Rotation::decode(dim, &s).map_err(|_| PolicyError::DegenerateAxes)
}

/// Single-edge evaluation on plain values (used by diagnostics and tests).
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeValue {
    pub edge: Vec<f64>,
    pub gate: f64,
}

pub fn edge_position(b_p: &[f64], c_p: &[f64], params: &RelationNetParams) -> Result<EdgeValue, PolicyError> {
    let mut tape = Tape::new();
    let net = params.position.bind(&mut tape, false);
    let x: Vec<f64> = b_p.iter().chain(c_p).copied().collect();
    let xv = tape.vector(&x);
    let (e, a) = net.edge(&mut tape, xv)?;
    Ok(EdgeValue {
        edge: tape.value(e).to_vec(),
        gate: tape.scalar(a),
    })
}

pub fn edge_orientation(b_r: &[f64], c_r_latent: &[f64], params: &RelationNetParams) -> Result<EdgeValue, PolicyError> {
    let mut tape = Tape::new();
    let net = params.orientation.bind(&mut tape, false);
    let x: Vec<f64> = b_r.iter().chain(c_r_latent).copied().collect();
    let xv = tape.vector(&x);
    let (e, a) = net.edge(&mut tape, xv)?;
    Ok(EdgeValue {
        edge: tape.value(e).to_vec(),
        gate: tape.scalar(a),
    })
}

fn check_dim(scene: &Scene, params: &RelationNetParams) -> Result<(), PolicyError> {
    if scene.dim() != params.arch.dim {
        return Err(PolicyError::DimMismatch {
            scene: scene.dim(),
            net: params.arch.dim,
        });
    }
    Ok(())
}

/// One policy evaluation at the scene's agent pose, which also serves as the
/// start node. Errors are the hold-in-place conditions.
pub fn policy_forward(scene: &Scene, table: &PreferenceTable, params: &RelationNetParams) -> Result<Action, PolicyError> {
    policy_forward_from(scene, &scene.agent, table, params)
}

/// Like [`policy_forward`] with an explicit start pose.
pub fn policy_forward_from(scene: &Scene, start: &Pose, table: &PreferenceTable, params: &RelationNetParams) -> Result<Action, PolicyError> {
    check_dim(scene, params)?;
    let mut tape = Tape::new();
    let nets = params.bind(&mut tape, false);
    let tb = table.bind(&mut tape, &|_| false);
    let ap = tape.vector(&scene.agent.p);
    let v = position_action(&mut tape, &nets.position, &tb, scene, ap, None)?.ok_or(PolicyError::ZeroSum)?;
    let w = orientation_action(&mut tape, nets.dim, &nets.orientation, &tb, scene, start, ap, None)?.ok_or(PolicyError::DegenerateAxes)?;
    Ok(Action {
        v: tape.value(v).to_vec(),
        w: Rotation::decode(params.arch.dim, tape.value(w)).map_err(|_| PolicyError::DegenerateAxes)?,
    })
}

/// Gates of every node at the scene's agent pose: position over `[goal, objects..]`,
/// orientation over `[start, goal, objects..]`.
pub fn gate_trace(scene: &Scene, table: &PreferenceTable, params: &RelationNetParams) -> Result<GateTrace, PolicyError> {
    check_dim(scene, params)?;
    let mut tape = Tape::new();
    let nets = params.bind(&mut tape, false);
    let tb = table.bind(&mut tape, &|_| false);
    let ap = tape.vector(&scene.agent.p);
    let mut tr = GateTrace::default();
    position_action(&mut tape, &nets.position, &tb, scene, ap, Some(&mut tr.position))?;
    orientation_action(&mut tape, nets.dim, &nets.orientation, &tb, scene, &scene.agent, ap, Some(&mut tr.orientation))?;
    Ok(tr)
}

/// Rollout recorded on a tape.
#[derive(Debug, Clone)]
pub struct TapeRollout {
    /// Agent position before each step, plus the final one.
    pub positions: Vec<Var>,
    pub v_hat: Vec<Option<Var>>,
    pub w_hat: Vec<Option<Var>>,
    pub trajectory: Trajectory,
}

/// Open-loop rollout on a caller-provided tape; objects are static and the
/// start node is the scene's agent pose. Vanishing aggregations hold the
/// previous position or orientation for that step.
pub fn rollout_on_tape(
    tape: &mut Tape,
    nets: &BoundNets,
    table: &TableBinding,
    scene: &Scene,
    steps: usize,
) -> Result<TapeRollout, PolicyError> {
    let dim = nets.dim;
    let start = scene.agent.clone();
    let mut p = tape.vector(&start.p);
    let mut pose = start.clone();
    let mut out = TapeRollout {
        positions: vec![p],
        v_hat: Vec::with_capacity(steps),
        w_hat: Vec::with_capacity(steps),
        trajectory: Trajectory {
            waypoints: vec![start.clone()],
        },
    };
    for _ in 0..steps {
        let v = position_action(tape, &nets.position, table, scene, p, None)?;
        let w = orientation_action(tape, dim, &nets.orientation, table, scene, &start, p, None)?;
        if let Some(v) = v {
            let step = tape.scale_const(v, scene.alpha);
            p = tape.add(p, step)?;
        }
        let r = match w {
            Some(w) => Rotation::decode(dim, tape.value(w)).unwrap_or(pose.r),
            None => pose.r,
        };
        pose = Pose::new(tape.value(p).to_vec(), r);
        out.positions.push(p);
        out.v_hat.push(v);
        out.w_hat.push(w);
        out.trajectory.waypoints.push(pose.clone());
    }
    Ok(out)
}

/// Open-loop rollout of `steps` dynamics steps from the scene's agent pose.
pub fn rollout_open_loop(scene: &Scene, table: &PreferenceTable, params: &RelationNetParams, steps: usize) -> Result<Trajectory, PolicyError> {
    check_dim(scene, params)?;
    let start = scene.agent.clone();
    let mut traj = Trajectory {
        waypoints: vec![start.clone()],
    };
    let mut pose = start.clone();
    for _ in 0..steps {
        // a fresh tape per step keeps memory flat; nothing is differentiated
        let mut tape = Tape::new();
        let nets = params.bind(&mut tape, false);
        let tb = table.bind(&mut tape, &|_| false);
        let cur = scene.with_agent(pose.clone());
        let ap = tape.vector(&pose.p);
        let v = position_action(&mut tape, &nets.position, &tb, &cur, ap, None)?;
        let w = orientation_action(&mut tape, nets.dim, &nets.orientation, &tb, &cur, &start, ap, None)?;
        let v = v.map(|v| tape.value(v).to_vec());
        let w = w.and_then(|w| Rotation::decode(params.arch.dim, tape.value(w)).ok());
        pose = match v {
            Some(v) => step_dynamics(&pose, &Action { v, w: w.unwrap_or(pose.r) }, scene.alpha),
            None => Pose::new(pose.p.clone(), w.unwrap_or(pose.r)),
        };
        traj.waypoints.push(pose.clone());
    }
    Ok(traj)
}

/// Rolls out until the agent is within `alpha` of the goal or `max_steps` elapse.
pub fn rollout_to_goal(scene: &Scene, table: &PreferenceTable, params: &RelationNetParams, max_steps: usize) -> Result<Trajectory, PolicyError> {
    let full = rollout_open_loop(scene, table, params, max_steps)?;
    let g = &scene.goal.pose.p;
    let cut = full
        .waypoints
        .iter()
        .position(|w| dist(&w.p, g) <= scene.alpha)
        .map(|i| i + 1)
        .unwrap_or(full.waypoints.len());
    Ok(Trajectory {
        waypoints: full.waypoints[..cut].to_vec(),
    })
}

//! One-shot adaptation from a single perturbation.
//!
//! The perturbation is reduced to its endpoints, interpolated into an expert
//! segment, and the per-object preference features are optimized through a
//! differentiable open-loop rollout while the relation networks stay frozen.

use crate::grad::{Adam, Parameter, Tape, Var};
use crate::par::Exec;
use crate::policy::{anchors, rollout_on_tape, PolicyError, PreferenceFeature, PreferenceTable, RelationNetParams, RotOffset};
use crate::rotmath::{geodesic_angle, interpolate, random_rotation, Dim, Rotation, EPS};
use crate::scene::{dist, PoseDoc, Pose, Scene, SceneDoc, SceneError, DOC_VERSION};
use crate::trainer::rotation_loss_offset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdaptError {
    #[error("perturbation start and end poses coincide")]
    DegeneratePerturbation,
    #[error("invalid perturbation: {0}")]
    InvalidRecord(String),
    #[error("invalid adapt config: {0}")]
    InvalidConfig(String),
    #[error("no restart improved on the initial loss {initial}")]
    NoProgress { initial: f64, best: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// A timestamped pose sequence imposed on the agent, with the scene at its start.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationRecord {
    pub poses: Vec<(f64, Pose)>,
    pub scene_snapshot: Scene,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimedPoseDoc {
    pub t: f64,
    pub p: Vec<f64>,
    #[serde(rename = "R")]
    pub r: crate::scene::RotationDoc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationDoc {
    pub version: u32,
    pub scene_snapshot: SceneDoc,
    pub poses: Vec<TimedPoseDoc>,
}

impl PerturbationRecord {
    pub fn new(poses: Vec<(f64, Pose)>, scene_snapshot: Scene) -> Result<Self, AdaptError> {
        let r = PerturbationRecord { poses, scene_snapshot };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), AdaptError> {
        if self.poses.len() < 2 {
            return Err(AdaptError::InvalidRecord("at least two poses are required".into()));
        }
        if self.poses.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(AdaptError::InvalidRecord("timestamps must strictly increase".into()));
        }
        let dim = self.scene_snapshot.dim();
        if self.poses.iter().any(|(_, p)| p.dim() != dim || p.p.len() != dim.n()) {
            return Err(AdaptError::InvalidRecord("pose dimension differs from the scene".into()));
        }
        Ok(())
    }

    pub fn start(&self) -> &Pose {
        &self.poses[0].1
    }

    pub fn end(&self) -> &Pose {
        &self.poses[self.poses.len() - 1].1
    }

    pub fn to_doc(&self) -> PerturbationDoc {
        PerturbationDoc {
            version: DOC_VERSION,
            scene_snapshot: (&self.scene_snapshot).into(),
            poses: self
                .poses
                .iter()
                .map(|(t, p)| {
                    let d: PoseDoc = p.into();
                    TimedPoseDoc { t: *t, p: d.p, r: d.r }
                })
                .collect(),
        }
    }

    pub fn from_doc(d: PerturbationDoc) -> Result<Self, AdaptError> {
        if d.version != DOC_VERSION {
            return Err(SceneError::UnsupportedVersion(d.version).into());
        }
        let scene: Scene = d.scene_snapshot.try_into()?;
        let poses = d
            .poses
            .into_iter()
            .map(|tp| {
                let pd = PoseDoc { p: tp.p, r: tp.r };
                Pose::try_from(&pd).map(|p| (tp.t, p))
            })
            .collect::<Result<Vec<_>, _>>()?;
        PerturbationRecord::new(poses, scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("document serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, AdaptError> {
        let d: PerturbationDoc = serde_json::from_str(s).map_err(|e| AdaptError::InvalidRecord(e.to_string()))?;
        PerturbationRecord::from_doc(d)
    }
}

/// Interpolated expert poses and per-step targets. `v[k]` is `None` for
/// steps without translation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSegment {
    pub poses: Vec<Pose>,
    pub v: Vec<Option<Vec<f64>>>,
    pub w: Vec<Rotation>,
}

impl ExpertSegment {
    pub fn steps(&self) -> usize {
        self.w.len()
    }
}

/// Endpoint reduction: straight-line positions at spacing at most `alpha`,
/// orientations by shortest-arc interpolation.
pub fn expert_from_perturbation(record: &PerturbationRecord, alpha: f64) -> Result<ExpertSegment, AdaptError> {
    record.validate()?;
    let a = record.start();
    let b = record.end();
    let d = dist(&a.p, &b.p);
    if d < EPS && geodesic_angle(&a.r, &b.r) < EPS {
        return Err(AdaptError::DegeneratePerturbation);
    }
    let steps = ((d / alpha) - 1e-9).ceil().max(1.0) as usize;
    let poses: Vec<Pose> = (0..=steps)
        .map(|k| {
            let t = k as f64 / steps as f64;
            let p = a.p.iter().zip(&b.p).map(|(x, y)| x + t * (y - x)).collect();
            Pose::new(p, interpolate(&a.r, &b.r, t))
        })
        .collect();
    let v = poses
        .windows(2)
        .map(|w| {
            let delta: Vec<f64> = w[1].p.iter().zip(&w[0].p).map(|(x, y)| x - y).collect();
            let n = crate::grad::norm(&delta);
            (n > EPS).then(|| delta.iter().map(|x| x / n).collect())
        })
        .collect();
    let w = poses[1..].iter().map(|p| p.r).collect();
    Ok(ExpertSegment { poses, v, w })
}

/// Fresh feature for an unseen object: `c_P` halfway between repel and
/// attract, `c_R` latent halfway between the orientation anchors, identity offset.
pub fn init_ignore(table: &PreferenceTable) -> Result<PreferenceFeature, PolicyError> {
    let repel = table.get(anchors::REPEL)?;
    let attract = table.get(anchors::ATTRACT)?;
    let ignore = table.get(anchors::ORIENT_IGNORE)?;
    let consider = table.get(anchors::ORIENT_CONSIDER)?;
    let c_p = repel.c_p.iter().zip(&attract.c_p).map(|(a, b)| 0.5 * (a + b)).collect();
    // the trained ignore anchor sits where the gate is saturated and the
    // latent gets no gradient, so start halfway towards consider instead
    let c_r = ignore.c_r_latent.iter().zip(&consider.c_r_latent).map(|(a, b)| 0.5 * (a + b)).collect();
    let dim = match repel.c_r_delta {
        RotOffset::Planar(_) => Dim::Two,
        RotOffset::Spatial(_) => Dim::Three,
    };
    Ok(PreferenceFeature::new(c_p, c_r, RotOffset::identity(dim)))
}

/// Copy of `table` with an ignore-initialized entry for every scene type index it lacks.
pub fn instance_table(table: &PreferenceTable, scene: &Scene) -> Result<PreferenceTable, PolicyError> {
    let mut out = table.clone();
    let fresh = init_ignore(table)?;
    for o in scene.nodes() {
        out.entries.entry(o.type_index).or_insert_with(|| fresh.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub restarts: usize,
    pub steps_per_restart: usize,
    pub lr: f64,
    pub time_budget: f64,
    /// Rollout length; `None` matches the expert segment.
    pub rollout_horizon: Option<usize>,
    pub adapt_goal: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            restarts: 8,
            steps_per_restart: 50,
            lr: 0.1,
            time_budget: 1.0,
            rollout_horizon: None,
            adapt_goal: true,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        if self.restarts == 0 {
            return Err(AdaptError::InvalidConfig("restarts must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.time_budget > 0.0) {
            return Err(AdaptError::InvalidConfig("lr and time_budget must be positive".into()));
        }
        if self.rollout_horizon == Some(0) {
            return Err(AdaptError::InvalidConfig("rollout_horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Progress notification, one per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptProgress {
    pub restart: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub restart: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub table: PreferenceTable,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_restart: usize,
    pub restarts: Vec<RestartSummary>,
    pub wall_s: f64,
    pub budget_exhausted: bool,
}

impl AdaptOutcome {
    pub fn total_steps(&self) -> usize {
        self.restarts.iter().map(|r| r.steps).sum()
    }
}

/// Loss and gradients of the rollout objective with respect to the adapted entries.
pub struct RolloutObjective<'a> {
    pub scene: Scene,
    pub segment: &'a ExpertSegment,
    pub params: &'a RelationNetParams,
    pub adapted: Vec<u32>,
    pub horizon: usize,
}

impl<'a> RolloutObjective<'a> {
    /// `L_P + L_R` of the open-loop rollout against the segment; gradients
    /// ordered as `[c_P, c_R_latent, c_R_delta]` per adapted index.
    pub fn evaluate(&self, table: &PreferenceTable, with_grad: bool) -> Result<(f64, Vec<Vec<f64>>), PolicyError> {
        let dim = self.params.arch.dim;
        let mut tape = Tape::new();
        let nets = self.params.bind(&mut tape, false);
        let adapted: BTreeSet<u32> = self.adapted.iter().copied().collect();
        let tb = table.bind(&mut tape, &|i| adapted.contains(&i));
        let roll = rollout_on_tape(&mut tape, &nets, &tb, &self.scene, self.horizon)?;
        let k = rotation_loss_offset(dim);
        let mut p_terms: Vec<Var> = Vec::new();
        let mut r_terms: Vec<Var> = Vec::new();
        for step in 0..self.horizon {
            // beyond the segment the last target is held
            let j = step.min(self.segment.steps() - 1);
            if let Some(target) = &self.segment.v[j] {
                let term = match roll.v_hat[step] {
                    Some(v) => {
                        let tv = tape.vector(target);
                        let d = tape.dot(tv, v)?;
                        tape.scale_const(d, -1.0)
                    }
                    None => tape.scalar_const(0.0),
                };
                p_terms.push(term);
            }
            let tw = self.segment.w[j].encode();
            let w = match roll.w_hat[step] {
                Some(w) => w,
                None => tape.vector(&roll.trajectory.waypoints[step].r.encode()),
            };
            let tv = tape.vector(&tw);
            let d = tape.dot(tv, w)?;
            r_terms.push(tape.scale_const(d, -1.0));
        }
        let mut total = tape.scalar_const(k);
        if !p_terms.is_empty() {
            let s = tape.add_all(&p_terms)?;
            let m = tape.scale_const(s, 1.0 / p_terms.len() as f64);
            let one = tape.scalar_const(1.0);
            let lp = tape.add(one, m)?;
            total = tape.add(total, lp)?;
        }
        let s = tape.add_all(&r_terms)?;
        let m = tape.scale_const(s, 1.0 / r_terms.len() as f64);
        let loss = tape.add(total, m)?;
        let value = tape.scalar(loss);
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss)?;
        let mut grads = Vec::new();
        for idx in &self.adapted {
            let b = tb.get(*idx)?;
            let f = table.get(*idx)?;
            grads.push(g.wrt_or_zero(b.c_p, f.c_p.len()));
            grads.push(g.wrt_or_zero(b.c_r_latent, f.c_r_latent.len()));
            grads.push(match b.delta {
                Some(d) => g.wrt_or_zero(d, dim.offset_len()),
                None => vec![0.0; dim.offset_len()],
            });
        }
        Ok((value, grads))
    }
}

/// Type indices adapted for a scene: every object's, plus the goal's if enabled.
pub fn adapted_indices(scene: &Scene, adapt_goal: bool) -> Vec<u32> {
    let mut set: BTreeSet<u32> = scene.objects.iter().map(|o| o.type_index).collect();
    if adapt_goal {
        set.insert(scene.goal.type_index);
    }
    set.remove(&anchors::START);
    set.into_iter().collect()
}

fn to_params(table: &PreferenceTable, adapted: &[u32]) -> Vec<Parameter> {
    adapted
        .iter()
        .flat_map(|i| {
            let f = &table.entries[i];
            [
                Parameter::vector("c_p", f.c_p.clone()),
                Parameter::vector("c_r_latent", f.c_r_latent.clone()),
                Parameter::vector("c_r_delta", f.c_r_delta.as_vec()),
            ]
        })
        .collect()
}

fn write_params(table: &mut PreferenceTable, adapted: &[u32], params: &[Parameter], dim: Dim) {
    for (k, i) in adapted.iter().enumerate() {
        let f = table.entries.get_mut(i).expect("adapted entry present");
        f.c_p = params[3 * k].value.clone();
        f.c_r_latent = params[3 * k + 1].value.clone();
        f.c_r_delta = RotOffset::from_slice(dim, &params[3 * k + 2].value).renormalized();
    }
}

struct RestartResult {
    summary: RestartSummary,
    best_loss: f64,
    best_table: PreferenceTable,
    exhausted: bool,
}

/// Optimizes the preference entries of every adapted index; the relation
/// networks are only read. Restarts after the first draw fresh random
/// offsets for the objects (the goal keeps its offset).
pub fn adapt(
    record: &PerturbationRecord,
    params: &RelationNetParams,
    table: &PreferenceTable,
    config: &AdaptConfig,
    exec: Exec,
    progress: &(dyn Fn(AdaptProgress) + Sync),
) -> Result<AdaptOutcome, AdaptError> {
    config.validate()?;
    let started = Instant::now();
    let deadline = started + Duration::from_secs_f64(config.time_budget);
    let dim = params.arch.dim;
    if record.scene_snapshot.dim() != dim {
        return Err(PolicyError::DimMismatch {
            scene: record.scene_snapshot.dim(),
            net: dim,
        }
        .into());
    }
    let segment = expert_from_perturbation(record, record.scene_snapshot.alpha)?;
    let scene = record.scene_snapshot.with_agent(record.start().clone());
    let table = instance_table(table, &scene)?;
    let adapted = adapted_indices(&scene, config.adapt_goal);
    let objective = RolloutObjective {
        scene,
        segment: &segment,
        params,
        adapted: adapted.clone(),
        horizon: config.rollout_horizon.unwrap_or(segment.steps()),
    };
    let (initial_loss, _) = objective.evaluate(&table, false)?;
    if config.steps_per_restart == 0 {
        return Ok(AdaptOutcome {
            table,
            initial_loss,
            best_loss: initial_loss,
            best_restart: 0,
            restarts: Vec::new(),
            wall_s: started.elapsed().as_secs_f64(),
            budget_exhausted: false,
        });
    }
    let goal_index = record.scene_snapshot.goal.type_index;
    let results = exec.map(config.restarts, |r| -> Result<Option<RestartResult>, AdaptError> {
        if Instant::now() >= deadline {
            return Ok(None);
        }
        let mut t = table.clone();
        if r > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(r as u64);
            for idx in &adapted {
                if *idx == goal_index {
                    continue;
                }
                let f = t.entries.get_mut(idx).expect("adapted entry present");
                f.c_r_delta = RotOffset::from_rotation(&random_rotation(&mut rng, dim));
            }
        }
        let mut ps = to_params(&t, &adapted);
        let mut adam = Adam::new(config.lr);
        let mut best = (f64::INFINITY, t.clone());
        let mut first = None;
        let mut steps = 0;
        let mut exhausted = false;
        for step in 0..config.steps_per_restart {
            if Instant::now() >= deadline {
                exhausted = true;
                break;
            }
            let (loss, grads) = objective.evaluate(&t, true)?;
            first.get_or_insert(loss);
            if loss < best.0 {
                best = (loss, t.clone());
            }
            progress(AdaptProgress { restart: r, step, loss });
            let mut refs: Vec<&mut Parameter> = ps.iter_mut().collect();
            adam.step(&mut refs, &grads);
            write_params(&mut t, &adapted, &ps, dim);
            // keep the stored parameters on the unit sphere too
            ps = to_params(&t, &adapted);
            steps += 1;
        }
        let (final_loss, _) = objective.evaluate(&t, false)?;
        if final_loss < best.0 {
            best = (final_loss, t.clone());
        }
        Ok(Some(RestartResult {
            summary: RestartSummary {
                restart: r,
                initial_loss: first.unwrap_or(final_loss),
                final_loss,
                steps,
            },
            best_loss: best.0,
            best_table: best.1,
            exhausted,
        }))
    });
    let mut outcome = AdaptOutcome {
        table: table.clone(),
        initial_loss,
        best_loss: initial_loss,
        best_restart: 0,
        restarts: Vec::new(),
        wall_s: 0.0,
        budget_exhausted: false,
    };
    let mut any_better = false;
    let mut skipped = false;
    for r in results {
        match r? {
            Some(res) => {
                outcome.budget_exhausted |= res.exhausted;
                if res.best_loss < outcome.best_loss {
                    outcome.best_loss = res.best_loss;
                    outcome.best_restart = res.summary.restart;
                    outcome.table = res.best_table;
                    any_better = true;
                }
                outcome.restarts.push(res.summary);
            }
            None => skipped = true,
        }
    }
    outcome.budget_exhausted |= skipped;
    outcome.wall_s = started.elapsed().as_secs_f64();
    if !any_better && !outcome.restarts.is_empty() {
        return Err(AdaptError::NoProgress {
            initial: initial_loss,
            best: outcome.best_loss,
        });
    }
    Ok(outcome)
}

/// Synthetic 3D offset-recovery episode: identity start and goal, one object
/// on the path with a random orientation, and a perturbation that carries
/// the agent onto the object while turning it to `object * true_delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetEpisode {
    pub record: PerturbationRecord,
    pub object_id: u32,
    pub target: Rotation,
}

pub fn offset_episode(true_delta: &Rotation, seed: u64) -> OffsetEpisode {
    let dim = true_delta.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dim.n();
    let at = |x: f64| {
        let mut p = vec![0.0; n];
        p[0] = x;
        p
    };
    let obj_r = random_rotation(&mut rng, dim);
    let object = crate::scene::SceneObject {
        id: 1,
        type_index: anchors::FIRST_FREE,
        pose: Pose::new(at(0.6), obj_r),
        radius: 0.2,
    };
    let scene = Scene::new(
        Pose::new(at(0.0), Rotation::identity(dim)),
        0.05,
        crate::scene::SceneObject {
            id: 0,
            type_index: anchors::GOAL,
            pose: Pose::new(at(1.4), Rotation::identity(dim)),
            radius: 0.2,
        },
        vec![object],
        0.1,
    )
    .expect("valid episode scene");
    let target = obj_r.compose(true_delta);
    let record = PerturbationRecord::new(
        vec![(0.0, Pose::new(at(0.0), Rotation::identity(dim))), (1.0, Pose::new(at(0.6), target))],
        scene,
    )
    .expect("valid episode record");
    OffsetEpisode { record, object_id: 1, target }
}

/// Adapts on an [`offset_episode`] and returns the smallest geodesic angle
/// between the post-adaptation rollout and the target orientation.
pub fn recover_offset_benchmark(
    true_delta: &Rotation,
    params: &RelationNetParams,
    table: &PreferenceTable,
    config: &AdaptConfig,
    seed: u64,
    exec: Exec,
) -> Result<f64, AdaptError> {
    let ep = offset_episode(true_delta, seed);
    let out = match adapt(&ep.record, params, table, config, exec, &|_| {}) {
        Ok(o) => o.table,
        Err(AdaptError::NoProgress { .. }) => instance_table(table, &ep.record.scene_snapshot)?,
        Err(e) => return Err(e),
    };
    let seg = expert_from_perturbation(&ep.record, ep.record.scene_snapshot.alpha)?;
    let traj = crate::policy::rollout_open_loop(&ep.record.scene_snapshot, &out, params, seg.steps())?;
    Ok(traj
        .waypoints
        .iter()
        .map(|w| geodesic_angle(&w.r, &ep.target))
        .fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Architecture;
    use crate::scene::SceneObject;

    fn scene2d() -> Scene {
        Scene::new(
            Pose::planar(0.0, 0.0, 0.0),
            0.05,
            SceneObject {
                id: 0,
                type_index: anchors::GOAL,
                pose: Pose::planar(1.5, 0.0, 0.0),
                radius: 0.2,
            },
            vec![SceneObject {
                id: 1,
                type_index: 20,
                pose: Pose::planar(0.7, 0.3, 1.0),
                radius: 0.2,
            }],
            0.1,
        )
        .unwrap()
    }

    fn setup(dim: Dim) -> (RelationNetParams, PreferenceTable) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = Architecture {
            hidden: 12,
            ..Architecture::new(dim)
        };
        (RelationNetParams::new(arch, &mut rng), PreferenceTable::anchors(&arch, &mut rng))
    }

    #[test]
    fn segment_interpolates_endpoints() {
        let s = scene2d();
        let rec = PerturbationRecord::new(
            vec![(0.0, Pose::planar(0.0, 0.0, 0.0)), (0.1, Pose::planar(5.0, 5.0, 3.0)), (0.2, Pose::planar(1.0, 0.0, 0.0))],
            s,
        )
        .unwrap();
        let seg = expert_from_perturbation(&rec, 0.25).unwrap();
        let xs: Vec<f64> = seg.poses.iter().map(|p| p.p[0]).collect();
        assert_eq!(seg.poses.len(), 5);
        for (x, e) in xs.iter().zip([0.0, 0.25, 0.5, 0.75, 1.0]) {
            assert!((x - e).abs() < 1e-12);
        }
        let w0 = seg.w[0];
        assert!(seg.w.iter().all(|w| geodesic_angle(w, &w0) < 1e-12));
    }

    #[test]
    fn segment_slerps_orientation() {
        let id = Rotation::identity(Dim::Three);
        let quarter = Rotation::from_axis_angle(&nalgebra::Vector3::z(), std::f64::consts::FRAC_PI_2);
        let scene = offset_episode(&id, 1).record.scene_snapshot;
        let rec = PerturbationRecord::new(
            vec![(0.0, Pose::new(vec![0.0; 3], id)), (1.0, Pose::new(vec![0.2, 0.0, 0.0], quarter))],
            scene,
        )
        .unwrap();
        let seg = expert_from_perturbation(&rec, 0.1).unwrap();
        let half = Rotation::from_axis_angle(&nalgebra::Vector3::z(), std::f64::consts::FRAC_PI_4);
        assert!(geodesic_angle(&seg.poses[1].r, &half) < 1e-9);
    }

    #[test]
    fn degenerate_and_invalid_records() {
        let s = scene2d();
        let p = Pose::planar(0.3, 0.3, 0.2);
        let rec = PerturbationRecord::new(vec![(0.0, p.clone()), (1.0, p.clone())], s.clone()).unwrap();
        assert_eq!(expert_from_perturbation(&rec, 0.1), Err(AdaptError::DegeneratePerturbation));
        assert!(matches!(PerturbationRecord::new(vec![(0.0, p.clone())], s.clone()), Err(AdaptError::InvalidRecord(_))));
        assert!(matches!(
            PerturbationRecord::new(vec![(1.0, p.clone()), (1.0, Pose::planar(1.0, 0.0, 0.0))], s),
            Err(AdaptError::InvalidRecord(_))
        ));
    }

    #[test]
    fn pure_rotation_segment_masks_translation() {
        let rec = PerturbationRecord::new(vec![(0.0, Pose::planar(0.0, 0.0, 0.0)), (1.0, Pose::planar(0.0, 0.0, 1.0))], scene2d()).unwrap();
        let seg = expert_from_perturbation(&rec, 0.1).unwrap();
        assert_eq!(seg.steps(), 1);
        assert_eq!(seg.v[0], None);
    }

    #[test]
    fn init_ignore_is_midpoint() {
        let (_, mut t) = setup(Dim::Two);
        t.entries.get_mut(&anchors::REPEL).unwrap().c_p = vec![-1.0];
        t.entries.get_mut(&anchors::ATTRACT).unwrap().c_p = vec![3.0];
        let f = init_ignore(&t).unwrap();
        assert_eq!(f.c_p, vec![1.0]);
        assert_eq!(f.c_r_delta, RotOffset::Planar(0.0));
        t.entries.get_mut(&anchors::ORIENT_IGNORE).unwrap().c_r_latent = vec![8.0];
        t.entries.get_mut(&anchors::ORIENT_CONSIDER).unwrap().c_r_latent = vec![-2.0];
        assert_eq!(init_ignore(&t).unwrap().c_r_latent, vec![3.0]);
    }

    #[test]
    fn perturbation_document_roundtrip() {
        let rec = PerturbationRecord::new(vec![(0.0, Pose::planar(0.0, 0.0, 0.0)), (0.5, Pose::planar(0.5, 0.2, 1.0))], scene2d()).unwrap();
        let back = PerturbationRecord::from_json(&rec.to_json()).unwrap();
        assert_eq!(back.to_json(), rec.to_json());
    }

    #[test]
    fn zero_steps_leave_table_unchanged() {
        let (params, table) = setup(Dim::Two);
        let rec = PerturbationRecord::new(vec![(0.0, Pose::planar(0.0, 0.0, 0.0)), (0.5, Pose::planar(0.6, 0.3, 1.0))], scene2d()).unwrap();
        let cfg = AdaptConfig {
            steps_per_restart: 0,
            ..AdaptConfig::default()
        };
        let out = adapt(&rec, &params, &table, &cfg, Exec::Serial, &|_| {}).unwrap();
        assert_eq!(out.table, instance_table(&table, &rec.scene_snapshot).unwrap());
    }

    #[test]
    fn adapt_freezes_networks_and_keeps_unit_quaternions() {
        let (params, table) = setup(Dim::Three);
        let before = params.fingerprint();
        let ep = offset_episode(&Rotation::from_axis_angle(&nalgebra::Vector3::x(), 1.0), 3);
        let cfg = AdaptConfig {
            restarts: 2,
            steps_per_restart: 5,
            time_budget: 100.0,
            ..AdaptConfig::default()
        };
        let progress = std::sync::Mutex::new(0usize);
        let res = adapt(&ep.record, &params, &table, &cfg, Exec::Serial, &|_| *progress.lock().unwrap() += 1);
        assert_eq!(params.fingerprint(), before);
        assert_eq!(*progress.lock().unwrap(), 10);
        if let Ok(out) = res {
            for f in out.table.entries.values() {
                if let RotOffset::Spatial(q) = f.c_r_delta {
                    assert!((q.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn restarts_agree_across_executors() {
        let (params, table) = setup(Dim::Two);
        let rec = PerturbationRecord::new(vec![(0.0, Pose::planar(0.0, 0.0, 0.0)), (0.5, Pose::planar(0.6, 0.3, 1.0))], scene2d()).unwrap();
        let cfg = AdaptConfig {
            restarts: 3,
            steps_per_restart: 4,
            time_budget: 100.0,
            ..AdaptConfig::default()
        };
        let a = adapt(&rec, &params, &table, &cfg, Exec::Serial, &|_| {});
        let b = adapt(&rec, &params, &table, &cfg, Exec::Parallel, &|_| {});
        match (a, b) {
            (Ok(a), Ok(b)) => {
                assert_eq!(a.table, b.table);
                assert_eq!(a.restarts, b.restarts);
            }
            (a, b) => assert_eq!(a.err(), b.err()),
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let (params, table) = setup(Dim::Two);
        let rec = PerturbationRecord::new(vec![(0.0, Pose::planar(0.0, 0.0, 0.0)), (0.5, Pose::planar(0.9, 0.3, 1.0))], scene2d()).unwrap();
        let seg = expert_from_perturbation(&rec, 0.1).unwrap();
        let t = instance_table(&table, &rec.scene_snapshot).unwrap();
        let obj = RolloutObjective {
            scene: rec.scene_snapshot.clone(),
            segment: &seg,
            params: &params,
            adapted: vec![20],
            horizon: seg.steps(),
        };
        let (_, g) = obj.evaluate(&t, true).unwrap();
        let h = 1e-6;
        let base = t.entries[&20].clone();
        let comps = [(0, base.c_p[0]), (1, base.c_r_latent[0]), (2, base.c_r_delta.as_vec()[0])];
        for (k, x0) in comps {
            let at = |x: f64| {
                let mut tt = t.clone();
                let f = tt.entries.get_mut(&20).unwrap();
                match k {
                    0 => f.c_p[0] = x,
                    1 => f.c_r_latent[0] = x,
                    _ => f.c_r_delta = RotOffset::Planar(x),
                }
                obj.evaluate(&tt, false).unwrap().0
            };
            let fd = (at(x0 + h) - at(x0 - h)) / (2.0 * h);
            assert!(crate::grad::relative_error(g[k][0], fd) < 1e-4, "{k}: {} vs {fd}", g[k][0]);
        }
    }
}

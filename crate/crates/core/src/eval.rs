//! Metrics and scripted benchmark suites.

use crate::adapter::{adapt, instance_table, AdaptConfig, AdaptError, PerturbationRecord};
use crate::par::Exec;
use crate::policy::{anchors, rollout_open_loop, PolicyError, PreferenceTable, RelationNetParams};
use crate::rotmath::{geodesic_angle, random_rotation, Dim, Rotation};
use crate::scene::{dist, Pose, Scene, SceneObject, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Smallest waypoint distance to `target`.
pub fn min_distance_metric(traj: &Trajectory, target: &[f64]) -> f64 {
    traj.waypoints.iter().map(|w| dist(&w.p, target)).fold(f64::INFINITY, f64::min)
}

/// Smallest waypoint angle to `target_r * delta_star`.
pub fn min_angle_metric(traj: &Trajectory, target_r: &Rotation, delta_star: &Rotation) -> f64 {
    let desired = target_r.compose(delta_star);
    traj.waypoints.iter().map(|w| geodesic_angle(&w.r, &desired)).fold(f64::INFINITY, f64::min)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; `NaN` for constant inputs.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "paired samples");
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Steps needed to cover the start-goal distance, with slack for detours.
pub fn default_horizon(scene: &Scene) -> usize {
    (dist(&scene.agent.p, &scene.goal.pose.p) / scene.alpha).ceil() as usize + 10
}

/// For each lambda, blends the object's `c_P` from repel to attract and
/// records the rollout's minimum distance to that object.
pub fn interpolation_sweep(
    params: &RelationNetParams,
    table: &PreferenceTable,
    scene: &Scene,
    object_id: u32,
    lambdas: &[f64],
    exec: Exec,
) -> Result<Vec<(f64, f64)>, PolicyError> {
    let obj = scene.object(object_id).ok_or(PolicyError::MissingType(object_id))?.clone();
    let base = instance_table(table, scene)?;
    let repel = table.get(anchors::REPEL)?.c_p.clone();
    let attract = table.get(anchors::ATTRACT)?.c_p.clone();
    let steps = default_horizon(scene);
    let out = exec.map_slice(lambdas, |&l| -> Result<(f64, f64), PolicyError> {
        let mut t = base.clone();
        let f = t.entries.get_mut(&obj.type_index).expect("instance entry");
        f.c_p = repel.iter().zip(&attract).map(|(r, a)| (1.0 - l) * r + l * a).collect();
        let traj = rollout_open_loop(scene, &t, params, steps)?;
        Ok((l, min_distance_metric(&traj, &obj.pose.p)))
    });
    out.into_iter().collect()
}

/// A training scene with its perturbation plus held-out scenes sharing type indices.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSuite {
    pub id: String,
    pub perturbation: PerturbationRecord,
    pub held_out: Vec<Scene>,
    /// Object whose distance and offset orientation are measured.
    pub target_object: u32,
    pub delta_star: Rotation,
}

impl BenchmarkSuite {
    pub fn train_scene(&self) -> &Scene {
        &self.perturbation.scene_snapshot
    }
}

fn place_scene<R: Rng + ?Sized>(rng: &mut R, dim: Dim, target_type: u32, distractor_type: u32, layout: &SuiteLayout) -> Scene {
    let n = dim.n();
    let length = rng.random_range(1.4..1.8);
    let mut goal_p = vec![0.0; n];
    let heading: f64 = rng.random_range(-0.3..0.3);
    goal_p[0] = length * heading.cos();
    goal_p[1] = length * heading.sin();
    let along = |t: f64, lateral: f64| -> Vec<f64> {
        let mut p = vec![0.0; n];
        p[0] = t * goal_p[0] - lateral * heading.sin();
        p[1] = t * goal_p[1] + lateral * heading.cos();
        p
    };
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let target = SceneObject {
        id: 1,
        type_index: target_type,
        pose: Pose::new(along(rng.random_range(0.4..0.6), side * rng.random_range(0.25..0.35)), random_rotation(rng, dim)),
        radius: 0.15,
    };
    let distractor = SceneObject {
        id: 2,
        type_index: distractor_type,
        pose: Pose::new(along(rng.random_range(0.3..0.7), -side * rng.random_range(0.3..0.45)), random_rotation(rng, dim)),
        radius: 0.15,
    };
    let frame = |rng: &mut R| if layout.random_frames { random_rotation(rng, dim) } else { Rotation::identity(dim) };
    let start_r = frame(rng);
    let goal_r = frame(rng);
    let objects = if layout.distractor { vec![target, distractor] } else { vec![target] };
    Scene::new(
        Pose::new(vec![0.0; n], start_r),
        0.05,
        SceneObject {
            id: 0,
            type_index: anchors::GOAL,
            pose: Pose::new(goal_p, goal_r),
            radius: 0.2,
        },
        objects,
        0.1,
    )
    .expect("valid benchmark scene")
}

/// Training scene with an unseen target object and a distractor; the
/// perturbation drags the agent onto the target while turning it to
/// `object * delta_star`. Held-out scenes re-randomize every placement.
pub fn default_suite(dim: Dim, held_out: usize, seed: u64) -> BenchmarkSuite {
    scripted_suite(dim, held_out, seed, &SuiteLayout::default())
}

/// Knobs for [`scripted_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteLayout {
    /// Distance from the target center at which the scripted drag ends.
    pub standoff: f64,
    pub distractor: bool,
    /// Randomize start and goal orientations; identity otherwise.
    pub random_frames: bool,
}

impl Default for SuiteLayout {
    fn default() -> Self {
        SuiteLayout {
            standoff: 0.1,
            distractor: true,
            random_frames: true,
        }
    }
}

/// As [`default_suite`] with an explicit layout.
pub fn scripted_suite(dim: Dim, held_out: usize, seed: u64, layout: &SuiteLayout) -> BenchmarkSuite {
    let standoff = layout.standoff;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target_type = anchors::FIRST_FREE;
    let distractor_type = anchors::FIRST_FREE + 1;
    let scene = place_scene(&mut rng, dim, target_type, distractor_type, layout);
    let delta_star = random_rotation(&mut rng, dim);
    let obj = scene.object(1).expect("target present").clone();
    let start = scene.agent.clone();
    let d = dist(&start.p, &obj.pose.p);
    let end_p = obj.pose.p.iter().zip(&start.p).map(|(o, s)| o + (s - o) * standoff / d).collect();
    let end = Pose::new(end_p, obj.pose.r.compose(&delta_star));
    // a densely sampled drag; only its endpoints matter downstream
    let poses = (0..=30)
        .map(|k| {
            let t = k as f64 / 30.0;
            let p = start.p.iter().zip(&end.p).map(|(a, b)| a + t * (b - a)).collect();
            (t, Pose::new(p, crate::rotmath::interpolate(&start.r, &end.r, t)))
        })
        .collect();
    let perturbation = PerturbationRecord::new(poses, scene).expect("valid perturbation");
    let held_out = (0..held_out).map(|_| place_scene(&mut rng, dim, target_type, distractor_type, layout)).collect();
    BenchmarkSuite {
        id: format!("default-{}d-{seed}", dim.n()),
        perturbation,
        held_out,
        target_object: 1,
        delta_star,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub scenario: String,
    pub held_out: bool,
    pub pre_min_distance: f64,
    pub post_min_distance: f64,
    pub pre_min_angle: f64,
    pub post_min_angle: f64,
    pub adapt_wall_s: f64,
    pub restarts_used: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> MeanStd {
        if xs.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub pre_min_distance: MeanStd,
    pub post_min_distance: MeanStd,
    pub pre_min_angle: MeanStd,
    pub post_min_angle: MeanStd,
}

impl Aggregate {
    pub fn of<'a>(records: impl Iterator<Item = &'a ScenarioRecord>) -> Aggregate {
        let rs: Vec<&ScenarioRecord> = records.filter(|r| r.error.is_none()).collect();
        let col = |f: fn(&ScenarioRecord) -> f64| MeanStd::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
        Aggregate {
            count: rs.len(),
            pre_min_distance: col(|r| r.pre_min_distance),
            post_min_distance: col(|r| r.post_min_distance),
            pre_min_angle: col(|r| r.pre_min_angle),
            post_min_angle: col(|r| r.post_min_angle),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub suite: String,
    pub records: Vec<ScenarioRecord>,
    /// Over the held-out records.
    pub held_out: Aggregate,
    pub adapt_final_loss: Option<f64>,
    pub adapt_total_steps: usize,
}

pub const REPORT_CSV_HEADER: &str =
    "scenario,held_out,pre_min_distance,post_min_distance,pre_min_angle,post_min_angle,adapt_wall_s,restarts_used,error";

impl BenchmarkReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{:.6},{},{}\n",
                r.scenario,
                r.held_out,
                r.pre_min_distance,
                r.post_min_distance,
                r.pre_min_angle,
                r.post_min_angle,
                r.adapt_wall_s,
                r.restarts_used,
                r.error.as_deref().unwrap_or("")
            ));
        }
        s
    }

    /// Copy with wall-clock fields zeroed, for comparing runs.
    pub fn without_timing(&self) -> BenchmarkReport {
        let mut r = self.clone();
        r.records.iter_mut().for_each(|x| x.adapt_wall_s = 0.0);
        r
    }

    /// Aggregates recomputed from the records.
    pub fn recomputed(&self) -> Aggregate {
        Aggregate::of(self.records.iter().filter(|r| r.held_out))
    }
}

fn scene_metrics(
    scene: &Scene,
    suite: &BenchmarkSuite,
    params: &RelationNetParams,
    table: &PreferenceTable,
) -> Result<(f64, f64), PolicyError> {
    let obj = scene.object(suite.target_object).ok_or(PolicyError::MissingType(suite.target_object))?;
    let traj = rollout_open_loop(scene, table, params, default_horizon(scene))?;
    Ok((min_distance_metric(&traj, &obj.pose.p), min_angle_metric(&traj, &obj.pose.r, &suite.delta_star)))
}

/// Adapts once on the training scene, then evaluates the training scene
/// and every held-out scene before and after adaptation. Evaluation only
/// reads the adapted table.
pub fn run_benchmark(
    suite: &BenchmarkSuite,
    params: &RelationNetParams,
    table: &PreferenceTable,
    config: &AdaptConfig,
    exec: Exec,
) -> Result<BenchmarkReport, PolicyError> {
    let train = suite.train_scene();
    let pre_table = instance_table(table, train)?;
    let adapted = adapt(&suite.perturbation, params, table, config, exec, &|_| {});
    let (post_table, wall, restarts, err, final_loss, steps) = match &adapted {
        Ok(o) => (o.table.clone(), o.wall_s, o.restarts.len(), None, Some(o.best_loss), o.total_steps()),
        Err(AdaptError::Policy(e)) => return Err(e.clone()),
        Err(e) => (pre_table.clone(), 0.0, 0, Some(e.to_string()), None, 0),
    };
    let scenes: Vec<(String, bool, &Scene)> = std::iter::once(("train".to_string(), false, train))
        .chain(suite.held_out.iter().enumerate().map(|(i, s)| (format!("held-out-{i}"), true, s)))
        .collect();
    let frozen = post_table.clone();
    let rows = exec.map_slice(&scenes, |(name, held, scene)| -> Result<ScenarioRecord, PolicyError> {
        let pre = instance_table(table, scene)?;
        let post = instance_table(&post_table, scene)?;
        let (pd, pa) = scene_metrics(scene, suite, params, &pre)?;
        let (qd, qa) = scene_metrics(scene, suite, params, &post)?;
        Ok(ScenarioRecord {
            scenario: name.clone(),
            held_out: *held,
            pre_min_distance: pd,
            post_min_distance: qd,
            pre_min_angle: pa,
            post_min_angle: qa,
            adapt_wall_s: wall,
            restarts_used: restarts,
            error: err.clone(),
        })
    });
    let records = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    debug_assert_eq!(frozen, post_table, "evaluation must not modify preferences");
    let held_out = Aggregate::of(records.iter().filter(|r| r.held_out));
    Ok(BenchmarkReport {
        suite: suite.id.clone(),
        records,
        held_out,
        adapt_final_loss: final_loss,
        adapt_total_steps: steps,
    })
}

/// One point of a loss-versus-adaptation-time curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSweepRow {
    pub budget_s: f64,
    pub post_min_distance: f64,
    pub post_min_angle: f64,
    pub held_out_min_distance: f64,
    pub held_out_min_angle: f64,
}

pub const TIME_SWEEP_CSV_HEADER: &str = "budget_s,post_min_distance,post_min_angle,held_out_min_distance,held_out_min_angle";

impl TimeSweepRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.budget_s, self.post_min_distance, self.post_min_angle, self.held_out_min_distance, self.held_out_min_angle
        )
    }
}

/// Reruns the benchmark under each adaptation time budget.
pub fn time_sweep(
    suite: &BenchmarkSuite,
    params: &RelationNetParams,
    table: &PreferenceTable,
    config: &AdaptConfig,
    budgets: &[f64],
    exec: Exec,
) -> Result<Vec<TimeSweepRow>, PolicyError> {
    budgets
        .iter()
        .map(|&b| {
            let cfg = AdaptConfig {
                time_budget: b,
                steps_per_restart: usize::MAX / 2,
                ..config.clone()
            };
            let rep = run_benchmark(suite, params, table, &cfg, exec)?;
            let train = &rep.records[0];
            Ok(TimeSweepRow {
                budget_s: b,
                post_min_distance: train.post_min_distance,
                post_min_angle: train.post_min_angle,
                held_out_min_distance: rep.held_out.post_min_distance.mean,
                held_out_min_angle: rep.held_out.post_min_angle.mean,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Architecture;

    fn line(points: &[(f64, f64)]) -> Trajectory {
        Trajectory {
            waypoints: points.iter().map(|&(x, y)| Pose::planar(x, y, 0.0)).collect(),
        }
    }

    #[test]
    fn min_distance_examples() {
        let t = line(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        assert_eq!(min_distance_metric(&t, &[1.0, 0.0]), 0.0);
        assert_eq!(min_distance_metric(&t, &[1.0, 1.0]), 1.0);
        assert_eq!(min_distance_metric(&line(&[(3.0, 4.0)]), &[0.0, 0.0]), 5.0);
    }

    #[test]
    fn min_angle_examples() {
        let id = Rotation::identity(Dim::Three);
        let q = Rotation::from_axis_angle(&nalgebra::Vector3::y(), std::f64::consts::FRAC_PI_2);
        let t = Trajectory {
            waypoints: vec![Pose::new(vec![0.0; 3], q), Pose::new(vec![1.0, 0.0, 0.0], q)],
        };
        assert!((min_angle_metric(&t, &id, &id) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!(min_angle_metric(&t, &id, &q) < 1e-12);
        let mut rev = t.clone();
        rev.waypoints.reverse();
        assert_eq!(min_angle_metric(&rev, &id, &id), min_angle_metric(&t, &id, &id));
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 2.0]) - 0.866_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn suite_is_deterministic_and_consistent() {
        let a = default_suite(Dim::Two, 5, 9);
        assert_eq!(a, default_suite(Dim::Two, 5, 9));
        assert_eq!(a.held_out.len(), 5);
        for s in &a.held_out {
            let types: Vec<u32> = s.objects.iter().map(|o| o.type_index).collect();
            assert_eq!(types, a.train_scene().objects.iter().map(|o| o.type_index).collect::<Vec<_>>());
        }
    }

    #[test]
    fn empty_held_out_reports_training_scene_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch = Architecture {
            hidden: 8,
            ..Architecture::new(Dim::Two)
        };
        let params = RelationNetParams::new(arch, &mut rng);
        let table = PreferenceTable::anchors(&arch, &mut rng);
        let suite = default_suite(Dim::Two, 0, 3);
        let cfg = AdaptConfig {
            restarts: 2,
            steps_per_restart: 3,
            time_budget: 100.0,
            ..AdaptConfig::default()
        };
        let rep = run_benchmark(&suite, &params, &table, &cfg, Exec::Serial).unwrap();
        assert_eq!(rep.records.len(), 1);
        assert_eq!(rep.held_out.count, 0);
        let again = run_benchmark(&suite, &params, &table, &cfg, Exec::Parallel).unwrap();
        assert_eq!(rep.without_timing(), again.without_timing());
        assert_eq!(rep.to_csv().lines().count(), 2);
    }
}

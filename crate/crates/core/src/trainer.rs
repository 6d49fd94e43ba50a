//! Teacher-forced pretraining of the relation networks and anchor preferences.
//!
//! Position and orientation heads are trained on separate datasets with
//! separate optimizers; they share no parameters.

use crate::checkpoint::Checkpoint;
use crate::datagen::{DatasetFile, ExpertSample};
use crate::grad::{Adam, GradError, Parameter, Tape, Var};
use crate::par::Exec;
use crate::policy::{
    anchors, orientation_action, position_action, Architecture, BoundRelation, PolicyError, PreferenceTable, RelationNet,
    RelationNetParams, RotOffset, TableBinding,
};
use crate::rotmath::{Dim, Rotation};
use crate::scene::Pose;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::PathBuf;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset mismatch: {0}")]
    DatasetMismatch(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

impl From<GradError> for TrainError {
    fn from(e: GradError) -> Self {
        TrainError::Policy(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Log every this many epochs (the last epoch is always logged).
    pub report_every: usize,
    /// Trailing fraction of samples held out for evaluation.
    pub holdout_fraction: f64,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub position_data: Option<PathBuf>,
    pub orientation_data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            lr: 0.01,
            seed: 0,
            report_every: 1,
            holdout_fraction: 0.1,
            hidden: 64,
            hidden_layers: 2,
            position_data: None,
            orientation_data: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.epochs == 0 || self.batch_size == 0 || self.report_every == 0 {
            return bad("epochs, batch_size and report_every must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must be in [0, 1)");
        }
        if self.hidden == 0 || self.hidden_layers == 0 {
            return bad("hidden sizes must be positive");
        }
        Ok(())
    }

    pub fn architecture(&self, dim: Dim) -> Architecture {
        Architecture {
            hidden: self.hidden,
            hidden_layers: self.hidden_layers,
            ..Architecture::new(dim)
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

/// `(1/B) sum (1 - <v*, v>)`.
pub fn loss_position(pred: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    assert_eq!(pred.len(), target.len(), "batch sizes differ");
    if pred.is_empty() {
        return 0.0;
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(a, b)| 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
        .sum();
    s / pred.len() as f64
}

/// Constant in the per-sample rotation loss: one unit per aligned axis.
pub fn rotation_loss_offset(dim: Dim) -> f64 {
    match dim {
        Dim::Two => 1.0,
        Dim::Three => 2.0,
    }
}

/// `(1/B) sum (2 - <R*x, Rx> - <R*y, Ry>)` in 3D, `(1/B) sum (1 - <w*, w>)` in 2D.
pub fn loss_rotation(pred: &[Rotation], target: &[Rotation]) -> f64 {
    assert_eq!(pred.len(), target.len(), "batch sizes differ");
    if pred.is_empty() {
        return 0.0;
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let k = rotation_loss_offset(a.dim());
            k - a.encode().iter().zip(b.encode()).map(|(x, y)| x * y).sum::<f64>()
        })
        .sum();
    s / pred.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Position,
    Orientation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    CP,
    CRLatent,
    Delta,
}

/// Table entries a head trains, in optimizer order.
fn table_slots(head: Head) -> Vec<(u32, Slot)> {
    let mut out = Vec::new();
    for idx in anchors::ALL {
        match head {
            Head::Position => out.push((idx, Slot::CP)),
            Head::Orientation => {
                out.push((idx, Slot::CRLatent));
                if idx != anchors::START {
                    out.push((idx, Slot::Delta));
                }
            }
        }
    }
    out
}

fn slot_value(table: &PreferenceTable, idx: u32, slot: Slot) -> Vec<f64> {
    let f = &table.entries[&idx];
    match slot {
        Slot::CP => f.c_p.clone(),
        Slot::CRLatent => f.c_r_latent.clone(),
        Slot::Delta => f.c_r_delta.as_vec(),
    }
}

fn write_slot(table: &mut PreferenceTable, dim: Dim, idx: u32, slot: Slot, v: &[f64]) {
    let f = table.entries.get_mut(&idx).expect("anchor present");
    match slot {
        Slot::CP => f.c_p = v.to_vec(),
        Slot::CRLatent => f.c_r_latent = v.to_vec(),
        Slot::Delta => f.c_r_delta = RotOffset::from_slice(dim, v).renormalized(),
    }
}

fn slot_var(b: &TableBinding, idx: u32, slot: Slot) -> Var {
    let e = b.get(idx).expect("anchor bound");
    match slot {
        Slot::CP => e.c_p,
        Slot::CRLatent => e.c_r_latent,
        Slot::Delta => e.delta.expect("trainable offset"),
    }
}

/// One teacher-forced supervision point.
#[derive(Debug, Clone, Copy)]
struct Item<'a> {
    sample: &'a ExpertSample,
    t: usize,
}

fn items(samples: &[ExpertSample]) -> Vec<Item<'_>> {
    samples
        .iter()
        .flat_map(|s| (0..s.trajectory.len().saturating_sub(1)).map(move |t| Item { sample: s, t }))
        .collect()
}

/// Per-item loss term on a tape (a constant when the policy holds).
fn item_loss(tape: &mut Tape, head: Head, dim: Dim, net: &BoundRelation, table: &TableBinding, item: &Item) -> Result<Var, PolicyError> {
    let wps = &item.sample.trajectory.waypoints;
    let here: &Pose = &wps[item.t];
    let next: &Pose = &wps[item.t + 1];
    let scene = item.sample.scene.with_agent(here.clone());
    let ap = tape.vector(&here.p);
    match head {
        Head::Position => {
            let d: Vec<f64> = next.p.iter().zip(&here.p).map(|(a, b)| a - b).collect();
            let n = crate::grad::norm(&d);
            let target: Vec<f64> = d.iter().map(|x| x / n).collect();
            match position_action(tape, net, table, &scene, ap, None)? {
                Some(v) => {
                    let tv = tape.vector(&target);
                    let dot = tape.dot(tv, v)?;
                    Ok(tape.scale_const(dot, -1.0))
                }
                None => Ok(tape.scalar_const(0.0)),
            }
            .map(|neg| {
                let one = tape.scalar_const(1.0);
                tape.add(one, neg).expect("scalar shapes")
            })
        }
        Head::Orientation => {
            let k = rotation_loss_offset(dim);
            let target = next.r.encode();
            let start = &wps[0];
            let w = match orientation_action(tape, dim, net, table, &scene, start, ap, None)? {
                Some(w) => w,
                None => tape.vector(&here.r.encode()),
            };
            let tv = tape.vector(&target);
            let dot = tape.dot(tv, w)?;
            let neg = tape.scale_const(dot, -1.0);
            let kk = tape.scalar_const(k);
            Ok(tape.add(kk, neg)?)
        }
    }
}

/// Items evaluated per tape; batches split into chunks of this size for the executor.
const CHUNK: usize = 8;

fn head_net(params: &RelationNetParams, head: Head) -> &RelationNet {
    match head {
        Head::Position => &params.position,
        Head::Orientation => &params.orientation,
    }
}

fn head_net_mut(params: &mut RelationNetParams, head: Head) -> &mut RelationNet {
    match head {
        Head::Position => &mut params.position,
        Head::Orientation => &mut params.orientation,
    }
}

/// Summed loss and summed gradients (net params, then table slots) over `batch`.
fn batch_gradients(
    head: Head,
    params: &RelationNetParams,
    table: &PreferenceTable,
    batch: &[Item],
    exec: Exec,
) -> Result<(f64, Vec<Vec<f64>>), PolicyError> {
    let dim = params.arch.dim;
    let net = head_net(params, head);
    let slots = table_slots(head);
    let chunks: Vec<&[Item]> = batch.chunks(CHUNK).collect();
    let results = exec.map(chunks.len(), |c| -> Result<(f64, Vec<Vec<f64>>), PolicyError> {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, true);
        let tb = table.bind(&mut tape, &|_| true);
        let mut terms = Vec::with_capacity(chunks[c].len());
        for it in chunks[c] {
            terms.push(item_loss(&mut tape, head, dim, &bound, &tb, it)?);
        }
        let loss = tape.add_all(&terms)?;
        let g = tape.backward(loss)?;
        let mut grads = Vec::new();
        let net_vars = bound.feature.layers.iter().chain(&bound.gate.layers).flat_map(|&(w, b)| [w, b]);
        for (v, p) in net_vars.zip(net.params()) {
            grads.push(g.wrt_or_zero(v, p.len()));
        }
        for &(idx, slot) in &slots {
            let n = slot_value(table, idx, slot).len();
            grads.push(g.wrt_or_zero(slot_var(&tb, idx, slot), n));
        }
        Ok((tape.scalar(loss), grads))
    });
    let mut total = 0.0;
    let mut sum: Vec<Vec<f64>> = Vec::new();
    for r in results {
        let (l, g) = r?;
        total += l;
        if sum.is_empty() {
            sum = g;
        } else {
            for (a, b) in sum.iter_mut().zip(&g) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
    }
    Ok((total, sum))
}

/// Mean teacher-forced loss of one head over `samples`.
pub fn evaluate_head(head: Head, params: &RelationNetParams, table: &PreferenceTable, samples: &[ExpertSample], exec: Exec) -> Result<f64, PolicyError> {
    let all = items(samples);
    if all.is_empty() {
        return Ok(0.0);
    }
    let dim = params.arch.dim;
    let net = head_net(params, head);
    let chunks: Vec<&[Item]> = all.chunks(64).collect();
    let sums = exec.map(chunks.len(), |c| -> Result<f64, PolicyError> {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let tb = table.bind(&mut tape, &|_| false);
        let mut s = 0.0;
        for it in chunks[c] {
            let l = item_loss(&mut tape, head, dim, &bound, &tb, it)?;
            s += tape.scalar(l);
        }
        Ok(s)
    });
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / all.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: Split,
    pub loss_p: f64,
    pub loss_r: f64,
    pub wall_s: f64,
}

pub const LOG_HEADER: &str = "epoch,split,loss_p,loss_r,wall_s";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let split = match self.split {
            Split::Train => "train",
            Split::Holdout => "holdout",
        };
        format!("{},{},{},{},{:.3}", self.epoch, split, self.loss_p, self.loss_r, self.wall_s)
    }
}

fn split_samples<'a>(ds: &'a DatasetFile, frac: f64) -> (&'a [ExpertSample], &'a [ExpertSample]) {
    let n = ds.samples.len();
    let hold = ((n as f64) * frac).round() as usize;
    let hold = if frac > 0.0 && n > 1 { hold.clamp(1, n - 1) } else { 0 };
    ds.samples.split_at(n - hold)
}

/// State of one head's optimization.
struct HeadTrainer<'a> {
    head: Head,
    train: Vec<Item<'a>>,
    adam: Adam,
    slots: Vec<(u32, Slot)>,
}

impl<'a> HeadTrainer<'a> {
    /// One pass over the training items; returns the mean loss.
    fn epoch(
        &mut self,
        params: &mut RelationNetParams,
        table: &mut PreferenceTable,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
        exec: Exec,
    ) -> Result<f64, PolicyError> {
        let dim = params.arch.dim;
        self.train.shuffle(rng);
        let mut total = 0.0;
        for batch in self.train.chunks(batch_size) {
            let (loss, mut grads) = batch_gradients(self.head, params, table, batch, exec)?;
            total += loss;
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            let mut slot_params: Vec<Parameter> = self
                .slots
                .iter()
                .map(|&(idx, slot)| Parameter::vector(format!("{idx}"), slot_value(table, idx, slot)))
                .collect();
            {
                let net = head_net_mut(params, self.head);
                let mut refs: Vec<&mut Parameter> = net.params_mut().chain(slot_params.iter_mut()).collect();
                self.adam.step(&mut refs, &grads);
            }
            for (&(idx, slot), p) in self.slots.iter().zip(&slot_params) {
                write_slot(table, dim, idx, slot, &p.value);
            }
        }
        Ok(total / self.train.len().max(1) as f64)
    }
}

/// Trains both heads from scratch; `log` receives a train and a holdout row per reported epoch.
pub fn pretrain(
    position: &DatasetFile,
    orientation: &DatasetFile,
    config: &TrainConfig,
    exec: Exec,
    log: &mut dyn FnMut(&LogRow),
) -> Result<Checkpoint, TrainError> {
    config.validate()?;
    if position.dim != orientation.dim {
        return Err(TrainError::DatasetMismatch("position and orientation datasets differ in dimension".into()));
    }
    let dim = position.dim;
    let arch = config.architecture(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = RelationNetParams::new(arch, &mut rng);
    let mut table = PreferenceTable::anchors(&arch, &mut rng);
    let (p_train, p_hold) = split_samples(position, config.holdout_fraction);
    let (o_train, o_hold) = split_samples(orientation, config.holdout_fraction);
    let mut heads = [
        HeadTrainer {
            head: Head::Position,
            train: items(p_train),
            adam: Adam::new(config.lr),
            slots: table_slots(Head::Position),
        },
        HeadTrainer {
            head: Head::Orientation,
            train: items(o_train),
            adam: Adam::new(config.lr),
            slots: table_slots(Head::Orientation),
        },
    ];
    let started = Instant::now();
    for epoch in 1..=config.epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle.set_stream(epoch as u64);
        let mut train_losses = [0.0; 2];
        for (k, h) in heads.iter_mut().enumerate() {
            train_losses[k] = h.epoch(&mut params, &mut table, config.batch_size, &mut shuffle, exec)?;
        }
        if train_losses.iter().any(|l| !l.is_finite()) {
            return Err(TrainError::DivergedLoss { epoch });
        }
        if epoch % config.report_every == 0 || epoch == config.epochs {
            log(&LogRow {
                epoch,
                split: Split::Train,
                loss_p: train_losses[0],
                loss_r: train_losses[1],
                wall_s: started.elapsed().as_secs_f64(),
            });
            let hp = evaluate_head(Head::Position, &params, &table, p_hold, exec)?;
            let hr = evaluate_head(Head::Orientation, &params, &table, o_hold, exec)?;
            if !hp.is_finite() || !hr.is_finite() {
                return Err(TrainError::DivergedLoss { epoch });
            }
            log(&LogRow {
                epoch,
                split: Split::Holdout,
                loss_p: hp,
                loss_r: hr,
                wall_s: started.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(Checkpoint {
        params,
        table,
        config_hash: config.hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_dataset, DatagenConfig};
    use crate::rotmath::random_rotation;
    use rand::Rng;

    #[test]
    fn loss_position_anchors() {
        let v = vec![vec![0.6, 0.8], vec![1.0, 0.0]];
        let neg: Vec<Vec<f64>> = v.iter().map(|x| x.iter().map(|y| -y).collect()).collect();
        let orth = vec![vec![-0.8, 0.6], vec![0.0, 1.0]];
        assert_eq!(loss_position(&v, &v), 0.0);
        assert_eq!(loss_position(&v, &neg), 2.0);
        assert!((loss_position(&v, &orth) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn loss_rotation_anchors() {
        let id = Rotation::identity(Dim::Three);
        assert_eq!(loss_rotation(&[id], &[id]), 0.0);
        // both axes flipped: 180 degrees about z
        let flip = Rotation::from_axis_angle(&nalgebra::Vector3::z(), std::f64::consts::PI);
        assert!((loss_rotation(&[flip], &[id]) - 4.0).abs() < 1e-12);
        // 90 degrees about z: each axis orthogonal to its target
        let quarter = Rotation::from_axis_angle(&nalgebra::Vector3::z(), std::f64::consts::FRAC_PI_2);
        assert!((loss_rotation(&[quarter], &[id]) - 2.0).abs() < 1e-12);
        let a = Rotation::from_angle(0.3);
        assert!((loss_rotation(&[a], &[Rotation::from_angle(0.3 + std::f64::consts::PI)]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn losses_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let a: Vec<Rotation> = (0..4).map(|_| random_rotation(&mut rng, Dim::Three)).collect();
            let b: Vec<Rotation> = (0..4).map(|_| random_rotation(&mut rng, Dim::Three)).collect();
            let l = loss_rotation(&a, &b);
            assert!((0.0..=4.0).contains(&l));
            let t: f64 = rng.random_range(-3.2..3.2);
            let u: f64 = rng.random_range(-3.2..3.2);
            let l = loss_position(&[vec![t.cos(), t.sin()]], &[vec![u.cos(), u.sin()]]);
            assert!((0.0..=2.0).contains(&l));
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            hidden: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn heads_train_independently_and_deterministically() {
        let pos = build_dataset(6, &DatagenConfig::position(Dim::Two), 1, Exec::Serial).unwrap();
        let ori = build_dataset(6, &DatagenConfig::orientation(Dim::Two), 2, Exec::Serial).unwrap();
        let cfg = tiny_config();
        let mut rows = Vec::new();
        let a = pretrain(&pos, &ori, &cfg, Exec::Serial, &mut |r| rows.push(*r)).unwrap();
        let b = pretrain(&pos, &ori, &cfg, Exec::Parallel, &mut |_| {}).unwrap();
        assert_eq!(a.params.fingerprint(), b.params.fingerprint());
        assert_eq!(a.table, b.table);
        assert_eq!(rows.len(), 4);
        // the orientation net never sees position gradients and vice versa
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = RelationNetParams::new(cfg.architecture(Dim::Two), &mut rng);
        assert_ne!(a.params.position, init.position);
        assert_ne!(a.params.orientation, init.orientation);
        let ori_empty = DatasetFile {
            samples: vec![],
            ..ori.clone()
        };
        let c = pretrain(&pos, &ori_empty, &cfg, Exec::Serial, &mut |_| {}).unwrap();
        assert_eq!(c.params.position, a.params.position);
        assert_eq!(c.params.orientation, init.orientation);
    }

    #[test]
    fn start_offset_is_never_trained() {
        let pos = build_dataset(3, &DatagenConfig::position(Dim::Three), 1, Exec::Serial).unwrap();
        let ori = build_dataset(3, &DatagenConfig::orientation(Dim::Three), 2, Exec::Serial).unwrap();
        let ck = pretrain(&pos, &ori, &tiny_config(), Exec::Serial, &mut |_| {}).unwrap();
        assert_eq!(ck.table.entries[&anchors::START].c_r_delta, RotOffset::identity(Dim::Three));
        for f in ck.table.entries.values() {
            if let RotOffset::Spatial(q) = f.c_r_delta {
                let n: f64 = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))));
    }
}

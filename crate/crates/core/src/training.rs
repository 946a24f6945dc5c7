//! Triplet mining, the joint loss and the SGD loop.
//!
//! Each training triplet is an event anchor, an image within the positive
//! radius and an image beyond the negative radius. Its loss is the triplet
//! hinge on retrieval descriptors plus binary cross-entropy on the
//! classifier scores of the anchor-positive (target 1) and anchor-negative
//! (target 0) pairs.

use std::collections::HashMap;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Gradients, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::event_io::{geo_distance, Modality, SampleRecord, Split, MATCH_RADIUS_M};
use crate::frame::ImageFrame;
use crate::model::{Model, ModelConfig};
use crate::retrieval::load_input;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub pos_radius_m: f64,
    pub neg_radius_m: f64,
    pub seed: u64,
    /// Frames used to seed the NetVLAD centers.
    pub warmup: usize,
    /// Uniform negatives drawn per anchor; the one closest to the anchor in
    /// retrieval space is kept. 1 means plain uniform sampling.
    pub negative_pool: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            lr: 0.1,
            epochs: 20,
            batch: 8,
            pos_radius_m: MATCH_RADIUS_M,
            neg_radius_m: 75.0,
            seed: 42,
            warmup: 16,
            negative_pool: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::invalid("alpha must be positive"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("lr must be a finite non-negative number"));
        }
        if self.negative_pool == 0 {
            return Err(Error::invalid("negative_pool must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be at least 1"));
        }
        if !(self.pos_radius_m > 0.0) || !(self.neg_radius_m > self.pos_radius_m) {
            return Err(Error::invalid(
                "radii must satisfy 0 < pos_radius_m < neg_radius_m",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

/// An anchor, its positive and the uniformly drawn candidate negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidates {
    pub anchor: String,
    pub positive: String,
    pub negatives: Vec<String>,
}

/// Draws a positive and `cfg.negative_pool` negatives (with replacement) for
/// every train-split event anchor that has both, then shuffles the anchors.
/// Fully determined by `seed`.
pub fn mine_candidates(records: &[SampleRecord], cfg: &TrainConfig, seed: u64) -> Vec<Candidates> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train: Vec<&SampleRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    let images: Vec<&SampleRecord> = train
        .iter()
        .copied()
        .filter(|r| r.modality == Modality::Image)
        .collect();
    let mut out = Vec::new();
    let mut skipped = 0;
    for anchor in train.iter().filter(|r| r.modality == Modality::Event) {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for img in &images {
            let d = geo_distance(&anchor.geotag, &img.geotag);
            if d < cfg.pos_radius_m {
                pos.push(*img);
            } else if d > cfg.neg_radius_m {
                neg.push(*img);
            }
        }
        if pos.is_empty() || neg.is_empty() {
            skipped += 1;
            continue;
        }
        let positive = pos[rng.gen_range(0..pos.len())].id.clone();
        let negatives = (0..cfg.negative_pool.max(1))
            .map(|_| neg[rng.gen_range(0..neg.len())].id.clone())
            .collect();
        out.push(Candidates {
            anchor: anchor.id.clone(),
            positive,
            negatives,
        });
    }
    if skipped > 0 {
        warn!("{skipped} anchors lack a positive or a negative image and were skipped");
    }
    out.shuffle(&mut rng);
    out
}

/// Uniform mining: the first candidate negative of each anchor.
pub fn mine_triplets(records: &[SampleRecord], cfg: &TrainConfig, seed: u64) -> Vec<Triplet> {
    mine_triplets_from(mine_candidates(records, cfg, seed))
}

/// Keeps, per anchor, the candidate negative nearest in retrieval space.
/// Ties go to the earliest drawn candidate.
pub fn hardest_negatives(
    candidates: Vec<Candidates>,
    descriptors: &HashMap<String, Vec<f64>>,
) -> Vec<Triplet> {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    candidates
        .into_iter()
        .map(|c| {
            let a = &descriptors[&c.anchor];
            let mut best = 0;
            for (i, n) in c.negatives.iter().enumerate().skip(1) {
                if dist(a, &descriptors[n]) < dist(a, &descriptors[&c.negatives[best]]) {
                    best = i;
                }
            }
            Triplet {
                negative: c.negatives[best].clone(),
                anchor: c.anchor,
                positive: c.positive,
            }
        })
        .collect()
}

pub fn triplet_loss(
    tape: &mut Tape,
    anchor: Var,
    positive: Var,
    negative: Var,
    alpha: f64,
) -> Result<Var> {
    let dp = tape.distance(anchor, positive)?;
    let dn = tape.distance(anchor, negative)?;
    let gap = tape.sub(dp, dn)?;
    let shifted = tape.add_scalar(gap, alpha);
    tape.relu(shifted)
}

/// `BCE(s_ap, 1) + BCE(s_an, 0)` with scores clamped away from 0 and 1.
pub fn cls_loss(tape: &mut Tape, score_ap: Var, score_an: Var) -> Result<Var> {
    let a = tape.bce(score_ap, 1.0)?;
    let b = tape.bce(score_an, 0.0)?;
    tape.add(a, b)
}

pub fn total_loss(tape: &mut Tape, triplet: Var, cls: Var) -> Result<Var> {
    tape.add(triplet, cls)
}

pub fn triplet_loss_value(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    alpha: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.input(Tensor::vector(anchor.to_vec()));
    let p = tape.input(Tensor::vector(positive.to_vec()));
    let n = tape.input(Tensor::vector(negative.to_vec()));
    let l = triplet_loss(&mut tape, a, p, n, alpha)?;
    Ok(tape.value(l).item())
}

pub fn cls_loss_value(score_ap: f64, score_an: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.input(Tensor::scalar(score_ap));
    let n = tape.input(Tensor::scalar(score_an));
    let l = cls_loss(&mut tape, a, n)?;
    Ok(tape.value(l).item())
}

/// `value -= lr * grad` for every parameter, then clears the gradients.
/// Nothing is updated if any gradient is non-finite.
pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", p.name)));
    }
    for p in store.iter_mut() {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= lr * g;
        }
    }
    store.zero_grad();
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_triplet: f64,
    pub mean_cls: f64,
    pub mean_total: f64,
    pub val_recall1: f64,
}

pub fn format_loss_log(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,mean_triplet,mean_cls,mean_total,val_recall1\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.mean_triplet, e.mean_cls, e.mean_total, e.val_recall1
        ));
    }
    out
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation Recall@1.
    pub model: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

struct StepResult {
    grads: Gradients,
    triplet: f64,
    cls: f64,
}

fn triplet_step(
    model: &Model,
    frames: &HashMap<String, (ImageFrame, Modality)>,
    t: &Triplet,
    alpha: f64,
) -> Result<StepResult> {
    let mut tape = Tape::new();
    let encode = |id: &str, tape: &mut Tape| {
        let (frame, modality) = &frames[id];
        let x = model.input(tape, frame, *modality)?;
        model.encode(tape, x, *modality)
    };
    let a = encode(&t.anchor, &mut tape)?;
    let p = encode(&t.positive, &mut tape)?;
    let n = encode(&t.negative, &mut tape)?;
    let lt = triplet_loss(&mut tape, a.retrieval, p.retrieval, n.retrieval, alpha)?;
    let s_ap = model.similarity(&mut tape, a.cls, p.cls)?;
    let s_an = model.similarity(&mut tape, a.cls, n.cls)?;
    let lc = cls_loss(&mut tape, s_ap, s_an)?;
    let total = total_loss(&mut tape, lt, lc)?;
    Ok(StepResult {
        grads: tape.backward(total)?,
        triplet: tape.value(lt).item(),
        cls: tape.value(lc).item(),
    })
}

/// Retrieval-only Recall@1 of validation events against validation images.
fn validation_recall(
    model: &Model,
    records: &[SampleRecord],
    frames: &HashMap<String, (ImageFrame, Modality)>,
) -> Result<f64> {
    let val: Vec<&SampleRecord> = records.iter().filter(|r| r.split == Split::Val).collect();
    fn describe<'a>(
        model: &Model,
        frames: &HashMap<String, (ImageFrame, Modality)>,
        r: &'a SampleRecord,
    ) -> Result<(&'a SampleRecord, Vec<f64>)> {
        let (f, m) = &frames[&r.id];
        model.describe(f, *m).map(|d| (r, d.retrieval))
    }
    let images = val
        .par_iter()
        .filter(|r| r.modality == Modality::Image)
        .map(|r| describe(model, frames, r))
        .collect::<Result<Vec<_>>>()?;
    let queries = val
        .par_iter()
        .filter(|r| r.modality == Modality::Event)
        .map(|r| describe(model, frames, r))
        .collect::<Result<Vec<_>>>()?;
    if images.is_empty() || queries.is_empty() {
        return Ok(0.0);
    }
    let hits = queries
        .iter()
        .filter(|(q, qd)| {
            let best = images
                .iter()
                .map(|(r, d)| {
                    (
                        qd.iter()
                            .zip(d)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>(),
                        r,
                    )
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)))
                .unwrap()
                .1;
            geo_distance(&q.geotag, &best.geotag) < MATCH_RADIUS_M
        })
        .count();
    Ok(hits as f64 / queries.len() as f64)
}

fn mine_triplets_from(candidates: Vec<Candidates>) -> Vec<Triplet> {
    candidates
        .into_iter()
        .map(|c| Triplet {
            negative: c.negatives[0].clone(),
            anchor: c.anchor,
            positive: c.positive,
        })
        .collect()
}

/// Retrieval descriptors of every anchor and candidate negative.
fn describe_candidates(
    model: &Model,
    frames: &HashMap<String, (ImageFrame, Modality)>,
    candidates: &[Candidates],
) -> Result<HashMap<String, Vec<f64>>> {
    let mut ids: Vec<&String> = candidates
        .iter()
        .flat_map(|c| std::iter::once(&c.anchor).chain(&c.negatives))
        .collect();
    ids.sort();
    ids.dedup();
    ids.par_iter()
        .map(|id| {
            let (f, m) = &frames[id.as_str()];
            Ok(((*id).clone(), model.describe(f, *m)?.retrieval))
        })
        .collect()
}

fn load_frames(
    model: &Model,
    records: &[SampleRecord],
) -> Result<HashMap<String, (ImageFrame, Modality)>> {
    let wanted: Vec<&SampleRecord> = records
        .iter()
        .filter(|r| matches!(r.split, Split::Train | Split::Val))
        .collect();
    let loaded = wanted
        .par_iter()
        .map(|r| Ok((r.id.clone(), (load_input(model, r)?, r.modality))))
        .collect::<Result<Vec<_>>>()?;
    Ok(loaded.into_iter().collect())
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(epoch as u64)
}

/// Builds a fresh model, seeds its NetVLAD centers and trains it.
pub fn train(
    records: &[SampleRecord],
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut model = Model::new(model_cfg)?;
    let frames = load_frames(&model, records)?;
    let warmup: Vec<(ImageFrame, Modality)> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .take(cfg.warmup)
        .map(|r| frames[&r.id].clone())
        .collect();
    if !warmup.is_empty() {
        model.init_clusters(&warmup)?;
    }
    train_model(model, records, cfg, &frames)
}

/// Runs SGD on an existing model with frames already loaded.
pub fn train_model(
    mut model: Model,
    records: &[SampleRecord],
    cfg: &TrainConfig,
    frames: &HashMap<String, (ImageFrame, Modality)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 1..=cfg.epochs {
        let candidates = mine_candidates(records, cfg, epoch_seed(cfg.seed, epoch));
        let triplets = if cfg.negative_pool > 1 {
            let descriptors = describe_candidates(&model, frames, &candidates)?;
            hardest_negatives(candidates, &descriptors)
        } else {
            mine_triplets_from(candidates)
        };
        if triplets.is_empty() {
            return Err(Error::invalid(
                "no training triplets: the train split needs events with nearby and distant images",
            ));
        }
        let (mut sum_t, mut sum_c) = (0.0, 0.0);
        for batch in triplets.chunks(cfg.batch) {
            let steps = batch
                .par_iter()
                .map(|t| triplet_step(&model, frames, t, cfg.alpha))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            for s in &steps {
                model.store.accumulate(&s.grads, scale);
                sum_t += s.triplet;
                sum_c += s.cls;
            }
            sgd_step(&mut model.store, cfg.lr)?;
        }
        let n = triplets.len() as f64;
        let val_recall1 = validation_recall(&model, records, frames)?;
        let entry = EpochLog {
            epoch,
            mean_triplet: sum_t / n,
            mean_cls: sum_c / n,
            mean_total: (sum_t + sum_c) / n,
            val_recall1,
        };
        info!(
            "epoch {epoch}: triplet {:.4} cls {:.4} total {:.4} val R@1 {:.3}",
            entry.mean_triplet, entry.mean_cls, entry.mean_total, entry.val_recall1
        );
        log.push(entry);
        // ties go to the later epoch
        if best.as_ref().is_none_or(|b| val_recall1 >= b.0) {
            best = Some((val_recall1, epoch, model.clone()));
        }
    }
    match best {
        Some((_, best_epoch, model)) => Ok(TrainOutcome {
            model,
            best_epoch,
            log,
        }),
        None => Ok(TrainOutcome {
            model,
            best_epoch: 0,
            log,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_io::GeoTag;
    use std::path::PathBuf;

    fn rec(id: &str, modality: Modality, lat_m: f64, split: Split) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            modality,
            path: PathBuf::from(format!("{id}.frm")),
            geotag: GeoTag::new(lat_m / 111_194.93, 0.0),
            split,
        }
    }

    #[test]
    fn loss_anchors() {
        assert_eq!(
            triplet_loss_value(&[0.3, 0.4], &[1.0, 0.0], &[1.0, 0.0], 0.1).unwrap(),
            0.1
        );
        assert_eq!(
            triplet_loss_value(&[0.0, 0.0], &[0.0, 0.0], &[0.1, 0.0], 0.1).unwrap(),
            0.0
        );
        assert_eq!(
            triplet_loss_value(&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0], 0.1).unwrap(),
            0.0
        );
        assert!(triplet_loss_value(&[1.0], &[0.0, 1.0], &[-1.0, 0.0], 0.1).is_err());
        assert!((cls_loss_value(0.5, 0.5).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((cls_loss_value(0.9, 0.1).unwrap() - 0.210721).abs() < 1e-6);
        assert!(cls_loss_value(1.0, 0.0).unwrap() < 1e-11);
        assert!(cls_loss_value(0.0, 1.0).unwrap().is_finite());
    }

    #[test]
    fn loss_monotonicity() {
        let mut prev = f64::INFINITY;
        for i in 1..20 {
            let l = cls_loss_value(i as f64 / 20.0, 0.3).unwrap();
            assert!(l < prev);
            prev = l;
        }
        let mut prev = -1.0;
        for i in 1..20 {
            let l = cls_loss_value(0.3, i as f64 / 20.0).unwrap();
            assert!(l > prev);
            prev = l;
        }
    }

    #[test]
    fn sgd_cases() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0)).unwrap();
        sgd_step(&mut store, 0.1).unwrap();
        assert_eq!(store.get(id).value.item(), 1.0);
        store.get_mut(id).grad = Tensor::scalar(2.0);
        sgd_step(&mut store, 0.1).unwrap();
        assert!((store.get(id).value.item() - 0.8).abs() < 1e-15);
        assert_eq!(store.get(id).grad.item(), 0.0);
        // f(w) = w^2
        store.get_mut(id).value = Tensor::scalar(1.0);
        for _ in 0..50 {
            let w = store.get(id).value.item();
            store.get_mut(id).grad = Tensor::scalar(2.0 * w);
            sgd_step(&mut store, 0.1).unwrap();
        }
        assert!(store.get(id).value.item().abs() < 1e-4);
        store.get_mut(id).grad = Tensor::scalar(f64::NAN);
        let err = sgd_step(&mut store, 0.1).unwrap_err();
        assert!(err.to_string().contains("gradient of w"));
    }

    #[test]
    fn mining_respects_radii() {
        let records = vec![
            rec("e0", Modality::Event, 0.0, Split::Train),
            rec("i0", Modality::Image, 1.0, Split::Train),
            rec("e1", Modality::Event, 1000.0, Split::Train),
            rec("i1", Modality::Image, 1001.0, Split::Train),
            rec("iv", Modality::Image, 2000.0, Split::Val),
        ];
        let cfg = TrainConfig::default();
        let mut t = mine_triplets(&records, &cfg, 1);
        t.sort_by(|a, b| a.anchor.cmp(&b.anchor));
        assert_eq!(
            t,
            vec![
                Triplet {
                    anchor: "e0".into(),
                    positive: "i0".into(),
                    negative: "i1".into()
                },
                Triplet {
                    anchor: "e1".into(),
                    positive: "i1".into(),
                    negative: "i0".into()
                },
            ]
        );
        let huddle = vec![
            rec("e0", Modality::Event, 0.0, Split::Train),
            rec("i0", Modality::Image, 5.0, Split::Train),
            rec("i1", Modality::Image, 10.0, Split::Train),
        ];
        assert!(mine_triplets(&huddle, &cfg, 1).is_empty());
    }

    #[test]
    fn mined_triplets_pass_exhaustive_check() {
        let mut records = Vec::new();
        for p in 0..100 {
            records.push(rec(
                &format!("e{p}"),
                Modality::Event,
                p as f64 * 50.0,
                Split::Train,
            ));
            for s in 0..3 {
                records.push(rec(
                    &format!("i{p}_{s}"),
                    Modality::Image,
                    p as f64 * 50.0 + s as f64,
                    Split::Train,
                ));
            }
        }
        let cfg = TrainConfig::default();
        let by_id: HashMap<&str, &SampleRecord> =
            records.iter().map(|r| (r.id.as_str(), r)).collect();
        let t = mine_triplets(&records, &cfg, 9);
        assert_eq!(t.len(), 100);
        for tr in &t {
            let a = by_id[tr.anchor.as_str()];
            assert!(
                geo_distance(&a.geotag, &by_id[tr.positive.as_str()].geotag) < cfg.pos_radius_m
            );
            assert!(
                geo_distance(&a.geotag, &by_id[tr.negative.as_str()].geotag) > cfg.neg_radius_m
            );
        }
        assert_eq!(mine_triplets(&records, &cfg, 9), t);
        assert_ne!(mine_triplets(&records, &cfg, 10), t);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            alpha: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            neg_radius_m: 10.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            negative_pool: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn pool_of_one_is_uniform_and_hardest_is_nearest() {
        let recs: Vec<SampleRecord> = (0..6)
            .flat_map(|i| {
                let lat = i as f64 * 100.0;
                [
                    rec(&format!("e{i}"), Modality::Event, lat, Split::Train),
                    rec(&format!("i{i}"), Modality::Image, lat, Split::Train),
                ]
            })
            .collect();
        let one = TrainConfig::default();
        let uniform = mine_triplets(&recs, &one, 3);
        let pooled = mine_candidates(&recs, &one, 3);
        assert!(pooled.iter().all(|c| c.negatives.len() == 1));
        assert_eq!(uniform, mine_triplets_from(pooled));

        let cand = Candidates {
            anchor: "a".into(),
            positive: "p".into(),
            negatives: vec!["far".into(), "near".into(), "near2".into()],
        };
        let desc: HashMap<String, Vec<f64>> =
            [("a", 0.0), ("far", 5.0), ("near", 1.0), ("near2", -1.0)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), vec![v]))
                .collect();
        assert_eq!(hardest_negatives(vec![cand], &desc)[0].negative, "near");
    }
}

//! Siamese-triplet training: cosine-distance hinge ranking loss over
//! (anchor, positive, negative) triplets with in-batch negatives.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::miner::dataset::PairDataset;
use crate::model::{Checkpoint, Gradients, Network, Profile, Trace};
use crate::seed::mix_seed;
use crate::tensor::{Real, Tensor};

/// Norms below this make cosine distance fall back to 1.
pub const NORM_EPS: f64 = 1e-12;
pub const METRICS_FILE: &str = "metrics.jsonl";
const BATCH_STREAM: u64 = 0x7472_6169_6e00;

/// `1 - u.v / (|u| |v|)`, or 1 when either norm is below [`NORM_EPS`].
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    cosine_distance_grad(u, v).0
}

/// Distance plus its gradients with respect to `u` and `v`.
pub fn cosine_distance_grad(u: &[f64], v: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    assert_eq!(u.len(), v.len(), "embedding lengths differ");
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < NORM_EPS || nv < NORM_EPS {
        return (1.0, vec![0.0; u.len()], vec![0.0; v.len()]);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let c = dot / (nu * nv);
    let gu = u
        .iter()
        .zip(v)
        .map(|(&ui, &vi)| -(vi / (nu * nv) - c * ui / (nu * nu)))
        .collect();
    let gv = u
        .iter()
        .zip(v)
        .map(|(&ui, &vi)| -(ui / (nu * nv) - c * vi / (nv * nv)))
        .collect();
    ((1.0 - c).clamp(0.0, 2.0), gu, gv)
}

pub fn triplet_loss(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (d_pos - d_neg + margin).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub weight_decay: f64,
    pub negatives_per_pair: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_every: u64,
    pub warmup_iterations: u64,
    pub hard_ratio: f64,
    pub iterations: u64,
    pub checkpoint_every: u64,
    /// 0 disables momentum.
    pub momentum: f64,
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub profile: Profile,
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            margin: 0.5,
            weight_decay: 0.0005,
            negatives_per_pair: 4,
            batch_size: 100,
            base_lr: 0.001,
            lr_drop_factor: 10.0,
            lr_drop_every: 100_000,
            warmup_iterations: 150_000,
            hard_ratio: 0.5,
            iterations: 450_000,
            checkpoint_every: 10_000,
            momentum: 0.0,
            seed: 0,
            profile: Profile::Paper,
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 16,
            base_lr: 0.01,
            lr_drop_every: 2_000,
            warmup_iterations: 1_000,
            iterations: 5_000,
            checkpoint_every: 1_000,
            profile: Profile::Desk,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.margin > 0.0) {
            return bad("train.margin must be positive");
        }
        if self.negatives_per_pair < 1 {
            return bad("train.negatives_per_pair must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("train.batch_size must be at least 2");
        }
        if !(self.weight_decay >= 0.0) || !(self.base_lr > 0.0) {
            return bad("train.weight_decay must be >= 0 and train.base_lr > 0");
        }
        if !(self.lr_drop_factor >= 1.0) || self.lr_drop_every == 0 {
            return bad("train.lr_drop_factor must be >= 1 and train.lr_drop_every > 0");
        }
        if !(0.0..=1.0).contains(&self.hard_ratio) {
            return bad("train.hard_ratio must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("train.momentum must lie in [0, 1)");
        }
        if self.checkpoint_every == 0 {
            return bad("train.checkpoint_every must be positive");
        }
        Ok(())
    }

    /// Learning rate after `post` iterations of the post-warmup phase.
    pub fn post_warmup_lr(&self, post: u64) -> f64 {
        self.base_lr / self.lr_drop_factor.powi((post / self.lr_drop_every) as i32)
    }

    /// Learning rate at 1-based `iteration`: constant through warmup, then
    /// stepped down every `lr_drop_every` iterations.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        if iteration <= self.warmup_iterations {
            self.base_lr
        } else {
            self.post_warmup_lr(iteration - self.warmup_iterations)
        }
    }

    pub fn hard_mining_active(&self, iteration: u64) -> bool {
        iteration > self.warmup_iterations && self.hard_ratio > 0.0
    }

    /// Number of pairs per batch whose negatives are hard-mined.
    pub fn hard_pairs(&self, batch: usize) -> usize {
        ((batch as f64 * self.hard_ratio).round() as usize).min(batch)
    }

    /// Stable digest of every field, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        let mut value = serde_json::to_value(self).expect("config serialises");
        value["seed"] = self.seed.into();
        value["profile"] = serde_json::to_value(self.profile).expect("profile serialises");
        let digest = Sha256::digest(value.to_string().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
    }
}

/// Anchors, positives and the in-batch negatives assigned to each pair.
///
/// Negatives are batch positions: negative `j` of pair `i` is the anchor crop
/// of pair `j`, which must come from a different video.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub anchors: Vec<Tensor<f32>>,
    pub positives: Vec<Tensor<f32>>,
    pub videos: Vec<String>,
    /// Dataset indices, when the batch was drawn from a dataset.
    pub pair_indices: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
    /// Whether each pair's negatives were hard-mined.
    pub hard: Vec<bool>,
}

impl TripletBatch {
    pub fn new(anchors: Vec<Tensor<f32>>, positives: Vec<Tensor<f32>>, videos: Vec<String>) -> Result<Self> {
        if anchors.len() != positives.len() || anchors.len() != videos.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} anchors, {} positives, {} video ids",
                anchors.len(),
                positives.len(),
                videos.len()
            )));
        }
        let b = anchors.len();
        Ok(TripletBatch {
            anchors,
            positives,
            videos,
            pair_indices: (0..b).collect(),
            negatives: vec![Vec::new(); b],
            hard: vec![false; b],
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn triplet_count(&self) -> usize {
        self.negatives.iter().map(Vec::len).sum()
    }

    /// Batch positions usable as negatives for pair `i`.
    pub fn eligible_negatives(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.videos[j] != self.videos[i]).collect()
    }

    /// Draws `k` distinct cross-video negatives for every pair.
    pub fn assign_random_negatives(&mut self, k: usize, rng: &mut impl Rng) -> Result<()> {
        for i in 0..self.len() {
            let eligible = self.eligible_negatives(i);
            if eligible.len() < k {
                return Err(Error::NegativeSourceExhausted(format!(
                    "pair {i} has {} cross-video candidates, {k} needed",
                    eligible.len()
                )));
            }
            self.negatives[i] = index::sample(rng, eligible.len(), k)
                .into_iter()
                .map(|e| eligible[e])
                .collect();
            self.hard[i] = false;
        }
        Ok(())
    }
}

/// Draws the batch for 1-based `iteration`. The generator is derived from
/// `(seed, iteration)` alone, so any iteration can be replayed in isolation.
pub fn sample_batch(ds: &PairDataset, cfg: &TrainConfig, iteration: u64) -> Result<TripletBatch> {
    if ds.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if ds.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} available pairs",
            cfg.batch_size,
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[BATCH_STREAM, iteration]));
    let picks = index::sample(&mut rng, ds.len(), cfg.batch_size).into_vec();
    let mut anchors = Vec::with_capacity(picks.len());
    let mut positives = Vec::with_capacity(picks.len());
    let mut videos = Vec::with_capacity(picks.len());
    for &p in &picks {
        let (a, b) = &ds.crops[p];
        if rng.random_bool(0.5) {
            anchors.push(a.flipped().to_tensor());
            positives.push(b.flipped().to_tensor());
        } else {
            anchors.push(a.to_tensor());
            positives.push(b.to_tensor());
        }
        videos.push(ds.records[p].video_id.clone());
    }
    let mut batch = TripletBatch::new(anchors, positives, videos)?;
    batch.pair_indices = picks;
    batch.assign_random_negatives(cfg.negatives_per_pair, &mut rng)?;
    Ok(batch)
}

/// Embeddings of every anchor and positive in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
}

impl BatchEmbeddings {
    pub fn compute<T: Real>(net: &Network<T>, batch: &TripletBatch) -> Result<Self> {
        let embed = |t: &Tensor<f32>| net.embed(&t.cast::<T>());
        Ok(BatchEmbeddings {
            anchors: batch.anchors.par_iter().map(embed).collect::<Result<_>>()?,
            positives: batch.positives.par_iter().map(embed).collect::<Result<_>>()?,
        })
    }

    pub fn triplet_loss(&self, i: usize, j: usize, margin: f64) -> f64 {
        let d_pos = cosine_distance(&self.anchors[i], &self.positives[i]);
        let d_neg = cosine_distance(&self.anchors[i], &self.anchors[j]);
        triplet_loss(d_pos, d_neg, margin)
    }
}

/// Replaces the negatives of the first `pairs` pairs with the `k` eligible
/// candidates of highest loss (ties to the lower batch position).
pub fn select_hard_negatives(
    batch: &mut TripletBatch,
    emb: &BatchEmbeddings,
    margin: f64,
    k: usize,
    pairs: usize,
) -> Result<()> {
    for i in 0..pairs.min(batch.len()) {
        let eligible = batch.eligible_negatives(i);
        if eligible.len() < k {
            return Err(Error::NegativeSourceExhausted(format!(
                "pair {i} has {} cross-video candidates, {k} needed",
                eligible.len()
            )));
        }
        let mut scored: Vec<(f64, usize)> = eligible
            .into_iter()
            .map(|j| (emb.triplet_loss(i, j, margin), j))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        batch.negatives[i] = scored.into_iter().take(k).map(|(_, j)| j).collect();
        batch.hard[i] = true;
    }
    Ok(())
}

/// Hard-mines `round(B * hard_ratio)` pairs of `batch` under `net`.
pub fn mine_hard_negatives<T: Real>(
    net: &Network<T>,
    batch: &TripletBatch,
    cfg: &TrainConfig,
) -> Result<TripletBatch> {
    let mut out = batch.clone();
    let pairs = cfg.hard_pairs(batch.len());
    if pairs == 0 {
        return Ok(out);
    }
    let emb = BatchEmbeddings::compute(net, batch)?;
    select_hard_negatives(&mut out, &emb, cfg.margin, cfg.negatives_per_pair, pairs)?;
    Ok(out)
}

/// Objective value and gradients for one batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// `lambda/2 |W|^2 + sum of hinges`.
    pub objective: f64,
    pub hinge_sum: f64,
    pub triplets: usize,
    pub active: usize,
    /// Per-pair, per-negative hinge values in `batch.negatives` order.
    pub losses: Vec<Vec<f64>>,
    /// Gradient of the hinge sum alone.
    pub data_gradient: Gradients,
}

impl BatchLoss {
    pub fn mean_hinge(&self) -> f64 {
        self.hinge_sum / self.triplets.max(1) as f64
    }

    pub fn active_fraction(&self) -> f64 {
        self.active as f64 / self.triplets.max(1) as f64
    }

    /// Gradient of the full objective: data term plus `lambda W` on weights.
    pub fn objective_gradient<T: Real>(&self, net: &Network<T>, weight_decay: f64) -> Gradients {
        let mut g = self.data_gradient.clone();
        for (gl, p) in g.layers.iter_mut().zip(&net.params) {
            if let (Some(gl), Some(p)) = (gl, p) {
                for (gw, w) in gl.weight.iter_mut().zip(p.weight.data()) {
                    *gw += weight_decay * w.to_f64();
                }
            }
        }
        g
    }
}

pub fn batch_loss<T: Real>(net: &Network<T>, batch: &TripletBatch, cfg: &TrainConfig) -> Result<BatchLoss> {
    batch_loss_with(net, batch, cfg.margin, cfg.weight_decay)
}

fn forward_all<T: Real>(net: &Network<T>, batch: &TripletBatch) -> Result<Vec<(Vec<f64>, Trace)>> {
    batch
        .anchors
        .par_iter()
        .chain(batch.positives.par_iter())
        .map(|t| net.forward_trace(&t.cast::<T>()))
        .collect()
}

pub fn batch_loss_with<T: Real>(
    net: &Network<T>,
    batch: &TripletBatch,
    margin: f64,
    weight_decay: f64,
) -> Result<BatchLoss> {
    let traced = forward_all(net, batch)?;
    loss_from_traces(net, batch, &traced, margin, weight_decay)
}

/// [`batch_loss_with`] that also returns the per-crop traces, anchors first.
pub fn batch_loss_traced<T: Real>(
    net: &Network<T>,
    batch: &TripletBatch,
    margin: f64,
    weight_decay: f64,
) -> Result<(BatchLoss, Vec<Trace>)> {
    let traced = forward_all(net, batch)?;
    let loss = loss_from_traces(net, batch, &traced, margin, weight_decay)?;
    Ok((loss, traced.into_iter().map(|(_, t)| t).collect()))
}

fn loss_from_traces<T: Real>(
    net: &Network<T>,
    batch: &TripletBatch,
    traced: &[(Vec<f64>, Trace)],
    margin: f64,
    weight_decay: f64,
) -> Result<BatchLoss> {
    let b = batch.len();
    if batch.triplet_count() == 0 {
        return Err(Error::NegativeSourceExhausted("batch has no triplets".into()));
    }
    let e = net.embedding_len();
    let emb = |slot: usize| traced[slot].0.as_slice();
    // Slots 0..b are anchors, b..2b positives.
    let mut grads = vec![vec![0.0; e]; 2 * b];
    let mut hinge_sum = 0.0;
    let mut active = 0;
    let mut losses = Vec::with_capacity(b);
    for i in 0..b {
        let (d_pos, gp_a, gp_p) = cosine_distance_grad(emb(i), emb(b + i));
        let mut row = Vec::with_capacity(batch.negatives[i].len());
        for &j in &batch.negatives[i] {
            if batch.videos[j] == batch.videos[i] {
                return Err(Error::NegativeSourceExhausted(format!(
                    "negative {j} of pair {i} comes from the same video"
                )));
            }
            let (d_neg, gn_a, gn_n) = cosine_distance_grad(emb(i), emb(j));
            let loss = triplet_loss(d_pos, d_neg, margin);
            row.push(loss);
            if loss > 0.0 {
                hinge_sum += loss;
                active += 1;
                for t in 0..e {
                    grads[i][t] += gp_a[t] - gn_a[t];
                    grads[b + i][t] += gp_p[t];
                    grads[j][t] -= gn_n[t];
                }
            }
        }
        losses.push(row);
    }
    let per_crop: Vec<Option<Gradients>> = traced
        .par_iter()
        .zip(grads.par_iter())
        .map(|((_, trace), g)| {
            if g.iter().all(|&v| v == 0.0) {
                Ok(None)
            } else {
                net.backward(trace, g).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    // Fixed summation order, independent of the worker count.
    let mut data_gradient = Gradients::zeros_like(net);
    for g in per_crop.iter().flatten() {
        data_gradient.add_assign(g);
    }
    Ok(BatchLoss {
        objective: 0.5 * weight_decay * net.weight_norm_sq() + hinge_sum,
        hinge_sum,
        triplets: batch.triplet_count(),
        active,
        losses,
        data_gradient,
    })
}

/// One SGD update: `W <- W - lr * (scale * g_data + lambda W)`; biases take
/// no decay. With `momentum > 0` the step goes through the velocity buffer.
pub fn sgd_step(
    net: &mut Network<f32>,
    data_gradient: &Gradients,
    scale: f64,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    velocity: &mut Vec<f32>,
) {
    if momentum > 0.0 && velocity.len() != net.param_count() {
        *velocity = vec![0.0; net.param_count()];
    }
    let mut offset = 0;
    for (p, g) in net.params.iter_mut().zip(&data_gradient.layers) {
        let (Some(p), Some(g)) = (p, g) else { continue };
        for (values, grads, decay) in [
            (p.weight.data_mut(), &g.weight, weight_decay),
            (p.bias.data_mut(), &g.bias, 0.0),
        ] {
            for (w, &gd) in values.iter_mut().zip(grads) {
                let step = scale * gd + decay * (*w as f64);
                let step = if momentum > 0.0 {
                    let v = &mut velocity[offset];
                    *v = (momentum * *v as f64 + step) as f32;
                    *v as f64
                } else {
                    step
                };
                *w = (*w as f64 - lr * step) as f32;
                offset += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub lr: f64,
    pub mean_hinge: f64,
    pub active_fraction: f64,
    pub weight_norm: f64,
}

/// The randomly initialised network training starts from under `seed`.
pub fn initial_network(profile: Profile, seed: u64) -> Network<f32> {
    Network::new(profile, mix_seed(seed, &[0x696e_6974]))
}

/// In-memory training state: network, optimizer buffer and position.
pub struct Trainer<'a> {
    pub dataset: &'a PairDataset,
    pub cfg: TrainConfig,
    pub network: Network<f32>,
    pub velocity: Vec<f32>,
    pub iteration: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a PairDataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        if dataset.video_count() < 2 {
            return Err(Error::NegativeSourceExhausted(
                "training needs pairs from at least two videos".into(),
            ));
        }
        let crop = dataset.crop_size as usize;
        let [_, h, w] = cfg.profile.input_shape();
        if (h, w) != (crop, crop) {
            return Err(Error::Config(format!(
                "dataset crops are {crop}x{crop}, profile expects {h}x{w}"
            )));
        }
        let network = initial_network(cfg.profile, cfg.seed);
        Ok(Trainer {
            dataset,
            cfg,
            network,
            velocity: Vec::new(),
            iteration: 0,
        })
    }

    pub fn resume(dataset: &'a PairDataset, cfg: TrainConfig, ck: Checkpoint) -> Result<Self> {
        let mut t = Self::new(dataset, cfg)?;
        if ck.config_hash != t.cfg.hash() {
            return Err(Error::Config(
                "checkpoint was written under a different training configuration".into(),
            ));
        }
        t.network = ck.network;
        t.velocity = ck.velocity;
        t.iteration = ck.iteration;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            network: self.network.clone(),
            config_hash: self.cfg.hash(),
            iteration: self.iteration,
            velocity: self.velocity.clone(),
        }
    }

    /// Runs the next iteration and returns its metrics.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let iteration = self.iteration + 1;
        let cfg = &self.cfg;
        let mut batch = sample_batch(self.dataset, cfg, iteration)?;
        let traced = forward_all(&self.network, &batch)?;
        if cfg.hard_mining_active(iteration) {
            let b = batch.len();
            let emb = BatchEmbeddings {
                anchors: traced[..b].iter().map(|t| t.0.clone()).collect(),
                positives: traced[b..].iter().map(|t| t.0.clone()).collect(),
            };
            select_hard_negatives(
                &mut batch,
                &emb,
                cfg.margin,
                cfg.negatives_per_pair,
                cfg.hard_pairs(b),
            )?;
        }
        let loss = loss_from_traces(&self.network, &batch, &traced, cfg.margin, cfg.weight_decay)?;
        let lr = cfg.lr_at(iteration);
        sgd_step(
            &mut self.network,
            &loss.data_gradient,
            1.0 / loss.triplets as f64,
            lr,
            cfg.weight_decay,
            cfg.momentum,
            &mut self.velocity,
        );
        for p in self.network.params.iter().flatten() {
            p.weight.check_finite("weights after update")?;
        }
        self.iteration = iteration;
        Ok(MetricsRecord {
            iteration,
            lr,
            mean_hinge: loss.mean_hinge(),
            active_fraction: loss.active_fraction(),
            weight_norm: self.network.weight_norm_sq().sqrt(),
        })
    }
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt_{iteration:08}.srck"))
}

pub const FINAL_CHECKPOINT: &str = "final.srck";

#[derive(Debug)]
pub struct TrainOutcome {
    pub network: Network<f32>,
    /// Metrics of the iterations run in this call.
    pub metrics: Vec<MetricsRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains to `cfg.iterations`, writing periodic checkpoints, a final
/// checkpoint and `metrics.jsonl` into `out_dir`. With `resume`, training
/// continues from that checkpoint and the metrics log is cut back to it.
pub fn train(
    dataset: &PairDataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut trainer = match resume {
        Some(path) => {
            let t = Trainer::resume(dataset, cfg.clone(), Checkpoint::load(path)?)?;
            let kept: Vec<MetricsRecord> = if metrics_path.exists() {
                jsonl::read_records::<MetricsRecord>(&metrics_path)?
                    .into_iter()
                    .filter(|m| m.iteration <= t.iteration)
                    .collect()
            } else {
                Vec::new()
            };
            jsonl::write_records(&metrics_path, &kept)?;
            t
        }
        None => {
            jsonl::write_records::<MetricsRecord>(&metrics_path, &[])?;
            Trainer::new(dataset, cfg.clone())?
        }
    };
    let mut log = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    while trainer.iteration < cfg.iterations {
        let m = trainer.step()?;
        let line = serde_json::to_string(&m).expect("metrics serialise");
        writeln!(log, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        if m.iteration % 100 == 0 {
            log::info!(
                "iteration {} lr {:.2e} hinge {:.4} active {:.3}",
                m.iteration,
                m.lr,
                m.mean_hinge,
                m.active_fraction
            );
        }
        if m.iteration % cfg.checkpoint_every == 0 {
            let path = checkpoint_path(out_dir, m.iteration);
            trainer.checkpoint().save(&path)?;
            checkpoints.push(path);
        }
        metrics.push(m);
    }
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_path)?;
    checkpoints.push(final_path);
    Ok(TrainOutcome {
        network: trainer.network,
        metrics,
        checkpoints,
    })
}

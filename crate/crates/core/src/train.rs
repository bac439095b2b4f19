//! Source pre-training followed by joint adaptation on unlabeled target scenes.
//!
//! Every adaptation iteration optimizes, on one tape, the alignment losses of a
//! mixed source/target batch together with the memory-based losses of the
//! target half. Target instances are relabeled against the source and random
//! prototype banks at the start of every `relabel_every`-th epoch.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    balance_factor, consistency_regularizer_on, gradient_reverse, image_domain_loss_on, instance_domain_loss_on,
    PROB_EPS, SOURCE, TARGET,
};
use crate::autograd::{Tape, Tensor, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::labeler::{
    bcubed_f1, init_source_prototypes, label_with_banks, sample_random_prototypes, update_source_prototypes,
    DistanceCounter, InstanceFeature, PrototypeBank, PseudoLabelSet,
};
use crate::memory::{
    cluster_contrastive_loss_on, init_cluster_memory, instance_invariance_loss_on, momentum_update_memory,
    select_reliable_neighbors, total_loss_on, ClusterMemory, InstanceMemory, LossTerms,
};
use crate::model::{BoundModel, Model, Sgd};
use crate::scene::{generate_candidates, Candidate, SceneSample};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const PRETRAIN_FILE: &str = "pretrain.jsonl";

/// One target instance: a candidate box of a target scene that passed the score threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstanceKey {
    pub scene: u32,
    pub candidate: u32,
}

/// Labels and memories produced by the latest labeling pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptState {
    pub instances: Vec<InstanceKey>,
    pub source_labels: Vec<u32>,
    pub random_labels: Vec<u32>,
    pub source_memory: ClusterMemory,
    pub random_memory: ClusterMemory,
    pub instance_memory: InstanceMemory,
    pub pseudo_acc: f64,
    pub distance_evaluations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub pretrain_epochs_done: usize,
    pub adapt_epochs_done: usize,
    pub model: Model,
    pub optimizer: Sgd,
    /// Source prototypes for the next labeling pass; `None` before the first one.
    pub source_bank: Option<PrototypeBank>,
    pub adapt_state: Option<AdaptState>,
}

impl Checkpoint {
    pub fn fresh(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(10);
        let model = Model::new(cfg.dataset.height, cfg.dataset.width, &cfg.model, &mut rng)?;
        let optimizer = Sgd::new(cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay, &model.tensors());
        Ok(Self {
            format_version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            pretrain_epochs_done: 0,
            adapt_epochs_done: 0,
            model,
            optimizer,
            source_bank: None,
            adapt_state: None,
        })
    }

    /// Written to a sibling temporary file first, then renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            serde_json::to_writer(&mut f, self)?;
            f.flush()?;
            f.get_ref().sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format_version {} unsupported (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    /// Errors when `cfg` describes a different network or input size.
    pub fn check_compatible(&self, cfg: &RunConfig) -> Result<()> {
        let m = &self.model;
        let pairs = [
            (m.input_height, cfg.dataset.height),
            (m.input_width, cfg.dataset.width),
            (m.channels, cfg.model.channels),
            (m.embed_dim, cfg.model.embed_dim),
            (m.attention.branches.len(), cfg.model.attention_branches),
            (m.domain.patch.hidden.outputs(), cfg.model.domain_hidden),
        ];
        for (expected, got) in pairs {
            if expected != got {
                return Err(Error::DimensionMismatch { expected, got });
            }
        }
        Ok(())
    }
}

/// One line of the adaptation metric log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_ins: f64,
    pub l_c_t: f64,
    pub l_c_s: f64,
    pub l_t_e: f64,
    pub l_s_e: f64,
    pub total: f64,
    pub pseudo_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub epoch: usize,
    pub detection: f64,
    pub reid: f64,
}

/// Receives every finished epoch together with the checkpoint reflecting it.
pub trait RunSink {
    fn pretrain_epoch(&mut self, metrics: &PretrainMetrics, checkpoint: &Checkpoint) -> Result<()>;
    fn adapt_epoch(&mut self, metrics: &EpochMetrics, checkpoint: &Checkpoint) -> Result<()>;
}

/// Keeps records in memory; checkpoints are dropped.
#[derive(Default)]
pub struct MemorySink {
    pub pretrain: Vec<PretrainMetrics>,
    pub adapt: Vec<EpochMetrics>,
}

impl RunSink for MemorySink {
    fn pretrain_epoch(&mut self, metrics: &PretrainMetrics, _: &Checkpoint) -> Result<()> {
        self.pretrain.push(*metrics);
        Ok(())
    }

    fn adapt_epoch(&mut self, metrics: &EpochMetrics, _: &Checkpoint) -> Result<()> {
        self.adapt.push(*metrics);
        Ok(())
    }
}

/// Writes the checkpoint after every epoch and appends to the JSON-lines logs.
pub struct DirSink {
    dir: PathBuf,
}

fn keep_records(path: &Path, done: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        let v: serde_json::Value = serde_json::from_str(&line)?;
        if v["epoch"].as_u64().is_some_and(|e| e as usize <= done) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

fn append_line<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    Ok(())
}

impl DirSink {
    /// Logs past the checkpoint's epoch counts (left by an interrupted run) are trimmed.
    pub fn open(dir: &Path, start: &Checkpoint) -> Result<Self> {
        fs::create_dir_all(dir)?;
        keep_records(&dir.join(PRETRAIN_FILE), start.pretrain_epochs_done)?;
        keep_records(&dir.join(METRICS_FILE), start.adapt_epochs_done)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_FILE)
    }
}

impl RunSink for DirSink {
    fn pretrain_epoch(&mut self, metrics: &PretrainMetrics, checkpoint: &Checkpoint) -> Result<()> {
        checkpoint.save(&self.checkpoint_path())?;
        append_line(&self.dir.join(PRETRAIN_FILE), metrics)
    }

    fn adapt_epoch(&mut self, metrics: &EpochMetrics, checkpoint: &Checkpoint) -> Result<()> {
        checkpoint.save(&self.checkpoint_path())?;
        append_line(&self.dir.join(METRICS_FILE), metrics)
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Mean binary cross-entropy of `probs` (`n x 1`) against 0/1 targets.
fn bce_mean_on(tape: &mut Tape, probs: Var, targets: &[f64]) -> Var {
    let n = targets.len();
    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let t = tape.constant(Tensor::new(n, 1, targets.to_vec()));
    let one_minus_t = tape.constant(Tensor::new(n, 1, targets.iter().map(|v| 1.0 - v).collect()));
    let lp = tape.ln(p);
    let np = tape.neg(p);
    let q = tape.add_scalar(np, 1.0);
    let lq = tape.ln(q);
    let a = tape.mul(t, lp);
    let b = tape.mul(one_minus_t, lq);
    let s = tape.add(a, b);
    let m = tape.mean(s);
    tape.neg(m)
}

fn epoch_rng(seed: u64, stream: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
    rng.set_stream(stream);
    rng
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

fn gradients(tape: &Tape, loss: Var, bound: &BoundModel, model: &Model) -> Vec<Tensor> {
    let grads = tape.backward(loss);
    bound
        .vars()
        .into_iter()
        .zip(model.tensors())
        .map(|(v, t)| grads.get_or_zeros(v, t.rows(), t.cols()))
        .collect()
}

/// Rows of `kept` (indices into the candidate list) for the wanted candidates.
fn rows_of(kept: &[usize], wanted: impl Iterator<Item = usize>) -> Vec<usize> {
    let pos: HashMap<usize, usize> = kept.iter().enumerate().map(|(r, &c)| (c, r)).collect();
    wanted.filter_map(|c| pos.get(&c).copied()).collect()
}

/// Keeps only the neighbors in `mask` that share the label of instance `anchor`.
fn same_label(mask: &[bool], labels: &[u32], anchor: usize) -> Vec<bool> {
    mask.iter().zip(labels).map(|(&v, &l)| v && l == labels[anchor]).collect()
}

/// Instance features of one split for the given boxes per scene, without gradients.
pub fn infer_scenes(
    model: &Model,
    scenes: &[SceneSample],
    boxes: &[Vec<crate::scene::BBox>],
) -> Result<Vec<crate::model::SceneInference>> {
    scenes.iter().zip(boxes).map(|(s, b)| model.infer(&s.image, b, s.id)).collect()
}

/// Target instances of a model: every candidate at or above `threshold`, or
/// the best-scoring candidate of a scene with none.
pub fn select_target_instances(
    model: &Model,
    scenes: &[SceneSample],
    candidates: &[Vec<Candidate>],
    threshold: f64,
) -> Result<(Vec<InstanceKey>, Vec<InstanceFeature>)> {
    let boxes: Vec<_> = candidates.iter().map(|c| c.iter().map(|c| c.bbox).collect()).collect();
    let inf = infer_scenes(model, scenes, &boxes)?;
    let mut keys = Vec::new();
    let mut feats = Vec::new();
    for (si, out) in inf.into_iter().enumerate() {
        let mut chosen: Vec<usize> = (0..out.kept.len()).filter(|&r| out.scores[r] >= threshold).collect();
        if chosen.is_empty() && !out.kept.is_empty() {
            let best = (0..out.kept.len()).max_by(|&a, &b| out.scores[a].total_cmp(&out.scores[b])).unwrap_or(0);
            chosen.push(best);
        }
        for r in chosen {
            keys.push(InstanceKey { scene: si as u32, candidate: out.kept[r] as u32 });
            feats.push(out.features[r].clone());
        }
    }
    Ok((keys, feats))
}

/// Class-mean prototypes from every annotated source person under `model`.
pub fn source_prototypes(model: &Model, source: &[SceneSample]) -> Result<PrototypeBank> {
    let boxes: Vec<_> = source.iter().map(|s| s.boxes.clone()).collect();
    let inf = infer_scenes(model, source, &boxes)?;
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (s, out) in source.iter().zip(&inf) {
        for (f, &k) in out.features.iter().zip(&out.kept) {
            feats.push(f.vector.clone());
            labels.push(s.identities[k]);
        }
    }
    init_source_prototypes(&feats, &labels)
}

/// One standalone labeling pass over a target split.
#[derive(Clone, Debug)]
pub struct LabelRun {
    pub features: Vec<InstanceFeature>,
    pub labels: PseudoLabelSet,
    pub source_prototypes: usize,
    pub random_prototypes: usize,
    pub distance_evaluations: u64,
}

/// Labels the target instances of `model`. `bank` is the adapted source bank of
/// a checkpoint when there is one; otherwise class means over `source` are used.
pub fn label_target_split(
    model: &Model,
    bank: Option<&PrototypeBank>,
    source: &[SceneSample],
    target: &[SceneSample],
    cfg: &RunConfig,
) -> Result<LabelRun> {
    let candidates = candidates_for(target, cfg);
    let (_, features) = select_target_instances(model, target, &candidates, cfg.labeling.score_threshold)?;
    if features.is_empty() {
        return Err(Error::NotEnoughTargetFeatures { requested: 1, available: 0 });
    }
    let source_bank = match bank {
        Some(b) => b.clone(),
        None => source_prototypes(model, source)?,
    };
    let random_bank = sample_random_prototypes(&features, cfg.labeling.n_random.min(features.len()), cfg.seed)?;
    let mut counter = DistanceCounter::new();
    let (labels, _) = label_with_banks(&features, &source_bank, &random_bank, &mut counter)?;
    Ok(LabelRun {
        features,
        labels,
        source_prototypes: source_bank.len(),
        random_prototypes: random_bank.len(),
        distance_evaluations: counter.evaluations(),
    })
}

pub struct Trainer<'a> {
    cfg: &'a RunConfig,
    source: &'a [SceneSample],
    target: &'a [SceneSample],
    source_candidates: Vec<Vec<Candidate>>,
    target_candidates: Vec<Vec<Candidate>>,
}

/// Candidate boxes of every scene, deterministic in the run seed.
pub fn candidates_for(scenes: &[SceneSample], cfg: &RunConfig) -> Vec<Vec<Candidate>> {
    scenes.iter().map(|s| generate_candidates(s, &cfg.dataset, cfg.seed)).collect()
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, source: &'a [SceneSample], target: &'a [SceneSample]) -> Result<Self> {
        cfg.validate()?;
        if source.is_empty() {
            return Err(Error::EmptyDomain);
        }
        Ok(Self {
            cfg,
            source,
            target,
            source_candidates: candidates_for(source, cfg),
            target_candidates: candidates_for(target, cfg),
        })
    }

    /// Runs the remaining pre-training and adaptation epochs of `ck`.
    pub fn run(&self, ck: &mut Checkpoint, sink: &mut dyn RunSink) -> Result<()> {
        ck.check_compatible(self.cfg)?;
        while ck.pretrain_epochs_done < self.cfg.train.pretrain_epochs {
            let metrics = self.pretrain_epoch(ck)?;
            log::info!("pretrain epoch {}: detection {:.4} reid {:.4}", metrics.epoch, metrics.detection, metrics.reid);
            sink.pretrain_epoch(&metrics, ck)?;
        }
        if self.cfg.train.adapt_epochs > ck.adapt_epochs_done && self.target.is_empty() {
            return Err(Error::EmptyDomain);
        }
        while ck.adapt_epochs_done < self.cfg.train.adapt_epochs {
            let metrics = self.adapt_epoch(ck)?;
            log::info!(
                "adapt epoch {}: total {:.4} pseudo_acc {:.4}",
                metrics.epoch,
                metrics.total,
                metrics.pseudo_acc
            );
            sink.adapt_epoch(&metrics, ck)?;
        }
        Ok(())
    }

    fn source_identity_memory(&self, model: &Model) -> Result<ClusterMemory> {
        let boxes: Vec<_> = self.source.iter().map(|s| s.boxes.clone()).collect();
        let inf = infer_scenes(model, self.source, &boxes)?;
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (s, out) in self.source.iter().zip(&inf) {
            for (f, &k) in out.features.iter().zip(&out.kept) {
                feats.push(f.vector.clone());
                labels.push(s.identities[k]);
            }
        }
        init_cluster_memory(&feats, &labels, self.cfg.memory.tau, self.cfg.memory.momentum)
    }

    fn pretrain_epoch(&self, ck: &mut Checkpoint) -> Result<PretrainMetrics> {
        let epoch = ck.pretrain_epochs_done + 1;
        let mut memory = self.source_identity_memory(&ck.model)?;
        let order = shuffled(self.source.len(), &mut epoch_rng(self.cfg.seed, 20, epoch));
        let (mut det_sum, mut reid_sum, mut steps) = (0.0, 0.0, 0usize);
        for batch in order.chunks(self.cfg.optim.batch_size) {
            let mut tape = Tape::new();
            let bound = ck.model.bind(&mut tape, true);
            let mut scores = Vec::new();
            let mut targets = Vec::new();
            let mut queries = Vec::new();
            let mut ids = Vec::new();
            for &si in batch {
                let scene = &self.source[si];
                let cands = &self.source_candidates[si];
                let boxes: Vec<_> = cands.iter().map(|c| c.bbox).collect();
                let out = ck.model.scene_on(&mut tape, &bound, &scene.image, &boxes)?;
                let Some(r) = out.regions else { continue };
                scores.push(r.scores);
                targets.extend(out.kept.iter().map(|&k| if cands[k].gt_index.is_some() { 1.0 } else { 0.0 }));
                let pos: Vec<usize> = (0..out.kept.len()).filter(|&r| cands[out.kept[r]].gt_index.is_some()).collect();
                if !pos.is_empty() {
                    queries.push(tape.select_rows(r.embeddings, &pos));
                    ids.extend(pos.iter().map(|&r| scene.identities[cands[out.kept[r]].gt_index.unwrap()]));
                }
            }
            if scores.is_empty() {
                continue;
            }
            let all = tape.concat_rows(&scores);
            let det = bce_mean_on(&mut tape, all, &targets);
            let mut loss = det;
            let mut rows = Vec::new();
            if !queries.is_empty() {
                let q = tape.concat_rows(&queries);
                let reid = cluster_contrastive_loss_on(&mut tape, q, &memory, &ids)?;
                reid_sum += tape.scalar(reid);
                rows = tape.value(q).to_rows();
                loss = tape.add(det, reid);
            }
            if !tape.scalar(loss).is_finite() {
                return Err(Error::NonFiniteLoss("pretrain"));
            }
            det_sum += tape.scalar(det);
            steps += 1;
            let grads = gradients(&tape, loss, &bound, &ck.model);
            ck.optimizer.step(ck.model.tensors_mut(), &grads)?;
            for (row, &id) in rows.iter().zip(&ids) {
                momentum_update_memory(&mut memory, row, id)?;
            }
        }
        ck.pretrain_epochs_done = epoch;
        let n = steps.max(1) as f64;
        Ok(PretrainMetrics { epoch, detection: det_sum / n, reid: reid_sum / n })
    }

    /// Ground-truth identity behind a target instance, for pseudo-label scoring only.
    fn withheld_identity(&self, key: InstanceKey) -> Option<u32> {
        let c = &self.target_candidates[key.scene as usize][key.candidate as usize];
        c.gt_index.map(|g| self.target[key.scene as usize].identities[g])
    }

    fn relabel(&self, ck: &mut Checkpoint, epoch: usize) -> Result<AdaptState> {
        let (instances, feats) =
            select_target_instances(&ck.model, self.target, &self.target_candidates, self.cfg.labeling.score_threshold)?;
        if feats.is_empty() {
            return Err(Error::NotEnoughTargetFeatures { requested: 1, available: 0 });
        }
        let source_bank = match ck.source_bank.take() {
            Some(b) => b,
            None => source_prototypes(&ck.model, self.source)?,
        };
        let n_random = self.cfg.labeling.n_random.min(feats.len());
        if n_random < self.cfg.labeling.n_random {
            log::warn!("only {} target instances; using {n_random} random prototypes", feats.len());
        }
        let random_bank = sample_random_prototypes(&feats, n_random, self.cfg.seed ^ epoch as u64)?;
        let mut counter = DistanceCounter::new();
        let (labels, source_assignment) = label_with_banks(&feats, &source_bank, &random_bank, &mut counter)?;
        let source_labels = labels.source_labels();
        let random_labels = labels.random_labels();

        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        for (k, &l) in instances.iter().zip(&source_labels) {
            if let Some(id) = self.withheld_identity(*k) {
                pred.push(l);
                truth.push(id);
            }
        }
        let pseudo_acc = bcubed_f1(&pred, &truth);

        ck.source_bank = Some(update_source_prototypes(&source_bank, &feats, &source_assignment)?);
        let vectors: Vec<Vec<f64>> = feats.iter().map(|f| f.vector.clone()).collect();
        let m = &self.cfg.memory;
        Ok(AdaptState {
            source_memory: init_cluster_memory(&vectors, &source_labels, m.tau, m.momentum)?,
            random_memory: init_cluster_memory(&vectors, &random_labels, m.tau, m.momentum)?,
            instance_memory: InstanceMemory::new(vectors, m.neighbor_threshold, m.momentum)?,
            instances,
            source_labels,
            random_labels,
            pseudo_acc,
            distance_evaluations: counter.evaluations(),
        })
    }

    fn adapt_epoch(&self, ck: &mut Checkpoint) -> Result<EpochMetrics> {
        let epoch = ck.adapt_epochs_done + 1;
        if ck.adapt_state.is_none() || (epoch - 1) % self.cfg.labeling.relabel_every == 0 {
            ck.adapt_state = Some(self.relabel(ck, epoch)?);
        }
        let mut state = ck.adapt_state.take().expect("labeling state");
        let by_scene = {
            let mut m: HashMap<u32, Vec<(usize, usize)>> = HashMap::new();
            for (i, k) in state.instances.iter().enumerate() {
                m.entry(k.scene).or_default().push((k.candidate as usize, i));
            }
            m
        };
        let lambda = balance_factor(self.source.len() as i64, self.target.len() as i64)?;
        let bs = self.cfg.optim.batch_size;
        let t_order = shuffled(self.target.len(), &mut epoch_rng(self.cfg.seed, 30, epoch));
        let s_order = shuffled(self.source.len(), &mut epoch_rng(self.cfg.seed, 31, epoch));
        let mut sums = LossTerms::default();
        let mut total_sum = 0.0;
        let mut steps = 0usize;
        for (it, t_batch) in t_order.chunks(bs).enumerate() {
            let s_batch: Vec<usize> = (0..bs).map(|k| s_order[(it * bs + k) % s_order.len()]).collect();
            let step = self.adapt_step(ck, &mut state, &by_scene, &s_batch, t_batch, lambda)?;
            sums.l_ins += step.l_ins;
            sums.l_c_t += step.l_c_t;
            sums.l_c_s += step.l_c_s;
            sums.l_t_e += step.l_t_e;
            sums.l_s_e += step.l_s_e;
            total_sum += step.l_ins + step.l_c_t + step.l_c_s + step.l_t_e + step.l_s_e;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let metrics = EpochMetrics {
            epoch,
            l_ins: sums.l_ins / n,
            l_c_t: sums.l_c_t / n,
            l_c_s: sums.l_c_s / n,
            l_t_e: sums.l_t_e / n,
            l_s_e: sums.l_s_e / n,
            total: total_sum / n,
            pseudo_acc: state.pseudo_acc,
        };
        ck.adapt_state = Some(state);
        ck.adapt_epochs_done = epoch;
        Ok(metrics)
    }

    fn adapt_step(
        &self,
        ck: &mut Checkpoint,
        state: &mut AdaptState,
        by_scene: &HashMap<u32, Vec<(usize, usize)>>,
        s_batch: &[usize],
        t_batch: &[usize],
        lambda: f64,
    ) -> Result<LossTerms> {
        let cfg = self.cfg;
        let thr = cfg.labeling.score_threshold;
        let mut tape = Tape::new();
        let bound = ck.model.bind(&mut tape, true);
        let mut image_probs = Vec::new();
        let mut det_probs = Vec::new();
        let mut reid_probs = Vec::new();
        let mut domains = Vec::new();
        let mut src_scores = Vec::new();
        let mut src_targets = Vec::new();
        let mut queries = Vec::new();
        let mut rows = Vec::new();

        let batch = s_batch.iter().map(|&i| (SOURCE, i)).chain(t_batch.iter().map(|&i| (TARGET, i)));
        for (domain, si) in batch {
            let (scene, cands) = if domain == SOURCE {
                (&self.source[si], &self.source_candidates[si])
            } else {
                (&self.target[si], &self.target_candidates[si])
            };
            let boxes: Vec<_> = cands.iter().map(|c| c.bbox).collect();
            let out = ck.model.scene_on(&mut tape, &bound, &scene.image, &boxes)?;
            let rev_map = gradient_reverse(&mut tape, out.attended);
            image_probs.push(bound.domain.image_probability(&mut tape, rev_map));
            domains.push(domain);
            let Some(r) = out.regions else {
                det_probs.push(None);
                reid_probs.push(None);
                continue;
            };
            let rev_pooled = gradient_reverse(&mut tape, r.pooled);
            det_probs.push(Some(bound.domain.det.probabilities(&mut tape, rev_pooled)));
            let score_vals = tape.value(r.scores).data().to_vec();
            let accepted: Vec<usize> = (0..score_vals.len()).filter(|&k| score_vals[k] >= thr).collect();
            reid_probs.push(if accepted.is_empty() {
                None
            } else {
                let e = tape.select_rows(r.embeddings, &accepted);
                let rev = gradient_reverse(&mut tape, e);
                Some(bound.domain.reid.probabilities(&mut tape, rev))
            });
            if domain == SOURCE {
                src_scores.push(r.scores);
                src_targets.extend(out.kept.iter().map(|&k| if cands[k].gt_index.is_some() { 1.0 } else { 0.0 }));
            } else if let Some(list) = by_scene.get(&(si as u32)) {
                let picked = rows_of(&out.kept, list.iter().map(|&(c, _)| c));
                let inst: Vec<usize> = {
                    let pos: HashMap<usize, usize> = list.iter().copied().collect();
                    picked.iter().map(|&r| pos[&out.kept[r]]).collect()
                };
                if !picked.is_empty() {
                    queries.push(tape.select_rows(r.embeddings, &picked));
                    rows.extend(inst);
                }
            }
        }

        let n_images = image_probs.len() as f64;
        let l_dom = image_domain_loss_on(&mut tape, &image_probs, &domains)?;
        let l_dom = tape.scale(l_dom, 1.0 / n_images);
        // Each branch is averaged over its instances so the term does not grow with the proposal count.
        let none = vec![None; det_probs.len()];
        let count = |tape: &Tape, p: &[Option<Var>]| p.iter().flatten().map(|&v| tape.shape(v).0).sum::<usize>().max(1);
        let (n_det, n_reid) = (count(&tape, &det_probs), count(&tape, &reid_probs));
        let det_part = instance_domain_loss_on(&mut tape, &det_probs, &none, &domains, lambda)?;
        let det_part = tape.scale(det_part, 1.0 / n_det as f64);
        let reid_part = instance_domain_loss_on(&mut tape, &none, &reid_probs, &domains, lambda)?;
        let reid_part = tape.scale(reid_part, 1.0 / n_reid as f64);
        let l_ins = tape.add(det_part, reid_part);
        let l_cons = consistency_regularizer_on(&mut tape, &image_probs, &det_probs)?;
        let l_cons = tape.scale(l_cons, 1.0 / n_images);

        let (l_c_t, l_c_s, l_t_e, l_s_e, query_rows) = if queries.is_empty() {
            let z = tape.scalar_constant(0.0);
            (z, z, z, z, Vec::new())
        } else {
            let q = tape.concat_rows(&queries);
            let random_pos: Vec<u32> = rows.iter().map(|&i| state.random_labels[i]).collect();
            let source_pos: Vec<u32> = rows.iter().map(|&i| state.source_labels[i]).collect();
            let l_c_t = cluster_contrastive_loss_on(&mut tape, q, &state.random_memory, &random_pos)?;
            let l_c_s = cluster_contrastive_loss_on(&mut tape, q, &state.source_memory, &source_pos)?;
            let mem = &state.instance_memory;
            let masks_t: Vec<Vec<bool>> =
                rows.iter().map(|&j| select_reliable_neighbors(mem, j, cfg.memory.neighbor_threshold)).collect();
            // Same-label restriction needs the anchor's label at each mask's own index.
            let masks_s: Vec<Vec<bool>> = masks_t
                .iter()
                .zip(&rows)
                .map(|(m, &j)| same_label(m, &state.source_labels, j))
                .collect();
            let l_t_e = instance_invariance_loss_on(&mut tape, q, &rows, mem, &masks_t, cfg.memory.tau, cfg.memory.neighbor_weight)?;
            let l_s_e = instance_invariance_loss_on(&mut tape, q, &rows, mem, &masks_s, cfg.memory.tau, cfg.memory.neighbor_weight)?;
            (l_c_t, l_c_s, l_t_e, l_s_e, tape.value(q).to_rows())
        };
        let total = total_loss_on(&mut tape, l_ins, l_c_t, l_c_s, l_t_e, l_s_e)?;

        let mut objective = total;
        let d = tape.scale(l_dom, cfg.train.image_alignment_weight);
        objective = tape.add(objective, d);
        let c = tape.scale(l_cons, cfg.train.consistency_weight);
        objective = tape.add(objective, c);
        if !src_scores.is_empty() {
            let s = tape.concat_rows(&src_scores);
            let det = bce_mean_on(&mut tape, s, &src_targets);
            objective = tape.add(objective, det);
        }
        if !tape.scalar(objective).is_finite() {
            return Err(Error::NonFiniteLoss("objective"));
        }
        let grads = gradients(&tape, objective, &bound, &ck.model);
        ck.optimizer.step(ck.model.tensors_mut(), &grads)?;

        for (q, &i) in query_rows.iter().zip(&rows) {
            momentum_update_memory(&mut state.random_memory, q, state.random_labels[i])?;
            momentum_update_memory(&mut state.source_memory, q, state.source_labels[i])?;
            state.instance_memory.update(i, q);
        }
        Ok(LossTerms {
            l_ins: tape.scalar(l_ins),
            l_c_t: tape.scalar(l_c_t),
            l_c_s: tape.scalar(l_c_s),
            l_t_e: tape.scalar(l_t_e),
            l_s_e: tape.scalar(l_s_e),
        })
    }
}

/// Pre-training and adaptation from a fresh model, collecting records in memory.
pub fn train_adaptation(
    cfg: &RunConfig,
    source: &[SceneSample],
    target: &[SceneSample],
) -> Result<(Checkpoint, MemorySink)> {
    let trainer = Trainer::new(cfg, source, target)?;
    let mut ck = Checkpoint::fresh(cfg)?;
    let mut sink = MemorySink::default();
    trainer.run(&mut ck, &mut sink)?;
    Ok((ck, sink))
}


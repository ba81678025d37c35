//! Training loop: round-robin scene loading, object and click sampling, optimization.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor};
use crate::backbone::{NormContext, NormMode};
use crate::clicksim::sample_initial_clicks;
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::losses::{self, LossConfig, LossReport};
use crate::model::{ModelConfig, SnapModel};
use crate::nn::{AdamW, AdamWConfig, ParamId};
use crate::pcdata::SceneSample;
use crate::promptenc::PromptSet;
use crate::textsem::{build_vocabulary, TextVocabulary, ToyProvider, DEFAULT_TEMPLATE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay to zero over the whole run.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub objects_per_scene: usize,
    pub max_click_budget: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub norm_mode: NormMode,
    pub schedule: LrSchedule,
    /// Linear warm-up length in steps.
    pub warmup_steps: usize,
    pub loss: LossConfig,
    pub aux_loss: bool,
    pub text_loss: bool,
    /// Final epochs trained with normalization by frozen running statistics
    /// (recalibrated when this phase starts), so training sees the same
    /// normalization as inference.
    pub frozen_norm_epochs: usize,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Fail a step if any inactive normalization branch receives a nonzero gradient.
    pub debug_isolation: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            objects_per_scene: 32,
            max_click_budget: 10,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            seed: 0,
            norm_mode: NormMode::Domain,
            schedule: LrSchedule::Constant,
            warmup_steps: 0,
            loss: LossConfig::default(),
            aux_loss: true,
            text_loss: true,
            frozen_norm_epochs: 0,
            checkpoint_every: 0,
            debug_isolation: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objects_per_scene == 0 || self.max_click_budget == 0 {
            return Err(Error::Config("objects_per_scene and max_click_budget must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate must be positive and weight_decay non-negative".into()));
        }
        if self.frozen_norm_epochs > self.epochs {
            return Err(Error::Config(format!(
                "frozen_norm_epochs {} exceeds epochs {}",
                self.frozen_norm_epochs, self.epochs
            )));
        }
        self.loss.click_weight.validate()?;
        Ok(())
    }

    /// The model configuration with this run's seed and normalization mode applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.encoder.norm_mode = self.norm_mode;
        m.init_seed = self.seed;
        m
    }
}

/// Scene order of one epoch as `(dataset, scene)` pairs.
///
/// Datasets alternate in fixed order. Each contributes as many scenes as the
/// largest one, cycling through fresh shuffles of itself as needed.
pub fn round_robin_batches(sizes: &[usize], seed: u64, epoch: usize) -> Result<Vec<(usize, usize)>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Config("round-robin loading needs nonempty datasets".into()));
    }
    let len = *sizes.iter().max().unwrap_or(&0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(epoch as u64));
    let orders: Vec<Vec<usize>> = sizes
        .iter()
        .map(|&n| {
            let mut out = Vec::with_capacity(len);
            while out.len() < len {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                out.extend(perm.into_iter().take(len - out.len()));
            }
            out
        })
        .collect();
    Ok((0..len).flat_map(|i| orders.iter().enumerate().map(move |(d, o)| (d, o[i]))).collect())
}

/// One JSON line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub scene_id: String,
    pub objects: usize,
    pub lr: f32,
    #[serde(flatten)]
    pub loss: LossReport,
}

/// Owns the optimizer state and rng of a training run.
pub struct Trainer {
    pub config: TrainConfig,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    vocab: Option<TextVocabulary>,
    /// Normalize with running statistics instead of batch statistics.
    pub frozen_norm: bool,
    pub step: usize,
    pub total_steps: usize,
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|v| *v as f64).collect()
}

fn to_tensor(rows: usize, cols: usize, v: &[f64]) -> Tensor {
    Tensor::new(rows, cols, v.iter().map(|x| *x as f32).collect())
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(AdamWConfig {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        });
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { config, optimizer, rng, vocab: None, frozen_norm: false, step: 0, total_steps: 0 })
    }

    /// Class vocabulary used by the text loss, one row per class id.
    pub fn set_vocabulary(&mut self, vocab: TextVocabulary) {
        self.vocab = Some(vocab);
    }

    pub fn vocabulary(&self) -> Option<&TextVocabulary> {
        self.vocab.as_ref()
    }

    fn lr(&self) -> f32 {
        let base = self.config.learning_rate;
        let warm = if self.config.warmup_steps > 0 && self.step < self.config.warmup_steps {
            (self.step + 1) as f32 / self.config.warmup_steps as f32
        } else {
            1.0
        };
        let sched = match self.config.schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine if self.total_steps > 0 => {
                let t = (self.step as f32 / self.total_steps as f32).min(1.0);
                0.5 * (1.0 + (std::f32::consts::PI * t).cos())
            }
            LrSchedule::Cosine => 1.0,
        };
        base * warm * sched
    }

    /// One optimization step on one scene. Returns `None` when the scene has no
    /// labeled instance to sample.
    pub fn train_step(&mut self, model: &mut SnapModel, scene: &SceneSample) -> Result<Option<LossReport>> {
        let cfg = &self.config;
        if model.config.encoder.norm_mode != cfg.norm_mode {
            return Err(Error::Config("model and training config disagree on norm_mode".into()));
        }
        let instances = scene.instances();
        if instances.is_empty() {
            log::warn!("skipping {}: no labeled instances", scene.scene_id);
            return Ok(None);
        }
        let ids: Vec<i32> = instances.keys().copied().collect();
        let m = cfg.objects_per_scene.min(ids.len());
        let mut picked: Vec<usize> = index::sample(&mut self.rng, ids.len(), m).into_vec();
        picked.sort_unstable();
        let n = scene.n_points();
        let diag = scene.bbox_diagonal() as f64;
        let mut targets = Vec::with_capacity(m * n);
        let mut weights = Vec::with_capacity(m * n);
        let mut clicks: Vec<Vec<Point3>> = Vec::with_capacity(m);
        let mut labels = Vec::with_capacity(m);
        for &p in &picked {
            let id = ids[p];
            let gt = scene.instance_mask(id);
            let k = self.rng.random_range(1..=cfg.max_click_budget);
            let idx = sample_initial_clicks(&gt, k, &mut self.rng)?;
            let pts: Vec<Point3> = idx.iter().map(|&i| scene.positions[i]).collect();
            weights.extend(losses::click_weights(&scene.positions, &pts, &cfg.loss.click_weight, diag.max(1e-9))?);
            targets.extend(gt.iter().map(|b| if *b { 1.0 } else { 0.0 }));
            clicks.push(pts);
            labels.push(scene.instance_class(id).unwrap_or(-1));
        }
        let prompts = PromptSet::new(clicks);

        let key = model.norm_key(scene.domain, &scene.scene_id);
        let mut g = Graph::training();
        let mut ctx = if self.frozen_norm { NormContext::inference() } else { NormContext::training() };
        let (f_pc, pe, frame) = model.encode_graph(&mut g, &scene.positions, scene.domain, &key, &mut ctx)?;
        let out = model.decode_graph(&mut g, f_pc, pe, &scene.positions, &frame, &prompts, cfg.aux_loss)?;

        let lc = &cfg.loss;
        let logits = to_f64(g.value(out.logits));
        let focal = losses::focal_loss(&logits, &targets, &weights, n, lc.focal_gamma, lc.focal_alpha)?;
        let probs: Vec<f64> = logits.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
        let dice = losses::dice_loss(&probs, &targets, &weights, n, lc.dice_smooth)?;
        let mut grad_logits = focal.grad.clone();
        for i in 0..grad_logits.len() {
            grad_logits[i] += dice.grad[i] * probs[i] * (1.0 - probs[i]);
        }
        let scores = to_f64(g.value(out.scores));
        let score = losses::score_loss(&scores, &probs, &targets, n, lc.score_tau)?;

        let mut parents = vec![out.logits, out.scores];
        let mut grads = vec![to_tensor(m, n, &grad_logits), to_tensor(m, 1, &score.grad)];
        let mut aux_value = 0.0;
        if let Some(aux) = out.aux {
            let a = losses::aux_loss(
                &to_f64(g.value(aux)),
                &targets,
                &weights,
                n,
                out.max_clicks,
                &out.slot_pad,
                lc.focal_gamma,
                lc.focal_alpha,
                lc.dice_smooth,
            )?;
            aux_value = a.value;
            parents.push(aux);
            grads.push(to_tensor(m * out.max_clicks, n, &a.grad));
        }
        let mut text_value = 0.0;
        if let (true, Some(vocab)) = (cfg.text_loss, &self.vocab) {
            let keep: Vec<usize> =
                (0..m).filter(|&i| labels[i] >= 0 && (labels[i] as usize) < vocab.len()).collect();
            if !keep.is_empty() {
                let dim = vocab.dim();
                let clip = g.value(out.clip);
                if clip.cols() != dim {
                    return Err(Error::Config(format!("clip head width {} differs from vocabulary {dim}", clip.cols())));
                }
                let mut emb = Vec::with_capacity(keep.len() * dim);
                for &i in &keep {
                    emb.extend(clip.row(i).iter().map(|v| *v as f64));
                }
                // renormalize in f64 so the unit-norm check sees no f32 rounding
                for row in emb.chunks_exact_mut(dim) {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    row.iter_mut().for_each(|v| *v /= norm);
                }
                let y: Vec<usize> = keep.iter().map(|&i| labels[i] as usize).collect();
                let t = losses::text_loss(&emb, &vocab.flat_f64(), &y, dim, lc.text_gamma, lc.temperature)?;
                text_value = t.value;
                let mut full = vec![0.0; m * dim];
                for (r, &i) in keep.iter().enumerate() {
                    full[i * dim..(i + 1) * dim].copy_from_slice(&t.grad[r * dim..(r + 1) * dim]);
                }
                parents.push(out.clip);
                grads.push(to_tensor(m, dim, &full));
            }
        }
        let report = losses::total_loss(focal.value, dice.value, aux_value, score.value, text_value);
        if !report.total.is_finite() {
            return Err(Error::State(format!("non-finite loss on {}", scene.scene_id)));
        }
        let root = g.scalar_with_grads(report.total as f32, &parents, grads);
        let gradients = g.backward(root);
        if cfg.debug_isolation {
            check_isolation(model, &gradients, &key)?;
        }
        let lr = self.lr();
        self.optimizer.step(&mut model.store, &gradients, lr);
        ctx.apply_updates(&mut model.store, model.config.encoder.momentum);
        self.step += 1;
        Ok(Some(report))
    }
}

/// Replaces every running statistic with its pooled value over `scenes` under the
/// current weights: the mean of per-scene means, and the mean of per-scene
/// variances plus the variance of the per-scene means. Branches that no scene
/// reaches keep their statistics.
pub fn recalibrate_norm_stats(model: &mut SnapModel, scenes: &[&SceneSample]) -> Result<()> {
    struct Acc {
        var_id: ParamId,
        mean: Vec<f64>,
        mean_sq: Vec<f64>,
        var: Vec<f64>,
        count: f64,
    }
    let mut acc: BTreeMap<ParamId, Acc> = BTreeMap::new();
    for scene in scenes {
        let key = model.norm_key(scene.domain, &scene.scene_id);
        let mut g = Graph::inference();
        let mut ctx = NormContext::training();
        model.encode_graph(&mut g, &scene.positions, scene.domain, &key, &mut ctx)?;
        for u in ctx.updates {
            let d = u.stats.mean.len();
            let a = acc.entry(u.running_mean).or_insert_with(|| Acc {
                var_id: u.running_var,
                mean: vec![0.0; d],
                mean_sq: vec![0.0; d],
                var: vec![0.0; d],
                count: 0.0,
            });
            for c in 0..d {
                let m = u.stats.mean[c] as f64;
                a.mean[c] += m;
                a.mean_sq[c] += m * m;
                a.var[c] += u.stats.var_unbiased[c] as f64;
            }
            a.count += 1.0;
        }
    }
    for (mean_id, a) in acc {
        let k = a.count;
        let mean: Vec<f32> = a.mean.iter().map(|v| (v / k) as f32).collect();
        let var: Vec<f32> = (0..a.mean.len())
            .map(|c| {
                let m = a.mean[c] / k;
                (a.var[c] / k + (a.mean_sq[c] / k - m * m).max(0.0)) as f32
            })
            .collect();
        model.store.value_mut(mean_id).data_mut().copy_from_slice(&mean);
        model.store.value_mut(a.var_id).data_mut().copy_from_slice(&var);
    }
    Ok(())
}

/// Errors if a normalization branch other than `active` received a nonzero gradient.
pub fn check_isolation(model: &SnapModel, grads: &crate::autograd::Gradients, active: &str) -> Result<()> {
    let keys = model.config.encoder.norm_keys();
    for (id, g) in grads.params() {
        let name = model.store.name(id);
        let inactive = keys
            .iter()
            .filter(|k| k.as_str() != active)
            .any(|k| name.ends_with(&format!(".{k}.gamma")) || name.ends_with(&format!(".{k}.beta")));
        if inactive && g.data().iter().any(|v| *v != 0.0) {
            return Err(Error::State(format!("gradient leaked into inactive branch {name}")));
        }
    }
    Ok(())
}

/// Vocabulary from the toy provider over the class names of `scenes`, which must agree.
pub fn toy_vocabulary(scenes: &[&SceneSample], dim: usize) -> Result<Option<TextVocabulary>> {
    let Some(first) = scenes.first() else { return Ok(None) };
    if scenes.iter().any(|s| s.class_names != first.class_names) || first.class_names.is_empty() {
        return Ok(None);
    }
    build_vocabulary(&ToyProvider { dim }, &first.class_names, DEFAULT_TEMPLATE).map(Some)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub steps: usize,
    pub skipped: usize,
    pub final_epoch_mean: Option<LossReport>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "model.safetensors";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const VOCAB_FILE: &str = "vocabulary.json";

fn mean_report(reports: &[LossReport]) -> Option<LossReport> {
    if reports.is_empty() {
        return None;
    }
    let k = reports.len() as f64;
    let s = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    Some(losses::total_loss(s(|r| r.focal), s(|r| r.dice), s(|r| r.aux), s(|r| r.score), s(|r| r.text)))
}

/// Trains `model` for `cfg.epochs` round-robin epochs over `datasets`.
///
/// With `out_dir`, writes a JSON-lines log and checkpoints there. `on_step` is
/// called after every step.
pub fn fit(
    model: &mut SnapModel,
    datasets: &[Vec<SceneSample>],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<FitSummary> {
    let sizes: Vec<usize> = datasets.iter().map(Vec::len).collect();
    round_robin_batches(&sizes, cfg.seed, 0)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.total_steps = cfg.epochs * sizes.iter().max().unwrap_or(&0) * sizes.len();
    if cfg.text_loss {
        let all: Vec<&SceneSample> = datasets.iter().flatten().collect();
        match toy_vocabulary(&all, model.config.clip_dim)? {
            Some(v) => trainer.set_vocabulary(v),
            None => log::warn!("datasets disagree on class names; text loss disabled"),
        }
    }
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            if let Some(v) = trainer.vocabulary() {
                std::fs::write(dir.join(VOCAB_FILE), serde_json::to_vec_pretty(v)?)?;
            }
            Some(BufWriter::new(File::create(dir.join(LOG_FILE))?))
        }
        None => None,
    };
    let mut skipped = 0;
    let mut last_epoch = Vec::new();
    for epoch in 0..cfg.epochs {
        last_epoch.clear();
        if cfg.frozen_norm_epochs > 0 && epoch + cfg.frozen_norm_epochs == cfg.epochs {
            let all: Vec<&SceneSample> = datasets.iter().flatten().collect();
            recalibrate_norm_stats(model, &all)?;
            trainer.frozen_norm = true;
            log::info!("epoch {epoch}: switching to frozen normalization statistics");
        }
        for (d, s) in round_robin_batches(&sizes, cfg.seed, epoch)? {
            let scene = &datasets[d][s];
            let lr = trainer.lr();
            match trainer.train_step(model, scene)? {
                Some(report) => {
                    let rec = StepRecord {
                        epoch,
                        step: trainer.step - 1,
                        scene_id: scene.scene_id.clone(),
                        objects: cfg.objects_per_scene.min(scene.instances().len()),
                        lr,
                        loss: report.clone(),
                    };
                    if let Some(w) = log.as_mut() {
                        serde_json::to_writer(&mut *w, &rec)?;
                        w.write_all(b"\n")?;
                    }
                    on_step(&rec);
                    last_epoch.push(report);
                }
                None => skipped += 1,
            }
        }
        if let Some(r) = mean_report(&last_epoch) {
            log::info!("epoch {epoch}: mean loss {:.4}", r.total);
        }
        if let (Some(dir), true) = (out_dir, cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
            model.save_checkpoint(dir.join(CHECKPOINT_FILE))?;
        }
    }
    let mut checkpoint = None;
    if let Some(dir) = out_dir {
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
        let path = dir.join(CHECKPOINT_FILE);
        model.save_checkpoint(&path)?;
        checkpoint = Some(path);
    }
    Ok(FitSummary {
        steps: trainer.step,
        skipped,
        final_epoch_mean: mean_report(&last_epoch),
        checkpoint,
        log: out_dir.map(|d| d.join(LOG_FILE)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_repeats_small_datasets() {
        let order = round_robin_batches(&[2, 6], 3, 0).unwrap();
        assert_eq!(order.len(), 12);
        for (i, (d, _)) in order.iter().enumerate() {
            assert_eq!(*d, i % 2);
        }
        let mut small = [0; 2];
        let mut big = [0; 6];
        for (d, s) in &order {
            if *d == 0 {
                small[*s] += 1;
            } else {
                big[*s] += 1;
            }
        }
        assert_eq!(small, [3, 3]);
        assert_eq!(big, [1; 6]);
    }

    #[test]
    fn single_dataset_is_a_permutation() {
        let order = round_robin_batches(&[5], 1, 2).unwrap();
        let mut s: Vec<usize> = order.iter().map(|x| x.1).collect();
        s.sort();
        assert_eq!(s, vec![0, 1, 2, 3, 4]);
        assert_eq!(order, round_robin_batches(&[5], 1, 2).unwrap());
        assert_ne!(order, round_robin_batches(&[5], 1, 3).unwrap());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(round_robin_batches(&[3, 0], 0, 0), Err(Error::Config(_))));
        assert!(round_robin_batches(&[], 0, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { objects_per_scene: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { max_click_budget: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 2, frozen_norm_epochs: 3, ..Default::default() }.validate().is_err());
        let cfg = TrainConfig { norm_mode: NormMode::Batch, seed: 4, ..Default::default() };
        let m = cfg.model_config();
        assert_eq!((m.encoder.norm_mode, m.init_seed), (NormMode::Batch, 4));
    }
}

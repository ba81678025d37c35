use std::collections::BTreeSet;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use snapkit_core::autoprompt::{generate_auto_masks, AutoPromptConfig};
use snapkit_core::clicksim::{simulate_interaction, ClickStrategy, ObjectTrajectory};
use snapkit_core::metrics::{average_precision, iou_at_k, panoptic_quality, GtInstance, PanopticLabels, ScoredMask};
use snapkit_core::model::SnapModel;
use snapkit_core::pcdata::{generate_corpus, load_scene, save_scene, CorpusConfig, DomainId, SceneSample, MANIFEST};
use snapkit_core::textsem::{assemble_panoptic, classify_masks, TextVocabulary, TEXT_TEMPERATURE};
use snapkit_core::train::{fit, TrainConfig, VOCAB_FILE};
use snapkit_service::AppState;

#[derive(Parser)]
#[command(name = "snapkit", version, about = "Promptable point-cloud segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus as scene archives.
    GenData {
        #[arg(long)]
        domain: DomainId,
        #[arg(long, default_value_t = 20)]
        n_scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2048)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; each data dir is one dataset.
    Train {
        /// JSON training config; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        data_dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Segment every object in one scene without prompts.
    Auto {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the vocabulary saved next to the checkpoint, if any.
        #[arg(long)]
        vocabulary: Option<PathBuf>,
        /// JSON auto-prompt config; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Panoptic and AP metrics for predictions, and click IoU@k for a checkpoint.
    Eval {
        /// Ground-truth scene archive or a directory of them.
        #[arg(long)]
        gt: PathBuf,
        /// Prediction file from `auto`, or a directory with one `<scene dir name>.json` each.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 3, 5])]
        ks: Vec<usize>,
        #[arg(long, default_value = "iterative")]
        strategy: ClickStrategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Class ids treated as stuff; all others are things.
        #[arg(long, value_delimiter = ',')]
        stuff: Vec<i32>,
        #[arg(long)]
        class_agnostic: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Serve the HTTP session API.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        vocabulary: Option<PathBuf>,
    },
    /// Run the click protocol and print per-object IoU trajectories as JSON lines.
    Simulate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        budget: usize,
        #[arg(long, default_value = "iterative")]
        strategy: ClickStrategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Output of `auto`: per-point labels plus the scored masks they came from.
#[derive(Debug, Serialize, Deserialize)]
struct PredictionFile {
    scene_id: String,
    instance: Vec<i32>,
    class: Vec<i32>,
    masks: Vec<PredMask>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredMask {
    points: Vec<usize>,
    score: f64,
    class: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_name: Option<String>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    scenes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    panoptic: Option<snapkit_core::metrics::PanopticReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ap: Option<snapkit_core::metrics::ApReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iou_at_k: Option<std::collections::BTreeMap<usize, f64>>,
}

/// A scene archive, or every archive directly under `dir` in name order.
fn load_dataset(dir: &Path) -> Result<Vec<(String, SceneSample)>> {
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if dir.join(MANIFEST).exists() {
        return Ok(vec![(name(dir), load_scene(dir)?)]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        bail!("no scene archives under {}", dir.display());
    }
    subdirs.iter().map(|p| Ok((name(p), load_scene(p)?))).collect()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn vocabulary_for(checkpoint: Option<&Path>, explicit: Option<&Path>) -> Result<Option<TextVocabulary>> {
    if let Some(p) = explicit {
        return read_json(p).map(Some);
    }
    let sibling = checkpoint.and_then(Path::parent).map(|d| d.join(VOCAB_FILE));
    match sibling {
        Some(p) if p.exists() => read_json(&p).map(Some),
        _ => Ok(None),
    }
}

fn gen_data(domain: DomainId, n_scenes: usize, seed: u64, points: usize, out: &Path) -> Result<()> {
    let mut cfg = CorpusConfig::new(domain, n_scenes, seed);
    cfg.points_per_scene = points;
    for (i, scene) in generate_corpus(&cfg)?.iter().enumerate() {
        save_scene(scene, out.join(format!("scene_{i:04}")))?;
    }
    println!("wrote {n_scenes} {domain} scenes to {}", out.display());
    Ok(())
}

fn train(config: Option<&Path>, data_dirs: &[PathBuf], out: &Path, epochs: Option<usize>) -> Result<()> {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let datasets: Vec<Vec<SceneSample>> = data_dirs
        .iter()
        .map(|d| Ok(load_dataset(d)?.into_iter().map(|(_, s)| s).collect()))
        .collect::<Result<_>>()?;
    let mut model = SnapModel::new(cfg.model_config())?;
    let steps_per_epoch = datasets.iter().map(Vec::len).max().unwrap_or(0) * datasets.len();
    let summary = fit(&mut model, &datasets, &cfg, Some(out), |r| {
        if steps_per_epoch > 0 && (r.step + 1) % steps_per_epoch == 0 {
            log::info!("epoch {} step {} loss {:.4}", r.epoch, r.step + 1, r.loss.total);
        }
    })?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn auto(checkpoint: &Path, scene: &Path, out: &Path, vocabulary: Option<&Path>, config: Option<&Path>) -> Result<()> {
    let model = SnapModel::load_checkpoint(checkpoint)?;
    let scene = load_scene(scene)?;
    let cfg: AutoPromptConfig = match config {
        Some(p) => read_json(p)?,
        None => AutoPromptConfig::default(),
    };
    let result = generate_auto_masks(&model, &scene.positions, scene.domain, &scene.scene_id, &cfg)?;
    let vocab = vocabulary_for(Some(checkpoint), vocabulary)?;
    let (class_ids, names): (Vec<i32>, Vec<Option<String>>) = match (&vocab, result.is_empty()) {
        (Some(v), false) => {
            let (ids, _) = classify_masks(&result.clip_embeddings, v, TEXT_TEMPERATURE)?;
            ids.iter().map(|&i| (i as i32, Some(v.class_names[i].clone()))).unzip()
        }
        _ => (vec![0; result.len()], vec![None; result.len()]),
    };
    let (instance, class) = assemble_panoptic(&result, &class_ids, scene.n_points())?;
    let masks = (0..result.len())
        .map(|m| PredMask {
            points: (0..scene.n_points()).filter(|&i| result.masks[m][i]).collect(),
            score: result.scores[m] as f64,
            class: class_ids[m],
            class_name: names[m].clone(),
        })
        .collect();
    let file = PredictionFile { scene_id: scene.scene_id.clone(), instance, class, masks };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, serde_json::to_vec(&file)?)?;
    println!(
        "{} masks from {} prompts ({:?} per iteration) -> {}",
        result.len(),
        result.prompts_issued(),
        result.prompts_per_iteration,
        out.display()
    );
    Ok(())
}

fn prediction_path(pred: &Path, scene_name: &str, single: bool) -> PathBuf {
    if single && !pred.is_dir() {
        pred.to_path_buf()
    } else {
        pred.join(format!("{scene_name}.json"))
    }
}

/// Scene-level labels concatenated into one label set, with instance ids made
/// unique per scene so segments never merge across scenes.
fn concat_labels(parts: &[(&[i32], &[i32])]) -> Result<PanopticLabels> {
    let mut instance = Vec::new();
    let mut class = Vec::new();
    let mut offset = 0i32;
    for (inst, cls) in parts {
        let max = inst.iter().copied().max().unwrap_or(-1);
        instance.extend(inst.iter().map(|&i| if i < 0 { i } else { i + offset }));
        class.extend_from_slice(cls);
        offset += max + 1;
    }
    Ok(PanopticLabels::new(instance, class)?)
}

#[allow(clippy::too_many_arguments)]
fn eval(
    gt: &Path,
    pred: Option<&Path>,
    checkpoint: Option<&Path>,
    ks: &[usize],
    strategy: ClickStrategy,
    seed: u64,
    stuff: &[i32],
    class_agnostic: bool,
    report_path: Option<&Path>,
) -> Result<()> {
    if pred.is_none() && checkpoint.is_none() {
        bail!("give --pred, --checkpoint or both");
    }
    let scenes = load_dataset(gt)?;
    let single = gt.join(MANIFEST).exists();
    let mut report = EvalReport { scenes: scenes.len(), panoptic: None, ap: None, iou_at_k: None };

    if let Some(pred) = pred {
        let preds: Vec<PredictionFile> =
            scenes.iter().map(|(name, _)| read_json(&prediction_path(pred, name, single))).collect::<Result<_>>()?;
        for ((name, s), p) in scenes.iter().zip(&preds) {
            if p.instance.len() != s.n_points() {
                bail!("prediction for {name} has {} points, scene has {}", p.instance.len(), s.n_points());
            }
        }
        let gt_labels = concat_labels(&scenes.iter().map(|(_, s)| (&s.instance_ids[..], &s.class_ids[..])).collect::<Vec<_>>())?;
        let pred_labels = concat_labels(&preds.iter().map(|p| (&p.instance[..], &p.class[..])).collect::<Vec<_>>())?;
        let stuff: BTreeSet<i32> = stuff.iter().copied().collect();
        let things: BTreeSet<i32> = if class_agnostic {
            BTreeSet::from([0])
        } else {
            gt_labels.class.iter().copied().filter(|c| *c >= 0 && !stuff.contains(c)).collect()
        };
        report.panoptic = Some(panoptic_quality(&pred_labels, &gt_labels, &things, &stuff, class_agnostic)?);

        let total: usize = scenes.iter().map(|(_, s)| s.n_points()).sum();
        let mut scored = Vec::new();
        let mut gts = Vec::new();
        let mut offset = 0;
        for ((_, s), p) in scenes.iter().zip(&preds) {
            for m in &p.masks {
                let mut mask = vec![false; total];
                for &i in &m.points {
                    if i >= s.n_points() {
                        bail!("mask point {i} out of range");
                    }
                    mask[offset + i] = true;
                }
                scored.push(ScoredMask { mask, score: m.score, class: if class_agnostic { 0 } else { m.class } });
            }
            for (id, idx) in s.instances() {
                let mut mask = vec![false; total];
                for i in idx {
                    mask[offset + i] = true;
                }
                let class = if class_agnostic { 0 } else { s.instance_class(id).unwrap_or(-1) };
                gts.push(GtInstance { mask, class });
            }
            offset += s.n_points();
        }
        report.ap = Some(average_precision(&scored, &gts)?);
    }

    if let Some(ckpt) = checkpoint {
        let model = SnapModel::load_checkpoint(ckpt)?;
        let budget = ks.iter().copied().max().unwrap_or(1);
        let mut traj: Vec<Vec<f64>> = Vec::new();
        for (_, s) in &scenes {
            traj.extend(simulate_interaction(&model, s, budget, strategy, seed)?.into_iter().map(|t| t.ious));
        }
        report.iou_at_k = Some(iou_at_k(&traj, ks)?);
    }

    let text = serde_json::to_string_pretty(&report)?;
    if let Some(p) = report_path {
        fs::write(p, &text)?;
    }
    if let Some(pq) = &report.panoptic {
        println!("PQ {:.4}  SQ {:.4}  RQ {:.4}", pq.pq, pq.sq, pq.rq);
    }
    if let Some(ap) = &report.ap {
        println!("AP {:.4}  AP50 {:.4}  AP25 {:.4}", ap.ap, ap.ap50, ap.ap25);
    }
    if let Some(ious) = &report.iou_at_k {
        for (k, v) in ious {
            println!("IoU@{k} {v:.4}");
        }
    }
    Ok(())
}

fn simulate(checkpoint: &Path, data: &Path, budget: usize, strategy: ClickStrategy, seed: u64) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        scene: &'a str,
        #[serde(flatten)]
        trajectory: &'a ObjectTrajectory,
    }
    let model = SnapModel::load_checkpoint(checkpoint)?;
    for (name, s) in load_dataset(data)? {
        for t in simulate_interaction(&model, &s, budget, strategy, seed)? {
            println!("{}", serde_json::to_string(&Line { scene: &name, trajectory: &t })?);
        }
    }
    Ok(())
}

fn serve(checkpoint: Option<&Path>, host: &str, port: u16, vocabulary: Option<&Path>) -> Result<()> {
    let model = match checkpoint {
        Some(p) => Some(SnapModel::load_checkpoint(p)?),
        None => {
            log::warn!("no checkpoint given; session creation will return 503");
            None
        }
    };
    let mut state = AppState::new(model);
    if let Some(v) = vocabulary_for(checkpoint, vocabulary)? {
        state = state.with_vocabulary(v);
    }
    let addr: SocketAddr = format!("{host}:{port}").parse().context("bad host or port")?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(snapkit_service::serve(addr, state))?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData { domain, n_scenes, seed, points, out } => gen_data(domain, n_scenes, seed, points, &out),
        Command::Train { config, data_dirs, out, epochs } => train(config.as_deref(), &data_dirs, &out, epochs),
        Command::Auto { checkpoint, scene, out, vocabulary, config } => {
            auto(&checkpoint, &scene, &out, vocabulary.as_deref(), config.as_deref())
        }
        Command::Eval { gt, pred, checkpoint, ks, strategy, seed, stuff, class_agnostic, report } => eval(
            &gt,
            pred.as_deref(),
            checkpoint.as_deref(),
            &ks,
            strategy,
            seed,
            &stuff,
            class_agnostic,
            report.as_deref(),
        ),
        Command::Serve { checkpoint, port, host, vocabulary } => {
            serve(checkpoint.as_deref(), &host, port, vocabulary.as_deref())
        }
        Command::Simulate { checkpoint, data, budget, strategy, seed } => simulate(&checkpoint, &data, budget, strategy, seed),
    }
}

//! Joint indoor + outdoor training under one normalization mode; reports IoU@1.
//!
//! `cargo run --release --example norm_ablation -- [domain|batch] [scenes] [epochs] [frozen] [points]`

use std::time::Instant;

use snapkit_core::backbone::NormMode;
use snapkit_core::clicksim::{simulate_interaction, ClickStrategy};
use snapkit_core::metrics::iou_at_k;
use snapkit_core::model::SnapModel;
use snapkit_core::pcdata::{generate_corpus, CorpusConfig, DomainId};
use snapkit_core::train::{fit, TrainConfig};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mode: NormMode = match args.get(1).map(String::as_str) {
        Some("batch") => NormMode::Batch,
        _ => NormMode::Domain,
    };
    let n: usize = args.get(2).map_or(Ok(8), |s| s.parse())?;
    let epochs: usize = args.get(3).map_or(Ok(60), |s| s.parse())?;
    let frozen: usize = args.get(4).map_or(Ok(20), |s| s.parse())?;
    let points: usize = args.get(5).map_or(Ok(1024), |s| s.parse())?;
    let corpus = |d| {
        let mut c = CorpusConfig::new(d, n, 3);
        c.points_per_scene = points;
        generate_corpus(&c)
    };
    let datasets = vec![corpus(DomainId::Indoor)?, corpus(DomainId::Outdoor)?];
    let cfg = TrainConfig { epochs, norm_mode: mode, frozen_norm_epochs: frozen, ..Default::default() };
    let mut model = SnapModel::new(cfg.model_config())?;
    let t0 = Instant::now();
    let mut acc = Vec::new();
    fit(&mut model, &datasets, &cfg, None, |r| {
        acc.push(r.loss.total);
        if acc.len() == 2 * n {
            eprintln!("epoch {} loss {:.4} ({:.0}s)", r.epoch, acc.iter().sum::<f64>() / acc.len() as f64, t0.elapsed().as_secs_f64());
            acc.clear();
        }
    })?;
    let mut all = Vec::new();
    for ds in &datasets {
        let mut traj = Vec::new();
        for s in ds {
            traj.extend(simulate_interaction(&model, s, 1, ClickStrategy::Iterative, 1)?.into_iter().map(|t| t.ious));
        }
        eprintln!("{}: IoU@1 {:.4}", ds[0].domain, iou_at_k(&traj, &[1])?[&1]);
        all.extend(traj);
    }
    eprintln!("{mode:?} overall IoU@1 {:.4}", iou_at_k(&all, &[1])?[&1]);
    Ok(())
}

use snapkit_core::model::SnapModel;
use snapkit_core::pcdata::{generate_corpus, CorpusConfig, DomainId, SceneSample};
use snapkit_core::promptenc::PromptSet;
use snapkit_core::train::{fit, recalibrate_norm_stats, StepRecord, TrainConfig, CHECKPOINT_FILE, LOG_FILE, VOCAB_FILE};

fn corpus(domain: DomainId, n: usize, seed: u64) -> Vec<SceneSample> {
    let mut c = CorpusConfig::new(domain, n, seed);
    c.points_per_scene = 400;
    generate_corpus(&c).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig { epochs: 2, objects_per_scene: 4, max_click_budget: 3, seed: 11, ..Default::default() }
}

fn snapshot(model: &SnapModel, filter: impl Fn(&str) -> bool) -> Vec<(String, Vec<u32>)> {
    model
        .store
        .named()
        .filter(|(n, _)| filter(n))
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn fit_is_deterministic_and_writes_artifacts() {
    let scenes = corpus(DomainId::Indoor, 3, 1);
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let run = |out: Option<&std::path::Path>| {
        let mut model = SnapModel::new(cfg.model_config()).unwrap();
        let mut records: Vec<StepRecord> = Vec::new();
        let summary = fit(&mut model, std::slice::from_ref(&scenes), &cfg, out, |r| records.push(r.clone())).unwrap();
        (model, records, summary)
    };
    let (a, ra, summary) = run(Some(dir.path()));
    let (b, rb, _) = run(None);
    assert_eq!(ra, rb);
    assert_eq!(snapshot(&a, |_| true), snapshot(&b, |_| true));
    assert_eq!(summary.steps, 6);

    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let lines: Vec<StepRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines, ra);
    assert!(dir.path().join(VOCAB_FILE).exists());

    let loaded = SnapModel::load_checkpoint(dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(snapshot(&loaded, |_| true), snapshot(&a, |_| true));
    let s = &scenes[0];
    let prompts = PromptSet::single_clicks(&s.positions[..3]);
    let p1 = a.predict(s, s.domain, &prompts, false).unwrap();
    let p2 = loaded.predict(s, s.domain, &prompts, false).unwrap();
    assert_eq!(p1.mask_logits.data(), p2.mask_logits.data());
    assert_eq!(p1.scores, p2.scores);
}

#[test]
fn unused_domain_branches_stay_at_init() {
    let scenes = corpus(DomainId::Indoor, 2, 2);
    let cfg = TrainConfig { debug_isolation: true, ..small_config() };
    let mut model = SnapModel::new(cfg.model_config()).unwrap();
    let other = |n: &str| n.contains(".outdoor.") || n.contains(".aerial.");
    let before = snapshot(&model, other);
    let indoor_before = snapshot(&model, |n| n.contains(".indoor."));
    assert!(!before.is_empty());
    fit(&mut model, &[scenes], &cfg, None, |_| {}).unwrap();
    assert_eq!(snapshot(&model, other), before, "gamma, beta and running stats of unseen domains");
    assert_ne!(snapshot(&model, |n| n.contains(".indoor.")), indoor_before);
}

#[test]
fn frozen_phase_keeps_recalibrated_statistics() {
    let scenes = corpus(DomainId::Outdoor, 2, 3);
    let cfg = TrainConfig { frozen_norm_epochs: 2, ..small_config() };
    let mut model = SnapModel::new(cfg.model_config()).unwrap();
    // the phase covers every epoch, so recalibration sees the initial weights
    let mut reference = SnapModel::new(cfg.model_config()).unwrap();
    recalibrate_norm_stats(&mut reference, &scenes.iter().collect::<Vec<_>>()).unwrap();
    fit(&mut model, &[scenes], &cfg, None, |_| {}).unwrap();
    let running = |n: &str| n.contains("running");
    assert_eq!(snapshot(&model, running), snapshot(&reference, running));
    assert_ne!(snapshot(&model, |n| n.ends_with(".outdoor.gamma")), snapshot(&reference, |n| n.ends_with(".outdoor.gamma")));
}

#[test]
fn joint_training_alternates_domains() {
    let datasets = vec![corpus(DomainId::Indoor, 2, 4), corpus(DomainId::Aerial, 3, 5)];
    let cfg = TrainConfig { epochs: 1, ..small_config() };
    let mut model = SnapModel::new(cfg.model_config()).unwrap();
    let mut seen = Vec::new();
    fit(&mut model, &datasets, &cfg, None, |r| seen.push(r.scene_id.clone())).unwrap();
    assert_eq!(seen.len(), 6);
    for (k, id) in seen.iter().enumerate() {
        let want = if k % 2 == 0 { &datasets[0] } else { &datasets[1] };
        assert!(want.iter().any(|s| &s.scene_id == id), "step {k} took {id}");
    }
}

use snapkit_core::autoprompt::{generate_auto_masks, AutoPromptConfig};
use snapkit_core::clicksim::{simulate_interaction, ClickStrategy};
use snapkit_core::metrics::mask_iou;
use snapkit_core::model::{ModelConfig, SnapModel};
use snapkit_core::pcdata::{generate_synthetic_scene, DomainId, SceneSample, SyntheticSceneConfig};
use snapkit_core::textsem::assemble_panoptic;

fn scene(domain: DomainId, seed: u64) -> SceneSample {
    let mut cfg = SyntheticSceneConfig::new(domain, seed);
    cfg.n_objects = 5;
    cfg.total_points = Some(600);
    generate_synthetic_scene(&cfg).unwrap()
}

#[test]
fn first_click_agrees_across_strategies() {
    let model = SnapModel::new(ModelConfig::default()).unwrap();
    let s = scene(DomainId::Indoor, 1);
    let a = simulate_interaction(&model, &s, 1, ClickStrategy::Random, 9).unwrap();
    let b = simulate_interaction(&model, &s, 1, ClickStrategy::Iterative, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), s.instances().len());
}

#[test]
fn trajectories_are_reproducible() {
    let model = SnapModel::new(ModelConfig::default()).unwrap();
    let s = scene(DomainId::Outdoor, 2);
    for strategy in [ClickStrategy::Random, ClickStrategy::Iterative] {
        let a = simulate_interaction(&model, &s, 4, strategy, 3).unwrap();
        assert_eq!(a, simulate_interaction(&model, &s, 4, strategy, 3).unwrap());
        for t in &a {
            assert_eq!(t.ious.len(), 4);
            assert!(t.ious.iter().all(|v| (0.0..=1.0).contains(v)));
            let members = s.instance_mask(t.instance_id);
            assert!(t.clicks.iter().all(|&c| members[c]), "random clicks stay on the object");
        }
    }
    assert!(simulate_interaction(&model, &s, 0, ClickStrategy::Random, 3).is_err());
}

#[test]
fn iterative_clicks_extend_the_previous_ones() {
    let model = SnapModel::new(ModelConfig::default()).unwrap();
    let s = scene(DomainId::Indoor, 5);
    let short = simulate_interaction(&model, &s, 2, ClickStrategy::Iterative, 1).unwrap();
    let long = simulate_interaction(&model, &s, 5, ClickStrategy::Iterative, 1).unwrap();
    for (a, b) in short.iter().zip(&long) {
        assert_eq!(a.ious[..], b.ious[..2]);
        assert!(b.clicks.starts_with(&a.clicks));
    }
}

#[test]
fn auto_masks_respect_nms_and_label_assembly() {
    let model = SnapModel::new(ModelConfig::default()).unwrap();
    let s = scene(DomainId::Aerial, 4);
    let cfg = AutoPromptConfig { tau_s: 0.05, ..Default::default() };
    let r = generate_auto_masks(&model, &s.positions, s.domain, &s.scene_id, &cfg).unwrap();
    assert_eq!(r.prompts_per_iteration.len(), cfg.k_max);
    for i in 0..r.len() {
        assert!(r.scores[i] >= cfg.tau_s);
        assert!(r.provenance[i].iteration < cfg.k_max);
        assert_eq!(r.provenance[i].point, s.positions[r.provenance[i].point_index]);
        for j in 0..i {
            assert!(mask_iou(&r.masks[i], &r.masks[j]).unwrap() <= cfg.tau_nms);
        }
    }
    let classes: Vec<i32> = (0..r.len() as i32).map(|i| i % 3).collect();
    let (inst, class) = assemble_panoptic(&r, &classes, s.n_points()).unwrap();
    let cov = r.coverage(s.n_points());
    for p in 0..s.n_points() {
        assert_eq!(inst[p] >= 0, cov[p]);
        if inst[p] >= 0 {
            let m = inst[p] as usize;
            assert!(r.masks[m][p]);
            assert_eq!(class[p], classes[m]);
        }
    }
}

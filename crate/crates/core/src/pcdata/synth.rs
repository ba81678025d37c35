//! Synthetic multi-domain scenes built from boxes, ellipsoids and flat patches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DomainId, SceneSample};
use crate::error::{input_err, Error, Result};
use crate::geometry::Point3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Box,
    Sphere,
    Plane,
}

struct CatalogEntry {
    name: &'static str,
    kind: PrimitiveKind,
    /// Half extents in units of `extent / 10`. Planes use the first two and lie in
    /// the local xy plane unless `upright` is set, in which case they stand in xz.
    half: [f32; 3],
    upright: bool,
}

const CATALOG: [CatalogEntry; 10] = [
    CatalogEntry { name: "cabinet", kind: PrimitiveKind::Box, half: [0.40, 0.30, 0.90], upright: false },
    CatalogEntry { name: "table", kind: PrimitiveKind::Box, half: [0.80, 0.50, 0.38], upright: false },
    CatalogEntry { name: "crate", kind: PrimitiveKind::Box, half: [0.30, 0.30, 0.30], upright: false },
    CatalogEntry { name: "bench", kind: PrimitiveKind::Box, half: [0.90, 0.22, 0.22], upright: false },
    CatalogEntry { name: "ball", kind: PrimitiveKind::Sphere, half: [0.35, 0.35, 0.35], upright: false },
    CatalogEntry { name: "boulder", kind: PrimitiveKind::Sphere, half: [0.60, 0.45, 0.35], upright: false },
    CatalogEntry { name: "pillar", kind: PrimitiveKind::Sphere, half: [0.22, 0.22, 1.00], upright: false },
    CatalogEntry { name: "rug", kind: PrimitiveKind::Plane, half: [0.80, 0.60, 0.0], upright: false },
    CatalogEntry { name: "panel", kind: PrimitiveKind::Plane, half: [0.70, 0.65, 0.0], upright: true },
    CatalogEntry { name: "strip", kind: PrimitiveKind::Plane, half: [1.00, 0.18, 0.0], upright: false },
];

/// Class vocabulary shared by every synthetic scene.
pub fn synthetic_class_names() -> Vec<String> {
    CATALOG.iter().map(|c| c.name.to_string()).collect()
}

pub fn default_extent(domain: DomainId) -> f32 {
    match domain {
        DomainId::Indoor => 10.0,
        DomainId::Outdoor => 100.0,
        DomainId::Aerial => 50.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneConfig {
    pub seed: u64,
    pub domain: DomainId,
    pub n_objects: usize,
    /// Scene side length in meters.
    pub extent: f32,
    /// Inclusive range of points sampled per object.
    pub points_per_object: (usize, usize),
    /// Proportions of box, sphere and plane-patch objects.
    pub primitive_mix: [f32; 3],
    pub noise_sigma: f32,
    /// When set, the scene has exactly this many points split evenly over the
    /// objects and `points_per_object` is ignored.
    #[serde(default)]
    pub total_points: Option<usize>,
}

impl SyntheticSceneConfig {
    pub fn new(domain: DomainId, seed: u64) -> Self {
        let extent = default_extent(domain);
        Self {
            seed,
            domain,
            n_objects: 6,
            extent,
            points_per_object: (200, 400),
            primitive_mix: [0.4, 0.3, 0.3],
            noise_sigma: 0.002 * extent,
            total_points: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_objects == 0 {
            return input_err("n_objects must be at least 1");
        }
        if !(self.extent > 0.0) || !self.extent.is_finite() {
            return input_err("extent must be positive");
        }
        let (lo, hi) = self.points_per_object;
        if self.total_points.is_none() && (lo == 0 || lo > hi) {
            return input_err("points_per_object must be a non-empty range of positive counts");
        }
        if let Some(t) = self.total_points {
            if t < self.n_objects {
                return input_err("total_points must give every object at least one point");
            }
        }
        if self.primitive_mix.iter().any(|p| *p < 0.0 || !p.is_finite())
            || (self.primitive_mix.iter().sum::<f32>() - 1.0).abs() > 1e-4
        {
            return input_err("primitive_mix must be non-negative and sum to 1");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return input_err("noise_sigma must be non-negative");
        }
        Ok(())
    }
}

/// The generating shape of one synthetic instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub class_id: i32,
    pub center: Point3,
    pub yaw: f32,
    /// Half extents along the local axes (zero along a plane's normal).
    pub half: [f32; 3],
}

impl Primitive {
    fn to_local(&self, p: &Point3) -> Point3 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let (s, c) = self.yaw.sin_cos();
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    fn to_world(&self, l: &Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * l[0] - s * l[1],
            self.center[1] + s * l[0] + c * l[1],
            self.center[2] + l[2],
        ]
    }

    /// Whether `p` lies inside the primitive grown by `margin` meters.
    pub fn contains_inflated(&self, p: &Point3, margin: f32) -> bool {
        let l = self.to_local(p);
        // relative slack for f32 round-off in the rotation
        let slack = 1e-5 * (self.center.iter().map(|v| v.abs()).fold(0.0, f32::max) + 1.0);
        let m = margin + slack;
        match self.kind {
            PrimitiveKind::Box | PrimitiveKind::Plane => {
                (0..3).all(|d| l[d].abs() <= self.half[d] + m)
            }
            PrimitiveKind::Sphere => {
                let r: f32 = (0..3).map(|d| (l[d] / self.half[d]).powi(2)).sum::<f32>().sqrt();
                let a_min = self.half.iter().copied().fold(f32::INFINITY, f32::min);
                r <= 1.0 + m / a_min
            }
        }
    }

    /// Radius of the primitive's footprint in the ground plane.
    fn footprint_radius(&self) -> f32 {
        self.half[0].hypot(self.half[1])
    }

    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> Point3 {
        let h = self.half;
        let local = match self.kind {
            PrimitiveKind::Plane => [
                rng.random_range(-1.0f32..=1.0) * h[0],
                rng.random_range(-1.0f32..=1.0) * h[1],
                rng.random_range(-1.0f32..=1.0) * h[2],
            ],
            PrimitiveKind::Sphere => {
                let v: [f32; 3] = loop {
                    let v = [
                        rng.sample::<f32, _>(StandardNormal),
                        rng.sample::<f32, _>(StandardNormal),
                        rng.sample::<f32, _>(StandardNormal),
                    ];
                    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    if n > 1e-6 {
                        break [v[0] / n, v[1] / n, v[2] / n];
                    }
                };
                [v[0] * h[0], v[1] * h[1], v[2] * h[2]]
            }
            PrimitiveKind::Box => {
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total: f32 = areas.iter().sum();
                let mut t = rng.random_range(0.0..total);
                let mut axis = 2;
                for (a, area) in areas.iter().enumerate() {
                    if t < *area {
                        axis = a;
                        break;
                    }
                    t -= area;
                }
                let mut l = [0.0f32; 3];
                for d in 0..3 {
                    l[d] = rng.random_range(-1.0f32..=1.0) * h[d];
                }
                l[axis] = if rng.random_bool(0.5) { h[axis] } else { -h[axis] };
                l
            }
        };
        self.to_world(&local)
    }
}

fn pick_kind(rng: &mut ChaCha8Rng, mix: &[f32; 3]) -> PrimitiveKind {
    let t: f32 = rng.random_range(0.0..1.0);
    if t < mix[0] {
        PrimitiveKind::Box
    } else if t < mix[0] + mix[1] || mix[2] == 0.0 {
        PrimitiveKind::Sphere
    } else {
        PrimitiveKind::Plane
    }
}

const PLACEMENT_ATTEMPTS: usize = 2000;

/// A deterministic scene together with the primitives that generated it.
pub fn generate_synthetic_with_primitives(
    cfg: &SyntheticSceneConfig,
) -> Result<(SceneSample, Vec<Primitive>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = cfg.extent / 10.0;
    let gap = 0.1 * unit;

    let mut prims: Vec<Primitive> = Vec::with_capacity(cfg.n_objects);
    for _ in 0..cfg.n_objects {
        let kind = pick_kind(&mut rng, &cfg.primitive_mix);
        let choices: Vec<usize> = (0..CATALOG.len()).filter(|&c| CATALOG[c].kind == kind).collect();
        let class = choices[rng.random_range(0..choices.len())];
        let entry = &CATALOG[class];
        let jitter: f32 = rng.random_range(0.8..1.2);
        let mut half = entry.half.map(|v| v * unit * jitter);
        if entry.upright {
            half = [half[0], 0.0, half[1]];
        }
        let yaw: f32 = rng.random_range(0.0..std::f32::consts::PI);
        let mut prim = Primitive { kind, class_id: class as i32, center: [0.0; 3], yaw, half };
        let r = prim.footprint_radius();
        let limit = cfg.extent / 2.0 - r;
        if limit < 0.0 {
            return Err(Error::Placement { requested: cfg.n_objects, extent: cfg.extent, attempts: 0 });
        }
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x = rng.random_range(-limit..=limit);
            let y = rng.random_range(-limit..=limit);
            let clear = prims.iter().all(|o| {
                let d = (o.center[0] - x).hypot(o.center[1] - y);
                d >= o.footprint_radius() + r + gap
            });
            if clear {
                let z = match kind {
                    PrimitiveKind::Plane if !entry.upright => 0.02 * unit,
                    _ => half[2],
                };
                prim.center = [x, y, z];
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement {
                requested: cfg.n_objects,
                extent: cfg.extent,
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
        prims.push(prim);
    }

    let counts: Vec<usize> = match cfg.total_points {
        Some(total) => {
            let base = total / cfg.n_objects;
            let extra = total % cfg.n_objects;
            (0..cfg.n_objects).map(|i| base + usize::from(i < extra)).collect()
        }
        None => (0..cfg.n_objects)
            .map(|_| rng.random_range(cfg.points_per_object.0..=cfg.points_per_object.1))
            .collect(),
    };

    let total: usize = counts.iter().sum();
    let mut positions = Vec::with_capacity(total);
    let mut instance_ids = Vec::with_capacity(total);
    let mut class_ids = Vec::with_capacity(total);
    let cap = 3.0 * cfg.noise_sigma;
    for (id, (prim, &count)) in prims.iter().zip(&counts).enumerate() {
        for _ in 0..count {
            let mut p = prim.sample_surface(&mut rng);
            if cfg.noise_sigma > 0.0 {
                let mut e = [0.0f32; 3];
                for v in e.iter_mut() {
                    *v = rng.sample::<f32, _>(StandardNormal) * cfg.noise_sigma;
                }
                let n = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
                // truncate so the displacement stays within three sigma
                let k = if n > cap { cap / n * 0.999 } else { 1.0 };
                for d in 0..3 {
                    p[d] += e[d] * k;
                }
            }
            positions.push(p);
            instance_ids.push(id as i32);
            class_ids.push(prim.class_id);
        }
    }

    let scene = SceneSample {
        positions,
        instance_ids,
        class_ids,
        domain: cfg.domain,
        class_names: synthetic_class_names(),
        scene_id: format!("synthetic-{}/{:06}", cfg.domain, cfg.seed),
    };
    scene.validate()?;
    Ok((scene, prims))
}

pub fn generate_synthetic_scene(cfg: &SyntheticSceneConfig) -> Result<SceneSample> {
    generate_synthetic_with_primitives(cfg).map(|(s, _)| s)
}

/// Corpus settings used by `gen-data` and the training experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub domain: DomainId,
    pub n_scenes: usize,
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub points_per_scene: usize,
}

impl CorpusConfig {
    pub fn new(domain: DomainId, n_scenes: usize, seed: u64) -> Self {
        Self { domain, n_scenes, seed, min_objects: 4, max_objects: 8, points_per_scene: 2048 }
    }
}

/// `n_scenes` scenes with consecutive seeds and an object count drawn per scene.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<SceneSample>> {
    if cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects {
        return input_err("object count range is empty");
    }
    (0..cfg.n_scenes as u64)
        .map(|i| {
            let seed = cfg.seed.wrapping_mul(1000).wrapping_add(i);
            let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let mut sc = SyntheticSceneConfig::new(cfg.domain, seed);
            sc.n_objects = pick.random_range(cfg.min_objects..=cfg.max_objects);
            sc.total_points = Some(cfg.points_per_scene);
            generate_synthetic_scene(&sc)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SyntheticSceneConfig::new(DomainId::Indoor, 7);
        assert_eq!(generate_synthetic_scene(&cfg).unwrap(), generate_synthetic_scene(&cfg).unwrap());
        let other = SyntheticSceneConfig::new(DomainId::Indoor, 8);
        assert_ne!(generate_synthetic_scene(&cfg).unwrap(), generate_synthetic_scene(&other).unwrap());
    }

    #[test]
    fn exact_object_count() {
        let mut cfg = SyntheticSceneConfig::new(DomainId::Aerial, 1);
        cfg.n_objects = 3;
        let s = generate_synthetic_scene(&cfg).unwrap();
        let ids: BTreeSet<i32> = s.instance_ids.iter().copied().collect();
        assert_eq!(ids, BTreeSet::from([0, 1, 2]));
        assert_eq!(s.scene_id, "synthetic-aerial/000001");
    }

    #[test]
    fn outdoor_is_much_larger_than_indoor() {
        for seed in 0..5 {
            let a = generate_synthetic_scene(&SyntheticSceneConfig::new(DomainId::Indoor, seed)).unwrap();
            let b = generate_synthetic_scene(&SyntheticSceneConfig::new(DomainId::Outdoor, seed)).unwrap();
            assert!(b.bbox_diagonal() / a.bbox_diagonal() >= 5.0);
        }
    }

    #[test]
    fn total_points_is_exact() {
        let mut cfg = SyntheticSceneConfig::new(DomainId::Indoor, 2);
        cfg.n_objects = 7;
        cfg.total_points = Some(2048);
        assert_eq!(generate_synthetic_scene(&cfg).unwrap().n_points(), 2048);
    }

    #[test]
    fn infeasible_placement_is_reported() {
        let mut cfg = SyntheticSceneConfig::new(DomainId::Indoor, 0);
        cfg.n_objects = 400;
        assert!(matches!(generate_synthetic_scene(&cfg), Err(Error::Placement { .. })));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SyntheticSceneConfig::new(DomainId::Indoor, 0);
        cfg.primitive_mix = [0.5, 0.5, 0.5];
        assert!(generate_synthetic_scene(&cfg).is_err());
        let mut cfg = SyntheticSceneConfig::new(DomainId::Indoor, 0);
        cfg.n_objects = 0;
        assert!(generate_synthetic_scene(&cfg).is_err());
    }

    #[test]
    fn corpus_respects_object_range() {
        let scenes = generate_corpus(&CorpusConfig::new(DomainId::Indoor, 6, 3)).unwrap();
        assert_eq!(scenes.len(), 6);
        for s in &scenes {
            assert_eq!(s.n_points(), 2048);
            let k = s.instances().len();
            assert!((4..=8).contains(&k));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn points_stay_inside_inflated_primitives(seed in 0u64..10_000, dom in 0usize..3, mix in 0usize..4) {
            let mut cfg = SyntheticSceneConfig::new(DomainId::ALL[dom], seed);
            cfg.primitive_mix = [[0.4, 0.3, 0.3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]][mix];
            cfg.noise_sigma = 0.01 * cfg.extent;
            let (s, prims) = generate_synthetic_with_primitives(&cfg).unwrap();
            for (p, &id) in s.positions.iter().zip(&s.instance_ids) {
                let prim = &prims[id as usize];
                prop_assert!(prim.contains_inflated(p, 3.0 * cfg.noise_sigma), "{:?} escapes {:?}", p, prim);
            }
        }
    }
}

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::norm::{DomainNorm, NormContext, NormMode};
use crate::autograd::{AttnSpec, AttnTask, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{bounding_box, voxel_key, Point3};
use crate::nn::{Init, Linear, ParamStore};
use crate::pcdata::{DomainId, PerDomain};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub n_stages: usize,
    /// Per-domain voxel size of every stage, in meters.
    pub voxel_sizes: PerDomain<Vec<f32>>,
    pub n_attention_blocks: Vec<usize>,
    pub n_heads: usize,
    pub norm_mode: NormMode,
    /// Branch keys for `NormMode::Dataset`.
    #[serde(default)]
    pub dataset_keys: Vec<String>,
    /// Attention window side, in voxels of the stage.
    pub window_voxels: f32,
    pub ffn_ratio: usize,
    pub momentum: f32,
}

fn doubling(base: f32, n: usize) -> Vec<f32> {
    (0..n).map(|i| base * (1u32 << i) as f32).collect()
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let n_stages = 3;
        Self {
            embed_dim: 64,
            n_stages,
            voxel_sizes: PerDomain {
                indoor: doubling(0.08, n_stages),
                outdoor: doubling(0.4, n_stages),
                aerial: doubling(0.4, n_stages),
            },
            n_attention_blocks: vec![1; n_stages],
            n_heads: 4,
            norm_mode: NormMode::Domain,
            dataset_keys: Vec::new(),
            window_voxels: 6.0,
            ffn_ratio: 2,
            momentum: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return bad(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.n_heads));
        }
        if self.n_stages == 0 || self.n_attention_blocks.len() != self.n_stages {
            return bad("n_attention_blocks needs one entry per stage".into());
        }
        for d in DomainId::ALL {
            let v = self.voxel_sizes.get(d);
            if v.len() != self.n_stages {
                return bad(format!("{d} voxel sizes need one entry per stage"));
            }
            if v.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || v.windows(2).any(|w| w[1] <= w[0]) {
                return bad(format!("{d} voxel sizes must be positive and strictly increasing"));
            }
        }
        if self.norm_mode == NormMode::Dataset && self.dataset_keys.is_empty() {
            return bad("dataset normalization needs dataset_keys".into());
        }
        if !(self.window_voxels > 0.0) || self.ffn_ratio == 0 {
            return bad("window_voxels and ffn_ratio must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn norm_keys(&self) -> Vec<String> {
        self.norm_mode.keys(&self.dataset_keys)
    }
}

/// Rows of one level grouped into attention windows.
struct WindowLayout {
    perm: Rc<Vec<usize>>,
    inverse: Rc<Vec<usize>>,
    tasks: Rc<Vec<AttnTask>>,
    /// Offset of every row (canonical order) from its window center, in window units.
    relative: Tensor,
}

struct Level {
    /// Previous-level row → voxel of this level.
    assign: Rc<Vec<usize>>,
    count: usize,
    windows: [WindowLayout; 2],
}

fn window_layout(positions: &[Point3], size: f32, offset: f32) -> WindowLayout {
    let mut windows: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in positions.iter().enumerate() {
        let shifted = [p[0] + offset, p[1] + offset, p[2] + offset];
        windows.entry(voxel_key(&shifted, size)).or_default().push(i);
    }
    let mut perm = Vec::with_capacity(positions.len());
    let mut tasks = Vec::with_capacity(windows.len());
    let mut relative = Tensor::zeros(positions.len(), 3);
    for (key, rows) in &windows {
        tasks.push(AttnTask { q_start: perm.len(), q_len: rows.len(), k_start: perm.len(), k_len: rows.len() });
        for &r in rows {
            for d in 0..3 {
                let center = (key[d] as f32 + 0.5) * size - offset;
                relative.row_mut(r)[d] = (positions[r][d] - center) / size;
            }
            perm.push(r);
        }
    }
    let mut inverse = vec![0; perm.len()];
    for (k, &r) in perm.iter().enumerate() {
        inverse[r] = k;
    }
    WindowLayout { perm: Rc::new(perm), inverse: Rc::new(inverse), tasks: Rc::new(tasks), relative }
}

fn build_levels(positions: &[Point3], voxel_sizes: &[f32], window_voxels: f32) -> Vec<Level> {
    let mut current: Vec<Point3> = positions.to_vec();
    let mut levels = Vec::with_capacity(voxel_sizes.len());
    for &size in voxel_sizes {
        let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
        for (i, p) in current.iter().enumerate() {
            cells.entry(voxel_key(p, size)).or_default().push(i);
        }
        let mut assign = vec![0; current.len()];
        let mut pooled = Vec::with_capacity(cells.len());
        for (v, members) in cells.values().enumerate() {
            let mut acc = [0.0f64; 3];
            for &i in members {
                assign[i] = v;
                for d in 0..3 {
                    acc[d] += current[i][d] as f64;
                }
            }
            let n = members.len() as f64;
            pooled.push([(acc[0] / n) as f32, (acc[1] / n) as f32, (acc[2] / n) as f32]);
        }
        let window = size * window_voxels;
        levels.push(Level {
            assign: Rc::new(assign),
            count: pooled.len(),
            windows: [window_layout(&pooled, window, 0.0), window_layout(&pooled, window, window / 2.0)],
        });
        current = pooled;
    }
    levels
}

#[derive(Clone, Debug)]
struct AttentionBlock {
    norm: DomainNorm,
    pos: Linear,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm_ffn: DomainNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    shifted: bool,
}

impl AttentionBlock {
    fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        name: &str,
        cfg: &EncoderConfig,
        keys: &[String],
        shifted: bool,
    ) -> Self {
        let d = cfg.embed_dim;
        let h = d * cfg.ffn_ratio;
        Self {
            norm: DomainNorm::new(store, &format!("{name}.norm"), d, keys),
            pos: Linear::new(store, init, &format!("{name}.attn.pos"), 3, d, false),
            q: Linear::new(store, init, &format!("{name}.attn.q"), d, d, true),
            k: Linear::new(store, init, &format!("{name}.attn.k"), d, d, true),
            v: Linear::new(store, init, &format!("{name}.attn.v"), d, d, true),
            out: Linear::new(store, init, &format!("{name}.attn.out"), d, d, true),
            norm_ffn: DomainNorm::new(store, &format!("{name}.norm_ffn"), d, keys),
            ffn_in: Linear::new(store, init, &format!("{name}.ffn.layer0"), d, h, true),
            ffn_out: Linear::new(store, init, &format!("{name}.ffn.layer1"), h, d, true),
            shifted,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        level: &Level,
        heads: usize,
        key: &str,
        ctx: &mut NormContext,
    ) -> Result<Var> {
        let layout = &level.windows[usize::from(self.shifted)];
        let h = self.norm.forward(g, store, x, key, ctx)?;
        let rel = g.constant(layout.relative.clone());
        let pos = self.pos.forward(g, store, rel);
        let h = g.add(h, pos);
        let h = g.index_rows(h, Rc::clone(&layout.perm));
        let q = self.q.forward(g, store, h);
        let k = self.k.forward(g, store, h);
        let v = self.v.forward(g, store, h);
        let spec = AttnSpec { tasks: Rc::clone(&layout.tasks), heads, key_valid: None };
        let a = g.attention(q, k, v, &spec);
        let a = self.out.forward(g, store, a);
        let a = g.index_rows(a, Rc::clone(&layout.inverse));
        let x = g.add(x, a);

        let h = self.norm_ffn.forward(g, store, x, key, ctx)?;
        let h = self.ffn_in.forward(g, store, h);
        let h = g.gelu(h);
        let h = self.ffn_out.forward(g, store, h);
        Ok(g.add(x, h))
    }
}

#[derive(Clone, Debug)]
struct Stage {
    pool: Linear,
    pool_norm: DomainNorm,
    blocks: Vec<AttentionBlock>,
    unpool: Linear,
    unpool_norm: DomainNorm,
}

/// U-shaped point encoder: voxel pooling, windowed self-attention, unpooling with skips.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    pub config: EncoderConfig,
    stem: Linear,
    stem_norm: DomainNorm,
    stages: Vec<Stage>,
    head: Linear,
}

impl PointEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let keys = config.norm_keys();
        let stem = Linear::new(store, init, "backbone.stem.linear", 3, d, true);
        let stem_norm = DomainNorm::new(store, "backbone.stem.norm", d, &keys);
        let stages = (0..config.n_stages)
            .map(|i| {
                let p = format!("backbone.stage{i}");
                Stage {
                    pool: Linear::new(store, init, &format!("{p}.pool.linear"), d, d, true),
                    pool_norm: DomainNorm::new(store, &format!("{p}.pool.norm"), d, &keys),
                    blocks: (0..config.n_attention_blocks[i])
                        .map(|j| {
                            AttentionBlock::new(store, init, &format!("{p}.block{j}"), config, &keys, j % 2 == 1)
                        })
                        .collect(),
                    unpool: Linear::new(store, init, &format!("{p}.unpool.linear"), d, d, true),
                    unpool_norm: DomainNorm::new(store, &format!("{p}.unpool.norm"), d, &keys),
                }
            })
            .collect();
        let head = Linear::new(store, init, "backbone.head", d, d, true);
        Ok(Self { config: config.clone(), stem, stem_norm, stages, head })
    }

    /// Every normalization site, in forward order.
    pub fn norm_sites(&self) -> Vec<&DomainNorm> {
        let mut out = vec![&self.stem_norm];
        for s in &self.stages {
            out.push(&s.pool_norm);
            for b in &s.blocks {
                out.push(&b.norm);
                out.push(&b.norm_ffn);
            }
            out.push(&s.unpool_norm);
        }
        out
    }

    /// Per-point embeddings `N×D` for `positions`, routed to normalization branch `key`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        positions: &[Point3],
        domain: DomainId,
        key: &str,
        ctx: &mut NormContext,
    ) -> Result<Var> {
        if positions.is_empty() {
            return Err(Error::Input("cannot encode an empty point cloud".into()));
        }
        if store.is_empty() || store.id("backbone.head.weight").is_none() {
            return Err(Error::State("encoder weights are not initialized".into()));
        }
        let levels = build_levels(positions, self.config.voxel_sizes.get(domain), self.config.window_voxels);

        let (lo, hi) = bounding_box(positions);
        let center: Vec<f32> = (0..3).map(|d| (lo[d] + hi[d]) / 2.0).collect();
        let mut input = Tensor::zeros(positions.len(), 3);
        for (r, p) in positions.iter().enumerate() {
            for d in 0..3 {
                input.row_mut(r)[d] = p[d] - center[d];
            }
        }
        let input = g.constant(input);
        let x = self.stem.forward(g, store, input);
        let x = self.stem_norm.forward(g, store, x, key, ctx)?;
        let stem = g.gelu(x);

        let heads = self.config.n_heads;
        let mut skips: Vec<Var> = Vec::with_capacity(self.stages.len());
        let mut cur = stem;
        for (stage, level) in self.stages.iter().zip(&levels) {
            let pooled = g.segment_mean(cur, Rc::clone(&level.assign), level.count);
            let h = stage.pool.forward(g, store, pooled);
            let h = stage.pool_norm.forward(g, store, h, key, ctx)?;
            let mut h = g.gelu(h);
            for block in &stage.blocks {
                h = block.forward(g, store, h, level, heads, key, ctx)?;
            }
            skips.push(h);
            cur = h;
        }
        for s in (0..self.stages.len()).rev() {
            let stage = &self.stages[s];
            let up = g.index_rows(cur, Rc::clone(&levels[s].assign));
            let up = stage.unpool.forward(g, store, up);
            let target = if s > 0 { skips[s - 1] } else { stem };
            let y = g.add(up, target);
            let y = stage.unpool_norm.forward(g, store, y, key, ctx)?;
            cur = g.gelu(y);
        }
        Ok(self.head.forward(g, store, cur))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::pcdata::{generate_synthetic_scene, SyntheticSceneConfig};

    fn setup(cfg: &EncoderConfig) -> (ParamStore, PointEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = PointEncoder::new(&mut store, &mut Init { rng: &mut rng }, cfg).unwrap();
        (store, enc)
    }

    fn encode(store: &ParamStore, enc: &PointEncoder, pts: &[Point3], domain: DomainId) -> Tensor {
        let mut g = Graph::inference();
        let v = enc
            .forward(&mut g, store, pts, domain, domain.as_str(), &mut NormContext::inference())
            .unwrap();
        g.value(v).clone()
    }

    #[test]
    fn single_point_encodes() {
        let (store, enc) = setup(&EncoderConfig::default());
        let f = encode(&store, &enc, &[[1.0, 2.0, 3.0]], DomainId::Indoor);
        assert_eq!(f.shape(), (1, 64));
        assert!(f.is_finite());
    }

    #[test]
    fn inference_is_bitwise_deterministic() {
        let (store, enc) = setup(&EncoderConfig::default());
        let s = generate_synthetic_scene(&SyntheticSceneConfig::new(DomainId::Indoor, 1)).unwrap();
        let a = encode(&store, &enc, &s.positions, DomainId::Indoor);
        let b = encode(&store, &enc, &s.positions, DomainId::Indoor);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn permuting_points_permutes_rows() {
        let (store, enc) = setup(&EncoderConfig::default());
        let mut cfg = SyntheticSceneConfig::new(DomainId::Indoor, 2);
        cfg.points_per_object = (40, 60);
        let s = generate_synthetic_scene(&cfg).unwrap();
        let n = s.n_points();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<Point3> = perm.iter().map(|&i| s.positions[i]).collect();
        let a = encode(&store, &enc, &s.positions, DomainId::Indoor);
        let b = encode(&store, &enc, &shuffled, DomainId::Indoor);
        for (k, &i) in perm.iter().enumerate() {
            for (x, y) in a.row(i).iter().zip(b.row(k)) {
                assert!((x - y).abs() < 1e-4 * (1.0 + x.abs()), "row {i}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn training_mode_records_one_update_per_site() {
        let (store, enc) = setup(&EncoderConfig::default());
        let s = generate_synthetic_scene(&SyntheticSceneConfig::new(DomainId::Outdoor, 3)).unwrap();
        let mut g = Graph::training();
        let mut ctx = NormContext::training();
        enc.forward(&mut g, &store, &s.positions, DomainId::Outdoor, "outdoor", &mut ctx).unwrap();
        assert_eq!(ctx.updates.len(), enc.norm_sites().len());
        let outdoor: Vec<_> = enc.norm_sites().iter().map(|n| n.branch("outdoor").unwrap().running_mean).collect();
        assert!(ctx.updates.iter().all(|u| outdoor.contains(&u.running_mean)));
    }

    #[test]
    fn finite_on_random_clouds() {
        let (store, enc) = setup(&EncoderConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..40 {
            let n = rng.random_range(1..120);
            let scale = [0.01f32, 1.0, 100.0][rng.random_range(0..3)];
            let pts: Vec<Point3> = (0..n)
                .map(|_| [rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale)])
                .collect();
            let d = DomainId::ALL[rng.random_range(0..3)];
            assert!(encode(&store, &enc, &pts, d).is_finite());
        }
    }

    #[test]
    fn config_validation() {
        let c = EncoderConfig { n_heads: 5, ..Default::default() };
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::default();
        c.voxel_sizes.indoor = vec![0.1, 0.1, 0.2];
        assert!(c.validate().is_err());
        let c = EncoderConfig { norm_mode: NormMode::Dataset, ..Default::default() };
        assert!(c.validate().is_err());
    }
}

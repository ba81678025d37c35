use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{AttnSpec, AttnTask, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, ParamStore};
use crate::promptenc::TokenSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub head_mlp_depth: usize,
    /// Internal width of the token↔point cross-attentions is `D / cross_downsample`.
    pub cross_downsample: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { n_blocks: 3, n_heads: 4, ffn_hidden: 128, head_mlp_depth: 2, cross_downsample: 2 }
    }
}

impl DecoderConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::Config("decoder needs at least one block".into()));
        }
        if self.n_heads == 0 || !dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {} heads", self.n_heads)));
        }
        if self.cross_downsample == 0 || !(dim / self.cross_downsample).is_multiple_of(self.n_heads) {
            return Err(Error::Config("cross-attention width must be divisible by n_heads".into()));
        }
        if self.head_mlp_depth == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("head_mlp_depth and ffn_hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl Attention {
    fn new(store: &mut ParamStore, init: &mut Init<'_>, name: &str, dim: usize, inner: usize) -> Self {
        Self {
            q: Linear::new(store, init, &format!("{name}.q"), dim, inner, true),
            k: Linear::new(store, init, &format!("{name}.k"), dim, inner, true),
            v: Linear::new(store, init, &format!("{name}.v"), dim, inner, true),
            out: Linear::new(store, init, &format!("{name}.out"), inner, dim, true),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        tasks: Rc<Vec<AttnTask>>,
        heads: usize,
        key_valid: Option<Rc<Vec<bool>>>,
    ) -> Var {
        let q = self.q.forward(g, store, q_in);
        let k = self.k.forward(g, store, k_in);
        let v = self.v.forward(g, store, v_in);
        let a = g.attention(q, k, v, &AttnSpec { tasks, heads, key_valid });
        self.out.forward(g, store, a)
    }
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    norm_self: LayerNorm,
    self_attn: Attention,
    norm_points: LayerNorm,
    norm_t2p: LayerNorm,
    cross_t2p: Attention,
    norm_ffn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    norm_p2t: LayerNorm,
    cross_p2t: Attention,
}

/// Two-way transformer refining object tokens and per-object point embeddings.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub config: DecoderConfig,
    blocks: Vec<DecoderBlock>,
    pub point_pe: Linear,
    final_tokens: LayerNorm,
    final_points: LayerNorm,
}

/// Decoder output: `Z_sp` as `M·(P+3) × D` and `Z_pc` as `M·N × D`.
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    pub tokens: Var,
    pub points: Var,
}

impl MaskDecoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        dim: usize,
        fourier_dim: usize,
        config: &DecoderConfig,
    ) -> Result<Self> {
        config.validate(dim)?;
        let inner = dim / config.cross_downsample;
        let blocks = (0..config.n_blocks)
            .map(|j| {
                let p = format!("decoder.block{j}");
                DecoderBlock {
                    norm_self: LayerNorm::new(store, &format!("{p}.norm_self"), dim),
                    self_attn: Attention::new(store, init, &format!("{p}.self_attn"), dim, dim),
                    norm_points: LayerNorm::new(store, &format!("{p}.norm_points"), dim),
                    norm_t2p: LayerNorm::new(store, &format!("{p}.norm_t2p"), dim),
                    cross_t2p: Attention::new(store, init, &format!("{p}.cross_t2p"), dim, inner),
                    norm_ffn: LayerNorm::new(store, &format!("{p}.norm_ffn"), dim),
                    ffn_in: Linear::new(store, init, &format!("{p}.ffn.layer0"), dim, config.ffn_hidden, true),
                    ffn_out: Linear::new(store, init, &format!("{p}.ffn.layer1"), config.ffn_hidden, dim, true),
                    norm_p2t: LayerNorm::new(store, &format!("{p}.norm_p2t"), dim),
                    cross_p2t: Attention::new(store, init, &format!("{p}.cross_p2t"), dim, inner),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            blocks,
            point_pe: Linear::new(store, init, "decoder.point_pe", fourier_dim, dim, true),
            final_tokens: LayerNorm::new(store, "decoder.final_tokens", dim),
            final_points: LayerNorm::new(store, "decoder.final_points", dim),
        })
    }

    /// Runs every block on `seq` against the `N×D` point embeddings `f_pc`.
    ///
    /// `point_pe` holds the `N×D` positional encodings of the points. Point
    /// embeddings are shared by all objects until the first point update, so the
    /// first block attends to untiled rows; the observable result equals the
    /// materialized `M×N×D` computation.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_pc: Var,
        point_pe: Var,
        seq: &TokenSequence,
    ) -> Result<Decoded> {
        let n = g.value(f_pc).rows();
        let dim = g.value(f_pc).cols();
        let m = seq.n_objects;
        let s = seq.len_per_object();
        if g.value(seq.tokens).shape() != (m * s, dim) || g.value(point_pe).shape() != (n, dim) {
            return Err(Error::Input(format!(
                "decoder shapes disagree: tokens {:?}, points {n}×{dim}, positional {:?}",
                g.value(seq.tokens).shape(),
                g.value(point_pe).shape()
            )));
        }
        let heads = self.config.n_heads;
        let valid: Rc<Vec<bool>> = Rc::new(seq.pad.iter().map(|p| !p).collect());
        let self_tasks = Rc::new(AttnTask::blocks(m, s, s));

        let token_pe = seq.tokens;
        let mut t = seq.tokens;
        let mut p = f_pc;
        let mut tiled = false;
        for block in &self.blocks {
            let tn = block.norm_self.forward(g, store, t);
            let tq = g.add(tn, token_pe);
            let a = block.self_attn.forward(g, store, tq, tq, tn, Rc::clone(&self_tasks), heads, Some(Rc::clone(&valid)));
            t = g.add(t, a);

            let pn = block.norm_points.forward(g, store, p);
            let pk = g.add_tiled(pn, point_pe);
            let point_start = |i: usize| if tiled { i * n } else { 0 };
            let t2p: Vec<AttnTask> = (0..m)
                .map(|i| AttnTask { q_start: i * s, q_len: s, k_start: point_start(i), k_len: n })
                .collect();
            let p2t: Vec<AttnTask> = (0..m)
                .map(|i| AttnTask { q_start: point_start(i), q_len: n, k_start: i * s, k_len: s })
                .collect();

            let tn = block.norm_t2p.forward(g, store, t);
            let tq = g.add(tn, token_pe);
            let a = block.cross_t2p.forward(g, store, tq, pk, pn, Rc::new(t2p), heads, None);
            t = g.add(t, a);

            let tn = block.norm_ffn.forward(g, store, t);
            let h = block.ffn_in.forward(g, store, tn);
            let h = g.gelu(h);
            let h = block.ffn_out.forward(g, store, h);
            t = g.add(t, h);

            let tn = block.norm_p2t.forward(g, store, t);
            let tk = g.add(tn, token_pe);
            let a = block.cross_p2t.forward(g, store, pk, tk, tn, Rc::new(p2t), heads, Some(Rc::clone(&valid)));
            let base = if tiled { p } else { g.tile_rows(p, m) };
            p = g.add(base, a);
            tiled = true;
        }
        let tokens = self.final_tokens.forward(g, store, t);
        let points = self.final_points.forward(g, store, p);
        Ok(Decoded { tokens, points })
    }
}

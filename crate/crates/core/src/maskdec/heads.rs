use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::nn::{Init, Mlp, ParamStore};

/// Guard for normalizing an all-zero CLIP prediction.
pub const CLIP_NORM_EPS: f32 = 1e-12;

#[derive(Clone, Debug)]
pub struct Heads {
    pub mask: Mlp,
    pub score: Mlp,
    pub clip: Mlp,
}

fn widths(dim: usize, depth: usize, out: usize) -> Vec<usize> {
    let mut w = vec![dim; depth];
    w.push(out);
    w
}

impl Heads {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, dim: usize, depth: usize, clip_dim: usize) -> Self {
        Self {
            mask: Mlp::new(store, init, "heads.mask", &widths(dim, depth, dim)),
            score: Mlp::new(store, init, "heads.score", &widths(dim, depth, 1)),
            clip: Mlp::new(store, init, "heads.clip", &widths(dim, depth, clip_dim)),
        }
    }

    /// Logits `M·K × N`: the mask MLP applied to `K` query rows per object, dotted
    /// with that object's `N` point rows.
    pub fn mask_logits(&self, g: &mut Graph, store: &ParamStore, queries: Var, points: Var, objects: usize) -> Var {
        let f = self.mask.forward(g, store, queries);
        g.group_dot(points, f, objects)
    }

    /// Scores in `[0, 1]`, one row per object.
    pub fn scores(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Var {
        let s = self.score.forward(g, store, tokens);
        g.sigmoid(s)
    }

    /// Unit-norm CLIP-space embeddings, one row per object.
    pub fn clip_embeddings(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Var {
        let e = self.clip.forward(g, store, tokens);
        g.l2_normalize_rows(e, CLIP_NORM_EPS)
    }
}

/// Row indices of token `slot` for every object in a `M·S`-row token matrix.
pub fn token_rows(objects: usize, per_object: usize, slot: usize) -> Rc<Vec<usize>> {
    Rc::new((0..objects).map(|m| m * per_object + slot).collect())
}

//! Click prompts: encoding individual clicks and assembling per-object token sequences.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{input_err, Result};
use crate::geometry::{fourier_features, nearest_neighbor, FourierConfig, Point3, SceneFrame};
use crate::nn::{Init, Linear, ParamId, ParamStore};

/// Click coordinates for `M` objects.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub objects: Vec<Vec<Point3>>,
    /// Ground-truth instance of every object, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_ids: Option<Vec<i32>>,
}

impl PromptSet {
    pub fn new(objects: Vec<Vec<Point3>>) -> Self {
        Self { objects, object_ids: None }
    }

    /// One single-click object per point.
    pub fn single_clicks(points: &[Point3]) -> Self {
        Self::new(points.iter().map(|p| vec![*p]).collect())
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn max_clicks(&self) -> usize {
        self.objects.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return input_err("a prompt set needs at least one object");
        }
        if let Some(i) = self.objects.iter().position(Vec::is_empty) {
            return input_err(format!("object {i} has no clicks"));
        }
        if self.objects.iter().flatten().any(|p| p.iter().any(|v| !v.is_finite())) {
            return input_err("click coordinates must be finite");
        }
        if let Some(ids) = &self.object_ids {
            if ids.len() != self.objects.len() {
                return input_err("object_ids must align with objects");
            }
        }
        Ok(())
    }
}

/// The three learned per-object query vectors.
#[derive(Clone, Debug)]
pub struct TaskTokens {
    pub mask: ParamId,
    pub score: ParamId,
    pub clip: ParamId,
}

pub const TASK_TOKENS: usize = 3;

/// Token rows of every object stacked as `M·(P+3) × D`, plus the pad flags.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    /// `true` marks a padding slot; one flag per token row.
    pub pad: Rc<Vec<bool>>,
    pub n_objects: usize,
    pub max_clicks: usize,
}

impl TokenSequence {
    pub fn len_per_object(&self) -> usize {
        self.max_clicks + TASK_TOKENS
    }
}

#[derive(Clone, Debug)]
pub struct PromptEncoder {
    pub fourier: FourierConfig,
    pub projection: Linear,
    pub tokens: TaskTokens,
}

impl PromptEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, dim: usize, fourier: &FourierConfig) -> Self {
        let projection =
            Linear::new(store, init, "prompt.projection", dim + fourier.output_dim(), dim, true);
        let tokens = TaskTokens {
            mask: store.insert("prompt.tokens.mask", init.normal(1, dim, 1.0), true),
            score: store.insert("prompt.tokens.score", init.normal(1, dim, 1.0), true),
            clip: store.insert("prompt.tokens.clip", init.normal(1, dim, 1.0), true),
        };
        Self { fourier: fourier.clone(), projection, tokens }
    }

    /// Prompt embeddings of `clicks` (one row each): the embedding of the
    /// nearest point concatenated with the click's Fourier features, projected to `D`.
    pub fn encode_clicks(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_pc: Var,
        positions: &[Point3],
        frame: &SceneFrame,
        clicks: &[Point3],
    ) -> Result<Var> {
        let mut nearest = Vec::with_capacity(clicks.len());
        let mut pos = Vec::with_capacity(clicks.len() * self.fourier.output_dim());
        for c in clicks {
            nearest.push(nearest_neighbor(positions, c)?);
            fourier_features(&frame.normalize(c), &self.fourier, &mut pos);
        }
        let f_sem = g.index_rows(f_pc, Rc::new(nearest));
        let f_pos = g.constant(Tensor::new(clicks.len(), self.fourier.output_dim(), pos));
        let joined = g.concat_cols(f_sem, f_pos);
        Ok(self.projection.forward(g, store, joined))
    }

    /// Per object: `[mask, score, clip, click_1 … click_P]`, short objects padded.
    pub fn assemble(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_pc: Var,
        positions: &[Point3],
        frame: &SceneFrame,
        prompts: &PromptSet,
    ) -> Result<TokenSequence> {
        prompts.validate()?;
        let clicks: Vec<Point3> = prompts.objects.iter().flatten().copied().collect();
        let encoded = self.encode_clicks(g, store, f_pc, positions, frame, &clicks)?;
        let dim = g.value(encoded).cols();
        let task = [
            g.param(store, self.tokens.mask),
            g.param(store, self.tokens.score),
            g.param(store, self.tokens.clip),
        ];
        let pad_row = g.constant(Tensor::zeros(1, dim));
        let stack = g.concat_rows(&[task[0], task[1], task[2], encoded, pad_row]);
        let pad_index = TASK_TOKENS + clicks.len();

        let p = prompts.max_clicks();
        let mut index = Vec::with_capacity(prompts.len() * (p + TASK_TOKENS));
        let mut pad = Vec::with_capacity(index.capacity());
        let mut next_click = TASK_TOKENS;
        for object in &prompts.objects {
            index.extend(0..TASK_TOKENS);
            pad.extend([false; TASK_TOKENS]);
            for slot in 0..p {
                if slot < object.len() {
                    index.push(next_click);
                    next_click += 1;
                    pad.push(false);
                } else {
                    index.push(pad_index);
                    pad.push(true);
                }
            }
        }
        let tokens = g.index_rows(stack, Rc::new(index));
        Ok(TokenSequence { tokens, pad: Rc::new(pad), n_objects: prompts.len(), max_clicks: p })
    }
}

//! The full promptable segmentation model and its checkpoint format.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Tensor, Var};
use crate::backbone::{EncoderConfig, NormContext, PointEncoder};
use crate::error::{Error, Result};
use crate::geometry::{fourier_features, FourierConfig, Point3, SceneFrame};
use crate::maskdec::{token_rows, DecoderConfig, Heads, MaskDecoder, MaskPrediction};
use crate::nn::{Init, ParamStore};
use crate::pcdata::{DomainId, SceneSample};
use crate::promptenc::{PromptEncoder, PromptSet, TASK_TOKENS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fourier: FourierConfig,
    pub decoder: DecoderConfig,
    pub clip_dim: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            fourier: FourierConfig::default(),
            decoder: DecoderConfig::default(),
            clip_dim: 32,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fourier.validate()?;
        self.decoder.validate(self.encoder.embed_dim)?;
        if self.clip_dim == 0 {
            return Err(Error::Config("clip_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Backbone output for one scene, reusable across any number of prompt sets.
#[derive(Clone, Debug)]
pub struct SceneFeatures {
    pub positions: Vec<Point3>,
    pub frame: SceneFrame,
    pub domain: DomainId,
    /// `N×D` point embeddings.
    pub f_pc: Tensor,
    /// `N×D` positional encodings used by the decoder.
    pub point_pe: Tensor,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `M×N`.
    pub logits: Var,
    /// `M×1`, after the sigmoid.
    pub scores: Var,
    /// `M×D_clip`, unit rows.
    pub clip: Var,
    /// `M·P×N` auxiliary logits, when requested.
    pub aux: Option<Var>,
    pub n_objects: usize,
    pub max_clicks: usize,
    /// Pad flag per click slot (`M·P` entries).
    pub slot_pad: Vec<bool>,
}

pub struct SnapModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: PointEncoder,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
    pub heads: Heads,
}

const CHECKPOINT_FORMAT: &str = "snapkit-checkpoint-1";

impl SnapModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut init = Init { rng: &mut rng };
        let d = config.encoder.embed_dim;
        let encoder = PointEncoder::new(&mut store, &mut init, &config.encoder)?;
        let prompt = PromptEncoder::new(&mut store, &mut init, d, &config.fourier);
        let decoder = MaskDecoder::new(&mut store, &mut init, d, config.fourier.output_dim(), &config.decoder)?;
        let heads = Heads::new(&mut store, &mut init, d, config.decoder.head_mlp_depth, config.clip_dim);
        Ok(Self { config, store, encoder, prompt, decoder, heads })
    }

    /// Normalization branch a scene is routed to under the configured mode.
    pub fn norm_key(&self, domain: DomainId, scene_id: &str) -> String {
        self.config.encoder.norm_mode.key(domain, scene_id)
    }

    fn fourier_table(&self, positions: &[Point3], frame: &SceneFrame) -> Tensor {
        let dim = self.config.fourier.output_dim();
        let mut data = Vec::with_capacity(positions.len() * dim);
        for p in positions {
            fourier_features(&frame.normalize(p), &self.config.fourier, &mut data);
        }
        Tensor::new(positions.len(), dim, data)
    }

    /// Encoder plus decoder positional encodings, recorded on `g`.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        positions: &[Point3],
        domain: DomainId,
        key: &str,
        ctx: &mut NormContext,
    ) -> Result<(Var, Var, SceneFrame)> {
        let f_pc = self.encoder.forward(g, &self.store, positions, domain, key, ctx)?;
        let frame = SceneFrame::from_positions(positions);
        let table = g.constant(self.fourier_table(positions, &frame));
        let pe = self.decoder.point_pe.forward(g, &self.store, table);
        Ok((f_pc, pe, frame))
    }

    /// Prompt encoding, decoding and heads for already-encoded points.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        f_pc: Var,
        point_pe: Var,
        positions: &[Point3],
        frame: &SceneFrame,
        prompts: &PromptSet,
        with_aux: bool,
    ) -> Result<ForwardOutput> {
        let store = &self.store;
        let seq = self.prompt.assemble(g, store, f_pc, positions, frame, prompts)?;
        let decoded = self.decoder.forward(g, store, f_pc, point_pe, &seq)?;
        let (m, s, p) = (seq.n_objects, seq.len_per_object(), seq.max_clicks);
        let z_mask = g.index_rows(decoded.tokens, token_rows(m, s, 0));
        let z_score = g.index_rows(decoded.tokens, token_rows(m, s, 1));
        let z_clip = g.index_rows(decoded.tokens, token_rows(m, s, 2));
        let logits = self.heads.mask_logits(g, store, z_mask, decoded.points, m);
        let scores = self.heads.scores(g, store, z_score);
        let clip = self.heads.clip_embeddings(g, store, z_clip);
        let mut slot_pad = Vec::with_capacity(m * p);
        let mut slot_rows = Vec::with_capacity(m * p);
        for obj in 0..m {
            for slot in 0..p {
                let row = obj * s + TASK_TOKENS + slot;
                slot_rows.push(row);
                slot_pad.push(seq.pad[row]);
            }
        }
        let aux = if with_aux {
            let z_aux = g.index_rows(decoded.tokens, Rc::new(slot_rows));
            Some(self.heads.mask_logits(g, store, z_aux, decoded.points, m))
        } else {
            None
        };
        Ok(ForwardOutput { logits, scores, clip, aux, n_objects: m, max_clicks: p, slot_pad })
    }

    /// Runs the backbone once (inference statistics) for later prompt queries.
    pub fn encode_scene(&self, positions: &[Point3], domain: DomainId, scene_id: &str) -> Result<SceneFeatures> {
        let mut g = Graph::inference();
        let key = self.norm_key(domain, scene_id);
        let (f_pc, pe, frame) = self.encode_graph(&mut g, positions, domain, &key, &mut NormContext::inference())?;
        Ok(SceneFeatures {
            positions: positions.to_vec(),
            frame,
            domain,
            f_pc: g.value(f_pc).clone(),
            point_pe: g.value(pe).clone(),
        })
    }

    /// Predictions for `prompts` against cached scene features.
    pub fn predict_with_features(&self, features: &SceneFeatures, prompts: &PromptSet) -> Result<MaskPrediction> {
        let mut g = Graph::inference();
        let f_pc = g.constant(features.f_pc.clone());
        let pe = g.constant(features.point_pe.clone());
        let out = self.decode_graph(&mut g, f_pc, pe, &features.positions, &features.frame, prompts, false)?;
        Ok(collect(&g, &out))
    }

    /// End-to-end prediction. Training mode normalizes with batch statistics
    /// (without updating running statistics) and also returns auxiliary masks.
    pub fn predict(
        &self,
        scene: &SceneSample,
        domain: DomainId,
        prompts: &PromptSet,
        training: bool,
    ) -> Result<MaskPrediction> {
        if !training {
            let features = self.encode_scene(&scene.positions, domain, &scene.scene_id)?;
            return self.predict_with_features(&features, prompts);
        }
        let mut g = Graph::inference();
        let key = self.norm_key(domain, &scene.scene_id);
        let mut ctx = NormContext::training();
        let (f_pc, pe, frame) = self.encode_graph(&mut g, &scene.positions, domain, &key, &mut ctx)?;
        let out = self.decode_graph(&mut g, f_pc, pe, &scene.positions, &frame, prompts, true)?;
        Ok(collect(&g, &out))
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let named: Vec<(String, Tensor)> = self.store.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = named
            .iter()
            .map(|(n, t)| {
                let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (n.clone(), raw, vec![t.rows(), t.cols()])
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(n, raw, shape)| {
                safetensors::tensor::TensorView::new(Dtype::F32, shape.clone(), raw).map(|v| (n.clone(), v))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::State(format!("cannot serialize parameters: {e}")))?;
        let metadata = HashMap::from([
            ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
            ("config".to_string(), serde_json::to_string(&self.config)?),
        ]);
        let buffer = safetensors::serialize(views, Some(metadata))
            .map_err(|e| Error::State(format!("cannot serialize parameters: {e}")))?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, buffer)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let format_err = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let buffer = std::fs::read(path)?;
        let (_, meta) = SafeTensors::read_metadata(&buffer).map_err(|e| format_err(e.to_string()))?;
        let info = meta.metadata().clone().unwrap_or_default();
        if info.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(format_err("not a model checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_str(
            info.get("config").ok_or_else(|| format_err("checkpoint has no config".into()))?,
        )
        .map_err(|e| format_err(format!("invalid config: {e}")))?;
        let tensors = SafeTensors::deserialize(&buffer).map_err(|e| format_err(e.to_string()))?;
        let mut values = BTreeMap::new();
        for (name, view) in tensors.tensors() {
            if view.dtype() != Dtype::F32 || view.shape().len() != 2 {
                return Err(format_err(format!("tensor `{name}` is not a 2-D f32 array")));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            values.insert(name, Tensor::new(view.shape()[0], view.shape()[1], data));
        }
        let mut model = SnapModel::new(config)?;
        model.store.load_from(values)?;
        Ok(model)
    }
}

fn collect(g: &Graph, out: &ForwardOutput) -> MaskPrediction {
    let logits = g.value(out.logits).clone();
    let probs = Tensor::new(
        logits.rows(),
        logits.cols(),
        logits.data().iter().map(|v| sigmoid(*v)).collect(),
    );
    MaskPrediction {
        mask_probs: probs,
        mask_logits: logits,
        scores: g.value(out.scores).data().to_vec(),
        clip_embeddings: g.value(out.clip).clone(),
        aux_logits: out.aux.map(|a| g.value(a).clone()),
    }
}

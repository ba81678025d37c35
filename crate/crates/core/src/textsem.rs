//! Text embeddings, mask classification, open-vocabulary queries and panoptic assembly.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autoprompt::SegmentationResult;
use crate::error::{input_err, Error, Result};

/// Softmax temperature shared with the text loss.
pub const TEXT_TEMPERATURE: f64 = 0.07;

pub const DEFAULT_TEMPLATE: &str = "a photo of a {class_name}.";

/// Maps strings to fixed-size embedding vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
    fn dimension(&self) -> usize;
    fn is_deterministic(&self) -> bool;
}

/// Pseudo-random unit vectors seeded by a hash of the text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyProvider {
    pub dim: usize,
}

impl Default for ToyProvider {
    fn default() -> Self {
        Self { dim: 32 }
    }
}

/// 64-bit FNV-1a, stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ToyProvider {
    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(text.as_bytes()));
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| (x / norm) as f32).collect()
    }
}

impl EmbeddingProvider for ToyProvider {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f32>>,
}

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Talks to an external embedding process over newline-delimited JSON:
/// one `{"texts": [...]}` line in, one `{"embeddings": [[...]]}` line out.
pub struct SubprocessProvider {
    dim: usize,
    deterministic: bool,
    pipe: Mutex<Pipe>,
}

impl SubprocessProvider {
    pub fn spawn(program: &str, args: &[String], dim: usize, deterministic: bool) -> Result<Self> {
        let mut child = Command::new(program).args(args).stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stdin = child.stdin.take().ok_or_else(|| Error::State("embedding process has no stdin".into()))?;
        let stdout = child.stdout.take().ok_or_else(|| Error::State("embedding process has no stdout".into()))?;
        Ok(Self { dim, deterministic, pipe: Mutex::new(Pipe { child, stdin, stdout: BufReader::new(stdout) }) })
    }
}

impl Drop for SubprocessProvider {
    fn drop(&mut self) {
        if let Ok(p) = self.pipe.get_mut() {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }
}

impl EmbeddingProvider for SubprocessProvider {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let mut p = self.pipe.lock().map_err(|_| Error::State("embedding process lock poisoned".into()))?;
        let mut line = serde_json::to_string(&EmbedRequest { texts })?;
        line.push('\n');
        p.stdin.write_all(line.as_bytes())?;
        p.stdin.flush()?;
        let mut reply = String::new();
        if p.stdout.read_line(&mut reply)? == 0 {
            return Err(Error::State("embedding process closed its output".into()));
        }
        let resp: EmbedResponse = serde_json::from_str(reply.trim())?;
        if resp.embeddings.len() != texts.len() {
            return Err(Error::State(format!(
                "embedding process returned {} vectors for {} texts",
                resp.embeddings.len(),
                texts.len()
            )));
        }
        Ok(resp.embeddings)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn is_deterministic(&self) -> bool {
        self.deterministic
    }
}

fn normalized(v: &[f32]) -> Result<Vec<f32>> {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return input_err("cannot normalize a zero or non-finite embedding");
    }
    Ok(v.iter().map(|x| (*x as f64 / norm) as f32).collect())
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextVocabulary {
    pub class_names: Vec<String>,
    /// One unit row per class.
    pub embeddings: Vec<Vec<f32>>,
    pub template: String,
}

impl TextVocabulary {
    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }

    pub fn flat_f64(&self) -> Vec<f64> {
        self.embeddings.iter().flatten().map(|v| *v as f64).collect()
    }
}

pub fn build_vocabulary(provider: &dyn EmbeddingProvider, class_names: &[String], template: &str) -> Result<TextVocabulary> {
    if !template.contains("{class_name}") {
        return Err(Error::Config(format!("template {template:?} has no {{class_name}} slot")));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = class_names.iter().find(|n| !seen.insert(n.as_str())) {
        return input_err(format!("duplicate class name {dup:?}"));
    }
    let texts: Vec<String> = class_names.iter().map(|n| template.replace("{class_name}", n)).collect();
    let raw = provider.embed(&texts)?;
    if raw.len() != class_names.len() || raw.iter().any(|v| v.len() != provider.dimension()) {
        return Err(Error::Config(format!("provider did not return {}-dimensional embeddings", provider.dimension())));
    }
    Ok(TextVocabulary {
        class_names: class_names.to_vec(),
        embeddings: raw.iter().map(|v| normalized(v)).collect::<Result<_>>()?,
        template: template.to_string(),
    })
}

/// Vocabulary indices (argmax, ties to the lower index) and class probabilities
/// `softmax(cosine / temperature)` for each embedding.
pub fn classify_masks(
    clip_embeddings: &[Vec<f32>],
    vocab: &TextVocabulary,
    temperature: f64,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    if vocab.is_empty() {
        return input_err("empty vocabulary");
    }
    if !(temperature > 0.0) {
        return input_err("temperature must be positive");
    }
    let mut ids = Vec::with_capacity(clip_embeddings.len());
    let mut probs = Vec::with_capacity(clip_embeddings.len());
    for e in clip_embeddings {
        if e.len() != vocab.dim() {
            return input_err(format!("embedding has {} dims, vocabulary {}", e.len(), vocab.dim()));
        }
        let z: Vec<f64> = vocab.embeddings.iter().map(|v| cosine(e, v) / temperature).collect();
        let mut best = 0;
        for (k, v) in z.iter().enumerate() {
            if *v > z[best] {
                best = k;
            }
        }
        let max = z[best];
        let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        ids.push(best);
        probs.push(exp.iter().map(|v| v / sum).collect());
    }
    Ok((ids, probs))
}

/// Masks whose embedding has cosine similarity at least `tau_sim` with the
/// query, as `(mask index, similarity)` in descending similarity (ties to the lower index).
pub fn open_vocab_query(
    result: &SegmentationResult,
    query: &str,
    provider: &dyn EmbeddingProvider,
    tau_sim: f64,
) -> Result<Vec<(usize, f64)>> {
    if result.is_empty() {
        return input_err("no masks to query");
    }
    let q = provider.embed(&[query.to_string()])?;
    let q = normalized(q.first().ok_or_else(|| Error::State("provider returned nothing".into()))?)?;
    let mut hits: Vec<(usize, f64)> = Vec::new();
    for (i, e) in result.clip_embeddings.iter().enumerate() {
        if e.len() != q.len() {
            return input_err("query and mask embeddings differ in dimension");
        }
        let s = cosine(e, &q);
        if s >= tau_sim {
            hits.push((i, s));
        }
    }
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(hits)
}

/// Per-point instance and class labels: each point goes to the highest-scoring
/// mask containing it (ties to the lower mask index); uncovered points get `-1`.
pub fn assemble_panoptic(result: &SegmentationResult, class_ids: &[i32], n_points: usize) -> Result<(Vec<i32>, Vec<i32>)> {
    if class_ids.len() != result.len() {
        return input_err("one class id per mask expected");
    }
    if result.masks.iter().any(|m| m.len() != n_points) {
        return input_err("masks do not cover the scene's points");
    }
    let mut instance = vec![-1i32; n_points];
    let mut class = vec![-1i32; n_points];
    let mut best = vec![f32::NEG_INFINITY; n_points];
    for (m, mask) in result.masks.iter().enumerate() {
        let s = result.scores[m];
        for i in 0..n_points {
            if mask[i] && s > best[i] {
                best[i] = s;
                instance[i] = m as i32;
                class[i] = class_ids[m];
            }
        }
    }
    Ok((instance, class))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn vocabulary_shape_and_determinism() {
        let p = ToyProvider::default();
        let a = build_vocabulary(&p, &names(&["chair", "table"]), DEFAULT_TEMPLATE).unwrap();
        assert_eq!((a.len(), a.dim()), (2, 32));
        for row in &a.embeddings {
            assert!((cosine(row, row) - 1.0).abs() < 1e-6);
        }
        assert_eq!(a, build_vocabulary(&p, &names(&["chair", "table"]), DEFAULT_TEMPLATE).unwrap());
        assert!(build_vocabulary(&p, &names(&["a", "a"]), DEFAULT_TEMPLATE).is_err());
        assert!(build_vocabulary(&p, &names(&["a"]), "no slot").is_err());
    }

    struct WrongDim;
    impl EmbeddingProvider for WrongDim {
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
            Ok(texts.iter().map(|_| vec![1.0; 3]).collect())
        }
        fn dimension(&self) -> usize {
            4
        }
        fn is_deterministic(&self) -> bool {
            true
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        assert!(matches!(build_vocabulary(&WrongDim, &names(&["x"]), DEFAULT_TEMPLATE), Err(Error::Config(_))));
    }

    #[test]
    fn toy_embeddings_are_distinct() {
        let p = ToyProvider::default();
        let corpus: Vec<String> = (0..50).map(|i| format!("class number {i}")).collect();
        let e = p.embed(&corpus).unwrap();
        for i in 0..50 {
            for j in 0..i {
                assert!(cosine(&e[i], &e[j]) < 0.99);
            }
        }
    }

    #[test]
    fn classification_cases() {
        let p = ToyProvider::default();
        let v = build_vocabulary(&p, &names(&["a", "b", "c", "d", "e"]), DEFAULT_TEMPLATE).unwrap();
        let (ids, probs) = classify_masks(&[v.embeddings[3].clone()], &v, TEXT_TEMPERATURE).unwrap();
        assert_eq!(ids, vec![3]);
        assert!((probs[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let axes = TextVocabulary {
            class_names: names(&["x", "y"]),
            embeddings: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            template: DEFAULT_TEMPLATE.into(),
        };
        let (ids, probs) = classify_masks(&[vec![0.0, 0.0, 1.0]], &axes, TEXT_TEMPERATURE).unwrap();
        assert_eq!(ids, vec![0]);
        assert_eq!(probs[0], vec![0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn argmax_ignores_temperature(seed in any::<u64>(), t in 0.01f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = ToyProvider { dim: 8 };
            let v = build_vocabulary(&p, &names(&["a", "b", "c", "d"]), DEFAULT_TEMPLATE).unwrap();
            let e: Vec<Vec<f32>> = (0..6)
                .map(|_| normalized(&(0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>()).unwrap())
                .collect();
            let (a, _) = classify_masks(&e, &v, TEXT_TEMPERATURE).unwrap();
            let (b, _) = classify_masks(&e, &v, t).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    fn result_with(embeddings: Vec<Vec<f32>>, masks: Vec<Vec<bool>>, scores: Vec<f32>) -> SegmentationResult {
        let n = masks.len();
        SegmentationResult {
            masks,
            scores,
            clip_embeddings: embeddings,
            provenance: vec![crate::autoprompt::Provenance { iteration: 0, point_index: 0, point: [0.0; 3] }; n],
            prompts_per_iteration: vec![n],
        }
    }

    #[test]
    fn open_vocab_ranking() {
        let p = ToyProvider::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut emb: Vec<Vec<f32>> = (0..12)
            .map(|_| normalized(&(0..32).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>()).unwrap())
            .collect();
        emb[7] = p.embed_one("lamp");
        let r = result_with(emb.clone(), vec![vec![true]; 12], vec![0.9; 12]);
        let hits = open_vocab_query(&r, "lamp", &p, -1.0).unwrap();
        assert_eq!(hits[0].0, 7);
        assert!((hits[0].1 - 1.0).abs() < 1e-6);
        assert_eq!(hits.len(), 12);
        let q = p.embed_one("lamp");
        let mut oracle: Vec<(usize, f64)> = emb.iter().enumerate().map(|(i, e)| (i, cosine(e, &q))).collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        assert_eq!(hits.iter().map(|h| h.0).collect::<Vec<_>>(), oracle.iter().map(|h| h.0).collect::<Vec<_>>());
        assert!(open_vocab_query(&r, "lamp", &p, 1.01).unwrap().is_empty());
    }

    #[test]
    fn panoptic_assembly() {
        let masks = vec![vec![true, true, false, false], vec![false, true, true, false]];
        let r = result_with(vec![vec![1.0], vec![1.0]], masks, vec![0.7, 0.9]);
        let (inst, class) = assemble_panoptic(&r, &[4, 5], 4).unwrap();
        assert_eq!(inst, vec![0, 1, 1, -1]);
        assert_eq!(class, vec![4, 5, 5, -1]);
        let tie = result_with(vec![vec![1.0], vec![1.0]], vec![vec![true], vec![true]], vec![0.8, 0.8]);
        assert_eq!(assemble_panoptic(&tie, &[1, 2], 1).unwrap().0, vec![0]);
    }

    #[test]
    fn subprocess_adapter_round_trip() {
        let script = r#"while IFS= read -r line; do echo '{"embeddings":[[3.0,4.0]]}'; done"#;
        let p = SubprocessProvider::spawn("sh", &["-c".into(), script.into()], 2, true).unwrap();
        let v = build_vocabulary(&p, &names(&["only"]), DEFAULT_TEMPLATE).unwrap();
        assert!((v.embeddings[0][0] - 0.6).abs() < 1e-6);
        assert!(p.embed(&names(&["a", "b"])).is_err());
    }
}

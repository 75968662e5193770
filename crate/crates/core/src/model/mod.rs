//! Seeded toy multimodal decoder with per-head KV caches.
//!
//! Each block is pre-norm attention followed by a single-`tanh` MLP, both
//! residual. Image tokens come from their own embedding table and occupy a
//! contiguous prefix of the sequence.

pub mod attention;
pub mod cache;
pub mod record;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::calibration::PenaltyScope;
use crate::decoding::LogitRecord;
use crate::error::{ensure_len, Error, Result};
use crate::linalg::{self, Matrix};
use crate::seed;
use crate::selection::SaliencySource;

pub use attention::{attention_step, AttentionOutput};
pub use cache::{HeadCache, KvCache, RowMeta};
pub use record::{AttentionMatrix, AttentionRecord, DumpRecord, ScoreRow};

/// End-of-sequence token id.
pub const EOS_TOKEN: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_layers: usize,
    pub max_seq_len: usize,
    pub rng_seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: vocab 256, width 64, 4 heads, 4 layers.
    pub fn desk() -> Self {
        Self {
            vocab_size: 256,
            embed_dim: 64,
            num_heads: 4,
            head_dim: 16,
            num_layers: 4,
            max_seq_len: 1024,
            rng_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(
                "num_heads and head_dim must be positive".into(),
            ));
        }
        if self.embed_dim != self.num_heads * self.head_dim {
            return Err(Error::Config(format!(
                "embed_dim {} != num_heads {} x head_dim {}",
                self.embed_dim, self.num_heads, self.head_dim
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.num_layers < 1 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.embed_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Image,
    TextPrompt,
    Generated,
}

impl Modality {
    pub fn is_image(self) -> bool {
        self == Modality::Image
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::TextPrompt => "text-prompt",
            Modality::Generated => "generated",
        }
    }
}

/// Token ids with a modality tag per position. Image tokens form a prefix.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    modalities: Vec<Modality>,
}

impl TokenSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(image: &[usize], prompt: &[usize], generated: &[usize]) -> Self {
        let mut s = Self::new();
        for &t in image {
            s.tokens.push(t);
            s.modalities.push(Modality::Image);
        }
        for &t in prompt {
            s.tokens.push(t);
            s.modalities.push(Modality::TextPrompt);
        }
        for &t in generated {
            s.tokens.push(t);
            s.modalities.push(Modality::Generated);
        }
        s
    }

    /// Sequence of the given modalities with placeholder token ids.
    pub fn from_modalities(modalities: Vec<Modality>) -> Result<Self> {
        let s = Self {
            tokens: vec![0; modalities.len()],
            modalities,
        };
        if let Some(first_text) = s.modalities.iter().position(|m| !m.is_image()) {
            if s.modalities[first_text..].iter().any(|m| m.is_image()) {
                return Err(Error::Precondition("image tokens must form a prefix"));
            }
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn modality(&self, position: usize) -> Option<Modality> {
        self.modalities.get(position).copied()
    }

    /// Number of leading image tokens.
    pub fn image_len(&self) -> usize {
        self.modalities.iter().take_while(|m| m.is_image()).count()
    }

    /// Positions of the image tokens.
    pub fn image_positions(&self) -> std::ops::Range<usize> {
        0..self.image_len()
    }

    pub fn generated(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .zip(&self.modalities)
            .filter(|(_, m)| **m == Modality::Generated)
            .map(|(t, _)| *t)
            .collect()
    }

    fn push(&mut self, token: usize, modality: Modality) -> Result<()> {
        if modality.is_image() && self.modalities.iter().any(|m| !m.is_image()) {
            return Err(Error::Precondition("image tokens must form a prefix"));
        }
        self.tokens.push(token);
        self.modalities.push(modality);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_up: Matrix,
    pub b_up: Vec<f64>,
    pub w_down: Matrix,
}

/// Scale of the image-embedding component aligned with the output row of
/// the same id.
const GROUNDING_GAIN: f64 = 1.5;
const IMAGE_NOISE_STD: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct Weights {
    pub config: ModelConfig,
    pub text_embed: Matrix,
    pub image_embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lm_head: Matrix,
    pub lm_bias: Vec<f64>,
}

impl Weights {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let v = config.vocab_size;
        let f = config.mlp_dim();
        let mut rng = seed::rng(config.rng_seed);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();

        let text_embed = Matrix::random(v, d, 1.0, &mut rng);
        let lm_head = Matrix::random(v, d, inv_sqrt_d, &mut rng);
        let lm_bias = Matrix::random(1, v, 0.1, &mut rng).data;

        // Image embeddings point along the output row of the same id so a
        // copied image token raises its own logit.
        let mut image_embed = Matrix::random(v, d, IMAGE_NOISE_STD, &mut rng);
        for id in 0..v {
            let row = lm_head.row(id);
            let norm = linalg::dot(row, row).sqrt().max(1e-12);
            let scale = GROUNDING_GAIN * (d as f64).sqrt() / norm;
            for (e, w) in image_embed.row_mut(id).iter_mut().zip(row) {
                *e += scale * w;
            }
        }

        let near_identity = |rng: &mut _| {
            let mut m = Matrix::random(d, d, 0.3 * inv_sqrt_d, rng);
            for i in 0..d {
                m.data[i * d + i] += 1.0;
            }
            m
        };
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                wq: Matrix::random(d, d, inv_sqrt_d, &mut rng),
                wk: Matrix::random(d, d, inv_sqrt_d, &mut rng),
                wv: near_identity(&mut rng),
                wo: near_identity(&mut rng),
                w_up: Matrix::random(f, d, inv_sqrt_d, &mut rng),
                b_up: vec![0.0; f],
                w_down: Matrix::random(d, f, 0.5 / (f as f64).sqrt(), &mut rng),
            })
            .collect();

        Ok(Self {
            config: config.clone(),
            text_embed,
            image_embed,
            layers,
            lm_head,
            lm_bias,
        })
    }

    /// Raw token embedding (no position code).
    pub fn token_embedding(&self, token: usize, modality: Modality) -> &[f64] {
        if modality.is_image() {
            self.image_embed.row(token)
        } else {
            self.text_embed.row(token)
        }
    }

    /// Final norm plus vocabulary projection of one hidden vector.
    pub fn project(&self, hidden: &[f64]) -> Vec<f64> {
        let h = linalg::layer_norm(hidden);
        let mut logits = self.lm_head.matvec(&h);
        linalg::add_assign(&mut logits, &self.lm_bias);
        logits
    }
}

/// Attention recalibration settings applied on every step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub beta: f64,
    pub scope: PenaltyScope,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            beta: 0.0,
            scope: PenaltyScope::All,
        }
    }
}

/// Model weights plus one decoding session's cache and history.
#[derive(Debug, Clone)]
pub struct DecoderState {
    weights: Arc<Weights>,
    sequence: TokenSequence,
    pub(crate) cache: KvCache,
    /// Last query per `[layer][head]`.
    pub(crate) last_queries: Vec<Vec<Vec<f64>>>,
    last_logits: Option<Vec<f64>>,
    /// Sum of raw input embeddings over the whole sequence.
    pub(crate) embedding_sum: Vec<f64>,
    pub(crate) calibration: Calibration,
    pub(crate) saliency_source: SaliencySource,
    pub(crate) dump: Option<Vec<DumpRecord>>,
}

impl DecoderState {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        Ok(Self::from_weights(Arc::new(Weights::init(config)?)))
    }

    /// A fresh session sharing already-initialized weights.
    pub fn from_weights(weights: Arc<Weights>) -> Self {
        let c = &weights.config;
        let cache = KvCache::new(c.num_layers, c.num_heads, c.head_dim);
        let last_queries = vec![vec![Vec::new(); c.num_heads]; c.num_layers];
        let embedding_sum = vec![0.0; c.embed_dim];
        Self {
            weights,
            sequence: TokenSequence::new(),
            cache,
            last_queries,
            last_logits: None,
            embedding_sum,
            calibration: Calibration::default(),
            saliency_source: SaliencySource::default(),
            dump: None,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn weights(&self) -> &Arc<Weights> {
        &self.weights
    }

    pub fn sequence(&self) -> &TokenSequence {
        &self.sequence
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn last_logits(&self) -> Option<&[f64]> {
        self.last_logits.as_deref()
    }

    pub fn last_query(&self, layer: usize, head: usize) -> &[f64] {
        &self.last_queries[layer][head]
    }

    pub fn calibration(&self) -> Calibration {
        self.calibration
    }

    pub fn set_calibration(&mut self, calibration: Calibration) {
        self.calibration = calibration;
    }

    pub fn set_saliency_source(&mut self, source: SaliencySource) {
        self.saliency_source = source;
    }

    /// Starts collecting every attention row (and event vectors) for a dump.
    pub fn enable_dump(&mut self) {
        if self.dump.is_none() {
            self.dump = Some(Vec::new());
        }
    }

    /// Takes the collected dump, appending the sequence modality record.
    pub fn take_dump(&mut self) -> Vec<DumpRecord> {
        let mut out = self.dump.take().unwrap_or_default();
        out.push(DumpRecord::Sequence {
            modalities: self.sequence.modalities().to_vec(),
        });
        out
    }

    pub(crate) fn dump_push(&mut self, rec: DumpRecord) {
        if let Some(d) = self.dump.as_mut() {
            d.push(rec);
        }
    }

    /// Feeds image tokens then prompt tokens into an empty session and
    /// returns the logits after the last one.
    pub fn ingest_prompt(&mut self, image: &[usize], prompt: &[usize]) -> Result<Vec<f64>> {
        if !self.sequence.is_empty() {
            return Err(Error::Precondition("prompt already ingested"));
        }
        if image.is_empty() && prompt.is_empty() {
            return Err(Error::EmptyInput("prompt"));
        }
        let mut logits = Vec::new();
        for &t in image {
            logits = self.forward_token(t, Modality::Image)?;
        }
        for &t in prompt {
            logits = self.forward_token(t, Modality::TextPrompt)?;
        }
        Ok(logits)
    }

    /// Appends one generated token and returns the next-token logits.
    pub fn decode_step(&mut self, next_token: usize) -> Result<LogitRecord> {
        if self.sequence.is_empty() {
            return Err(Error::Precondition(
                "prompt must be ingested before decoding",
            ));
        }
        let logits = self.forward_token(next_token, Modality::Generated)?;
        Ok(LogitRecord::from_theta(logits))
    }

    /// LM head applied to the last embedding of `embeddings`, bypassing the
    /// transformer layers.
    pub fn lm_head_only(&self, embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
        let last = embeddings
            .last()
            .ok_or(Error::EmptyInput("embedding sequence"))?;
        for e in embeddings {
            ensure_len("embedding", self.config().embed_dim, e.len())?;
        }
        Ok(self.weights.project(last))
    }

    fn forward_token(&mut self, token: usize, modality: Modality) -> Result<Vec<f64>> {
        let cfg = self.weights.config.clone();
        if token >= cfg.vocab_size {
            return Err(Error::Precondition("token id outside the vocabulary"));
        }
        if self.sequence.len() >= cfg.max_seq_len {
            return Err(Error::Capacity {
                max: cfg.max_seq_len,
            });
        }
        let position = self.sequence.len();
        self.sequence.push(token, modality)?;
        let weights = Arc::clone(&self.weights);

        let emb = weights.token_embedding(token, modality);
        linalg::add_assign(&mut self.embedding_sum, emb);
        let mut x = emb.to_vec();
        linalg::add_assign(
            &mut x,
            &linalg::positional_encoding(position, cfg.embed_dim),
        );

        let hd = cfg.head_dim;
        let image_fraction = if modality.is_image() { 1.0 } else { 0.0 };
        let Calibration { beta, .. } = self.calibration;
        let mut visual_by_head = vec![0.0; cfg.num_heads];

        for (l, lw) in weights.layers.iter().enumerate() {
            let h = linalg::layer_norm(&x);
            let q = lw.wq.matvec(&h);
            let k = lw.wk.matvec(&h);
            let v = lw.wv.matvec(&h);
            let mut mixed = vec![0.0; cfg.embed_dim];
            #[allow(clippy::needless_range_loop)]
            for head in 0..cfg.num_heads {
                let span = head * hd..(head + 1) * hd;
                let hc = &mut self.cache.layers[l][head];
                hc.push(
                    &k[span.clone()],
                    &v[span.clone()],
                    RowMeta {
                        position,
                        aggregated: false,
                        members: 1,
                        received_mass: 0.0,
                        image_fraction,
                        visual: 0.0,
                        generated: modality == Modality::Generated,
                    },
                );
                let out = attention_step(&q[span.clone()], hc, hc.penalty_weights(), beta)?;
                let mut image_mass = 0.0;
                for (meta, a) in hc.rows_mut().iter_mut().zip(&out.scores) {
                    meta.received_mass += a;
                    image_mass += a * meta.image_fraction;
                }
                if l + 1 == cfg.num_layers {
                    visual_by_head[head] = image_mass;
                }
                mixed[span.clone()].copy_from_slice(&out.context);
                self.last_queries[l][head] = q[span].to_vec();
                if self.dump.is_some() {
                    let hc = &self.cache.layers[l][head];
                    let row = ScoreRow {
                        layer: l,
                        head,
                        step: position,
                        columns: hc.rows().iter().map(|m| m.position).collect(),
                        aggregated: hc.rows().iter().map(|m| m.aggregated).collect(),
                        scores: out.scores,
                    };
                    self.dump_push(DumpRecord::Attention(row));
                }
            }
            linalg::add_assign(&mut x, &lw.wo.matvec(&mixed));

            let h2 = linalg::layer_norm(&x);
            let mut up = lw.w_up.matvec(&h2);
            for (u, b) in up.iter_mut().zip(&lw.b_up) {
                *u = (*u + b).tanh();
            }
            linalg::add_assign(&mut x, &lw.w_down.matvec(&up));
        }

        let visual = self.saliency_source.pick(&visual_by_head);
        for layer in &mut self.cache.layers {
            for hc in layer.iter_mut() {
                if let Some(last) = hc.rows_mut().last_mut() {
                    last.visual = visual;
                }
            }
        }

        let logits = weights.project(&x);
        self.last_logits = Some(logits.clone());
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            embed_dim: 16,
            num_heads: 2,
            head_dim: 8,
            num_layers: 2,
            max_seq_len: 64,
            rng_seed: 1,
        }
    }

    #[test]
    fn same_seed_gives_identical_weights_and_logits() {
        let mut a = DecoderState::new(&small()).unwrap();
        let mut b = DecoderState::new(&small()).unwrap();
        assert_eq!(a.weights().lm_head, b.weights().lm_head);
        assert_eq!(a.weights().layers[1].wq, b.weights().layers[1].wq);
        let la = a.ingest_prompt(&[3, 4], &[5]).unwrap();
        let lb = b.ingest_prompt(&[3, 4], &[5]).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn different_seed_gives_different_logits() {
        let mut a = DecoderState::new(&small()).unwrap();
        let mut b = DecoderState::new(&small().with_seed(2)).unwrap();
        assert_ne!(
            a.ingest_prompt(&[3, 4], &[5]).unwrap(),
            b.ingest_prompt(&[3, 4], &[5]).unwrap()
        );
    }

    #[test]
    fn bad_head_split_is_config_error() {
        let mut c = small();
        c.head_dim = 7;
        assert!(matches!(DecoderState::new(&c), Err(Error::Config(_))));
        let mut c = small();
        c.vocab_size = 1;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn decode_without_prompt_is_rejected() {
        let mut s = DecoderState::new(&small()).unwrap();
        assert!(matches!(s.decode_step(1), Err(Error::Precondition(_))));
    }

    #[test]
    fn capacity_is_enforced() {
        let mut c = small();
        c.max_seq_len = 3;
        let mut s = DecoderState::new(&c).unwrap();
        s.ingest_prompt(&[1], &[2]).unwrap();
        s.decode_step(3).unwrap();
        assert!(matches!(s.decode_step(4), Err(Error::Capacity { max: 3 })));
    }

    #[test]
    fn cache_grows_one_row_per_head_per_token() {
        let mut s = DecoderState::new(&small()).unwrap();
        s.ingest_prompt(&[1, 2, 3], &[4]).unwrap();
        s.decode_step(5).unwrap();
        for layer in s.cache().layers() {
            for hc in layer {
                assert_eq!(hc.len(), 5);
                let pos: Vec<_> = hc.rows().iter().map(|r| r.position).collect();
                assert_eq!(pos, vec![0, 1, 2, 3, 4]);
            }
        }
    }

    #[test]
    fn lm_head_only_contract() {
        let s = DecoderState::new(&small()).unwrap();
        let zero = s.lm_head_only(&[vec![0.0; 16]]).unwrap();
        assert_eq!(zero, s.weights().lm_bias);
        let e = vec![(0..16).map(|i| i as f64 * 0.1).collect::<Vec<_>>()];
        let a = s.lm_head_only(&e).unwrap();
        assert_eq!(a, s.lm_head_only(&e).unwrap());
        assert_eq!(a.len(), 32);
        assert!(matches!(
            s.lm_head_only(&[vec![0.0; 15]]),
            Err(Error::Shape { .. })
        ));
        assert!(s.lm_head_only(&[]).is_err());
    }

    #[test]
    fn image_after_text_is_rejected() {
        assert!(TokenSequence::from_modalities(vec![
            Modality::Image,
            Modality::TextPrompt,
            Modality::Image
        ])
        .is_err());
    }

    #[test]
    fn image_rows_see_only_image_mass() {
        let mut s = DecoderState::new(&small()).unwrap();
        s.ingest_prompt(&[1, 2], &[3]).unwrap();
        let rows = s.cache().head(1, 1).rows();
        assert!((rows[0].visual - 1.0).abs() < 1e-12);
        assert!((rows[1].visual - 1.0).abs() < 1e-12);
        assert!(rows[2].visual < 1.0);
    }
}

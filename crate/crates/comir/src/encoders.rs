//! Desk-scale image and text encoders.
//!
//! The image encoder is a stack of stride-2 conv blocks (conv, instance norm,
//! ReLU) followed by a global average pool and an affine head; both the last
//! conv feature map (low-level tap) and the pooled embedding (high-level tap)
//! are exposed. The text encoder stacks word embeddings (low-level tap) and
//! runs a gated recurrent cell whose final non-pad state is projected to the
//! shared embedding dimension.

use std::collections::BTreeMap;

use ndarray::{Array4, ArrayD, IxDyn};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::nn::{add_gru, conv, gru_step, instance_norm, linear, Graph, ParamStore};
use crate::tensor::Var;

pub const PAD_INDEX: usize = 0;
pub const OOV_INDEX: usize = 1;

/// A batch of images `[B, 3, H, W]` with values in `[0,1]`.
pub type ImageBatch = Array4<f64>;

/// Check an image batch against the configured geometry.
pub fn validate_images(cfg: &ModelConfig, images: &ImageBatch) -> Result<()> {
    let (_, c, h, w) = images.dim();
    if c != 3 || h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Shape(format!(
            "expected [B,3,{s},{s}] image batch, got {d:?}",
            s = cfg.image_size,
            d = images.dim()
        )));
    }
    if images.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(Error::Data("image values must be finite and within [0,1]".into()));
    }
    Ok(())
}

/// Whitespace + lowercase vocabulary with reserved pad and OOV entries.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Build from a training corpus. Word order is sorted for determinism.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(corpus: I) -> Self {
        let mut uniq: Vec<String> = corpus
            .into_iter()
            .flat_map(|line| line.split_whitespace())
            .map(|w| w.to_lowercase())
            .collect();
        uniq.sort();
        uniq.dedup();
        let mut words = vec!["<pad>".to_string(), "<oov>".to_string()];
        words.extend(uniq);
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words, index }
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[0] != "<pad>" || words[1] != "<oov>" {
            return Err(Error::Data("vocabulary must start with <pad>, <oov>".into()));
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Vocab { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Tokenize and pad/truncate to `max_tokens`. Empty texts are rejected:
    /// the recurrent encoder has no defined final state for them.
    pub fn encode(&self, text: &str, max_tokens: usize) -> Result<Vec<usize>> {
        let mut toks: Vec<usize> = text
            .split_whitespace()
            .map(|w| {
                let lw = w.to_lowercase();
                self.index.get(&lw).copied().unwrap_or(OOV_INDEX)
            })
            .collect();
        if toks.is_empty() {
            return Err(Error::Data(format!("empty text: {text:?}")));
        }
        toks.truncate(max_tokens);
        toks.resize(max_tokens, PAD_INDEX);
        Ok(toks)
    }
}

/// Register the image encoder parameters under `img_enc.*`.
pub fn register_image_encoder<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) {
    let mut in_ch = 3;
    for (i, &width) in cfg.conv_widths.iter().enumerate() {
        store.add_conv(rng, &format!("img_enc.block{i}.conv"), in_ch, width, 3);
        store.add_norm(&format!("img_enc.block{i}.norm"), width);
        in_ch = width;
    }
    store.add_linear(rng, "img_enc.head", cfg.feature_channels(), cfg.embed_dim);
}

/// Register the text encoder parameters under `txt_enc.*`.
pub fn register_text_encoder<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) {
    store.add_normal(rng, "txt_enc.embed", &[cfg.vocab_size, cfg.text_embed_dim], 0.1);
    add_gru(store, rng, "txt_enc.gru", cfg.text_embed_dim, cfg.text_hidden);
    store.add_linear(rng, "txt_enc.proj", cfg.text_hidden, cfg.embed_dim);
}

/// Spatial branch of the image encoder: `[B,3,H,W] -> [B,C_f,M,M]`.
pub fn encode_image_spatial<'t>(g: &Graph<'t>, cfg: &ModelConfig, images: Var<'t>) -> Var<'t> {
    let spec = ConvSpec { kernel: 3, stride: 2 };
    let mut x = images;
    for i in 0..cfg.conv_widths.len() {
        x = conv(g, x, &format!("img_enc.block{i}.conv"), spec);
        x = instance_norm(g, x, &format!("img_enc.block{i}.norm"), 1e-5);
        x = x.relu();
    }
    x
}

/// Full image encoder: returns the low-level feature map and the pooled
/// embedding. The embedding is a deterministic function of the map.
pub fn encode_image<'t>(
    g: &Graph<'t>,
    cfg: &ModelConfig,
    images: Var<'t>,
) -> (Var<'t>, Var<'t>) {
    let map = encode_image_spatial(g, cfg, images);
    let emb = linear(g, map.global_avg_pool(), "img_enc.head");
    (map, emb)
}

/// Text encoder over pre-encoded token index rows (each of length
/// `cfg.max_tokens`). Returns the embedding-stack feature map
/// `[B, E, L, 1]` and the projected final-state embedding `[B, D]`.
pub fn encode_text<'t>(
    g: &Graph<'t>,
    cfg: &ModelConfig,
    tokens: &[Vec<usize>],
) -> (Var<'t>, Var<'t>) {
    let bsz = tokens.len();
    assert!(bsz > 0, "empty token batch");
    let l = cfg.max_tokens;
    for row in tokens {
        assert_eq!(row.len(), l, "token row length != max_tokens");
        assert_ne!(row[0], PAD_INDEX, "empty (all-pad) token sequence");
    }
    let table = g.p("txt_enc.embed");

    // Low-level tap: the word-embedding stack, laid out as channels x steps.
    let flat: Vec<usize> = tokens.iter().flat_map(|r| r.iter().copied()).collect();
    let tmap = table
        .gather_rows(&flat)
        .reshape(&[bsz, l, cfg.text_embed_dim])
        .permute_axes(&[0, 2, 1])
        .reshape(&[bsz, cfg.text_embed_dim, l, 1]);

    // Recurrence with pad masking: padded steps keep the previous state, so
    // the final state equals the state at the last non-pad step.
    let mut h = g.tape.leaf(ArrayD::zeros(IxDyn(&[bsz, cfg.text_hidden])));
    for t in 0..l {
        let idx: Vec<usize> = tokens.iter().map(|r| r[t]).collect();
        let x_t = table.gather_rows(&idx);
        let mask = ArrayD::from_shape_fn(IxDyn(&[bsz, cfg.text_hidden]), |ix| {
            if tokens[ix[0]][t] == PAD_INDEX {
                0.0
            } else {
                1.0
            }
        });
        h = gru_step(g, "txt_enc.gru", x_t, h, &mask);
    }
    let emb = linear(g, h, "txt_enc.proj");
    (tmap, emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            conv_widths: vec![8, 16],
            embed_dim: 32,
            text_embed_dim: 8,
            text_hidden: 16,
            max_tokens: 4,
            vocab_size: 10,
            variant: crate::config::ModelVariant::TirgA,
        }
    }

    fn build_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        register_image_encoder(&mut store, &mut rng, cfg);
        register_text_encoder(&mut store, &mut rng, cfg);
        store
    }

    #[test]
    fn vocab_roundtrip_and_oov() {
        let v = Vocab::build(["add small green circle", "remove red square"]);
        let toks = v.encode("add UNKNOWNWORD circle", 4).unwrap();
        assert_eq!(toks.len(), 4);
        assert_eq!(toks[1], OOV_INDEX);
        assert_eq!(toks[3], PAD_INDEX);
        assert!(v.encode("", 4).is_err());
    }

    #[test]
    fn image_encoder_shapes_and_determinism() {
        let cfg = small_cfg();
        let store = build_store(&cfg, 0);
        let images = Array4::from_elem((2, 3, 32, 32), 0.5);
        let run = || {
            let tape = Tape::new();
            let g = Graph::new(&tape, &store);
            let imgs = tape.leaf(images.clone().into_dyn());
            let (map, emb) = encode_image(&g, &cfg, imgs);
            (map.value(), emb.value())
        };
        let (m1, e1) = run();
        let (m2, e2) = run();
        assert_eq!(m1.shape(), &[2, 16, 8, 8]);
        assert_eq!(e1.shape(), &[2, 32]);
        assert_eq!(m1, m2);
        assert_eq!(e1, e2);
        // Identical inputs within the batch produce identical rows.
        assert_eq!(
            e1.index_axis(ndarray::Axis(0), 0),
            e1.index_axis(ndarray::Axis(0), 1)
        );
    }

    #[test]
    fn zero_image_zero_head_gives_bias_embedding() {
        let cfg = small_cfg();
        let mut store = build_store(&cfg, 0);
        // Zero the head: embedding must equal the (zero) head bias.
        store.get_mut("img_enc.head.w").fill(0.0);
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let imgs = tape.leaf(Array4::zeros((1, 3, 32, 32)).into_dyn());
        let (_, emb) = encode_image(&g, &cfg, imgs);
        assert!(emb.value().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn text_encoder_pad_suffix_invariance_and_order_sensitivity() {
        let cfg = small_cfg();
        let store = build_store(&cfg, 3);
        let emb_of = |rows: &[Vec<usize>]| {
            let tape = Tape::new();
            let g = Graph::new(&tape, &store);
            let (_, e) = encode_text(&g, &cfg, rows);
            e.value()
        };
        // Pad-only suffix does not change the embedding.
        let a = emb_of(&[vec![3, 4, PAD_INDEX, PAD_INDEX]]);
        let b = emb_of(&[vec![3, 4, PAD_INDEX, PAD_INDEX]]);
        assert_eq!(a, b);
        // Swapping two distinct tokens changes the embedding.
        let c = emb_of(&[vec![4, 3, PAD_INDEX, PAD_INDEX]]);
        let diff: f64 = (&a - &c).mapv(f64::abs).sum();
        assert!(diff > 1e-8, "order-insensitive text embedding");
    }

    #[test]
    fn text_feature_map_layout() {
        let cfg = small_cfg();
        let store = build_store(&cfg, 5);
        let tape = Tape::new();
        let g = Graph::new(&tape, &store);
        let (tmap, _) = encode_text(&g, &cfg, &[vec![2, 5, PAD_INDEX, PAD_INDEX]]);
        let v = tmap.value();
        assert_eq!(v.shape(), &[1, 8, 4, 1]);
        // Column t holds the embedding of token t.
        let table = store.get("txt_enc.embed");
        for e in 0..8 {
            assert_eq!(v[[0, e, 0, 0]], table[[2, e]]);
            assert_eq!(v[[0, e, 1, 0]], table[[5, e]]);
            assert_eq!(v[[0, e, 2, 0]], table[[PAD_INDEX, e]]);
        }
    }
}

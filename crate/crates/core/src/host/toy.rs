use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{ToyTokenizer, BOS_ID, COLORS, IMAGE_ID};
use super::{HostForwardRecord, HostModel, HostModelSpec, Role, TokenizedConversation};
use crate::error::{ensure, Error, Result};
use crate::image::ImageArray;
use crate::tensor::{self, matmul, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyLmmConfig {
    pub seed: u64,
    pub dims: HostModelSpec,
    pub vocab_size: usize,
    /// Images are resized to this `(height, width)` before patch pooling.
    pub toy_image_size: (usize, usize),
}

impl Default for ToyLmmConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dims: HostModelSpec {
                num_layers: 2,
                num_heads: 2,
                hidden_dim: 32,
                grid: (16, 16),
                max_sequence_len: 512,
            },
            vocab_size: 256,
            toy_image_size: (64, 64),
        }
    }
}

impl ToyLmmConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let (gh, gw) = self.dims.grid;
        let (ih, iw) = self.toy_image_size;
        ensure!(
            self.dims.hidden_dim % self.dims.num_heads == 0,
            InvalidArgument,
            "hidden_dim {} not divisible by {} heads",
            self.dims.hidden_dim,
            self.dims.num_heads
        );
        ensure!(
            ih % gh == 0 && iw % gw == 0 && ih > 0 && iw > 0,
            InvalidArgument,
            "toy image size {:?} must be a multiple of the grid {:?}",
            self.toy_image_size,
            self.dims.grid
        );
        ToyTokenizer::new(self.vocab_size)?;
        Ok(())
    }
}

/// Query/key weights and pre-attention norm of one layer.
pub struct AttentionWeights<'a> {
    pub ln_gamma: &'a [f64],
    pub ln_beta: &'a [f64],
    /// `[d, d]`; head `n` uses rows `n·d/N .. (n+1)·d/N`.
    pub wq: &'a Tensor,
    pub wk: &'a Tensor,
}

#[derive(Clone, Debug)]
struct Layer {
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Seeded pre-norm decoder-only transformer with a patch-mean image projector.
///
/// Colour words are embedded along the projector's image of their RGB value,
/// and each head's key map is a perturbation of its query map, so text tokens
/// attend to image patches of matching colour.
#[derive(Clone, Debug)]
pub struct ToyLmm {
    cfg: ToyLmmConfig,
    tokenizer: ToyTokenizer,
    token_embed: Tensor,
    projector: Tensor,
    image_pos: Tensor,
    text_pos: Tensor,
    layers: Vec<Layer>,
    final_g: Tensor,
    final_b: Tensor,
    lm_head: Tensor,
}

const QK_GAIN: f64 = 1.5;
const KEY_NOISE: f64 = 0.2;
const POS_STD: f64 = 0.1;

impl ToyLmm {
    pub fn new(cfg: ToyLmmConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.dims.hidden_dim;
        let v = cfg.vocab_size;
        let f = 2 * d;
        let inv = 1.0 / (d as f64).sqrt();
        let tokenizer = ToyTokenizer::new(v)?;

        let projector = Tensor::randn(&[d, 3], 1.0, &mut rng);
        let mut token_embed = Tensor::randn(&[v, d], 1.0, &mut rng);
        for (word, rgb) in COLORS {
            let dir = project_rgb(&projector, rgb);
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let row = tokenizer.word_id(word) as usize;
            for (dst, x) in token_embed.data_mut()[row * d..(row + 1) * d].iter_mut().zip(&dir) {
                *dst = x / norm * (d as f64).sqrt();
            }
        }
        let image_pos = Tensor::randn(&[cfg.dims.image_tokens(), d], POS_STD, &mut rng);
        let text_pos = Tensor::randn(&[cfg.dims.max_sequence_len, d], POS_STD, &mut rng);

        let layers = (0..cfg.dims.num_layers)
            .map(|_| {
                let wq = Tensor::randn(&[d, d], QK_GAIN * inv, &mut rng);
                let noise = Tensor::randn(&[d, d], KEY_NOISE * QK_GAIN * inv, &mut rng);
                let mut wk = wq.clone();
                wk.add_assign(&noise);
                Layer {
                    ln1_g: Tensor::full(&[d], 1.0),
                    ln1_b: Tensor::zeros(&[d]),
                    wq,
                    wk,
                    wv: Tensor::randn(&[d, d], inv, &mut rng),
                    wo: Tensor::randn(&[d, d], 0.5 * inv, &mut rng),
                    ln2_g: Tensor::full(&[d], 1.0),
                    ln2_b: Tensor::zeros(&[d]),
                    w1: Tensor::randn(&[f, d], inv, &mut rng),
                    b1: Tensor::zeros(&[f]),
                    w2: Tensor::randn(&[d, f], 0.5 / (f as f64).sqrt(), &mut rng),
                    b2: Tensor::zeros(&[d]),
                }
            })
            .collect();
        let lm_head = Tensor::randn(&[v, d], inv, &mut rng);
        Ok(Self {
            tokenizer,
            token_embed,
            projector,
            image_pos,
            text_pos,
            layers,
            final_g: Tensor::full(&[d], 1.0),
            final_b: Tensor::zeros(&[d]),
            lm_head,
            cfg,
        })
    }

    pub fn config(&self) -> &ToyLmmConfig {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &ToyTokenizer {
        &self.tokenizer
    }

    pub fn attention_weights(&self, layer: usize) -> AttentionWeights<'_> {
        let l = &self.layers[layer];
        AttentionWeights {
            ln_gamma: l.ln1_g.data(),
            ln_beta: l.ln1_b.data(),
            wq: &l.wq,
            wk: &l.wk,
        }
    }

    /// Every weight, flattened in a fixed order (for freeze checks).
    pub fn weights_snapshot(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in [&self.token_embed, &self.projector, &self.image_pos, &self.text_pos] {
            out.extend_from_slice(t.data());
        }
        for l in &self.layers {
            for t in [
                &l.ln1_g, &l.ln1_b, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2,
                &l.b2,
            ] {
                out.extend_from_slice(t.data());
            }
        }
        for t in [&self.final_g, &self.final_b, &self.lm_head] {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Patch-mean image embeddings `[h·w, d]`.
    pub fn image_embeddings(&self, image: &ImageArray) -> Tensor {
        let (ih, iw) = self.cfg.toy_image_size;
        let (gh, gw) = self.cfg.dims.grid;
        let img = image.resize(ih, iw);
        let (ph, pw) = (ih / gh, iw / gw);
        let d = self.cfg.dims.hidden_dim;
        let mut out = Vec::with_capacity(gh * gw * d);
        for gy in 0..gh {
            for gx in 0..gw {
                let mut mean = [0.0f32; 3];
                for y in gy * ph..(gy + 1) * ph {
                    for x in gx * pw..(gx + 1) * pw {
                        let p = img.pixel(y, x);
                        for c in 0..3 {
                            mean[c] += p[c];
                        }
                    }
                }
                let n = (ph * pw) as f32;
                let e = project_rgb(&self.projector, mean.map(|m| m / n));
                let pos = self.image_pos.row(gy * gw + gx);
                out.extend(e.iter().zip(pos).map(|(a, b)| a + b));
            }
        }
        Tensor::from_parts(&[gh * gw, d], out)
    }

    /// Layer-0 input `[S, d]` for a conversation.
    pub fn input_embeddings(&self, conv: &TokenizedConversation, image: &ImageArray) -> Result<Tensor> {
        conv.validate(&self.cfg.dims)?;
        let d = self.cfg.dims.hidden_dim;
        let img = self.image_embeddings(image);
        let mut out = Vec::with_capacity(conv.len() * d);
        for (i, &id) in conv.token_ids.iter().enumerate() {
            if conv.image_span.contains(&i) {
                out.extend_from_slice(img.row(i - conv.image_span.start));
            } else {
                ensure!(
                    (id as usize) < self.cfg.vocab_size,
                    Contract,
                    "token id {id} outside vocabulary of {}",
                    self.cfg.vocab_size
                );
                let e = self.token_embed.row(id as usize);
                let p = self.text_pos.row(i);
                out.extend(e.iter().zip(p).map(|(a, b)| a + b));
            }
        }
        Ok(Tensor::from_parts(&[conv.len(), d], out))
    }

    /// Next-token logits `[S, V]` from a record's final hidden states.
    pub fn logits(&self, record: &HostForwardRecord) -> Tensor {
        let s = record.seq_len();
        let d = self.cfg.dims.hidden_dim;
        let v = self.cfg.vocab_size;
        let mut out = vec![0.0; s * v];
        tensor::gemm(s, d, v, record.final_hidden.data(), false, self.lm_head.data(), true, &mut out, false);
        Tensor::from_parts(&[s, v], out)
    }

    fn run(&self, x0: Tensor) -> HostForwardRecord {
        let dims = &self.cfg.dims;
        let (m_layers, heads, d) = (dims.num_layers, dims.num_heads, dims.hidden_dim);
        let dh = d / heads;
        let s = x0.shape()[0];
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attention = vec![0.0; m_layers * heads * s * s];
        let mut hidden = Vec::with_capacity(m_layers * s * d);
        let mut x = x0;

        for (m, l) in self.layers.iter().enumerate() {
            let h = layer_norm(&x, &l.ln1_g, &l.ln1_b);
            let q = matmul(&h, &l.wq.transpose());
            let k = matmul(&h, &l.wk.transpose());
            let v = matmul(&h, &l.wv.transpose());
            let mut ctx = vec![0.0; s * d];
            for n in 0..heads {
                let cols = n * dh..(n + 1) * dh;
                let base = (m * heads + n) * s * s;
                for i in 0..s {
                    let row = &mut attention[base + i * s..base + (i + 1) * s];
                    let qi = &q.row(i)[cols.clone()];
                    for j in 0..=i {
                        let kj = &k.row(j)[cols.clone()];
                        row[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    tensor::softmax_in_place(&mut row[..=i]);
                    let out = &mut ctx[i * d + n * dh..i * d + (n + 1) * dh];
                    for j in 0..=i {
                        let w = row[j];
                        for (o, vv) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                            *o += w * vv;
                        }
                    }
                }
            }
            let ctx = Tensor::from_parts(&[s, d], ctx);
            x.add_assign(&matmul(&ctx, &l.wo.transpose()));

            let h2 = layer_norm(&x, &l.ln2_g, &l.ln2_b);
            let mut a = matmul(&h2, &l.w1.transpose());
            let f = a.shape()[1];
            for row in a.data_mut().chunks_mut(f) {
                for (val, b) in row.iter_mut().zip(l.b1.data()) {
                    *val = tensor::gelu(*val + b);
                }
            }
            let mut mlp = matmul(&a, &l.w2.transpose());
            for row in mlp.data_mut().chunks_mut(d) {
                for (val, b) in row.iter_mut().zip(l.b2.data()) {
                    *val += b;
                }
            }
            x.add_assign(&mlp);
            hidden.extend_from_slice(x.data());
        }

        HostForwardRecord {
            attention: Tensor::from_parts(&[m_layers, heads, s, s], attention),
            hidden_states: Tensor::from_parts(&[m_layers, s, d], hidden),
            final_hidden: layer_norm(&x, &self.final_g, &self.final_b),
        }
    }

    fn append_token(&self, conv: &mut TokenizedConversation, id: u32) {
        let word = self.tokenizer.id_text(id);
        let len = conv.raw_text.chars().count();
        let start = if len > conv.answer_start {
            conv.raw_text.push(' ');
            len + 1
        } else {
            len
        };
        conv.raw_text.push_str(&word);
        conv.token_ids.push(id);
        conv.roles.push(Role::Assistant);
        conv.offsets.push(Some((start, start + word.chars().count())));
    }
}

impl HostModel for ToyLmm {
    fn spec(&self) -> &HostModelSpec {
        &self.cfg.dims
    }

    fn build_conversation(&self, user_text: &str, answer: &str) -> Result<TokenizedConversation> {
        let hw = self.cfg.dims.image_tokens();
        let user_part = format!("User: {user_text} ");
        let marker = "Model: ";
        let raw_text = format!("{user_part}{marker}{answer}");
        let marker_start = user_part.chars().count();
        let answer_start = marker_start + marker.chars().count();

        let mut token_ids = vec![BOS_ID];
        let mut roles = vec![Role::System];
        let mut offsets = vec![None];
        token_ids.extend(std::iter::repeat_n(IMAGE_ID, hw));
        roles.extend(std::iter::repeat_n(Role::Image, hw));
        offsets.extend(std::iter::repeat_n(None, hw));
        for (text, base, role) in [
            (user_part.as_str(), 0, Role::User),
            (marker, marker_start, Role::System),
            (answer, answer_start, Role::Assistant),
        ] {
            for p in self.tokenizer.tokenize(text, base) {
                token_ids.push(p.id);
                roles.push(role);
                offsets.push(Some((p.start, p.end)));
            }
        }
        let conv = TokenizedConversation {
            token_ids,
            roles,
            offsets,
            image_span: 1..1 + hw,
            raw_text,
            answer_start,
        };
        conv.validate(&self.cfg.dims)?;
        Ok(conv)
    }

    fn forward_capture(&self, conv: &TokenizedConversation, image: &ImageArray) -> Result<HostForwardRecord> {
        let x0 = self.input_embeddings(conv, image)?;
        Ok(self.run(x0))
    }

    fn generate(
        &self,
        conv: &TokenizedConversation,
        image: &ImageArray,
        max_new: i64,
    ) -> Result<TokenizedConversation> {
        ensure!(max_new >= 0, InvalidArgument, "max_new must be non-negative, got {max_new}");
        let mut out = conv.clone();
        for _ in 0..max_new {
            if out.len() >= self.cfg.dims.max_sequence_len {
                return Err(Error::SequenceTooLong {
                    len: out.len() + 1,
                    max: self.cfg.dims.max_sequence_len,
                });
            }
            let record = self.forward_capture(&out, image)?;
            let logits = self.logits(&record);
            let next = argmax(logits.row(out.len() - 1)) as u32;
            self.append_token(&mut out, next);
        }
        Ok(out)
    }
}

fn project_rgb(projector: &Tensor, rgb: [f32; 3]) -> Vec<f64> {
    let d = projector.shape()[0];
    (0..d)
        .map(|i| {
            let w = projector.row(i);
            (0..3).map(|c| w[c] * (rgb[c] as f64 - 0.5)).sum()
        })
        .collect()
}

pub(crate) fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
    let d = x.shape()[1];
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * g.data()[j] + b.data()[j];
        }
    }
    Tensor::from_parts(x.shape(), out)
}

/// Index of the first maximum.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyLmm {
        ToyLmm::new(ToyLmmConfig {
            dims: HostModelSpec {
                num_layers: 2,
                num_heads: 2,
                hidden_dim: 32,
                grid: (4, 4),
                max_sequence_len: 64,
            },
            toy_image_size: (16, 16),
            ..ToyLmmConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn conversation_layout() {
        let m = small();
        let c = m.build_conversation("Describe the image.", "a red circle").unwrap();
        assert_eq!(c.image_span, 1..17);
        assert_eq!(c.raw_text, "User: Describe the image. Model: a red circle");
        assert_eq!(c.answer(), "a red circle");
        let asst: Vec<usize> = c.assistant_positions().collect();
        assert_eq!(asst.len(), 3);
        assert_eq!(c.char_span_to_tokens(2, 12), Some(asst[1]..asst[2] + 1));
        assert_eq!(c.tokens_to_char_span(asst[1]..asst[2] + 1), Some((2, 12)));
    }

    #[test]
    fn char_span_inside_token_covers_whole_token() {
        let m = small();
        let c = m.build_conversation("q", "reddish blob").unwrap();
        let r = c.char_span_to_tokens(1, 3).unwrap();
        assert_eq!(r.len(), 1);
        let (s, e) = c.tokens_to_char_span(r).unwrap();
        assert!(s <= 1 && e >= 3);
    }

    #[test]
    fn generation_extends_answer_text() {
        let m = small();
        let img = ImageArray::filled(16, 16, [0.5; 3]);
        let c = m.build_conversation("hi", "").unwrap();
        let g = m.generate(&c, &img, 3).unwrap();
        assert_eq!(g.len(), c.len() + 3);
        let words: Vec<String> = g.token_ids[c.len()..].iter().map(|&id| m.tokenizer().id_text(id)).collect();
        assert_eq!(g.answer(), words.join(" "));
        for i in c.len()..g.len() {
            let (s, e) = g.offsets[i].unwrap();
            let text: String = g.raw_text.chars().skip(s).take(e - s).collect();
            assert_eq!(text, m.tokenizer().id_text(g.token_ids[i]));
        }
    }

    #[test]
    fn rejects_grid_mismatch_and_overlong() {
        let m = small();
        let img = ImageArray::filled(16, 16, [0.5; 3]);
        let mut c = m.build_conversation("hi", "a").unwrap();
        c.image_span = 1..10;
        assert!(matches!(m.forward_capture(&c, &img), Err(Error::Contract(_))));
        let long = "red ".repeat(80);
        assert!(matches!(
            m.build_conversation("hi", &long),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = ToyLmmConfig::default();
        cfg.dims.hidden_dim = 30;
        cfg.dims.num_heads = 4;
        assert!(ToyLmm::new(cfg).is_err());
        let mut cfg = ToyLmmConfig::default();
        cfg.dims.max_sequence_len = 256;
        assert!(ToyLmm::new(cfg).is_err());
    }
}

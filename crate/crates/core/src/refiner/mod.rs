//! Promptable mask refiner: a two-way attention mask head over frozen image
//! embeddings, prompted by the decoder's logits, a box and a text token.
//!
//! Token order is `[mask, box₀, box₁, text]`. A disabled prompt is replaced by
//! its learned null token so shapes never change.

mod encoder;
mod prompt;

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use encoder::{ImageEncoder, ImageEncoderKind, ToyImageEncoder, EMBED_GRID, ENCODER_INPUT};
pub use prompt::{bbox_from_mask, span_layer_embeddings, FourierEncoding, TextPromptWeights};

use crate::decoder::MaskLogits;
use crate::error::{ensure, Error, Result};
use crate::image::PixelBox;
use crate::nn::params::he_uniform;
use crate::nn::{Bound, ParamStore, Tape, Var};
use crate::tensor::Tensor;

/// Side length of the refined logits for the default upscale of 4.
pub const REFINED_SIZE: usize = EMBED_GRID * 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerConfig {
    pub embed_dim: usize,
    pub two_way_layers: usize,
    pub num_heads: usize,
    pub output_upscale: usize,
    pub image_encoder: ImageEncoderKind,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            two_way_layers: 2,
            num_heads: 2,
            output_upscale: 4,
            image_encoder: ImageEncoderKind::ToyFrozen,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.embed_dim;
        ensure!(
            c >= 8 && c % 8 == 0,
            InvalidArgument,
            "embed_dim {c} must be a positive multiple of 8"
        );
        ensure!(self.two_way_layers >= 1, InvalidArgument, "need at least one two-way layer");
        ensure!(
            self.num_heads >= 1 && (c / 2) % self.num_heads == 0,
            InvalidArgument,
            "num_heads {} must divide the cross-attention width {}",
            self.num_heads,
            c / 2
        );
        ensure!(
            self.output_upscale == 4,
            InvalidArgument,
            "output_upscale must be 4 (two transposed convs), got {}",
            self.output_upscale
        );
        Ok(())
    }

    pub fn output_size(&self) -> usize {
        EMBED_GRID * self.output_upscale
    }
}

/// Which prompts reach the refiner. Disabled prompts use learned null tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptSet {
    Mask,
    MaskBox,
    #[default]
    MaskBoxText,
}

impl PromptSet {
    pub fn uses_box(self) -> bool {
        matches!(self, Self::MaskBox | Self::MaskBoxText)
    }

    pub fn uses_text(self) -> bool {
        self == Self::MaskBoxText
    }
}

impl FromStr for PromptSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(Self::Mask),
            "mask+box" => Ok(Self::MaskBox),
            "mask+box+text" => Ok(Self::MaskBoxText),
            _ => Err(Error::InvalidArgument(format!(
                "unknown prompt set `{s}` (expected mask, mask+box, mask+box+text)"
            ))),
        }
    }
}

/// Dense `[C, 64, 64]` and sparse `[3, C]` prompt embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBundle {
    pub dense: Tensor,
    pub sparse: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskRefiner {
    cfg: RefinerConfig,
    params: ParamStore,
    pe: FourierEncoding,
}

fn linear_init(store: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng) {
    let bound = (1.0 / inp as f64).sqrt();
    store.insert(format!("{name}.weight"), Tensor::uniform(&[out, inp], bound, rng));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
}

fn norm_init(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
    store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]));
}

fn attn_init(store: &mut ParamStore, name: &str, c: usize, inner: usize, rng: &mut ChaCha8Rng) {
    for proj in ["q", "k", "v"] {
        linear_init(store, &format!("{name}.{proj}"), inner, c, rng);
    }
    linear_init(store, &format!("{name}.out"), c, inner, rng);
}

impl MaskRefiner {
    pub fn new(cfg: RefinerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();

        p.insert("dense.conv1.weight", he_uniform(&[c / 4, 1, 1, 1], 1, &mut rng));
        p.insert("dense.conv1.bias", Tensor::zeros(&[c / 4]));
        p.insert("dense.conv2.weight", he_uniform(&[c, c / 4, 1, 1], c / 4, &mut rng));
        p.insert("dense.conv2.bias", Tensor::zeros(&[c]));

        for name in ["mask_token", "box.type0", "box.type1", "null.box0", "null.box1", "null.text"] {
            p.insert(name, Tensor::randn(&[c], 1.0, &mut rng));
        }

        for l in 0..cfg.two_way_layers {
            let pre = format!("layers.{l}");
            attn_init(&mut p, &format!("{pre}.self_attn"), c, c, &mut rng);
            attn_init(&mut p, &format!("{pre}.cross_t2i"), c, c / 2, &mut rng);
            attn_init(&mut p, &format!("{pre}.cross_i2t"), c, c / 2, &mut rng);
            linear_init(&mut p, &format!("{pre}.mlp.fc1"), 2 * c, c, &mut rng);
            linear_init(&mut p, &format!("{pre}.mlp.fc2"), c, 2 * c, &mut rng);
            for n in 1..=4 {
                norm_init(&mut p, &format!("{pre}.norm{n}"), c);
            }
        }
        attn_init(&mut p, "final_attn", c, c / 2, &mut rng);
        norm_init(&mut p, "norm_final", c);

        p.insert("upscale.conv1.weight", he_uniform(&[c, c / 4, 2, 2], c, &mut rng));
        p.insert("upscale.conv1.bias", Tensor::zeros(&[c / 4]));
        p.insert("upscale.conv2.weight", he_uniform(&[c / 4, c / 8, 2, 2], c / 4, &mut rng));
        p.insert("upscale.conv2.bias", Tensor::zeros(&[c / 8]));

        linear_init(&mut p, "hyper.fc1", c, c, &mut rng);
        linear_init(&mut p, "hyper.fc2", c, c, &mut rng);
        linear_init(&mut p, "hyper.fc3", c / 8, c, &mut rng);

        let pe = FourierEncoding::new(c, seed ^ 0x5eed_f00d);
        Ok(Self { cfg, params: p, pe })
    }

    /// Rebuilds from stored parameters, checking names and shapes against a fresh build.
    pub fn from_parts(cfg: RefinerConfig, params: ParamStore, pe_gaussian: Tensor) -> Result<Self> {
        let reference = Self::new(cfg.clone(), 0)?;
        ensure!(
            params.len() == reference.params.len(),
            Format,
            "refiner has {} parameters, expected {}",
            params.len(),
            reference.params.len()
        );
        for (name, t) in reference.params.iter() {
            let ok = params.get(name).map(|p| p.shape() == t.shape()).unwrap_or(false);
            ensure!(ok, Format, "refiner parameter `{name}` missing or misshapen");
        }
        ensure!(
            pe_gaussian.shape() == reference.pe.gaussian().shape(),
            Format,
            "positional gaussian has shape {:?}",
            pe_gaussian.shape()
        );
        Ok(Self {
            cfg,
            params,
            pe: FourierEncoding::from_gaussian(pe_gaussian)?,
        })
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn positional(&self) -> &FourierEncoding {
        &self.pe
    }

    // -----------------------------------------------------------------
    // Tape-level building blocks
    // -----------------------------------------------------------------

    /// `logits [64, 64]` → `[C, 64, 64]` via conv1 → GELU → conv1.
    pub fn dense_prompt(&self, tape: &mut Tape, p: &Bound, logits: Var) -> Result<Var> {
        let s = tape.shape(logits).to_vec();
        ensure!(
            s == [EMBED_GRID, EMBED_GRID],
            Contract,
            "dense prompt expects 64x64 logits, got {s:?}"
        );
        let x = tape.reshape(logits, &[1, EMBED_GRID, EMBED_GRID]);
        let h = tape.conv2d(x, p.var("dense.conv1.weight"), p.var("dense.conv1.bias"), 1);
        let h = tape.gelu(h);
        Ok(tape.conv2d(h, p.var("dense.conv2.weight"), p.var("dense.conv2.bias"), 1))
    }

    /// Two box tokens `[2, C]`: corner encodings plus learned corner types.
    pub fn box_tokens(&self, tape: &mut Tape, p: &Bound, b: PixelBox, image_size: (usize, usize)) -> Result<Var> {
        let corners = tape.constant(self.pe.box_corners(b, image_size)?);
        let types = self.stack_rows(tape, p, &["box.type0", "box.type1"]);
        Ok(tape.add(corners, types))
    }

    fn stack_rows(&self, tape: &mut Tape, p: &Bound, names: &[&str]) -> Var {
        let c = self.cfg.embed_dim;
        let rows: Vec<Var> = names.iter().map(|n| tape.reshape(p.var(n), &[1, c])).collect();
        tape.concat0(&rows)
    }

    /// Sparse tokens `[3, C]`, substituting null tokens for missing prompts.
    pub fn sparse_tokens(&self, tape: &mut Tape, p: &Bound, boxes: Option<Var>, text: Option<Var>) -> Var {
        let boxes = boxes.unwrap_or_else(|| self.stack_rows(tape, p, &["null.box0", "null.box1"]));
        let text = text.unwrap_or_else(|| self.stack_rows(tape, p, &["null.text"]));
        tape.concat0(&[boxes, text])
    }

    fn attention(&self, tape: &mut Tape, p: &Bound, name: &str, q: Var, k: Var, v: Var) -> Var {
        let lin = |tape: &mut Tape, x: Var, proj: &str| {
            tape.linear(x, p.var(&format!("{name}.{proj}.weight")), p.var(&format!("{name}.{proj}.bias")))
        };
        let q = lin(tape, q, "q");
        let k = lin(tape, k, "k");
        let v = lin(tape, v, "v");
        let inner = tape.shape(q)[1];
        let heads = self.cfg.num_heads;
        let dh = inner / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let outs: Vec<Var> = (0..heads)
            .map(|h| {
                let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
                let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
                let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
                let scores = tape.matmul_nt(qh, kh);
                let scores = tape.scale(scores, scale);
                let a = tape.softmax_rows(scores);
                tape.matmul(a, vh)
            })
            .collect();
        let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        lin(tape, o, "out")
    }

    fn norm(&self, tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Var {
        tape.layer_norm(x, p.var(&format!("{name}.gamma")), p.var(&format!("{name}.beta")))
    }

    fn mlp(&self, tape: &mut Tape, p: &Bound, name: &str, x: Var, layers: usize) -> Var {
        let mut h = x;
        for i in 1..=layers {
            h = tape.linear(h, p.var(&format!("{name}.fc{i}.weight")), p.var(&format!("{name}.fc{i}.bias")));
            if i < layers {
                h = tape.gelu(h);
            }
        }
        h
    }

    /// Core refinement: `image [C, 64, 64]`, `dense [C, 64, 64]`, `sparse [3, C]`
    /// → logits `[256, 256]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: Var, dense: Var, sparse: Var) -> Result<Var> {
        let c = self.cfg.embed_dim;
        let g = EMBED_GRID;
        ensure!(
            tape.shape(image) == [c, g, g] && tape.shape(dense) == [c, g, g],
            Contract,
            "refiner expects [{c}, 64, 64] image and dense inputs, got {:?} and {:?}",
            tape.shape(image),
            tape.shape(dense)
        );
        ensure!(
            tape.shape(sparse) == [3, c],
            Contract,
            "refiner expects [3, {c}] sparse tokens, got {:?}",
            tape.shape(sparse)
        );

        let mask_token = tape.reshape(p.var("mask_token"), &[1, c]);
        let tokens = tape.concat0(&[mask_token, sparse]);
        let src = tape.add(image, dense);
        let src = tape.reshape(src, &[c, g * g]);
        let mut keys = tape.transpose(src);
        let key_pe = tape.constant(self.pe.grid(g, g));
        let mut queries = tokens;

        for l in 0..self.cfg.two_way_layers {
            let pre = format!("layers.{l}");
            queries = if l == 0 {
                self.attention(tape, p, &format!("{pre}.self_attn"), queries, queries, queries)
            } else {
                let q = tape.add(queries, tokens);
                let a = self.attention(tape, p, &format!("{pre}.self_attn"), q, q, queries);
                tape.add(queries, a)
            };
            queries = self.norm(tape, p, &format!("{pre}.norm1"), queries);

            let q = tape.add(queries, tokens);
            let k = tape.add(keys, key_pe);
            let a = self.attention(tape, p, &format!("{pre}.cross_t2i"), q, k, keys);
            queries = tape.add(queries, a);
            queries = self.norm(tape, p, &format!("{pre}.norm2"), queries);

            let m = self.mlp(tape, p, &format!("{pre}.mlp"), queries, 2);
            queries = tape.add(queries, m);
            queries = self.norm(tape, p, &format!("{pre}.norm3"), queries);

            let q = tape.add(queries, tokens);
            let k = tape.add(keys, key_pe);
            let a = self.attention(tape, p, &format!("{pre}.cross_i2t"), k, q, queries);
            keys = tape.add(keys, a);
            keys = self.norm(tape, p, &format!("{pre}.norm4"), keys);
        }
        let q = tape.add(queries, tokens);
        let k = tape.add(keys, key_pe);
        let a = self.attention(tape, p, "final_attn", q, k, keys);
        queries = tape.add(queries, a);
        queries = self.norm(tape, p, "norm_final", queries);

        let fmap = tape.transpose(keys);
        let fmap = tape.reshape(fmap, &[c, g, g]);
        let up = tape.conv_transpose2x2(fmap, p.var("upscale.conv1.weight"), p.var("upscale.conv1.bias"));
        let up = tape.gelu(up);
        let up = tape.conv_transpose2x2(up, p.var("upscale.conv2.weight"), p.var("upscale.conv2.bias"));
        let up = tape.gelu(up);
        let out = self.cfg.output_size();
        let up = tape.reshape(up, &[c / 8, out * out]);

        let mask_out = tape.slice_rows(queries, 0, 1);
        let hyper = self.mlp(tape, p, "hyper", mask_out, 3);
        let logits = tape.matmul(hyper, up);
        Ok(tape.reshape(logits, &[out, out]))
    }

    // -----------------------------------------------------------------
    // Eager API
    // -----------------------------------------------------------------

    pub fn encode_dense_prompt(&self, logits: &MaskLogits) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let l = tape.constant(logits.grid.clone());
        let out = self.dense_prompt(&mut tape, &p, l)?;
        Ok(tape.value(out).clone())
    }

    pub fn encode_box_prompt(&self, b: PixelBox, image_size: (usize, usize)) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.box_tokens(&mut tape, &p, b, image_size)?;
        Ok(tape.value(out).clone())
    }

    /// Assembles a bundle; `None` prompts become null tokens.
    pub fn prompt_bundle(&self, dense: Tensor, boxes: Option<&Tensor>, text: Option<&Tensor>) -> PromptBundle {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let b = boxes.map(|t| tape.constant(t.clone()));
        let t = text.map(|t| tape.constant(t.clone()));
        let sparse = self.sparse_tokens(&mut tape, &p, b, t);
        PromptBundle {
            dense,
            sparse: tape.value(sparse).clone(),
        }
    }

    pub fn refine(&self, image_embedding: &Tensor, prompts: &PromptBundle) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let image = tape.constant(image_embedding.clone());
        let dense = tape.constant(prompts.dense.clone());
        let sparse = tape.constant(prompts.sparse.clone());
        let out = self.forward(&mut tape, &p, image, dense, sparse)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_params;

    fn tiny() -> RefinerConfig {
        RefinerConfig {
            embed_dim: 16,
            two_way_layers: 1,
            ..RefinerConfig::default()
        }
    }

    fn inputs(c: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::randn(&[c, 64, 64], 0.5, &mut rng),
            Tensor::randn(&[64, 64], 2.0, &mut rng),
        )
    }

    #[test]
    fn dense_prompt_at_zero_is_bias() {
        let mut r = MaskRefiner::new(tiny(), 1).unwrap();
        let bias: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 - 0.4).collect();
        r.params_mut().get_mut("dense.conv2.bias").unwrap().data_mut().copy_from_slice(&bias);
        let zero = MaskLogits {
            grid: Tensor::zeros(&[64, 64]),
            source_span: 0..1,
        };
        let d = r.encode_dense_prompt(&zero).unwrap();
        assert_eq!(d.shape(), &[16, 64, 64]);
        for (ch, b) in bias.iter().enumerate() {
            assert!(d.data()[ch * 4096..(ch + 1) * 4096].iter().all(|v| v == b));
        }
    }

    #[test]
    fn box_prompt_definition() {
        let r = MaskRefiner::new(tiny(), 1).unwrap();
        let enc = r.encode_box_prompt(PixelBox::new(0, 0, 64, 64), (64, 64)).unwrap();
        let p = r.params();
        for (row, (x, ty)) in [(0.0, "box.type0"), (1.0, "box.type1")].into_iter().enumerate() {
            let expect: Vec<f64> = r.positional().encode(x, x).iter().zip(p.get(ty).unwrap().data()).map(|(a, b)| a + b).collect();
            assert_eq!(enc.row(row), expect.as_slice());
        }
        assert_eq!(enc, MaskRefiner::new(tiny(), 1).unwrap().encode_box_prompt(PixelBox::new(0, 0, 64, 64), (64, 64)).unwrap());
        assert!(r.encode_box_prompt(PixelBox::new(3, 3, 3, 8), (64, 64)).is_err());
    }

    #[test]
    fn refine_shapes_under_every_prompt_set() {
        let r = MaskRefiner::new(tiny(), 2).unwrap();
        let (img, logits) = inputs(16, 3);
        let dense = r
            .encode_dense_prompt(&MaskLogits {
                grid: logits,
                source_span: 0..1,
            })
            .unwrap();
        let boxes = r.encode_box_prompt(PixelBox::new(8, 8, 40, 30), (64, 64)).unwrap();
        let text = Tensor::full(&[1, 16], 0.3);
        let mut outs = Vec::new();
        for set in [PromptSet::Mask, PromptSet::MaskBox, PromptSet::MaskBoxText] {
            let bundle = r.prompt_bundle(
                dense.clone(),
                set.uses_box().then_some(&boxes),
                set.uses_text().then_some(&text),
            );
            assert_eq!(bundle.sparse.shape(), &[3, 16]);
            let out = r.refine(&img, &bundle).unwrap();
            assert_eq!(out.shape(), &[256, 256]);
            assert!(out.data().iter().all(|v| v.is_finite()));
            outs.push(out);
        }
        assert!(outs[0].max_abs_diff(&outs[1]) > 0.0);
        assert!(outs[1].max_abs_diff(&outs[2]) > 0.0);
        let bundle = r.prompt_bundle(dense.clone(), Some(&boxes), Some(&text));
        assert_eq!(r.refine(&img, &bundle).unwrap(), outs[2]);
        let bad = PromptBundle {
            dense: Tensor::zeros(&[8, 64, 64]),
            sparse: bundle.sparse.clone(),
        };
        assert!(matches!(r.refine(&img, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn config_validation() {
        assert!(RefinerConfig::default().validate().is_ok());
        let bad = RefinerConfig {
            output_upscale: 2,
            ..RefinerConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RefinerConfig {
            embed_dim: 12,
            ..RefinerConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("mask+box".parse::<PromptSet>().unwrap(), PromptSet::MaskBox);
    }

    #[test]
    fn from_parts_round_trip() {
        let r = MaskRefiner::new(tiny(), 4).unwrap();
        let back = MaskRefiner::from_parts(tiny(), r.params().clone(), r.positional().gaussian().clone()).unwrap();
        assert_eq!(back, r);
        let mut missing = r.params().clone();
        *missing.get_mut("mask_token").unwrap() = Tensor::zeros(&[15]);
        assert!(MaskRefiner::from_parts(tiny(), missing, r.positional().gaussian().clone()).is_err());
    }

    #[test]
    fn dense_prompt_gradients() {
        let r = MaskRefiner::new(tiny(), 5).unwrap();
        let (_, logits) = inputs(16, 6);
        let report = check_params(r.params(), 10, 3, 1e-3, &|tape, p| {
            let l = tape.constant(logits.clone());
            let d = r.dense_prompt(tape, p, l).unwrap();
            let sq = tape.mul(d, d);
            tape.mean(sq)
        });
        assert!(report.max_rel_err < 1e-3, "{:?}", report.samples);
    }

    #[test]
    fn refine_gradients() {
        let r = MaskRefiner::new(tiny(), 7).unwrap();
        let (img, logits) = inputs(16, 8);
        let target = Tensor::from_parts(
            &[256, 256],
            (0..256 * 256).map(|i| ((i % 256) < 100) as u8 as f64).collect(),
        );
        let text = Tensor::full(&[1, 16], 0.2);
        let report = check_params(r.params(), 12, 4, 1e-3, &|tape, p| {
            let image = tape.constant(img.clone());
            let l = tape.constant(logits.clone());
            let dense = r.dense_prompt(tape, p, l).unwrap();
            let b = r.box_tokens(tape, p, PixelBox::new(10, 12, 40, 50), (64, 64)).unwrap();
            let t = tape.constant(text.clone());
            let sparse = r.sparse_tokens(tape, p, Some(b), Some(t));
            let out = r.forward(tape, p, image, dense, sparse).unwrap();
            let bce = tape.bce_with_logits(out, &target);
            let dice = tape.dice_loss(out, &target, 1.0);
            tape.add(bce, dice)
        });
        assert!(report.checked >= 10);
        assert!(report.max_rel_err < 1e-3, "{:?}", report.samples);
    }
}

//! End-to-end grounding: conversations, referring expressions and the
//! two-stage visual chain of thought.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::build_attention_stack;
use crate::datasets::{rle_encode, DESCRIBE_PROMPT, GroundingSample, ImageRef, SpanAnnotation, format_conversation};
use crate::decoder::{binarize, BinaryMask, MaskLogits};
use crate::error::{ensure, Error, Result};
use crate::heads::Heads;
use crate::host::{HostForwardRecord, HostModel, TokenizedConversation};
use crate::image::{ImageArray, PixelBox};
use crate::metrics::{iou_counts, EvalTally};
use crate::refiner::{bbox_from_mask, span_layer_embeddings, EMBED_GRID};
use crate::selector::{keyword_spans, KeywordSpan};
use crate::tensor::{self, Tensor};
use crate::training::prompt_grid_logits;

pub const VISCOT_PREFIX: &str = "which object is the most relevant to the question";
pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Tokens generated when no answer is supplied.
    pub max_new_tokens: i64,
    /// Skip the refiner and upsample decoder logits directly.
    pub bypass_refiner: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 16,
            bypass_refiner: false,
        }
    }
}

/// One span's masks at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundedMask {
    pub span: KeywordSpan,
    /// Decoder logits on the stack grid.
    pub logits: MaskLogits,
    /// Box prompt on the 64×64 prompt grid.
    pub prompt_box: PixelBox,
    /// Whether the decoder mask was empty and the full-grid box was used.
    pub box_fallback: bool,
    /// Final mask at image resolution (refined unless bypassed).
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundedConversation {
    pub user_text: String,
    pub answer: String,
    pub masks: Vec<GroundedMask>,
}

impl GroundedConversation {
    /// The dataset form: segment ids are span indices, flags default.
    pub fn to_sample(&self, id: &str, image: ImageRef) -> GroundingSample {
        let mut masks = BTreeMap::new();
        let mut spans = Vec::with_capacity(self.masks.len());
        for (i, g) in self.masks.iter().enumerate() {
            let seg = i.to_string();
            spans.push(SpanAnnotation {
                char_start: g.span.chars.0,
                char_end: g.span.chars.1,
                segment_id: seg.clone(),
            });
            masks.insert(seg, rle_encode(&g.mask));
        }
        GroundingSample {
            id: id.to_string(),
            image,
            conversation: format_conversation(&self.user_text, &self.answer),
            spans,
            masks,
            flags: BTreeMap::new(),
        }
    }

    pub fn to_json(&self, id: &str, image: ImageRef) -> serde_json::Value {
        let mut v = serde_json::to_value(self.to_sample(id, image)).expect("samples serialise");
        let scores: Vec<f64> = self.masks.iter().map(|g| g.span.max_score).collect();
        v["scores"] = serde_json::json!(scores);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisCotResult {
    pub object_text: String,
    pub object_mask: Option<GroundedMask>,
    /// Crop actually used, in image pixels.
    pub crop_box: PixelBox,
    /// Set when the crop degenerated and the full image was used.
    pub crop_fallback: bool,
    pub crop: ImageArray,
    pub answer: String,
}

/// Grows `b` by `margin · size` on every side (outwards-rounded) and clamps to the image.
pub fn expand_box(b: PixelBox, margin: f64, (h, w): (usize, usize)) -> Result<PixelBox> {
    ensure!(margin >= 0.0 && margin.is_finite(), InvalidArgument, "margin must be non-negative, got {margin}");
    let dx = margin * b.width() as f64;
    let dy = margin * b.height() as f64;
    let lo = |v: usize, d: f64| (v as f64 - d).floor().max(0.0) as usize;
    let hi = |v: usize, d: f64, cap: usize| ((v as f64 + d).ceil() as usize).min(cap);
    Ok(PixelBox::new(lo(b.x0, dx), lo(b.y0, dy), hi(b.x1, dx, w), hi(b.y1, dy, h)))
}

fn upsample_logits(logits: &Tensor, (h, w): (usize, usize)) -> BinaryMask {
    let s = logits.shape();
    let data = tensor::resize_bilinear(logits.data(), 1, (s[0], s[1]), (h, w));
    BinaryMask::new(h, w, data.iter().map(|&v| v > 0.0).collect())
}

pub struct Pipeline<'a> {
    pub host: &'a dyn HostModel,
    pub heads: &'a Heads,
    pub cfg: PipelineConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(host: &'a dyn HostModel, heads: &'a Heads) -> Self {
        Self {
            host,
            heads,
            cfg: PipelineConfig::default(),
        }
    }

    fn image_embedding(&self, image: &ImageArray, image_id: Option<&str>) -> Result<Option<Tensor>> {
        if self.cfg.bypass_refiner {
            return Ok(None);
        }
        self.heads.image_encoder.embed(image, image_id).map(Some)
    }

    /// Grounds one token span of an already captured forward pass.
    pub fn ground_span(
        &self,
        rec: &HostForwardRecord,
        conv: &TokenizedConversation,
        span: KeywordSpan,
        image_size: (usize, usize),
        image_embedding: Option<&Tensor>,
    ) -> Result<GroundedMask> {
        let heads = self.heads;
        let stack = build_attention_stack(rec, span.tokens.clone(), &conv.image_span, self.host.spec().grid, &heads.cfg.stack)?;
        let logits = heads.decoder.decode(&stack)?;
        let grid_logits = prompt_grid_logits(&logits.grid);
        let grid_mask = binarize(&MaskLogits {
            grid: grid_logits.clone(),
            source_span: span.tokens.clone(),
        });
        let (prompt_box, box_fallback) = match bbox_from_mask(&grid_mask) {
            Ok(b) => (b, false),
            Err(Error::EmptyMask) => (PixelBox::new(0, 0, EMBED_GRID, EMBED_GRID), true),
            Err(e) => return Err(e),
        };
        let mask = match image_embedding {
            None => upsample_logits(&logits.grid, image_size),
            Some(emb) => {
                let r = &heads.refiner;
                let dense = r.encode_dense_prompt(&MaskLogits {
                    grid: grid_logits,
                    source_span: span.tokens.clone(),
                })?;
                let boxes = if heads.cfg.prompts.uses_box() {
                    Some(r.encode_box_prompt(prompt_box, (EMBED_GRID, EMBED_GRID))?)
                } else {
                    None
                };
                let text = if heads.cfg.prompts.uses_text() {
                    Some(heads.text.encode(&span_layer_embeddings(rec, &span.tokens)?)?)
                } else {
                    None
                };
                let bundle = r.prompt_bundle(dense, boxes.as_ref(), text.as_ref());
                upsample_logits(&r.refine(emb, &bundle)?, image_size)
            }
        };
        Ok(GroundedMask {
            span,
            logits,
            prompt_box,
            box_fallback,
            mask,
        })
    }

    /// Generates an answer unless one is given, then grounds every selected span.
    pub fn ground_conversation(
        &self,
        image: &ImageArray,
        user_text: &str,
        answer: Option<&str>,
        image_id: Option<&str>,
    ) -> Result<GroundedConversation> {
        let conv = match answer {
            Some(a) => self.host.build_conversation(user_text, a)?,
            None => {
                let c = self.host.build_conversation(user_text, "")?;
                self.host.generate(&c, image, self.cfg.max_new_tokens)?
            }
        };
        let rec = self.host.forward_capture(&conv, image)?;
        let scores = self.heads.selector.score_tokens(&rec.final_hidden)?;
        let spans = keyword_spans(&scores, &conv, &self.heads.cfg.selector);
        let embedding = if spans.is_empty() {
            None
        } else {
            self.image_embedding(image, image_id)?
        };
        let masks = spans
            .into_iter()
            .map(|s| self.ground_span(&rec, &conv, s, image.size(), embedding.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(GroundedConversation {
            user_text: user_text.to_string(),
            answer: conv.answer(),
            masks,
        })
    }

    /// Grounds a whole referring expression posed as the answer.
    pub fn refer_segment(&self, image: &ImageArray, expression: &str, image_id: Option<&str>) -> Result<GroundedMask> {
        let expression = expression.trim();
        ensure!(!expression.is_empty(), InvalidArgument, "referring expression is empty");
        let conv = self.host.build_conversation(DESCRIBE_PROMPT, expression)?;
        let n = expression.chars().count();
        let tokens = conv
            .char_span_to_tokens(0, n)
            .ok_or_else(|| Error::InvalidArgument(format!("expression `{expression}` produced no tokens")))?;
        let rec = self.host.forward_capture(&conv, image)?;
        let scores = self.heads.selector.score_tokens(&rec.final_hidden)?;
        let span = KeywordSpan {
            max_score: scores[tokens.clone()].iter().cloned().fold(f64::MIN, f64::max),
            chars: (0, n),
            tokens,
        };
        let emb = self.image_embedding(image, image_id)?;
        self.ground_span(&rec, &conv, span, image.size(), emb.as_ref())
    }

    /// Stage 1 asks for the relevant object and grounds it; stage 2 asks the
    /// original question about the crop.
    pub fn viscot(&self, image: &ImageArray, question: &str, margin: f64) -> Result<VisCotResult> {
        ensure!(margin >= 0.0 && margin.is_finite(), InvalidArgument, "margin must be non-negative, got {margin}");
        let prompt = format!("{VISCOT_PREFIX}: {question}");
        let c = self.host.build_conversation(&prompt, "")?;
        let conv = self.host.generate(&c, image, self.cfg.max_new_tokens)?;
        let object_text = conv.answer();
        let full = PixelBox::new(0, 0, image.width(), image.height());
        let object_mask = match conv.char_span_to_tokens(0, object_text.chars().count()) {
            Some(tokens) => {
                let rec = self.host.forward_capture(&conv, image)?;
                let scores = self.heads.selector.score_tokens(&rec.final_hidden)?;
                let span = KeywordSpan {
                    max_score: scores[tokens.clone()].iter().cloned().fold(f64::MIN, f64::max),
                    chars: (0, object_text.chars().count()),
                    tokens,
                };
                let emb = self.image_embedding(image, None)?;
                Some(self.ground_span(&rec, &conv, span, image.size(), emb.as_ref())?)
            }
            None => None,
        };
        let expanded = match object_mask.as_ref().map(|g| bbox_from_mask(&g.mask)) {
            Some(Ok(b)) => Some(expand_box(b, margin, image.size())?),
            Some(Err(Error::EmptyMask)) | None => None,
            Some(Err(e)) => return Err(e),
        };
        let (crop_box, crop_fallback) = match expanded {
            Some(b) if b.area() > 0 => (b, false),
            _ => (full, true),
        };
        let crop = image.crop(crop_box)?;
        let c2 = self.host.build_conversation(question, "")?;
        let answer = self.host.generate(&c2, &crop, self.cfg.max_new_tokens)?.answer();
        Ok(VisCotResult {
            object_text,
            object_mask,
            crop_box,
            crop_fallback,
            crop,
            answer,
        })
    }
}

/// Raw tallies of one sample.
///
/// Every ground-truth span is grounded directly for RES and PNG. For GCG each
/// ground-truth span is paired with the first selected span overlapping it, or
/// with an empty mask if none does. Keyword PRF compares selected and
/// ground-truth token sets.
pub fn evaluate_sample(p: &Pipeline<'_>, sample: &GroundingSample, base_dir: Option<&std::path::Path>) -> Result<EvalTally> {
    let image = sample.image.load(base_dir)?;
    let conv = p.host.build_conversation(sample.user_text()?, sample.answer()?)?;
    let rec = p.host.forward_capture(&conv, &image)?;
    let scores = p.heads.selector.score_tokens(&rec.final_hidden)?;
    let selected = keyword_spans(&scores, &conv, &p.heads.cfg.selector);
    let embedding = p.image_embedding(&image, Some(&sample.id))?;
    let mut tally = EvalTally::default();
    let mut gt_tokens = BTreeSet::new();
    for a in &sample.spans {
        let tokens = conv.char_span_to_tokens(a.char_start, a.char_end).ok_or_else(|| {
            Error::InvalidArgument(format!("span [{}, {}) of `{}` covers no tokens", a.char_start, a.char_end, sample.id))
        })?;
        gt_tokens.extend(tokens.clone());
        let gt = sample.mask(&a.segment_id)?;
        let span = KeywordSpan {
            max_score: scores[tokens.clone()].iter().cloned().fold(f64::MIN, f64::max),
            chars: (a.char_start, a.char_end),
            tokens: tokens.clone(),
        };
        let g = p.ground_span(&rec, &conv, span, image.size(), embedding.as_ref())?;
        let c = iou_counts(&g.mask, &gt)?;
        tally.res.push(c);
        tally.png.push((c, sample.flags_for(&a.segment_id)));
        let hit = selected.iter().find(|s| s.tokens.start < tokens.end && tokens.start < s.tokens.end);
        let gcg = match hit {
            Some(s) => iou_counts(&p.ground_span(&rec, &conv, s.clone(), image.size(), embedding.as_ref())?.mask, &gt)?,
            None => iou_counts(&BinaryMask::empty(gt.height, gt.width), &gt)?,
        };
        tally.gcg.push(gcg);
    }
    let pred_tokens: BTreeSet<usize> = selected.iter().flat_map(|s| s.tokens.clone()).collect();
    tally.keywords.add(&pred_tokens, &gt_tokens);
    Ok(tally)
}

/// Evaluates samples in parallel and merges their tallies in input order.
pub fn evaluate(p: &Pipeline<'_>, samples: &[GroundingSample], base_dir: Option<&std::path::Path>) -> Result<EvalTally> {
    let parts = samples
        .par_iter()
        .map(|s| evaluate_sample(p, s, base_dir))
        .collect::<Result<Vec<_>>>()?;
    let mut total = EvalTally::default();
    for t in &parts {
        total.merge(t);
    }
    Ok(total)
}

/// Token-level recall of `gt` spans within `pred` spans.
pub fn span_token_recall(pred: &[Range<usize>], gt: &[Range<usize>]) -> f64 {
    let covered = |i: usize| pred.iter().any(|r| r.contains(&i));
    let (mut hit, mut total) = (0usize, 0usize);
    for r in gt {
        for i in r.clone() {
            total += 1;
            hit += covered(i) as usize;
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadsConfig;
    use crate::host::{ToyLmm, ToyLmmConfig};

    fn small() -> (ToyLmm, Heads) {
        let mut host = ToyLmmConfig::default();
        host.dims.grid = (8, 8);
        let mut cfg = HeadsConfig::desk(host.clone(), 5).unwrap();
        cfg.refiner.embed_dim = 16;
        cfg.refiner.two_way_layers = 1;
        (ToyLmm::new(host).unwrap(), Heads::new(cfg).unwrap())
    }

    #[test]
    fn margin_arithmetic() {
        let b = expand_box(PixelBox::new(10, 10, 20, 20), 0.5, (64, 64)).unwrap();
        assert_eq!(b, PixelBox::new(5, 5, 25, 25));
        let c = expand_box(PixelBox::new(0, 2, 64, 60), 0.2, (64, 64)).unwrap();
        assert_eq!(c, PixelBox::new(0, 0, 64, 64));
        assert_eq!(expand_box(PixelBox::new(3, 4, 9, 11), 0.0, (64, 64)).unwrap(), PixelBox::new(3, 4, 9, 11));
        assert!(expand_box(b, -0.1, (64, 64)).is_err());
    }

    #[test]
    fn refer_rejects_blank_and_is_deterministic() {
        let (host, heads) = small();
        let p = Pipeline::new(&host, &heads);
        let img = ImageArray::filled(32, 32, [0.5; 3]);
        assert!(matches!(p.refer_segment(&img, "  \t", None), Err(Error::InvalidArgument(_))));
        let a = p.refer_segment(&img, "a red circle", None).unwrap();
        let b = p.refer_segment(&img, "a red circle", None).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.mask.height, a.mask.width), (32, 32));
    }

    #[test]
    fn no_positive_tokens_yields_no_masks() {
        let (host, mut heads) = small();
        heads.selector.params_mut().get_mut("bias").unwrap().data_mut()[0] = -1e6;
        let p = Pipeline::new(&host, &heads);
        let img = ImageArray::filled(16, 16, [0.5; 3]);
        let g = p.ground_conversation(&img, "Describe the image.", Some("a red circle"), None).unwrap();
        assert!(g.masks.is_empty());
        assert_eq!(g.answer, "a red circle");
    }

    #[test]
    fn repeated_spans_get_equal_independent_masks() {
        let (host, mut heads) = small();
        // Score every token positive so the whole answer is one span per phrase.
        heads.selector.params_mut().get_mut("bias").unwrap().data_mut()[0] = 1e6;
        let p = Pipeline::new(&host, &heads);
        let img = ImageArray::filled(16, 16, [0.5; 3]);
        let conv = host.build_conversation("Describe the image.", "red ; red").unwrap();
        let rec = host.forward_capture(&conv, &img).unwrap();
        let emb = heads.image_encoder.embed(&img, None).unwrap();
        let spans: Vec<_> = [(0, 3), (6, 9)]
            .iter()
            .map(|&(s, e)| {
                let tokens = conv.char_span_to_tokens(s, e).unwrap();
                KeywordSpan {
                    tokens,
                    chars: (s, e),
                    max_score: 1.0,
                }
            })
            .collect();
        let a = p.ground_span(&rec, &conv, spans[0].clone(), img.size(), Some(&emb)).unwrap();
        let a2 = p.ground_span(&rec, &conv, spans[0].clone(), img.size(), Some(&emb)).unwrap();
        assert_eq!(a, a2);
        let b = p.ground_span(&rec, &conv, spans[1].clone(), img.size(), Some(&emb)).unwrap();
        assert_eq!(b.mask.data.len(), a.mask.data.len());
    }

    #[test]
    fn viscot_records_intermediates() {
        let (host, heads) = small();
        let before = host.weights_snapshot();
        let p = Pipeline::new(&host, &heads);
        let mut img = ImageArray::filled(32, 32, [0.5; 3]);
        for y in 4..12 {
            for x in 6..14 {
                img.set_pixel(y, x, [1.0, 0.0, 0.0]);
            }
        }
        let r = p.viscot(&img, "what color is the circle?", DEFAULT_MARGIN).unwrap();
        assert!(!r.answer.trim().is_empty());
        assert!(r.crop_box.x1 <= 32 && r.crop_box.y1 <= 32 && r.crop_box.area() > 0);
        assert_eq!((r.crop.height(), r.crop.width()), (r.crop_box.height(), r.crop_box.width()));
        if let Some(g) = &r.object_mask {
            if let Ok(b) = bbox_from_mask(&g.mask) {
                assert!(r.crop_box.contains(&b));
            }
        }
        assert_eq!(host.weights_snapshot(), before);
    }

    #[test]
    fn sample_round_trip() {
        let (host, mut heads) = small();
        heads.selector.params_mut().get_mut("bias").unwrap().data_mut()[0] = 1e6;
        let p = Pipeline::new(&host, &heads);
        let img = ImageArray::filled(16, 16, [0.5; 3]);
        let g = p.ground_conversation(&img, "Describe the image.", Some("a red circle"), None).unwrap();
        assert_eq!(g.masks.len(), 1);
        let s = g.to_sample("x", ImageRef::inline(&img));
        s.validate().unwrap();
        assert_eq!(s.mask("0").unwrap(), g.masks[0].mask);
        assert_eq!(s.span_text(&s.spans[0]).unwrap(), "a red circle");
    }

    #[test]
    fn token_recall() {
        assert_eq!(span_token_recall(&[0..3], &[1..3]), 1.0);
        assert_eq!(span_token_recall(&[0..1], &[0..2]), 0.5);
        assert_eq!(span_token_recall(&[], &[]), 1.0);
    }
}

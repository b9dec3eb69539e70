//! Oracle suites behind `flmm selftest` and the acceptance tests.
//!
//! Each oracle recomputes its quantity the slow way, from first principles,
//! without calling the code under test.

use std::collections::{BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::extract_word_image_map;
use crate::datasets::{rle_decode, rle_encode, Plurality, SegmentFlags, SegmentKind};
use crate::decoder::{build_unet, BinaryMask, UNetConfig};
use crate::error::Result;
use crate::host::{HostModel, ToyLmm, ToyLmmConfig};
use crate::image::{ImageArray, PixelBox};
use crate::metrics::{self, EvalTally, PngSegment, Split};
use crate::nn::gradcheck::{check_params, GradCheck};
use crate::refiner::{MaskRefiner, RefinerConfig};
use crate::selector::KeywordSelector;
use crate::tensor::Tensor;

const PROMPT_WORDS: &[&str] = &[
    "describe", "the", "image", "a", "red", "green", "blue", "yellow", "cyan", "magenta", "circle", "square",
    "triangle", "two", "and", "on", "left", "ground", "sky", "what", "is", "zebra", "lamp", "?", ",",
];

#[derive(Clone, Debug, PartialEq)]
pub struct OracleCheck {
    pub cases: usize,
    pub max_abs_err: f64,
}

fn random_text(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    (0..n)
        .map(|_| PROMPT_WORDS[rng.random_range(0..PROMPT_WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageArray {
    let mut img = ImageArray::filled(h, w, [0.5; 3]);
    for _ in 0..rng.random_range(1..4) {
        let rgb = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let (y0, x0) = (rng.random_range(0..h - 4), rng.random_range(0..w - 4));
        let (y1, x1) = (rng.random_range(y0 + 1..=h), rng.random_range(x0 + 1..=w));
        for y in y0..y1 {
            for x in x0..x1 {
                img.set_pixel(y, x, rgb);
            }
        }
    }
    img
}

/// softmax(q·kᵀ/√d_h) over the causal prefix of `token`, recomputed from the
/// layer's input and its query/key weights with scalar loops.
fn brute_attention_row(host: &ToyLmm, layer_input: &[f64], s: usize, layer: usize, head: usize, token: usize) -> Vec<f64> {
    let dims = &host.config().dims;
    let d = dims.hidden_dim;
    let dh = d / dims.num_heads;
    let w = host.attention_weights(layer);
    let norm = |i: usize| -> Vec<f64> {
        let x = &layer_input[i * d..(i + 1) * d];
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        (0..d)
            .map(|j| (x[j] - mean) / (var + 1e-5).sqrt() * w.ln_gamma[j] + w.ln_beta[j])
            .collect()
    };
    let project = |m: &Tensor, x: &[f64]| -> Vec<f64> {
        (head * dh..(head + 1) * dh)
            .map(|r| (0..d).map(|c| m.data()[r * d + c] * x[c]).sum())
            .collect()
    };
    let q = project(w.wq, &norm(token));
    let mut scores: Vec<f64> = (0..=token)
        .map(|j| {
            let k = project(w.wk, &norm(j));
            q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
        })
        .collect();
    let peak = scores.iter().cloned().fold(f64::MIN, f64::max);
    let mut total = 0.0;
    for v in &mut scores {
        *v = (*v - peak).exp();
        total += *v;
    }
    let mut row = vec![0.0; s];
    for (j, v) in scores.into_iter().enumerate() {
        row[j] = v / total;
    }
    row
}

/// Compares extracted word-image maps against [`brute_attention_row`] over
/// random hosts, prompts, images, tokens, layers and heads.
pub fn attention_oracle(cases: usize, seed: u64) -> Result<OracleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs_err: f64 = 0.0;
    let mut cfg = ToyLmmConfig::default();
    cfg.dims.grid = (8, 8);
    cfg.toy_image_size = (32, 32);
    for _ in 0..cases {
        cfg.seed = rng.random();
        let host = ToyLmm::new(cfg.clone())?;
        let user = random_text(&mut rng, 1, 6);
        let answer = random_text(&mut rng, 1, 8);
        let conv = host.build_conversation(&user, &answer)?;
        let image = random_image(&mut rng, 32, 32);
        let rec = host.forward_capture(&conv, &image)?;
        let s = conv.len();
        let token = rng.random_range(conv.image_span.end..s);
        let layer = rng.random_range(0..cfg.dims.num_layers);
        let head = rng.random_range(0..cfg.dims.num_heads);
        let input = if layer == 0 {
            host.input_embeddings(&conv, &image)?.data().to_vec()
        } else {
            let d = cfg.dims.hidden_dim;
            rec.hidden_states.data()[(layer - 1) * s * d..layer * s * d].to_vec()
        };
        let row = brute_attention_row(&host, &input, s, layer, head, token);
        let map = extract_word_image_map(&rec, token, &conv.image_span, cfg.dims.grid, layer, head)?;
        for (a, b) in map.grid.data().iter().zip(&row[conv.image_span.clone()]) {
            max_abs_err = max_abs_err.max((a - b).abs());
        }
    }
    Ok(OracleCheck { cases, max_abs_err })
}

/// Finite-difference checks of the decoder, dense prompt encoder, refiner and selector.
pub fn gradient_suite(seed: u64, per_head: usize) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 1e-3;
    let mut out = Vec::new();

    let dec = build_unet(UNetConfig::desk(3), seed)?;
    let stack = Tensor::from_parts(&[3, 16, 16], (0..768).map(|_| rng.random::<f64>() * 0.2).collect());
    let gt = Tensor::from_parts(&[1, 16, 16], (0..256).map(|i| ((i % 16) < 7) as u8 as f64).collect());
    out.push((
        "mask_decoder",
        check_params(dec.params(), per_head, seed, step, &|tape, p| {
            let x = tape.constant(stack.clone());
            let y = dec.forward(tape, p, x).unwrap();
            let b = tape.bce_with_logits(y, &gt);
            let d = tape.dice_loss(y, &gt, 1.0);
            tape.add(b, d)
        }),
    ));

    let tiny = RefinerConfig {
        embed_dim: 16,
        two_way_layers: 1,
        ..RefinerConfig::default()
    };
    let refiner = MaskRefiner::new(tiny, seed ^ 1)?;
    let logits = Tensor::randn(&[64, 64], 2.0, &mut rng);
    out.push((
        "dense_prompt_encoder",
        check_params(refiner.params(), per_head, seed ^ 2, step, &|tape, p| {
            let l = tape.constant(logits.clone());
            let d = refiner.dense_prompt(tape, p, l).unwrap();
            let sq = tape.mul(d, d);
            tape.mean(sq)
        }),
    ));

    let image = Tensor::randn(&[16, 64, 64], 0.5, &mut rng);
    let text = Tensor::randn(&[1, 16], 0.3, &mut rng);
    let target = Tensor::from_parts(&[256, 256], (0..256 * 256).map(|i| ((i / 256) < 90) as u8 as f64).collect());
    out.push((
        "mask_refiner",
        check_params(refiner.params(), per_head, seed ^ 3, step, &|tape, p| {
            let im = tape.constant(image.clone());
            let l = tape.constant(logits.clone());
            let dense = refiner.dense_prompt(tape, p, l).unwrap();
            let b = refiner.box_tokens(tape, p, PixelBox::new(8, 10, 40, 52), (64, 64)).unwrap();
            let t = tape.constant(text.clone());
            let sparse = refiner.sparse_tokens(tape, p, Some(b), Some(t));
            let y = refiner.forward(tape, p, im, dense, sparse).unwrap();
            let bce = tape.bce_with_logits(y, &target);
            let dice = tape.dice_loss(y, &target, 1.0);
            tape.add(bce, dice)
        }),
    ));

    let sel = KeywordSelector::new(8, seed ^ 4);
    let hidden = Tensor::randn(&[12, 8], 1.0, &mut rng);
    let labels = Tensor::from_parts(&[12, 1], (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect());
    out.push((
        "keyword_selector",
        check_params(sel.params(), per_head, seed ^ 5, step, &|tape, p| {
            let h = tape.constant(hidden.clone());
            let y = sel.logits(tape, p, h).unwrap();
            tape.bce_with_logits(y, &labels)
        }),
    ));
    Ok(out)
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let density = rng.random::<f64>();
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.random::<f64>() < density).collect())
}

/// Number of random masks whose RLE round trip is not the identity.
pub fn rle_oracle(cases: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..cases {
        let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
        let m = random_mask(&mut rng, h, w);
        let rle = rle_encode(&m);
        let total: u64 = rle.counts.iter().sum();
        if rle_decode(&rle)? != m || total != (h * w) as u64 {
            failures += 1;
        }
    }
    Ok(failures)
}

fn pixel_sets(m: &BinaryMask) -> HashSet<(usize, usize)> {
    let mut s = HashSet::new();
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(y, x) {
                s.insert((y, x));
            }
        }
    }
    s
}

fn brute_iou(p: &BinaryMask, g: &BinaryMask) -> (usize, usize) {
    let (a, b) = (pixel_sets(p), pixel_sets(g));
    (a.intersection(&b).count(), a.union(&b).count())
}

fn ratio((i, u): (usize, usize)) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricOracleReport {
    pub cases: usize,
    /// Cases where an integer-derived value (cIoU, PRF, recall counts) differed at all.
    pub exact_mismatches: usize,
    /// Largest deviation of a mean-of-ratios metric from the oracle.
    pub max_mean_err: f64,
    /// Cases where a two-shard merge differed from the single pass, bitwise.
    pub merge_mismatches: usize,
}

/// Random small instances of every metric against set counting.
pub fn metric_oracle(cases: usize, seed: u64) -> Result<MetricOracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thresholds = metrics::default_thresholds();
    let mut rep = MetricOracleReport {
        cases,
        ..Default::default()
    };
    for _ in 0..cases {
        let n = rng.random_range(1..7);
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let preds: Vec<BinaryMask> = (0..n).map(|_| random_mask(&mut rng, h, w)).collect();
        let gts: Vec<BinaryMask> = (0..n).map(|_| random_mask(&mut rng, h, w)).collect();
        let flags: Vec<SegmentFlags> = (0..n)
            .map(|_| SegmentFlags {
                kind: if rng.random() { SegmentKind::Thing } else { SegmentKind::Stuff },
                number: if rng.random() { Plurality::Singular } else { Plurality::Plural },
            })
            .collect();
        let dropped: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.2).collect();
        let pairs: Vec<(&BinaryMask, &BinaryMask)> = preds.iter().zip(&gts).collect();
        let counts: Vec<(usize, usize)> = pairs.iter().map(|(p, g)| brute_iou(p, g)).collect();
        let mut mismatch = false;

        let (si, su) = counts.iter().fold((0, 0), |(a, b), &(i, u)| (a + i, b + u));
        mismatch |= metrics::ciou(&pairs)? != ratio((si, su));

        let ious: Vec<f64> = counts.iter().map(|&c| ratio(c)).collect();
        let mean = ious.iter().sum::<f64>() / n as f64;
        rep.max_mean_err = rep.max_mean_err.max((metrics::giou_mean(&pairs)? - mean).abs());
        let (miou, recall) = metrics::gcg_mask_scores(&pairs)?;
        rep.max_mean_err = rep.max_mean_err.max((miou - mean).abs());
        mismatch |= recall != ious.iter().filter(|&&v| v >= 0.5).count() as f64 / n as f64;

        // PNG recall: dropped predictions count as empty masks.
        let segs: Vec<PngSegment> = (0..n)
            .map(|k| PngSegment {
                pred: (!dropped[k]).then_some(&preds[k]),
                gt: &gts[k],
                flags: flags[k],
            })
            .collect();
        let png = metrics::png_recall(&segs, &thresholds)?;
        let empty = BinaryMask::empty(h, w);
        for split in Split::ALL {
            let members: Vec<f64> = (0..n)
                .filter(|&k| split.includes(flags[k]))
                .map(|k| ratio(brute_iou(if dropped[k] { &empty } else { &preds[k] }, &gts[k])))
                .collect();
            if members.is_empty() {
                mismatch |= png.average[&split].is_some() || png.at_50[&split].is_some();
                continue;
            }
            let m = members.len() as f64;
            let at = |t: f64| members.iter().filter(|&&v| v >= t).count() as f64 / m;
            mismatch |= png.at_50[&split] != Some(at(0.5));
            let avg = thresholds.iter().map(|&t| at(t)).sum::<f64>() / thresholds.len() as f64;
            rep.max_mean_err = rep.max_mean_err.max((png.average[&split].unwrap() - avg).abs());
        }

        // Keyword PRF over random token sets.
        let universe = rng.random_range(1..12);
        let pick = |rng: &mut ChaCha8Rng| -> BTreeSet<usize> { (0..universe).filter(|_| rng.random::<f64>() < 0.4).collect() };
        let (pk, gk) = (pick(&mut rng), pick(&mut rng));
        let tp = pk.iter().filter(|t| gk.contains(t)).count() as f64;
        let expect = match (pk.is_empty(), gk.is_empty()) {
            (true, true) => (1.0, 1.0, 1.0),
            (true, false) => (0.0, 0.0, 0.0),
            (false, true) => (0.0, 1.0, 0.0),
            (false, false) => {
                let p = tp / pk.len() as f64;
                let r = tp / gk.len() as f64;
                (p, r, if tp == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
            }
        };
        mismatch |= metrics::keyword_prf(&pk, &gk) != expect;

        // Shard merge: split the tallies at a random point and merge.
        let mut whole = EvalTally::default();
        for (k, &(i, u)) in counts.iter().enumerate() {
            whole.res.push((i as u64, u as u64));
            whole.gcg.push((i as u64, u as u64));
            whole.png.push(((i as u64, u as u64), flags[k]));
        }
        whole.keywords.add(&pk, &gk);
        let cut = rng.random_range(0..=n);
        let mut a = EvalTally::default();
        let mut b = EvalTally::default();
        for k in 0..n {
            let t = if k < cut { &mut a } else { &mut b };
            t.res.push(whole.res[k]);
            t.gcg.push(whole.gcg[k]);
            t.png.push(whole.png[k]);
        }
        b.keywords = whole.keywords;
        // Merge in reverse shard order to exercise order invariance.
        b.merge(&a);
        let (r1, r2) = (whole.report(&thresholds), b.report(&thresholds));
        if serde_json::to_string(&r1).unwrap() != serde_json::to_string(&r2).unwrap() {
            rep.merge_mismatches += 1;
        }
        rep.exact_mismatches += mismatch as usize;
    }
    Ok(rep)
}

/// One line of `flmm selftest` output.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub fn run_all(seed: u64) -> Result<Vec<SuiteLine>> {
    let mut lines = Vec::new();
    let att = attention_oracle(100, seed)?;
    lines.push(SuiteLine {
        name: "attention maps vs brute-force softmax".into(),
        passed: att.max_abs_err < 1e-5,
        detail: format!("{} cases, max abs err {:.3e}", att.cases, att.max_abs_err),
    });
    for (name, g) in gradient_suite(seed, 10)? {
        lines.push(SuiteLine {
            name: format!("finite differences: {name}"),
            passed: g.checked >= 10 && g.max_rel_err < 1e-3,
            detail: format!("{} scalars, max rel err {:.3e}", g.checked, g.max_rel_err),
        });
    }
    let rle = rle_oracle(1000, seed)?;
    lines.push(SuiteLine {
        name: "RLE round trip".into(),
        passed: rle == 0,
        detail: format!("1000 masks, {rle} failures"),
    });
    let m = metric_oracle(500, seed)?;
    lines.push(SuiteLine {
        name: "metrics vs set counting".into(),
        passed: m.exact_mismatches == 0 && m.merge_mismatches == 0 && m.max_mean_err < 1e-12,
        detail: format!(
            "{} cases, {} mismatches, {} merge mismatches, max mean err {:.1e}",
            m.cases, m.exact_mismatches, m.merge_mismatches, m.max_mean_err
        ),
    });
    Ok(lines)
}

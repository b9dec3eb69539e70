//! Coloured shapes on a grey background with template captions and exact masks.
//!
//! Each sample holds 1–3 segments in distinct colours. A thing segment is one
//! shape ("a red circle") or a same-coloured pair ("two red circles", plural).
//! With some probability the last segment is a stuff band along the bottom
//! ("the green ground"). Spans cover the colour word and the noun.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    format_conversation, rle_encode, GroundingSample, ImageRef, Plurality, SegmentFlags, SegmentKind,
    SpanAnnotation, DESCRIBE_PROMPT,
};
use crate::decoder::BinaryMask;
use crate::error::{ensure, Result};
use crate::host::tokenizer::{BACKGROUND, COLORS};
use crate::image::ImageArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    const ALL: [ShapeKind; 3] = [Self::Circle, Self::Square, Self::Triangle];

    pub fn noun(self, plural: bool) -> &'static str {
        match (self, plural) {
            (Self::Circle, false) => "circle",
            (Self::Circle, true) => "circles",
            (Self::Square, false) => "square",
            (Self::Square, true) => "squares",
            (Self::Triangle, false) => "triangle",
            (Self::Triangle, true) => "triangles",
        }
    }

    /// Whether pixel centre offset `(dx, dy)` lies inside a shape of radius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Self::Circle => dx * dx + dy * dy <= r * r,
            Self::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Self::Triangle => {
                let (top, base) = (-r, 0.8 * r);
                dy >= top && dy <= base && dx.abs() <= r * (dy - top) / (base - top)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    /// Placement cells `(rows, cols)`; each shape occupies its own cell.
    pub grid: (usize, usize),
    pub plural_prob: f64,
    pub stuff_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            grid: (2, 2),
            plural_prob: 0.25,
            stuff_prob: 0.25,
        }
    }
}

impl SynthConfig {
    fn band_height(&self) -> usize {
        self.image_size.0 / 5
    }
}

struct Segment {
    color: usize,
    kind: Option<ShapeKind>,
    plural: bool,
}

impl Segment {
    fn phrase(&self) -> (String, String) {
        let color = COLORS[self.color].0;
        match (self.kind, self.plural) {
            (None, _) => ("the ".into(), format!("{color} ground")),
            (Some(k), false) => ("a ".into(), format!("{color} {}", k.noun(false))),
            (Some(k), true) => ("two ".into(), format!("{color} {}", k.noun(true))),
        }
    }
}

/// Generates `n` samples deterministically from `seed`.
pub fn synth_shapes(seed: u64, n: usize, cfg: &SynthConfig) -> Result<Vec<GroundingSample>> {
    ensure!(n >= 1, InvalidArgument, "synth_shapes needs n >= 1");
    let (h, w) = cfg.image_size;
    let cells = cfg.grid.0 * cfg.grid.1;
    ensure!(
        cells >= 3 && h >= 16 && w >= 16 && h / cfg.grid.0 >= 8 && w / cfg.grid.1 >= 8,
        InvalidArgument,
        "image {h}x{w} with grid {:?} is too small for three shapes",
        cfg.grid
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| one_sample(&mut rng, format!("synth-{seed}-{i}"), cfg)).collect()
}

fn one_sample(rng: &mut ChaCha8Rng, id: String, cfg: &SynthConfig) -> Result<GroundingSample> {
    let (h, w) = cfg.image_size;
    let cells = cfg.grid.0 * cfg.grid.1;
    let k = rng.random_range(1..=3usize);
    let stuff = k >= 2 && rng.random::<f64>() < cfg.stuff_prob;
    let things = k - stuff as usize;

    let mut colors: Vec<usize> = (0..COLORS.len()).collect();
    colors.shuffle(rng);
    let mut segments = Vec::with_capacity(k);
    let mut free_cells = cells;
    for t in 0..things {
        let reserve = things - t - 1;
        let plural = free_cells >= 2 + reserve && rng.random::<f64>() < cfg.plural_prob;
        free_cells -= 1 + plural as usize;
        segments.push(Segment {
            color: colors[t],
            kind: Some(ShapeKind::ALL[rng.random_range(0..3)]),
            plural,
        });
    }
    if stuff {
        segments.push(Segment {
            color: colors[things],
            kind: None,
            plural: false,
        });
    }

    let mut image = ImageArray::filled(h, w, BACKGROUND);
    let shape_h = if stuff { h - cfg.band_height() } else { h };
    let (cell_h, cell_w) = (shape_h / cfg.grid.0, w / cfg.grid.1);
    let mut order: Vec<usize> = (0..cells).collect();
    order.shuffle(rng);
    let mut next_cell = order.into_iter();

    let mut masks = BTreeMap::new();
    let mut flags = BTreeMap::new();
    for (si, seg) in segments.iter().enumerate() {
        let mut mask = BinaryMask::empty(h, w);
        match seg.kind {
            None => {
                for y in h - cfg.band_height()..h {
                    for x in 0..w {
                        mask.data[y * w + x] = true;
                    }
                }
            }
            Some(kind) => {
                for _ in 0..1 + seg.plural as usize {
                    let cell = next_cell.next().expect("cell budget checked above");
                    let (cy0, cx0) = ((cell / cfg.grid.1) * cell_h, (cell % cfg.grid.1) * cell_w);
                    let side = cell_h.min(cell_w) as f64;
                    let r = side * rng.random_range(0.3..0.45);
                    let cy = cy0 as f64 + rng.random_range(r..cell_h as f64 - r);
                    let cx = cx0 as f64 + rng.random_range(r..cell_w as f64 - r);
                    for y in cy0..cy0 + cell_h {
                        for x in cx0..cx0 + cell_w {
                            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                            if kind.contains(dx, dy, r) {
                                mask.data[y * w + x] = true;
                            }
                        }
                    }
                }
            }
        }
        for (p, _) in mask.data.iter().enumerate().filter(|(_, &v)| v) {
            image.set_pixel(p / w, p % w, COLORS[seg.color].1);
        }
        let seg_id = si.to_string();
        masks.insert(seg_id.clone(), rle_encode(&mask));
        flags.insert(
            seg_id,
            SegmentFlags {
                kind: if seg.kind.is_some() { SegmentKind::Thing } else { SegmentKind::Stuff },
                number: if seg.plural { Plurality::Plural } else { Plurality::Singular },
            },
        );
    }

    let mut answer = String::new();
    let mut spans = Vec::with_capacity(k);
    for (si, seg) in segments.iter().enumerate() {
        if si > 0 {
            answer.push_str(if si + 1 == k { " and " } else { ", " });
        }
        let (lead, phrase) = seg.phrase();
        answer.push_str(&lead);
        let start = answer.chars().count();
        answer.push_str(&phrase);
        spans.push(SpanAnnotation {
            char_start: start,
            char_end: answer.chars().count(),
            segment_id: si.to_string(),
        });
    }

    let sample = GroundingSample {
        id,
        image: ImageRef::inline(&image),
        conversation: format_conversation(DESCRIBE_PROMPT, &answer),
        spans,
        masks,
        flags,
    };
    sample.validate()?;
    Ok(sample)
}

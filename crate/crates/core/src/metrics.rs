//! Mask and keyword metrics.
//!
//! Every metric is computed from raw integer tallies: per-pair
//! `(intersection, union)` counts and token counts. Merging shards concatenates
//! or adds tallies, and finalisation sorts before any floating-point sum, so
//! results are exact under sharding and independent of sample order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::{Plurality, SegmentFlags, SegmentKind};
use crate::decoder::BinaryMask;
use crate::error::{ensure, Error, Result};

/// `(intersection, union)` pixel counts.
pub type IouCounts = (u64, u64);

pub fn iou_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<IouCounts> {
    ensure!(
        (pred.height, pred.width) == (gt.height, gt.width),
        Contract,
        "mask sizes differ: {}x{} vs {}x{}",
        pred.height,
        pred.width,
        gt.height,
        gt.width
    );
    let mut i = 0u64;
    let mut u = 0u64;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        i += (p && g) as u64;
        u += (p || g) as u64;
    }
    Ok((i, u))
}

/// IoU with the empty-empty case defined as 1.
pub fn iou_of((i, u): IouCounts) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

fn counts_for(pairs: &[(&BinaryMask, &BinaryMask)]) -> Result<Vec<IouCounts>> {
    ensure!(!pairs.is_empty(), InvalidArgument, "metric over an empty set");
    pairs.iter().map(|(p, g)| iou_counts(p, g)).collect()
}

/// Mean of per-pair IoUs, summed in sorted order.
fn mean_iou(counts: &[IouCounts]) -> f64 {
    let mut ious: Vec<f64> = counts.iter().map(|&c| iou_of(c)).collect();
    ious.sort_by(f64::total_cmp);
    ious.iter().sum::<f64>() / ious.len() as f64
}

/// Cumulative intersection over cumulative union.
pub fn ciou(pairs: &[(&BinaryMask, &BinaryMask)]) -> Result<f64> {
    Ok(ciou_from(&counts_for(pairs)?))
}

fn ciou_from(counts: &[IouCounts]) -> f64 {
    let (i, u) = counts.iter().fold((0u64, 0u64), |(a, b), &(i, u)| (a + i, b + u));
    iou_of((i, u))
}

/// Mean per-pair IoU.
pub fn giou_mean(pairs: &[(&BinaryMask, &BinaryMask)]) -> Result<f64> {
    Ok(mean_iou(&counts_for(pairs)?))
}

/// `(mIoU, recall@0.5)` over span-matched pairs.
pub fn gcg_mask_scores(pairs: &[(&BinaryMask, &BinaryMask)]) -> Result<(f64, f64)> {
    let counts = counts_for(pairs)?;
    Ok(gcg_from(&counts))
}

fn gcg_from(counts: &[IouCounts]) -> (f64, f64) {
    let hit = counts.iter().filter(|&&c| iou_of(c) >= 0.5).count();
    (mean_iou(counts), hit as f64 / counts.len() as f64)
}

/// `0.50, 0.55, …, 0.95`.
pub fn default_thresholds() -> Vec<f64> {
    (50..=95).step_by(5).map(|p| p as f64 / 100.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Thing,
    Stuff,
    Singular,
    Plural,
}

impl Split {
    pub const ALL: [Split; 5] = [Self::All, Self::Thing, Self::Stuff, Self::Singular, Self::Plural];

    pub fn includes(self, f: SegmentFlags) -> bool {
        match self {
            Self::All => true,
            Self::Thing => f.kind == SegmentKind::Thing,
            Self::Stuff => f.kind == SegmentKind::Stuff,
            Self::Singular => f.number == Plurality::Singular,
            Self::Plural => f.number == Plurality::Plural,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::All => "all",
            Self::Thing => "thing",
            Self::Stuff => "stuff",
            Self::Singular => "singular",
            Self::Plural => "plural",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown recall split `{s}`")))
    }
}

/// Recall per split: the mean over thresholds, and recall at 0.5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PngRecall {
    pub average: BTreeMap<Split, Option<f64>>,
    pub at_50: BTreeMap<Split, Option<f64>>,
    pub thresholds: Vec<f64>,
}

/// One ground-truth segment with its prediction; `None` counts as an empty mask.
pub struct PngSegment<'a> {
    pub pred: Option<&'a BinaryMask>,
    pub gt: &'a BinaryMask,
    pub flags: SegmentFlags,
}

pub fn png_recall(segments: &[PngSegment<'_>], thresholds: &[f64]) -> Result<PngRecall> {
    ensure!(!thresholds.is_empty(), InvalidArgument, "no recall thresholds");
    let mut tally = Vec::with_capacity(segments.len());
    for s in segments {
        let c = match s.pred {
            Some(p) => iou_counts(p, s.gt)?,
            None => iou_counts(&BinaryMask::empty(s.gt.height, s.gt.width), s.gt)?,
        };
        tally.push((c, s.flags));
    }
    Ok(png_from(&tally, thresholds))
}

fn png_from(tally: &[(IouCounts, SegmentFlags)], thresholds: &[f64]) -> PngRecall {
    let mut average = BTreeMap::new();
    let mut at_50 = BTreeMap::new();
    for split in Split::ALL {
        let ious: Vec<f64> = tally
            .iter()
            .filter(|(_, f)| split.includes(*f))
            .map(|&(c, _)| iou_of(c))
            .collect();
        if ious.is_empty() {
            average.insert(split, None);
            at_50.insert(split, None);
            continue;
        }
        let n = ious.len() as f64;
        let recall_at = |t: f64| ious.iter().filter(|&&v| v >= t).count() as f64 / n;
        let mean = thresholds.iter().map(|&t| recall_at(t)).sum::<f64>() / thresholds.len() as f64;
        average.insert(split, Some(mean));
        at_50.insert(split, Some(recall_at(0.5)));
    }
    PngRecall {
        average,
        at_50,
        thresholds: thresholds.to_vec(),
    }
}

/// Token-level precision, recall and F1.
///
/// Empty prediction and empty truth give `(1, 1, 1)`. An empty prediction
/// against non-empty truth gives `(0, 0, 0)`. A non-empty prediction against
/// empty truth gives precision 0 and a vacuous recall of 1.
pub fn keyword_prf(pred: &BTreeSet<usize>, gt: &BTreeSet<usize>) -> (f64, f64, f64) {
    let tp = pred.intersection(gt).count() as u64;
    KeywordTally {
        tp,
        fp: pred.len() as u64 - tp,
        fn_: gt.len() as u64 - tp,
    }
    .prf()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordTally {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl KeywordTally {
    pub fn add(&mut self, pred: &BTreeSet<usize>, gt: &BTreeSet<usize>) {
        let tp = pred.intersection(gt).count() as u64;
        self.tp += tp;
        self.fp += pred.len() as u64 - tp;
        self.fn_ += gt.len() as u64 - tp;
    }

    pub fn merge(&mut self, other: &KeywordTally) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn prf(&self) -> (f64, f64, f64) {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        let pred = tp + fp;
        let gt = tp + fn_;
        if pred == 0.0 {
            return if gt == 0.0 { (1.0, 1.0, 1.0) } else { (0.0, 0.0, 0.0) };
        }
        let p = tp / pred;
        let r = if gt == 0.0 { 1.0 } else { tp / gt };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    }
}

/// Raw evaluation tallies; merge shards with [`EvalTally::merge`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTally {
    /// Referring-segmentation pairs.
    pub res: Vec<IouCounts>,
    /// Panoptic-grounding segments.
    pub png: Vec<(IouCounts, SegmentFlags)>,
    /// Grounded-conversation span-matched pairs.
    pub gcg: Vec<IouCounts>,
    pub keywords: KeywordTally,
}

impl EvalTally {
    pub fn merge(&mut self, other: &EvalTally) {
        self.res.extend_from_slice(&other.res);
        self.png.extend_from_slice(&other.png);
        self.gcg.extend_from_slice(&other.gcg);
        self.keywords.merge(&other.keywords);
    }

    pub fn report(&self, thresholds: &[f64]) -> MetricReport {
        let png = png_from(&self.png, thresholds);
        let (gcg_miou, gcg_mask_recall) = if self.gcg.is_empty() {
            (None, None)
        } else {
            let (m, r) = gcg_from(&self.gcg);
            (Some(m), Some(r))
        };
        MetricReport {
            ciou: (!self.res.is_empty()).then(|| ciou_from(&self.res)),
            giou_mean: (!self.res.is_empty()).then(|| mean_iou(&self.res)),
            png_recall: png.average,
            png_recall_at_50: png.at_50,
            recall_thresholds: png.thresholds,
            gcg_miou,
            gcg_mask_recall,
            keyword_prf: self.keywords.prf(),
            num_res_pairs: self.res.len(),
            num_png_segments: self.png.len(),
        }
    }
}

/// Metric values; `None` where the set was empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ciou: Option<f64>,
    pub giou_mean: Option<f64>,
    pub png_recall: BTreeMap<Split, Option<f64>>,
    pub png_recall_at_50: BTreeMap<Split, Option<f64>>,
    pub recall_thresholds: Vec<f64>,
    pub gcg_miou: Option<f64>,
    pub gcg_mask_recall: Option<f64>,
    pub keyword_prf: (f64, f64, f64),
    pub num_res_pairs: usize,
    pub num_png_segments: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, on: &[usize]) -> BinaryMask {
        let mut m = BinaryMask::empty(h, w);
        for &i in on {
            m.data[i] = true;
        }
        m
    }

    #[test]
    fn ciou_cases() {
        let a = mask(2, 2, &[0, 1]);
        assert_eq!(ciou(&[(&a, &a)]).unwrap(), 1.0);
        let b = mask(2, 2, &[2, 3]);
        assert_eq!(ciou(&[(&a, &b)]).unwrap(), 0.0);
        // (I, U) = (2, 4) and (1, 6).
        let p1 = mask(1, 8, &[0, 1, 2]);
        let g1 = mask(1, 8, &[1, 2, 3]);
        let p2 = mask(1, 8, &[0, 1, 2, 3]);
        let g2 = mask(1, 8, &[3, 4, 5]);
        assert_eq!(iou_counts(&p1, &g1).unwrap(), (2, 4));
        assert_eq!(iou_counts(&p2, &g2).unwrap(), (1, 6));
        assert_eq!(ciou(&[(&p1, &g1), (&p2, &g2)]).unwrap(), 3.0 / 10.0);
        let e = BinaryMask::empty(2, 2);
        assert_eq!(ciou(&[(&e, &e)]).unwrap(), 1.0);
        assert!(ciou(&[]).is_err());
        assert!(ciou(&[(&a, &BinaryMask::empty(3, 3))]).is_err());
    }

    #[test]
    fn giou_and_gcg_cases() {
        let g = mask(1, 4, &[0, 1]);
        let half = mask(1, 4, &[0]);
        assert_eq!(giou_mean(&[(&half, &g), (&g, &g)]).unwrap(), 0.75);
        assert_eq!(gcg_mask_scores(&[(&g, &g), (&g, &g)]).unwrap(), (1.0, 1.0));
        // IoUs 0.4 and 0.6.
        let g5 = mask(1, 5, &[0, 1, 2, 3, 4]);
        let p2 = mask(1, 5, &[0, 1]);
        let p3 = mask(1, 5, &[0, 1, 2]);
        let (m, r) = gcg_mask_scores(&[(&p2, &g5), (&p3, &g5)]).unwrap();
        assert!((m - 0.5).abs() < 1e-15);
        assert_eq!(r, 0.5);
    }

    #[test]
    fn ciou_equals_giou_for_equal_unions() {
        let g = mask(1, 6, &[0, 1, 2, 3]);
        let p1 = mask(1, 6, &[0]);
        let p2 = mask(1, 6, &[0, 1, 2]);
        let pairs = [(&p1, &g), (&p2, &g)];
        assert_eq!(ciou(&pairs).unwrap(), giou_mean(&pairs).unwrap());
    }

    #[test]
    fn png_recall_cases() {
        let g = mask(1, 5, &[0, 1, 2, 3, 4]);
        let p = mask(1, 5, &[0, 1, 2]);
        let seg = [PngSegment {
            pred: Some(&p),
            gt: &g,
            flags: SegmentFlags::default(),
        }];
        assert_eq!(png_recall(&seg, &[0.5]).unwrap().average[&Split::All], Some(1.0));
        let r = png_recall(&seg, &[0.5, 0.7]).unwrap();
        assert_eq!(r.average[&Split::All], Some(0.5));
        assert_eq!(r.average[&Split::Stuff], None);
        let missing = [PngSegment {
            pred: None,
            gt: &g,
            flags: SegmentFlags::default(),
        }];
        assert_eq!(png_recall(&missing, &[0.5]).unwrap().at_50[&Split::All], Some(0.0));
        assert!("things".parse::<Split>().is_err());
        assert_eq!("plural".parse::<Split>().unwrap(), Split::Plural);
    }

    #[test]
    fn keyword_cases() {
        let s = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>();
        assert_eq!(keyword_prf(&s(&[1, 2]), &s(&[1, 2])), (1.0, 1.0, 1.0));
        assert_eq!(keyword_prf(&s(&[1, 2]), &s(&[2, 3])), (0.5, 0.5, 0.5));
        assert_eq!(keyword_prf(&s(&[]), &s(&[])), (1.0, 1.0, 1.0));
        assert_eq!(keyword_prf(&s(&[]), &s(&[4])), (0.0, 0.0, 0.0));
        assert_eq!(keyword_prf(&s(&[4]), &s(&[])), (0.0, 1.0, 0.0));
    }

    #[test]
    fn shard_merge_and_order_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let flags = [
            SegmentFlags::default(),
            SegmentFlags {
                kind: SegmentKind::Stuff,
                number: Plurality::Plural,
            },
        ];
        let mut items = Vec::new();
        for _ in 0..60 {
            let p = mask(3, 3, &(0..9).filter(|_| rng.random::<bool>()).collect::<Vec<_>>());
            let g = mask(3, 3, &(0..9).filter(|_| rng.random::<bool>()).collect::<Vec<_>>());
            items.push((iou_counts(&p, &g).unwrap(), flags[rng.random_range(0..2)]));
        }
        let tally_of = |xs: &[(IouCounts, SegmentFlags)]| {
            let mut t = EvalTally::default();
            for &(c, f) in xs {
                t.res.push(c);
                t.gcg.push(c);
                t.png.push((c, f));
                t.keywords.tp += c.0;
                t.keywords.fp += c.1 - c.0;
            }
            t
        };
        let th = default_thresholds();
        let whole = tally_of(&items).report(&th);
        let mut merged = tally_of(&items[..17]);
        merged.merge(&tally_of(&items[17..41]));
        merged.merge(&tally_of(&items[41..]));
        assert_eq!(merged.report(&th), whole);
        let mut rev = items.clone();
        rev.reverse();
        assert_eq!(tally_of(&rev).report(&th), whole);
    }
}

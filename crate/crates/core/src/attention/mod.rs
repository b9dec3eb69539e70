//! From captured attention to mask-decoder input.
//!
//! For every `(layer, head)` the word-image maps of the tokens in a span are
//! extracted, merged into one `[h, w]` map, normalised to unit mass and
//! bilinearly resized. Channels are ordered layer-major, head-minor:
//! channel `c = li·N + n` for the `li`-th selected layer and head `n`.

mod kmeans;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans_cluster, LabelGrid};

use crate::error::{ensure, Error, Result};
use crate::host::HostForwardRecord;
use crate::tensor::{self, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_SIZE: usize = 64;

/// One token's attention over image positions, reshaped to the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct WordImageMap {
    /// `[h, w]`, non-negative.
    pub grid: Tensor,
    pub layer: usize,
    pub head: usize,
    pub token: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    #[default]
    Average,
    Max,
}

impl std::str::FromStr for MergeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" | "avg" | "mean" => Ok(MergeMode::Average),
            "max" => Ok(MergeMode::Max),
            other => Err(Error::InvalidArgument(format!("unknown merge mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSubset {
    #[default]
    All,
    Early,
    Mid,
    Late,
    Explicit(Vec<usize>),
}

impl LayerSubset {
    /// Resolves to concrete layer indices for a host with `num_layers` layers.
    /// Early/mid/late each take a third of the stack (at least one layer).
    pub fn resolve(&self, num_layers: usize) -> Result<Vec<usize>> {
        let third = (num_layers / 3).max(1);
        let layers: Vec<usize> = match self {
            LayerSubset::All => (0..num_layers).collect(),
            LayerSubset::Early => (0..third).collect(),
            LayerSubset::Mid => {
                let start = (num_layers - third) / 2;
                (start..start + third).collect()
            }
            LayerSubset::Late => (num_layers - third..num_layers).collect(),
            LayerSubset::Explicit(v) => v.clone(),
        };
        ensure!(!layers.is_empty(), InvalidArgument, "layer subset is empty");
        if let Some(&bad) = layers.iter().find(|&&l| l >= num_layers) {
            return Err(Error::InvalidArgument(format!(
                "layer {bad} out of range for a {num_layers}-layer host"
            )));
        }
        Ok(layers)
    }
}

impl std::str::FromStr for LayerSubset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => LayerSubset::All,
            "early" => LayerSubset::Early,
            "mid" => LayerSubset::Mid,
            "late" => LayerSubset::Late,
            list => LayerSubset::Explicit(
                list.split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::InvalidArgument(format!("bad layer list `{list}`")))
                    })
                    .collect::<Result<_>>()?,
            ),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub target: (usize, usize),
    pub merge: MergeMode,
    pub layers: LayerSubset,
    pub normalize: bool,
    pub epsilon: f64,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            target: (DEFAULT_SIZE, DEFAULT_SIZE),
            merge: MergeMode::Average,
            layers: LayerSubset::All,
            normalize: true,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl StackConfig {
    /// Channels produced for a host with the given layer and head counts.
    pub fn channels(&self, num_layers: usize, num_heads: usize) -> Result<usize> {
        Ok(self.layers.resolve(num_layers)?.len() * num_heads)
    }
}

/// Stacked per-head maps for one grounded span.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    /// `[C, h', w']`.
    pub maps: Tensor,
    pub merge: MergeMode,
    pub normalized: bool,
    pub span: Range<usize>,
    pub layers: Vec<usize>,
}

impl AttentionStack {
    pub fn channels(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.maps.shape()[1], self.maps.shape()[2])
    }
}

pub fn extract_word_image_map(
    rec: &HostForwardRecord,
    token: usize,
    image_span: &Range<usize>,
    (h, w): (usize, usize),
    layer: usize,
    head: usize,
) -> Result<WordImageMap> {
    if token < image_span.end {
        return Err(Error::Precondition {
            token,
            image_end: image_span.end,
        });
    }
    ensure!(
        image_span.len() == h * w,
        Contract,
        "image span of {} tokens does not match grid {h}x{w}",
        image_span.len()
    );
    let shape = rec.attention.shape();
    ensure!(
        layer < shape[0] && head < shape[1] && token < shape[2],
        InvalidArgument,
        "(layer {layer}, head {head}, token {token}) outside attention {shape:?}"
    );
    let row = rec.attention_row(layer, head, token);
    Ok(WordImageMap {
        grid: Tensor::from_parts(&[h, w], row[image_span.clone()].to_vec()),
        layer,
        head,
        token,
    })
}

pub fn merge_maps(maps: &[WordImageMap], mode: MergeMode) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot merge an empty list of maps".into()))?;
    let shape = first.grid.shape();
    if let Some(m) = maps.iter().find(|m| m.grid.shape() != shape) {
        return Err(Error::Contract(format!(
            "map shapes differ: {:?} vs {:?}",
            shape,
            m.grid.shape()
        )));
    }
    let n = first.grid.len();
    let out: Vec<f64> = match mode {
        MergeMode::Average => {
            // Accumulate in sorted order so the result is permutation-invariant bit for bit.
            let mut column = vec![0.0; maps.len()];
            (0..n)
                .map(|i| {
                    for (c, m) in column.iter_mut().zip(maps) {
                        *c = m.grid.data()[i];
                    }
                    column.sort_by(f64::total_cmp);
                    column.iter().sum::<f64>() / maps.len() as f64
                })
                .collect()
        }
        MergeMode::Max => (0..n)
            .map(|i| maps.iter().map(|m| m.grid.data()[i]).fold(f64::NEG_INFINITY, f64::max))
            .collect(),
    };
    Ok(Tensor::from_parts(shape, out))
}

/// `grid / (sum + epsilon)`.
pub fn normalize_map(grid: &Tensor, epsilon: f64) -> Result<Tensor> {
    if let Some(v) = grid.data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
        return Err(Error::Contract(format!("attention map has invalid entry {v}")));
    }
    let denom = grid.sum() + epsilon;
    Ok(grid.map(|v| v / denom))
}

/// Builds the `[C, h', w']` decoder input for the token span `span`.
pub fn build_attention_stack(
    rec: &HostForwardRecord,
    span: Range<usize>,
    image_span: &Range<usize>,
    grid: (usize, usize),
    cfg: &StackConfig,
) -> Result<AttentionStack> {
    ensure!(!span.is_empty(), InvalidArgument, "token span is empty");
    if span.start < image_span.end {
        return Err(Error::Precondition {
            token: span.start,
            image_end: image_span.end,
        });
    }
    let num_heads = rec.attention.shape()[1];
    let layers = cfg.layers.resolve(rec.attention.shape()[0])?;
    let (th, tw) = cfg.target;
    ensure!(th > 0 && tw > 0, InvalidArgument, "target size must be positive");
    let mut data = Vec::with_capacity(layers.len() * num_heads * th * tw);
    for &layer in &layers {
        for head in 0..num_heads {
            let maps = span
                .clone()
                .map(|t| extract_word_image_map(rec, t, image_span, grid, layer, head))
                .collect::<Result<Vec<_>>>()?;
            let mut merged = merge_maps(&maps, cfg.merge)?;
            if cfg.normalize {
                merged = normalize_map(&merged, cfg.epsilon)?;
            }
            if (th, tw) == grid {
                data.extend_from_slice(merged.data());
            } else {
                data.extend(tensor::resize_bilinear(merged.data(), 1, grid, (th, tw)));
            }
        }
    }
    Ok(AttentionStack {
        maps: Tensor::from_parts(&[layers.len() * num_heads, th, tw], data),
        merge: cfg.merge,
        normalized: cfg.normalize,
        span,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    /// Record whose every attention row is uniform over its causal prefix.
    pub(crate) fn uniform_record(m: usize, n: usize, s: usize) -> HostForwardRecord {
        let mut att = vec![0.0; m * n * s * s];
        for mn in 0..m * n {
            for i in 0..s {
                for j in 0..=i {
                    att[(mn * s + i) * s + j] = 1.0 / (i + 1) as f64;
                }
            }
        }
        HostForwardRecord {
            attention: Tensor::from_parts(&[m, n, s, s], att),
            hidden_states: Tensor::zeros(&[m, s, 2]),
            final_hidden: Tensor::zeros(&[s, 2]),
        }
    }

    fn map(values: Vec<f64>) -> WordImageMap {
        WordImageMap {
            grid: Tensor::from_parts(&[2, 2], values),
            layer: 0,
            head: 0,
            token: 0,
        }
    }

    #[test]
    fn uniform_record_gives_reciprocal_maps() {
        let rec = uniform_record(1, 1, 12);
        let m = extract_word_image_map(&rec, 9, &(1..5), (2, 2), 0, 0).unwrap();
        assert!(m.grid.data().iter().all(|&v| v == 1.0 / 10.0));
    }

    #[test]
    fn extraction_requires_token_after_image() {
        let rec = uniform_record(1, 1, 12);
        for t in [0, 1, 4] {
            assert!(matches!(
                extract_word_image_map(&rec, t, &(1..5), (2, 2), 0, 0),
                Err(Error::Precondition { .. })
            ));
        }
        assert!(extract_word_image_map(&rec, 5, &(1..5), (2, 2), 0, 0).is_ok());
    }

    #[test]
    fn merge_cases() {
        let a = map(vec![0.1, 0.4, 0.0, 0.3]);
        assert_eq!(merge_maps(&[a.clone(), a.clone()], MergeMode::Average).unwrap(), a.grid);
        let lo = map(vec![0.2; 4]);
        let hi = map(vec![0.6; 4]);
        assert_eq!(merge_maps(&[lo, hi], MergeMode::Max).unwrap().data(), &[0.6; 4]);
        assert!(matches!(merge_maps(&[], MergeMode::Average), Err(Error::InvalidArgument(_))));
        let odd = WordImageMap {
            grid: Tensor::zeros(&[1, 4]),
            ..a.clone()
        };
        assert!(matches!(merge_maps(&[a, odd], MergeMode::Max), Err(Error::Contract(_))));
    }

    #[test]
    fn normalize_cases() {
        let ones = Tensor::full(&[8, 8], 1.0);
        let n = normalize_map(&ones, 0.0).unwrap();
        assert!(n.data().iter().all(|&v| v == 1.0 / 64.0));
        let z = normalize_map(&Tensor::zeros(&[8, 8]), 1e-8).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let neg = Tensor::from_parts(&[2], vec![0.5, -0.1]);
        assert!(matches!(normalize_map(&neg, 1e-8), Err(Error::Contract(_))));
    }

    #[test]
    fn stack_shape_and_identity_resize() {
        let rec = uniform_record(2, 2, 24);
        let image_span = 1..17;
        let stack = build_attention_stack(&rec, 18..21, &image_span, (4, 4), &StackConfig::default()).unwrap();
        assert_eq!(stack.maps.shape(), &[4, 64, 64]);

        let cfg = StackConfig {
            target: (4, 4),
            ..StackConfig::default()
        };
        let stack = build_attention_stack(&rec, 18..21, &image_span, (4, 4), &cfg).unwrap();
        for layer in 0..2 {
            for head in 0..2 {
                let maps: Vec<_> = (18..21)
                    .map(|t| extract_word_image_map(&rec, t, &image_span, (4, 4), layer, head).unwrap())
                    .collect();
                let expected = normalize_map(&merge_maps(&maps, MergeMode::Average).unwrap(), DEFAULT_EPSILON).unwrap();
                let c = layer * 2 + head;
                assert_eq!(&stack.maps.data()[c * 16..(c + 1) * 16], expected.data());
            }
        }
    }

    #[test]
    fn constant_maps_stay_constant_after_resize() {
        let rec = uniform_record(1, 1, 20);
        let cfg = StackConfig {
            normalize: false,
            target: (13, 7),
            ..StackConfig::default()
        };
        let stack = build_attention_stack(&rec, 18..19, &(1..17), (4, 4), &cfg).unwrap();
        for &v in stack.maps.data() {
            assert!((v - 1.0 / 19.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_subsets() {
        assert_eq!(LayerSubset::All.resolve(6).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(LayerSubset::Early.resolve(6).unwrap(), vec![0, 1]);
        assert_eq!(LayerSubset::Mid.resolve(6).unwrap(), vec![2, 3]);
        assert_eq!(LayerSubset::Late.resolve(6).unwrap(), vec![4, 5]);
        assert_eq!(LayerSubset::Late.resolve(2).unwrap(), vec![1]);
        assert!(LayerSubset::Explicit(vec![3]).resolve(2).is_err());
        assert_eq!("0,2".parse::<LayerSubset>().unwrap(), LayerSubset::Explicit(vec![0, 2]));

        let rec = uniform_record(3, 2, 20);
        let cfg = StackConfig {
            layers: LayerSubset::Late,
            ..StackConfig::default()
        };
        let stack = build_attention_stack(&rec, 18..20, &(1..17), (4, 4), &cfg).unwrap();
        assert_eq!(stack.channels(), 2);
        assert_eq!(stack.layers, vec![2]);
    }

    fn grid_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 16)
    }

    proptest! {
        #[test]
        fn merge_is_permutation_invariant(
            grids in prop::collection::vec(grid_strategy(), 1..6),
            seed in any::<u64>(),
        ) {
            let maps: Vec<WordImageMap> = grids.into_iter().map(|g| WordImageMap {
                grid: Tensor::from_parts(&[4, 4], g), layer: 0, head: 0, token: 0,
            }).collect();
            let mut shuffled = maps.clone();
            let k = shuffled.len();
            shuffled.rotate_left((seed as usize) % k);
            if seed % 2 == 0 { shuffled.reverse(); }
            for mode in [MergeMode::Average, MergeMode::Max] {
                prop_assert_eq!(merge_maps(&maps, mode).unwrap(), merge_maps(&shuffled, mode).unwrap());
            }
        }

        #[test]
        fn normalize_sums_to_one_and_is_idempotent(g in grid_strategy()) {
            prop_assume!(g.iter().sum::<f64>() > 1e-3);
            let t = Tensor::from_parts(&[4, 4], g);
            let once = normalize_map(&t, DEFAULT_EPSILON).unwrap();
            prop_assert!((once.sum() - 1.0).abs() < 1e-6);
            let twice = normalize_map(&once, DEFAULT_EPSILON).unwrap();
            // Re-normalising divides by 1 + O(epsilon), so the drift is epsilon-scale.
            let peak = once.data().iter().cloned().fold(0.0, f64::max);
            prop_assert!(once.max_abs_diff(&twice) <= 2.0 * DEFAULT_EPSILON * peak + 1e-15);
        }
    }
}

//! Three-stage U-Net that turns an attention stack into mask logits.
//!
//! Encoder stage `i`: conv k2/s2 then conv k1, GELU after each.
//! Decoder stage `i`: bilinear 2× upsample, concatenate the matching encoder
//! feature (the raw input for the last stage), then two conv k1 with GELU.
//! A final conv k1 projects to one channel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionStack;
use crate::error::{ensure, Result};
use crate::nn::params::he_uniform;
use crate::nn::{Bound, ParamStore, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UNetPreset {
    Desk,
    Paper8m,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 3],
    pub preset: UNetPreset,
}

/// Stage widths of the `paper-8m` preset.
pub const PAPER_8M_STAGES: [usize; 3] = [256, 576, 1152];
/// Input channels of the `paper-8m` preset: 32 layers × 32 heads.
pub const PAPER_8M_IN_CHANNELS: usize = 1024;

impl UNetConfig {
    pub fn desk(in_channels: usize) -> Self {
        Self {
            in_channels,
            stage_channels: [32, 64, 128],
            preset: UNetPreset::Desk,
        }
    }

    pub fn paper_8m() -> Self {
        Self {
            in_channels: PAPER_8M_IN_CHANNELS,
            stage_channels: PAPER_8M_STAGES,
            preset: UNetPreset::Paper8m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.in_channels > 0 && self.stage_channels.iter().all(|&c| c > 0),
            InvalidArgument,
            "U-Net channel counts must be positive: {self:?}"
        );
        Ok(())
    }

    /// Every conv as `(name, kernel, in, out)`, in forward order.
    pub fn layers(&self) -> Vec<(String, usize, usize, usize)> {
        let [c1, c2, c3] = self.stage_channels;
        let c0 = self.in_channels;
        vec![
            ("enc1.down".into(), 2, c0, c1),
            ("enc1.conv".into(), 1, c1, c1),
            ("enc2.down".into(), 2, c1, c2),
            ("enc2.conv".into(), 1, c2, c2),
            ("enc3.down".into(), 2, c2, c3),
            ("enc3.conv".into(), 1, c3, c3),
            ("dec3.conv_a".into(), 1, c3 + c2, c2),
            ("dec3.conv_b".into(), 1, c2, c2),
            ("dec2.conv_a".into(), 1, c2 + c1, c1),
            ("dec2.conv_b".into(), 1, c1, c1),
            ("dec1.conv_a".into(), 1, c1 + c0, c1),
            ("dec1.conv_b".into(), 1, c1, c1),
            ("head".into(), 1, c1, 1),
        ]
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let conv = |k: usize, i: usize, o: usize| k * k * i * o + o;
        let [a, b, c] = self.stage_channels;
        let c0 = self.in_channels;
        conv(2, c0, a)
            + conv(1, a, a)
            + conv(2, a, b)
            + conv(1, b, b)
            + conv(2, b, c)
            + conv(1, c, c)
            + conv(1, c + b, b)
            + conv(1, b, b)
            + conv(1, b + a, a)
            + conv(1, a, a)
            + conv(1, a + c0, a)
            + conv(1, a, a)
            + conv(1, a, 1)
    }
}

/// Pre-threshold mask scores on the stack grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    /// `[h', w']`.
    pub grid: Tensor,
    pub source_span: std::ops::Range<usize>,
}

/// Row-major boolean mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            &[self.height, self.width],
            self.data.iter().map(|&b| b as u8 as f64).collect(),
        )
    }
}

/// `logits > 0`, strictly.
pub fn binarize(logits: &MaskLogits) -> BinaryMask {
    let s = logits.grid.shape();
    BinaryMask::new(s[0], s[1], logits.grid.data().iter().map(|&v| v > 0.0).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskDecoder {
    cfg: UNetConfig,
    seed: u64,
    params: ParamStore,
}

/// Builds a U-Net with He-uniform weights and zero biases.
pub fn build_unet(cfg: UNetConfig, seed: u64) -> Result<MaskDecoder> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    for (name, k, cin, cout) in cfg.layers() {
        params.insert(format!("{name}.weight"), he_uniform(&[cout, cin, k, k], cin * k * k, &mut rng));
        params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }
    Ok(MaskDecoder { cfg, seed, params })
}

impl MaskDecoder {
    pub fn from_params(cfg: UNetConfig, seed: u64, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        for (name, k, cin, cout) in cfg.layers() {
            let w = params.get(&format!("{name}.weight"));
            let b = params.get(&format!("{name}.bias"));
            ensure!(
                w.map(|t| t.shape() == [cout, cin, k, k]).unwrap_or(false)
                    && b.map(|t| t.shape() == [cout]).unwrap_or(false),
                Format,
                "mask decoder parameter `{name}` missing or misshapen"
            );
        }
        ensure!(
            params.len() == cfg.layers().len() * 2,
            Format,
            "mask decoder has unexpected extra parameters"
        );
        Ok(Self { cfg, seed, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        ensure!(
            shape.len() == 3 && shape[0] == self.cfg.in_channels,
            Contract,
            "decoder expects {} input channels, got shape {:?}",
            self.cfg.in_channels,
            shape
        );
        ensure!(
            shape[1] % 8 == 0 && shape[2] % 8 == 0 && shape[1] > 0 && shape[2] > 0,
            Contract,
            "spatial size {}x{} must be divisible by 8",
            shape[1],
            shape[2]
        );
        Ok(())
    }

    /// Differentiable forward: `input [C, H, W]` → logits `[1, H, W]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: Var) -> Result<Var> {
        self.check_input(tape.shape(input))?;
        let conv = |tape: &mut Tape, x: Var, name: &str, stride: usize, act: bool| {
            let y = tape.conv2d(x, p.var(&format!("{name}.weight")), p.var(&format!("{name}.bias")), stride);
            if act {
                tape.gelu(y)
            } else {
                y
            }
        };
        let up = |tape: &mut Tape, x: Var| {
            let s = tape.shape(x);
            let size = (s[1] * 2, s[2] * 2);
            tape.resize_bilinear(x, size)
        };

        let e1 = conv(tape, input, "enc1.down", 2, true);
        let e1 = conv(tape, e1, "enc1.conv", 1, true);
        let e2 = conv(tape, e1, "enc2.down", 2, true);
        let e2 = conv(tape, e2, "enc2.conv", 1, true);
        let e3 = conv(tape, e2, "enc3.down", 2, true);
        let e3 = conv(tape, e3, "enc3.conv", 1, true);

        let mut x = e3;
        for (stage, skip) in [("dec3", e2), ("dec2", e1), ("dec1", input)] {
            let u = up(tape, x);
            let cat = tape.concat0(&[u, skip]);
            let y = conv(tape, cat, &format!("{stage}.conv_a"), 1, true);
            x = conv(tape, y, &format!("{stage}.conv_b"), 1, true);
        }
        Ok(conv(tape, x, "head", 1, false))
    }

    pub fn decode(&self, stack: &AttentionStack) -> Result<MaskLogits> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let input = tape.constant(stack.maps.clone());
        let out = self.forward(&mut tape, &p, input)?;
        let (h, w) = stack.size();
        Ok(MaskLogits {
            grid: tape.value(out).clone().reshape(&[h, w])?,
            source_span: stack.span.clone(),
        })
    }

    /// Decodes each stack independently.
    pub fn decode_batch(&self, stacks: &[AttentionStack]) -> Result<Vec<MaskLogits>> {
        stacks.iter().map(|s| self.decode(s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::MergeMode;
    use crate::nn::gradcheck::check_params;
    use rand::Rng;

    fn stack(c: usize, size: usize, seed: u64) -> AttentionStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * size * size).map(|_| rng.random::<f64>() * 0.05).collect();
        AttentionStack {
            maps: Tensor::from_parts(&[c, size, size], data),
            merge: MergeMode::Average,
            normalized: true,
            span: 0..1,
            layers: vec![0],
        }
    }

    #[test]
    fn desk_param_count_matches_tally() {
        let cfg = UNetConfig::desk(4);
        let d = build_unet(cfg.clone(), 0).unwrap();
        assert_eq!(d.params().num_scalars(), cfg.param_count());
        assert_eq!(cfg.param_count(), 86_369);
    }

    #[test]
    fn paper_preset_near_eight_million() {
        let cfg = UNetConfig::paper_8m();
        let tally: usize = cfg.layers().iter().map(|(_, k, i, o)| k * k * i * o + o).sum();
        assert_eq!(tally, cfg.param_count());
        assert_eq!(cfg.param_count(), 8_022_273);
    }

    #[test]
    fn output_shape_and_determinism() {
        let a = build_unet(UNetConfig::desk(4), 3).unwrap();
        let b = build_unet(UNetConfig::desk(4), 3).unwrap();
        assert_eq!(a, b);
        let s = stack(4, 64, 1);
        let l = a.decode(&s).unwrap();
        assert_eq!(l.grid.shape(), &[64, 64]);
        assert_eq!(l, b.decode(&s).unwrap());
        assert!(l.grid.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batch_items_are_independent() {
        let d = build_unet(UNetConfig::desk(4), 3).unwrap();
        let s = stack(4, 16, 2);
        let out = d.decode_batch(&[s.clone(), s.clone()]).unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(out[0], d.decode(&s).unwrap());
    }

    #[test]
    fn rejects_channel_and_size_mismatch() {
        let d = build_unet(UNetConfig::desk(4), 3).unwrap();
        assert!(matches!(d.decode(&stack(3, 16, 0)), Err(crate::Error::Contract(_))));
        assert!(matches!(d.decode(&stack(4, 12, 0)), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn channels_are_not_symmetric() {
        let d = build_unet(UNetConfig::desk(4), 11).unwrap();
        let s = stack(4, 16, 5);
        let base = d.decode(&s).unwrap();
        let mut swapped = s.clone();
        let n = 16 * 16;
        let data = swapped.maps.data_mut();
        for i in 0..n {
            data.swap(i, n + i);
        }
        assert!(d.decode(&swapped).unwrap().grid.max_abs_diff(&base.grid) > 0.0);
    }

    #[test]
    fn binarize_is_strict() {
        let l = MaskLogits {
            grid: Tensor::from_parts(&[1, 3], vec![-1.0, 0.0, 1.0]),
            source_span: 0..1,
        };
        assert_eq!(binarize(&l).data, vec![false, false, true]);
        let zeros = MaskLogits {
            grid: Tensor::zeros(&[4, 4]),
            source_span: 0..1,
        };
        assert_eq!(binarize(&zeros).count(), 0);
        let scaled = MaskLogits {
            grid: l.grid.map(|v| v * 5.0),
            source_span: 0..1,
        };
        assert_eq!(binarize(&scaled), binarize(&l));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let d = build_unet(UNetConfig::desk(4), 9).unwrap();
        let s = stack(4, 16, 6);
        let target = Tensor::from_parts(&[16, 16], (0..256).map(|i| ((i / 16) < 8) as u8 as f64).collect());
        let report = check_params(d.params(), 10, 1, 1e-3, &|tape, p| {
            let x = tape.constant(s.maps.clone());
            let out = d.forward(tape, p, x).unwrap();
            let bce = tape.bce_with_logits(out, &target);
            let dice = tape.dice_loss(out, &target, 1.0);
            tape.add(bce, dice)
        });
        assert_eq!(report.checked, 10);
        assert!(report.max_rel_err < 1e-3, "{:?}", report.samples);
    }
}

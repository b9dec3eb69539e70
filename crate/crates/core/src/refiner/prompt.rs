//! Prompt encoders: box corners, text embeddings, and the mask bounding box.

use std::f64::consts::PI;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::BinaryMask;
use crate::error::{ensure, Error, Result};
use crate::host::HostForwardRecord;
use crate::image::PixelBox;
use crate::nn::{Bound, ParamStore, Tape, Var};
use crate::tensor::Tensor;

/// Minimal half-open box around the true pixels.
pub fn bbox_from_mask(mask: &BinaryMask) -> Result<PixelBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(Error::EmptyMask);
    }
    Ok(PixelBox::new(x0, y0, x1, y1))
}

/// Random Fourier features of a point in `[0, 1]²`.
///
/// Coordinates map to `[-1, 1]`, project through a fixed gaussian `[2, C/2]`,
/// scale by 2π, and emit `[sin ‖ cos]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierEncoding {
    gaussian: Tensor,
}

impl FourierEncoding {
    pub fn new(embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            gaussian: Tensor::randn(&[2, embed_dim / 2], 1.0, &mut rng),
        }
    }

    pub fn from_gaussian(gaussian: Tensor) -> Result<Self> {
        ensure!(
            gaussian.shape().len() == 2 && gaussian.shape()[0] == 2,
            Format,
            "positional gaussian must be [2, C/2], got {:?}",
            gaussian.shape()
        );
        Ok(Self { gaussian })
    }

    pub fn gaussian(&self) -> &Tensor {
        &self.gaussian
    }

    pub fn dim(&self) -> usize {
        self.gaussian.shape()[1] * 2
    }

    pub fn encode(&self, x: f64, y: f64) -> Vec<f64> {
        let half = self.gaussian.shape()[1];
        let g = self.gaussian.data();
        let (cx, cy) = (2.0 * x - 1.0, 2.0 * y - 1.0);
        let mut out = vec![0.0; 2 * half];
        for j in 0..half {
            let p = 2.0 * PI * (cx * g[j] + cy * g[half + j]);
            out[j] = p.sin();
            out[half + j] = p.cos();
        }
        out
    }

    /// Encoding of every cell centre of an `h × w` grid, `[h·w, C]` row-major.
    pub fn grid(&self, h: usize, w: usize) -> Tensor {
        let mut data = Vec::with_capacity(h * w * self.dim());
        for y in 0..h {
            for x in 0..w {
                data.extend(self.encode((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64));
            }
        }
        Tensor::from_parts(&[h * w, self.dim()], data)
    }

    /// The two normalised corner encodings of `b`, `[2, C]`, without type embeddings.
    pub fn box_corners(&self, b: PixelBox, (h, w): (usize, usize)) -> Result<Tensor> {
        ensure!(
            b.x1 > b.x0 && b.y1 > b.y0,
            InvalidArgument,
            "degenerate box {b:?}"
        );
        ensure!(
            b.x1 <= w && b.y1 <= h,
            InvalidArgument,
            "box {b:?} exceeds image {h}x{w}"
        );
        let mut data = self.encode(b.x0 as f64 / w as f64, b.y0 as f64 / h as f64);
        data.extend(self.encode(b.x1 as f64 / w as f64, b.y1 as f64 / h as f64));
        Ok(Tensor::from_parts(&[2, self.dim()], data))
    }
}

/// Learned layer mix plus a linear projection `d → C`.
///
/// Entries: `layer_scalars [M]`, `proj.weight [C, d]`, `proj.bias [C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPromptWeights {
    params: ParamStore,
}

impl TextPromptWeights {
    pub fn new(num_layers: usize, hidden_dim: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        ensure!(
            num_layers > 0 && hidden_dim > 0 && embed_dim > 0,
            InvalidArgument,
            "text prompt dimensions must be positive"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.insert("layer_scalars", Tensor::zeros(&[num_layers]));
        params.insert(
            "proj.weight",
            Tensor::uniform(&[embed_dim, hidden_dim], (1.0 / hidden_dim as f64).sqrt(), &mut rng),
        );
        params.insert("proj.bias", Tensor::zeros(&[embed_dim]));
        Ok(Self { params })
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let shape = |n: &str| params.get(n).map(|t| t.shape().to_vec());
        let (Some(s), Some(w), Some(b)) = (shape("layer_scalars"), shape("proj.weight"), shape("proj.bias")) else {
            return Err(Error::Format("text prompt weights incomplete".into()));
        };
        ensure!(
            s.len() == 1 && w.len() == 2 && b == [w[0]] && params.len() == 3,
            Format,
            "text prompt weights misshapen"
        );
        Ok(Self { params })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.params.get("layer_scalars").unwrap().len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.params.get("proj.weight").unwrap().shape()[1]
    }

    pub fn embed_dim(&self) -> usize {
        self.params.get("proj.weight").unwrap().shape()[0]
    }

    /// `softmax(layer_scalars)`.
    pub fn mixing_weights(&self) -> Vec<f64> {
        let mut w = self.params.get("layer_scalars").unwrap().data().to_vec();
        crate::tensor::softmax_in_place(&mut w);
        w
    }

    /// `embeds [M, d]` → `[1, C]` on the tape.
    pub fn token(&self, tape: &mut Tape, p: &Bound, embeds: Var) -> Result<Var> {
        let s = tape.shape(embeds);
        ensure!(
            s == [self.num_layers(), self.hidden_dim()],
            Contract,
            "text embeddings {:?}, expected [{}, {}]",
            s,
            self.num_layers(),
            self.hidden_dim()
        );
        let scalars = tape.reshape(p.var("layer_scalars"), &[1, self.num_layers()]);
        let mix = tape.softmax_rows(scalars);
        let pooled = tape.matmul(mix, embeds);
        Ok(tape.linear(pooled, p.var("proj.weight"), p.var("proj.bias")))
    }

    pub fn encode(&self, embeds: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let e = tape.constant(embeds.clone());
        let out = self.token(&mut tape, &p, e)?;
        Ok(tape.value(out).clone())
    }
}

/// Per-layer hidden states averaged over the span's tokens, `[M, d]`.
pub fn span_layer_embeddings(rec: &HostForwardRecord, span: &Range<usize>) -> Result<Tensor> {
    let s = rec.hidden_states.shape();
    let (m, seq, d) = (s[0], s[1], s[2]);
    ensure!(
        span.start < span.end && span.end <= seq,
        InvalidArgument,
        "span {span:?} outside sequence of length {seq}"
    );
    let n = (span.end - span.start) as f64;
    let mut out = vec![0.0; m * d];
    for layer in 0..m {
        let row = &mut out[layer * d..(layer + 1) * d];
        for i in span.clone() {
            for (o, h) in row.iter_mut().zip(rec.hidden(layer, i)) {
                *o += h;
            }
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(Tensor::from_parts(&[m, d], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_params;
    use rand::Rng;

    #[test]
    fn one_pixel_and_full_boxes() {
        let mut m = BinaryMask::empty(5, 6);
        m.data[2 * 6 + 3] = true;
        assert_eq!(bbox_from_mask(&m).unwrap(), PixelBox::new(3, 2, 4, 3));
        let full = BinaryMask::new(64, 64, vec![true; 64 * 64]);
        assert_eq!(bbox_from_mask(&full).unwrap(), PixelBox::new(0, 0, 64, 64));
        assert!(matches!(bbox_from_mask(&BinaryMask::empty(3, 3)), Err(Error::EmptyMask)));
    }

    #[test]
    fn random_boxes_are_minimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
            let p = rng.random::<f64>() * 0.3;
            let data: Vec<bool> = (0..h * w).map(|_| rng.random::<f64>() < p).collect();
            let m = BinaryMask::new(h, w, data);
            let Ok(b) = bbox_from_mask(&m) else {
                assert_eq!(m.count(), 0);
                continue;
            };
            let inside = |y: usize, x: usize| x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1;
            let pts: Vec<(usize, usize)> = (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .filter(|&(y, x)| m.get(y, x))
                .collect();
            assert!(pts.iter().all(|&(y, x)| inside(y, x)));
            assert!(pts.iter().any(|&(_, x)| x == b.x0));
            assert!(pts.iter().any(|&(_, x)| x + 1 == b.x1));
            assert!(pts.iter().any(|&(y, _)| y == b.y0));
            assert!(pts.iter().any(|&(y, _)| y + 1 == b.y1));
        }
    }

    #[test]
    fn fourier_extremes_and_translation() {
        let pe = FourierEncoding::new(16, 2);
        let full = pe.box_corners(PixelBox::new(0, 0, 64, 64), (64, 64)).unwrap();
        assert_eq!(full.row(0), pe.encode(0.0, 0.0).as_slice());
        assert_eq!(full.row(1), pe.encode(1.0, 1.0).as_slice());
        let a = pe.box_corners(PixelBox::new(4, 4, 20, 20), (64, 64)).unwrap();
        let b = pe.box_corners(PixelBox::new(7, 7, 23, 23), (64, 64)).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-3);
        assert_eq!(FourierEncoding::new(16, 2), pe);
        assert!(pe.box_corners(PixelBox::new(5, 5, 5, 9), (64, 64)).is_err());
        assert!(pe.box_corners(PixelBox::new(5, 5, 65, 9), (64, 64)).is_err());
    }

    #[test]
    fn text_token_limits() {
        let tw = TextPromptWeights::new(3, 5, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let embeds = Tensor::randn(&[3, 5], 1.0, &mut rng);

        let project = |v: &[f64]| -> Vec<f64> {
            let w = tw.params().get("proj.weight").unwrap();
            (0..4).map(|o| w.row(o).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
        };
        let mean: Vec<f64> = (0..5).map(|j| (0..3).map(|l| embeds.data()[l * 5 + j]).sum::<f64>() / 3.0).collect();
        let got = tw.encode(&embeds).unwrap();
        for (g, e) in got.data().iter().zip(project(&mean)) {
            assert!((g - e).abs() < 1e-12);
        }

        let mut peaked = tw.clone();
        peaked.params_mut().get_mut("layer_scalars").unwrap().data_mut()[1] = 30.0;
        let got = peaked.encode(&embeds).unwrap();
        for (g, e) in got.data().iter().zip(project(embeds.row(1))) {
            assert!((g - e).abs() < 1e-4);
        }
        let total: f64 = peaked.mixing_weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-7);

        let mut biased = tw.clone();
        biased.params_mut().get_mut("proj.bias").unwrap().data_mut().copy_from_slice(&[1.0, -2.0, 0.5, 3.0]);
        let out = biased.encode(&Tensor::zeros(&[3, 5])).unwrap();
        assert_eq!(out.data(), &[1.0, -2.0, 0.5, 3.0]);

        assert!(matches!(tw.encode(&Tensor::zeros(&[2, 5])), Err(Error::Contract(_))));
    }

    #[test]
    fn text_token_gradients() {
        let tw = TextPromptWeights::new(3, 5, 4, 1).unwrap();
        let mut tw2 = tw.clone();
        tw2.params_mut().get_mut("layer_scalars").unwrap().data_mut().copy_from_slice(&[0.3, -0.2, 0.7]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let embeds = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let r = check_params(tw2.params(), 10, 2, 1e-3, &|tape, p| {
            let e = tape.constant(embeds.clone());
            let t = tw2.token(tape, p, e).unwrap();
            let sq = tape.mul(t, t);
            tape.sum(sq)
        });
        assert!(r.max_rel_err < 1e-3, "{:?}", r.samples);
    }
}

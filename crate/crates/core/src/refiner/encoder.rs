//! Frozen image encoders producing `[C, 64, 64]` embeddings for the refiner.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::ImageArray;
use crate::nn::params::he_uniform;
use crate::nn::{ParamStore, Tape};
use crate::tensor::Tensor;

/// Side length of the image fed to the toy encoder.
pub const ENCODER_INPUT: usize = 1024;
/// Side length of the produced embedding grid.
pub const EMBED_GRID: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageEncoderKind {
    #[default]
    ToyFrozen,
    ExternalEmbeddingFile,
}

/// Four seeded stride-2 convs (kernel 2) from a 1024² RGB image to `[C, 64, 64]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyImageEncoder {
    embed_dim: usize,
    params: ParamStore,
}

impl ToyImageEncoder {
    pub fn new(embed_dim: usize, seed: u64) -> Result<Self> {
        ensure!(
            embed_dim >= 4 && embed_dim % 4 == 0,
            InvalidArgument,
            "encoder width {embed_dim} must be a positive multiple of 4"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (i, (cin, cout)) in Self::widths(embed_dim).into_iter().enumerate() {
            params.insert(format!("conv{i}.weight"), he_uniform(&[cout, cin, 2, 2], cin * 4, &mut rng));
            params.insert(format!("conv{i}.bias"), Tensor::zeros(&[cout]));
        }
        Ok(Self { embed_dim, params })
    }

    fn widths(c: usize) -> [(usize, usize); 4] {
        [(3, c / 4), (c / 4, c / 2), (c / 2, c), (c, c)]
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn embed(&self, image: &ImageArray) -> Tensor {
        let resized = image.resize(ENCODER_INPUT, ENCODER_INPUT);
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let mut x = tape.constant(Tensor::from_parts(
            &[3, ENCODER_INPUT, ENCODER_INPUT],
            resized.to_planar(),
        ));
        for i in 0..4 {
            x = tape.conv2d(x, p.var(&format!("conv{i}.weight")), p.var(&format!("conv{i}.bias")), 2);
            if i < 3 {
                x = tape.gelu(x);
            }
        }
        tape.value(x).clone()
    }
}

/// Either the toy encoder or precomputed embeddings keyed by image id.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageEncoder {
    Toy(ToyImageEncoder),
    External(BTreeMap<String, Tensor>),
}

impl ImageEncoder {
    pub fn kind(&self) -> ImageEncoderKind {
        match self {
            Self::Toy(_) => ImageEncoderKind::ToyFrozen,
            Self::External(_) => ImageEncoderKind::ExternalEmbeddingFile,
        }
    }

    /// Builds an external table from arrays named `image_embedding[<id>]`.
    pub fn external<'a>(arrays: impl IntoIterator<Item = (&'a str, &'a Tensor)>, embed_dim: usize) -> Result<Self> {
        let mut table = BTreeMap::new();
        for (name, t) in arrays {
            let Some(id) = name.strip_prefix("image_embedding[").and_then(|r| r.strip_suffix(']')) else {
                continue;
            };
            ensure!(
                t.shape() == [embed_dim, EMBED_GRID, EMBED_GRID],
                Format,
                "embedding `{id}` has shape {:?}, expected [{embed_dim}, 64, 64]",
                t.shape()
            );
            table.insert(id.to_string(), t.clone());
        }
        Ok(Self::External(table))
    }

    /// `id` is required for external embeddings and ignored by the toy encoder.
    pub fn embed(&self, image: &ImageArray, id: Option<&str>) -> Result<Tensor> {
        match self {
            Self::Toy(enc) => Ok(enc.embed(image)),
            Self::External(table) => {
                let id = id.ok_or_else(|| Error::InvalidArgument("external embeddings need an image id".into()))?;
                table
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("no embedding for image `{id}`")))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_encoder_shape_and_determinism() {
        let enc = ToyImageEncoder::new(8, 5).unwrap();
        let img = ImageArray::filled(64, 64, [0.2, 0.4, 0.9]);
        let e = enc.embed(&img);
        assert_eq!(e.shape(), &[8, 64, 64]);
        assert_eq!(e, ToyImageEncoder::new(8, 5).unwrap().embed(&img));
        assert!(e.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn external_lookup() {
        let t = Tensor::zeros(&[4, 64, 64]);
        let enc = ImageEncoder::external([("image_embedding[a]", &t), ("other", &t)], 4).unwrap();
        let img = ImageArray::filled(8, 8, [0.0; 3]);
        assert_eq!(enc.embed(&img, Some("a")).unwrap(), t);
        assert!(enc.embed(&img, Some("b")).is_err());
        assert!(enc.embed(&img, None).is_err());
        let bad = Tensor::zeros(&[3, 64, 64]);
        assert!(ImageEncoder::external([("image_embedding[a]", &bad)], 4).is_err());
    }
}

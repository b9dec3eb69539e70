//! Every trainable head plus the frozen refiner image encoder, and their
//! checkpoint form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::StackConfig;
use crate::checkpoint::Archive;
use crate::decoder::{build_unet, MaskDecoder, UNetConfig};
use crate::error::{ensure, Error, Result};
use crate::host::ToyLmmConfig;
use crate::refiner::{
    ImageEncoder, ImageEncoderKind, MaskRefiner, PromptSet, RefinerConfig, TextPromptWeights, ToyImageEncoder,
};
use crate::selector::{KeywordSelector, SelectorConfig};

pub const CHECKPOINT_FORMAT: &str = "flmm-heads";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadsConfig {
    pub host: ToyLmmConfig,
    pub stack: StackConfig,
    pub decoder: UNetConfig,
    pub refiner: RefinerConfig,
    pub selector: SelectorConfig,
    pub prompts: PromptSet,
    pub seed: u64,
}

impl HeadsConfig {
    /// Desk defaults sized to `host`.
    pub fn desk(host: ToyLmmConfig, seed: u64) -> Result<Self> {
        let stack = StackConfig::default();
        let channels = stack.channels(host.dims.num_layers, host.dims.num_heads)?;
        Ok(Self {
            decoder: UNetConfig::desk(channels),
            host,
            stack,
            refiner: RefinerConfig::default(),
            selector: SelectorConfig::default(),
            prompts: PromptSet::default(),
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.host.validate()?;
        self.decoder.validate()?;
        self.refiner.validate()?;
        self.selector.validate()?;
        let channels = self.stack.channels(self.host.dims.num_layers, self.host.dims.num_heads)?;
        ensure!(
            channels == self.decoder.in_channels,
            InvalidArgument,
            "stack yields {channels} channels but the decoder expects {}",
            self.decoder.in_channels
        );
        let (h, w) = self.stack.target;
        ensure!(
            h > 0 && w > 0 && h % 8 == 0 && w % 8 == 0,
            InvalidArgument,
            "stack size {h}x{w} must be a positive multiple of 8"
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub cfg: HeadsConfig,
    pub decoder: MaskDecoder,
    pub refiner: MaskRefiner,
    pub text: TextPromptWeights,
    pub selector: KeywordSelector,
    pub image_encoder: ImageEncoder,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    format: String,
    version: u32,
    config: HeadsConfig,
    /// Refiner token order, fixed.
    token_order: Vec<String>,
    text_projection_bias: bool,
}

const TOKEN_ORDER: [&str; 4] = ["mask", "box0", "box1", "text"];
const PE_GAUSSIAN: &str = "mask_refiner_buffers/pe_gaussian";

impl Heads {
    pub fn new(cfg: HeadsConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.seed;
        let dims = &cfg.host.dims;
        let image_encoder = match cfg.refiner.image_encoder {
            ImageEncoderKind::ToyFrozen => ImageEncoder::Toy(ToyImageEncoder::new(cfg.refiner.embed_dim, s ^ 0x11)?),
            ImageEncoderKind::ExternalEmbeddingFile => ImageEncoder::External(Default::default()),
        };
        Ok(Self {
            decoder: build_unet(cfg.decoder.clone(), s)?,
            refiner: MaskRefiner::new(cfg.refiner.clone(), s.wrapping_add(1))?,
            text: TextPromptWeights::new(dims.num_layers, dims.hidden_dim, cfg.refiner.embed_dim, s.wrapping_add(2))?,
            selector: KeywordSelector::new(dims.hidden_dim, s.wrapping_add(3)),
            image_encoder,
            cfg,
        })
    }

    pub fn to_archive(&self) -> Archive {
        let meta = Metadata {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            token_order: TOKEN_ORDER.iter().map(|s| s.to_string()).collect(),
            text_projection_bias: true,
        };
        let mut a = Archive::new(serde_json::to_value(meta).expect("metadata serialises"));
        a.put_store("mask_decoder", self.decoder.params());
        a.put_store("mask_refiner", self.refiner.params());
        a.arrays.insert(PE_GAUSSIAN.into(), self.refiner.positional().gaussian().clone());
        a.put_store("text_prompt_weights", self.text.params());
        a.put_store("keyword_selector", self.selector.params());
        if let ImageEncoder::Toy(enc) = &self.image_encoder {
            a.put_store("image_encoder", enc.params());
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let meta: Metadata =
            serde_json::from_value(a.metadata.clone()).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        ensure!(
            meta.format == CHECKPOINT_FORMAT && meta.version == CHECKPOINT_VERSION,
            Format,
            "unsupported checkpoint {} v{}",
            meta.format,
            meta.version
        );
        let cfg = meta.config;
        cfg.validate()?;
        let decoder = MaskDecoder::from_params(cfg.decoder.clone(), cfg.seed, a.take_store("mask_decoder"))?;
        let refiner = MaskRefiner::from_parts(cfg.refiner.clone(), a.take_store("mask_refiner"), a.array(PE_GAUSSIAN)?.clone())?;
        let text = TextPromptWeights::from_params(a.take_store("text_prompt_weights"))?;
        let selector = KeywordSelector::from_params(a.take_store("keyword_selector"))?;
        let dims = &cfg.host.dims;
        ensure!(
            text.num_layers() == dims.num_layers
                && text.hidden_dim() == dims.hidden_dim
                && text.embed_dim() == cfg.refiner.embed_dim
                && selector.hidden_dim() == dims.hidden_dim,
            Format,
            "checkpoint head shapes disagree with the host config"
        );
        // The toy encoder is rebuilt from its seed and compared, so a tampered
        // or mismatched encoder is caught on load.
        let image_encoder = match cfg.refiner.image_encoder {
            ImageEncoderKind::ToyFrozen => {
                let enc = ToyImageEncoder::new(cfg.refiner.embed_dim, cfg.seed ^ 0x11)?;
                ensure!(
                    &a.take_store("image_encoder") == enc.params(),
                    Format,
                    "stored image encoder differs from its seeded weights"
                );
                ImageEncoder::Toy(enc)
            }
            ImageEncoderKind::ExternalEmbeddingFile => ImageEncoder::External(Default::default()),
        };
        Ok(Self {
            cfg,
            decoder,
            refiner,
            text,
            selector,
            image_encoder,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Replaces the image encoder with embeddings from an archive of
    /// `image_embedding[<id>]` arrays.
    pub fn attach_external_embeddings(&mut self, archive: &Archive) -> Result<()> {
        self.image_encoder = ImageEncoder::external(
            archive.arrays.iter().map(|(k, v)| (k.as_str(), v)),
            self.cfg.refiner.embed_dim,
        )?;
        self.cfg.refiner.image_encoder = ImageEncoderKind::ExternalEmbeddingFile;
        Ok(())
    }

    /// Max abs difference over every trainable parameter.
    pub fn max_param_diff(&self, other: &Heads) -> f64 {
        let pairs = [
            (self.decoder.params(), other.decoder.params()),
            (self.refiner.params(), other.refiner.params()),
            (self.text.params(), other.text.params()),
            (self.selector.params(), other.selector.params()),
        ];
        let mut worst: f64 = 0.0;
        for (a, b) in pairs {
            for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
                if na != nb || ta.shape() != tb.shape() {
                    return f64::INFINITY;
                }
                worst = worst.max(ta.max_abs_diff(tb));
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Heads {
        let mut host = ToyLmmConfig::default();
        host.dims.grid = (4, 4);
        let mut cfg = HeadsConfig::desk(host, 3).unwrap();
        cfg.refiner.embed_dim = 16;
        Heads::new(cfg).unwrap()
    }

    #[test]
    fn archive_round_trip() {
        let h = small();
        let a = h.to_archive();
        let bytes = a.to_bytes();
        let back = Heads::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, h);
        assert_eq!(back.to_archive().to_bytes(), bytes);
        assert_eq!(h.max_param_diff(&back), 0.0);
    }

    #[test]
    fn entries_are_named_per_head() {
        let a = small().to_archive();
        for prefix in ["mask_decoder/", "mask_refiner/", "text_prompt_weights/", "keyword_selector/", "image_encoder/"] {
            assert!(a.arrays.keys().any(|k| k.starts_with(prefix)), "{prefix}");
        }
        assert_eq!(a.metadata["format"], CHECKPOINT_FORMAT);
    }

    #[test]
    fn tampered_encoder_rejected() {
        let mut a = small().to_archive();
        a.arrays.get_mut("image_encoder/conv0.bias").unwrap().data_mut()[0] = 1.0;
        assert!(Heads::from_archive(&a).is_err());
    }

    #[test]
    fn mismatched_channels_rejected() {
        let h = small();
        let mut cfg = h.cfg.clone();
        cfg.decoder.in_channels += 1;
        assert!(Heads::new(cfg).is_err());
    }
}

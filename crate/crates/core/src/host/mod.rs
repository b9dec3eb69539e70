//! Contract between the grounding heads and a frozen multimodal host model.
//!
//! A host turns `(conversation, image)` into a [`HostForwardRecord`]: the
//! post-softmax causal attention of every layer and head plus per-layer
//! hidden states. Real backbones are wrapped externally by implementing
//! [`HostModel`]; [`conformance::check_adapter`] validates such wrappers.
//! [`ToyLmm`] is a small seeded decoder-only transformer used for tests and
//! desk-scale training.

pub mod conformance;
pub mod tokenizer;
mod toy;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use toy::{ToyLmm, ToyLmmConfig};

use crate::error::{ensure, Result};
use crate::image::ImageArray;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostModelSpec {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    /// Image feature grid `(h, w)` after the vision encoder and projector.
    pub grid: (usize, usize),
    pub max_sequence_len: usize,
}

impl HostModelSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.num_layers >= 1 && self.num_heads >= 1 && self.hidden_dim >= 1,
            InvalidArgument,
            "layers, heads and hidden_dim must be positive: {self:?}"
        );
        ensure!(
            self.grid.0 >= 1 && self.grid.1 >= 1,
            InvalidArgument,
            "image grid must be positive: {:?}",
            self.grid
        );
        ensure!(
            self.grid.0 * self.grid.1 < self.max_sequence_len,
            InvalidArgument,
            "image grid {:?} does not fit in max_sequence_len {}",
            self.grid,
            self.max_sequence_len
        );
        Ok(())
    }

    pub fn image_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// `M·N`, the channel count of a full attention stack.
    pub fn num_maps(&self) -> usize {
        self.num_layers * self.num_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Image,
}

/// A tokenized single-turn conversation with exactly one image span.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedConversation {
    pub token_ids: Vec<u32>,
    pub roles: Vec<Role>,
    /// Char offsets into `raw_text`; `None` for image and special tokens.
    pub offsets: Vec<Option<(usize, usize)>>,
    pub image_span: Range<usize>,
    pub raw_text: String,
    /// Char index in `raw_text` where the assistant answer starts.
    pub answer_start: usize,
}

impl TokenizedConversation {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// The assistant answer as a string.
    pub fn answer(&self) -> String {
        self.raw_text.chars().skip(self.answer_start).collect()
    }

    pub fn assistant_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == Role::Assistant)
            .map(|(i, _)| i)
    }

    /// Token interval covering an answer-relative char interval.
    ///
    /// Every assistant token whose chars overlap `[start, end)` is included,
    /// so the detokenized span always contains the char span.
    pub fn char_span_to_tokens(&self, start: usize, end: usize) -> Option<Range<usize>> {
        let (a, b) = (self.answer_start + start, self.answer_start + end);
        let mut hit: Option<Range<usize>> = None;
        for i in self.assistant_positions() {
            if let Some((s, e)) = self.offsets[i] {
                if s < b && a < e {
                    hit = Some(match hit {
                        Some(r) => r.start..i + 1,
                        None => i..i + 1,
                    });
                }
            }
        }
        hit
    }

    /// Answer-relative char interval covered by a token interval.
    pub fn tokens_to_char_span(&self, tokens: Range<usize>) -> Option<(usize, usize)> {
        let first = tokens.clone().find_map(|i| self.offsets[i])?;
        let last = tokens.rev().find_map(|i| self.offsets[i])?;
        Some((
            first.0.saturating_sub(self.answer_start),
            last.1.saturating_sub(self.answer_start),
        ))
    }

    /// Checks the structural invariants against a host grid.
    pub fn validate(&self, spec: &HostModelSpec) -> Result<()> {
        let n = self.token_ids.len();
        ensure!(
            self.roles.len() == n && self.offsets.len() == n,
            Contract,
            "token, role and offset arrays differ in length"
        );
        ensure!(
            self.image_span.len() == spec.image_tokens(),
            Contract,
            "image span holds {} tokens but the host grid {:?} needs {}",
            self.image_span.len(),
            spec.grid,
            spec.image_tokens()
        );
        ensure!(self.image_span.end <= n, Contract, "image span past end of sequence");
        let image_roles = self.roles.iter().filter(|r| **r == Role::Image).count();
        ensure!(
            image_roles == self.image_span.len()
                && self.roles[self.image_span.clone()].iter().all(|r| *r == Role::Image),
            Contract,
            "image roles must occupy exactly the image span"
        );
        ensure!(
            self.assistant_positions().all(|i| i >= self.image_span.end),
            Contract,
            "assistant tokens must follow the image"
        );
        if n > spec.max_sequence_len {
            return Err(crate::Error::SequenceTooLong {
                len: n,
                max: spec.max_sequence_len,
            });
        }
        Ok(())
    }
}

/// Everything captured from one forward pass of a frozen host.
#[derive(Clone, Debug, PartialEq)]
pub struct HostForwardRecord {
    /// `[M, N, S, S]` post-softmax causal attention.
    pub attention: Tensor,
    /// `[M, S, d]` output of every layer.
    pub hidden_states: Tensor,
    /// `[S, d]` final hidden states (after the output norm).
    pub final_hidden: Tensor,
}

impl HostForwardRecord {
    pub fn seq_len(&self) -> usize {
        self.final_hidden.shape()[0]
    }

    /// Attention row `i` of `(layer, head)` over all `S` keys.
    pub fn attention_row(&self, layer: usize, head: usize, i: usize) -> &[f64] {
        let s = self.attention.shape();
        let (heads, seq) = (s[1], s[2]);
        let base = ((layer * heads + head) * seq + i) * seq;
        &self.attention.data()[base..base + seq]
    }

    /// Hidden state of token `i` at `layer`.
    pub fn hidden(&self, layer: usize, i: usize) -> &[f64] {
        let s = self.hidden_states.shape();
        let (seq, d) = (s[1], s[2]);
        &self.hidden_states.data()[(layer * seq + i) * d..][..d]
    }
}

/// A frozen multimodal model the grounding heads can read from.
///
/// Implementations must be deterministic: identical inputs give bit-identical
/// records. The adapter owns the chat template and locates the image span.
pub trait HostModel: Sync {
    fn spec(&self) -> &HostModelSpec;

    /// Formats `user_text` and `answer` with the host's chat template.
    fn build_conversation(&self, user_text: &str, answer: &str) -> Result<TokenizedConversation>;

    fn forward_capture(&self, conv: &TokenizedConversation, image: &ImageArray) -> Result<HostForwardRecord>;

    /// Greedy continuation of the assistant answer by `max_new` tokens.
    fn generate(
        &self,
        conv: &TokenizedConversation,
        image: &ImageArray,
        max_new: i64,
    ) -> Result<TokenizedConversation>;
}

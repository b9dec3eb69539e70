//! Word-level tokenizer for the toy host model.
//!
//! Alphanumeric runs are words, every other non-space character is its own
//! token. Known words get fixed ids; anything else hashes into the remaining
//! id range.

use crate::error::{ensure, Result};

pub const BOS_ID: u32 = 0;
pub const IMAGE_ID: u32 = 1;
const SPECIALS: [&str; 2] = ["<bos>", "<img>"];

/// Colour words understood by the toy world, with their RGB values.
pub const COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("magenta", [1.0, 0.0, 1.0]),
];

/// Neutral background: maps to the zero vector under the toy projector.
pub const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];

const WORDS: &[&str] = &[
    "user", "model", ":", ".", ",", ";", "?", "!", "-", "'", "describe", "the", "image", "a", "an",
    "and", "is", "are", "of", "in", "on", "with", "which", "object", "most", "relevant", "to",
    "question", "what", "color", "shape", "there", "two", "three", "left", "right", "top",
    "bottom", "circle", "square", "triangle", "circles", "squares", "triangles", "red", "green",
    "blue", "yellow", "cyan", "magenta", "sky", "ground", "grass", "man", "girl", "who",
    "smiling", "t", "short", "it", "this", "that", "background",
];

#[derive(Clone, Debug)]
pub struct ToyTokenizer {
    vocab_size: u32,
}

/// One token with its char offsets `[start, end)` in the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Piece {
    pub id: u32,
    pub start: usize,
    pub end: usize,
}

impl ToyTokenizer {
    pub fn new(vocab_size: usize) -> Result<Self> {
        ensure!(
            vocab_size > Self::num_known(),
            InvalidArgument,
            "vocab_size {vocab_size} must exceed the {} fixed tokens",
            Self::num_known()
        );
        Ok(Self {
            vocab_size: vocab_size as u32,
        })
    }

    pub fn num_known() -> usize {
        SPECIALS.len() + WORDS.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size as usize
    }

    pub fn word_id(&self, word: &str) -> u32 {
        let lower = word.to_lowercase();
        if let Some(i) = WORDS.iter().position(|w| *w == lower) {
            return (SPECIALS.len() + i) as u32;
        }
        // FNV-1a into the hash buckets above the fixed vocabulary.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in lower.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let known = Self::num_known() as u64;
        (known + h % (self.vocab_size as u64 - known)) as u32
    }

    /// Surface form of an id (hash buckets render as `<tN>`).
    pub fn id_text(&self, id: u32) -> String {
        let i = id as usize;
        if i < SPECIALS.len() {
            SPECIALS[i].to_string()
        } else if i < Self::num_known() {
            WORDS[i - SPECIALS.len()].to_string()
        } else {
            format!("<t{id}>")
        }
    }

    /// Tokenizes `text`; offsets count chars and are shifted by `char_base`.
    pub fn tokenize(&self, text: &str, char_base: usize) -> Vec<Piece> {
        let chars: Vec<char> = text.chars().collect();
        let mut pieces = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
            } else if c.is_alphanumeric() {
                let start = i;
                while i < chars.len() && chars[i].is_alphanumeric() {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                pieces.push(Piece {
                    id: self.word_id(&word),
                    start: char_base + start,
                    end: char_base + i,
                });
            } else {
                pieces.push(Piece {
                    id: self.word_id(&c.to_string()),
                    start: char_base + i,
                    end: char_base + i + 1,
                });
                i += 1;
            }
        }
        pieces
    }
}

pub fn color_rgb(word: &str) -> Option<[f32; 3]> {
    COLORS.iter().find(|(w, _)| *w == word).map(|(_, rgb)| *rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_words_and_punctuation_with_offsets() {
        let t = ToyTokenizer::new(256).unwrap();
        let p = t.tokenize("The man in blue T-short;", 10);
        let texts: Vec<String> = p.iter().map(|p| t.id_text(p.id)).collect();
        assert_eq!(texts, ["the", "man", "in", "blue", "t", "-", "short", ";"]);
        assert_eq!((p[0].start, p[0].end), (10, 13));
        assert_eq!((p[7].start, p[7].end), (33, 34));
    }

    #[test]
    fn unknown_words_hash_into_buckets() {
        let t = ToyTokenizer::new(256).unwrap();
        let id = t.word_id("zebra");
        assert!(id as usize >= ToyTokenizer::num_known() && id < 256);
        assert_eq!(id, t.word_id("Zebra"));
        assert!(ToyTokenizer::new(ToyTokenizer::num_known()).is_err());
    }
}

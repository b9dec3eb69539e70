//! Grounding samples, their JSON Lines form, RES→PNG conversion and the
//! synthetic shapes generator.

mod res;
mod rle;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

pub use res::{convert_res_file, convert_res_to_png, ResExpression, ResRecord, DESCRIBE_PROMPT, EXPRESSION_SEPARATOR};
pub use rle::{rle_decode, rle_encode, RleMask};
pub use synth::{synth_shapes, ShapeKind, SynthConfig};

use crate::decoder::BinaryMask;
use crate::error::{ensure, Error, Result};
use crate::image::ImageArray;

pub const USER_PREFIX: &str = "User: ";
pub const MODEL_MARKER: &str = " Model: ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Thing,
    Stuff,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plurality {
    Singular,
    Plural,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentFlags {
    pub kind: SegmentKind,
    pub number: Plurality,
}

impl Default for SegmentFlags {
    fn default() -> Self {
        Self {
            kind: SegmentKind::Thing,
            number: Plurality::Singular,
        }
    }
}

/// Answer-relative char interval `[char_start, char_end)` bound to a segment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpanAnnotation {
    pub char_start: usize,
    pub char_end: usize,
    pub segment_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineImage {
    pub height: usize,
    pub width: usize,
    /// Base64 of row-major RGB8 bytes.
    pub rgb8: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum ImageRef {
    /// PNG path, relative paths resolve against the JSONL file's directory.
    Path(String),
    Inline(InlineImage),
}

impl ImageRef {
    pub fn inline(image: &ImageArray) -> Self {
        Self::Inline(InlineImage {
            height: image.height(),
            width: image.width(),
            rgb8: B64.encode(image.to_rgb8()),
        })
    }

    pub fn load(&self, base: Option<&Path>) -> Result<ImageArray> {
        match self {
            Self::Inline(img) => {
                let bytes = B64
                    .decode(&img.rgb8)
                    .map_err(|e| Error::Format(format!("inline image is not base64: {e}")))?;
                ImageArray::from_rgb8(img.height, img.width, &bytes)
            }
            Self::Path(p) => {
                let path = PathBuf::from(p);
                let path = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path,
                };
                ImageArray::load_png(&path)
            }
        }
    }

    /// Pixel size if known without touching the filesystem.
    pub fn known_size(&self) -> Option<(usize, usize)> {
        match self {
            Self::Inline(img) => Some((img.height, img.width)),
            Self::Path(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundingSample {
    pub id: String,
    pub image: ImageRef,
    /// `User: <question> Model: <answer>`.
    pub conversation: String,
    pub spans: Vec<SpanAnnotation>,
    pub masks: BTreeMap<String, RleMask>,
    pub flags: BTreeMap<String, SegmentFlags>,
}

/// Splits a conversation into user text and answer.
pub fn split_conversation(text: &str) -> Result<(&str, &str)> {
    let rest = text
        .strip_prefix(USER_PREFIX)
        .ok_or_else(|| Error::Format(format!("conversation must start with `{USER_PREFIX}`")))?;
    let at = rest
        .find(MODEL_MARKER)
        .ok_or_else(|| Error::Format(format!("conversation lacks `{}`", MODEL_MARKER.trim())))?;
    Ok((&rest[..at], &rest[at + MODEL_MARKER.len()..]))
}

pub fn format_conversation(user: &str, answer: &str) -> String {
    format!("{USER_PREFIX}{user}{MODEL_MARKER}{answer}")
}

/// Substring by char interval.
pub fn char_slice(s: &str, start: usize, end: usize) -> String {
    s.chars().skip(start).take(end.saturating_sub(start)).collect()
}

impl GroundingSample {
    pub fn user_text(&self) -> Result<&str> {
        Ok(split_conversation(&self.conversation)?.0)
    }

    pub fn answer(&self) -> Result<&str> {
        Ok(split_conversation(&self.conversation)?.1)
    }

    pub fn span_text(&self, span: &SpanAnnotation) -> Result<String> {
        Ok(char_slice(self.answer()?, span.char_start, span.char_end))
    }

    pub fn mask(&self, segment_id: &str) -> Result<BinaryMask> {
        let rle = self
            .masks
            .get(segment_id)
            .ok_or_else(|| Error::Format(format!("sample `{}` has no mask `{segment_id}`", self.id)))?;
        rle_decode(rle)
    }

    pub fn flags_for(&self, segment_id: &str) -> SegmentFlags {
        self.flags.get(segment_id).copied().unwrap_or_default()
    }

    /// Checks spans, mask references and mask sizes.
    pub fn validate(&self) -> Result<()> {
        let answer_len = self.answer()?.chars().count();
        let mut size = self.image.known_size();
        for s in &self.spans {
            ensure!(
                s.char_start < s.char_end && s.char_end <= answer_len,
                Format,
                "span [{}, {}) of sample `{}` lies outside the {answer_len}-char answer",
                s.char_start,
                s.char_end,
                self.id
            );
            ensure!(
                self.masks.contains_key(&s.segment_id),
                Format,
                "span of sample `{}` references missing mask `{}`",
                self.id,
                s.segment_id
            );
        }
        for (id, rle) in &self.masks {
            rle.validate()?;
            let hw = (rle.height(), rle.width());
            match size {
                Some(expect) => ensure!(
                    hw == expect,
                    Format,
                    "mask `{id}` of sample `{}` is {:?}, image is {:?}",
                    self.id,
                    hw,
                    expect
                ),
                None => size = Some(hw),
            }
        }
        for id in self.flags.keys() {
            ensure!(
                self.masks.contains_key(id),
                Format,
                "flags of sample `{}` name unknown segment `{id}`",
                self.id
            );
        }
        Ok(())
    }
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads any JSON Lines file of `T`, skipping blank lines. Errors carry 1-based line numbers.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| parse_error(path, i + 1, e.to_string()))?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads and validates samples.
pub fn load_samples(path: &Path) -> Result<Vec<GroundingSample>> {
    read_jsonl::<GroundingSample>(path)?
        .into_iter()
        .map(|(line, s)| {
            s.validate().map_err(|e| parse_error(path, line, e.to_string()))?;
            Ok(s)
        })
        .collect()
}

pub fn save_samples(samples: &[GroundingSample], path: &Path) -> Result<()> {
    for s in samples {
        s.validate()?;
    }
    write_jsonl(samples, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GroundingSample {
        let img = ImageArray::filled(4, 4, [0.5; 3]);
        let mut masks = BTreeMap::new();
        let mut m = BinaryMask::empty(4, 4);
        m.data[5] = true;
        masks.insert("0".to_string(), rle_encode(&m));
        GroundingSample {
            id: "s0".into(),
            image: ImageRef::inline(&img),
            conversation: format_conversation("Describe the image.", "a red dot"),
            spans: vec![SpanAnnotation {
                char_start: 2,
                char_end: 9,
                segment_id: "0".into(),
            }],
            masks,
            flags: BTreeMap::from([("0".to_string(), SegmentFlags::default())]),
        }
    }

    #[test]
    fn conversation_split() {
        let (u, a) = split_conversation("User: Describe the image. Model: a red dot").unwrap();
        assert_eq!((u, a), ("Describe the image.", "a red dot"));
        assert!(split_conversation("Describe").is_err());
        let s = sample();
        assert_eq!(s.span_text(&s.spans[0]).unwrap(), "red dot");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let samples = vec![sample(), sample()];
        save_samples(&samples, &path).unwrap();
        assert_eq!(load_samples(&path).unwrap(), samples);
        let img = samples[0].image.load(None).unwrap();
        assert_eq!(img.to_rgb8(), ImageArray::filled(4, 4, [0.5; 3]).to_rgb8());
    }

    #[test]
    fn missing_field_names_field_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut v = serde_json::to_value(sample()).unwrap();
        v.as_object_mut().unwrap().remove("masks");
        let good = serde_json::to_string(&sample()).unwrap();
        fs::write(&path, format!("{good}\n{v}\n")).unwrap();
        match load_samples(&path) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("masks"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.jsonl");
        let mut v = serde_json::to_value(sample()).unwrap();
        v.as_object_mut().unwrap().insert("extra".into(), 1.into());
        fs::write(&path, format!("{v}\n")).unwrap();
        assert!(matches!(load_samples(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn span_outside_answer_rejected() {
        let mut s = sample();
        s.spans[0].char_end = 10;
        assert!(s.validate().is_err());
        let mut s = sample();
        s.spans[0].segment_id = "9".into();
        assert!(s.validate().is_err());
    }
}

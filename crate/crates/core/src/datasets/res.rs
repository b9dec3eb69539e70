//! Referring-expression records folded into one grounded description.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    format_conversation, read_jsonl, write_jsonl, GroundingSample, ImageRef, RleMask, SegmentFlags,
    SpanAnnotation,
};
use crate::error::{ensure, Error, Result};

pub const DESCRIBE_PROMPT: &str = "Describe the image.";
pub const EXPRESSION_SEPARATOR: &str = "; ";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResExpression {
    pub text: String,
    pub mask: RleMask,
}

/// One image with its referring expressions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResRecord {
    pub id: String,
    pub image: ImageRef,
    pub expressions: Vec<ResExpression>,
}

/// Joins expressions with `"; "` into the answer of a "Describe the image." turn.
/// Segment ids are the expression indices.
pub fn convert_res_to_png(id: &str, image: ImageRef, expressions: &[ResExpression]) -> Result<GroundingSample> {
    ensure!(!expressions.is_empty(), InvalidArgument, "record `{id}` has no expressions");
    let mut answer = String::new();
    let mut spans = Vec::with_capacity(expressions.len());
    let mut masks = BTreeMap::new();
    let mut flags = BTreeMap::new();
    for (i, e) in expressions.iter().enumerate() {
        if i > 0 {
            answer.push_str(EXPRESSION_SEPARATOR);
        }
        let start = answer.chars().count();
        answer.push_str(&e.text);
        let end = answer.chars().count();
        ensure!(end > start, InvalidArgument, "record `{id}` has an empty expression");
        let seg = i.to_string();
        spans.push(SpanAnnotation {
            char_start: start,
            char_end: end,
            segment_id: seg.clone(),
        });
        masks.insert(seg.clone(), e.mask.clone());
        flags.insert(seg, SegmentFlags::default());
    }
    let sample = GroundingSample {
        id: id.to_string(),
        image,
        conversation: format_conversation(DESCRIBE_PROMPT, &answer),
        spans,
        masks,
        flags,
    };
    sample.validate()?;
    Ok(sample)
}

/// Converts a JSONL file of [`ResRecord`] into a JSONL file of samples.
pub fn convert_res_file(input: &Path, output: &Path) -> Result<usize> {
    let samples = read_jsonl::<ResRecord>(input)?
        .into_iter()
        .map(|(line, r)| {
            convert_res_to_png(&r.id, r.image, &r.expressions).map_err(|e| Error::Parse {
                path: input.to_path_buf(),
                line,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&samples, output)?;
    Ok(samples.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{char_slice, rle_decode, rle_encode};
    use crate::decoder::BinaryMask;
    use proptest::prelude::*;

    fn mask(n: usize) -> RleMask {
        let mut m = BinaryMask::empty(4, 4);
        for i in 0..n {
            m.data[i] = true;
        }
        rle_encode(&m)
    }

    fn expr(text: &str, n: usize) -> ResExpression {
        ResExpression {
            text: text.into(),
            mask: mask(n),
        }
    }

    #[test]
    fn two_expressions() {
        let s = convert_res_to_png(
            "x",
            ImageRef::Path("x.png".into()),
            &[expr("The man in blue T-short", 3), expr("The girl who is smiling", 5)],
        )
        .unwrap();
        assert_eq!(s.answer().unwrap(), "The man in blue T-short; The girl who is smiling");
        assert_eq!(s.conversation, "User: Describe the image. Model: The man in blue T-short; The girl who is smiling");
        let spans: Vec<_> = s.spans.iter().map(|s| (s.char_start, s.char_end)).collect();
        assert_eq!(spans, vec![(0, 23), (25, 48)]);
        assert_eq!(rle_decode(&s.masks["0"]).unwrap().count(), 3);
        assert_eq!(rle_decode(&s.masks["1"]).unwrap().count(), 5);
    }

    #[test]
    fn single_and_empty() {
        let s = convert_res_to_png("x", ImageRef::Path("x.png".into()), &[expr("a dog", 1)]).unwrap();
        assert_eq!(s.answer().unwrap(), "a dog");
        assert_eq!((s.spans[0].char_start, s.spans[0].char_end), (0, 5));
        assert!(convert_res_to_png("x", ImageRef::Path("x.png".into()), &[]).is_err());
    }

    proptest! {
        #[test]
        fn slicing_recovers_expressions(texts in prop::collection::vec("[a-zA-Zé ü,.-]{1,12}", 1..5)) {
            let exprs: Vec<_> = texts.iter().map(|t| expr(t, 1)).collect();
            let s = convert_res_to_png("p", ImageRef::Path("p.png".into()), &exprs).unwrap();
            let answer = s.answer().unwrap();
            for (span, t) in s.spans.iter().zip(&texts) {
                prop_assert_eq!(&char_slice(answer, span.char_start, span.char_end), t);
            }
        }
    }
}

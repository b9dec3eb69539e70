//! Checks that any [`HostModel`] adapter honours the capture contract.

use super::{HostModel, TokenizedConversation};
use crate::error::{Error, Result};
use crate::image::ImageArray;

/// Row sums must be within this of 1.
pub const ROW_SUM_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ConformanceReport {
    pub seq_len: usize,
    pub max_row_sum_error: f64,
}

/// Runs one conversation through `host` and validates the record:
/// shapes, exact causal zeros, row normalisation, finiteness and determinism.
pub fn check_adapter(
    host: &dyn HostModel,
    conv: &TokenizedConversation,
    image: &ImageArray,
) -> Result<ConformanceReport> {
    let spec = host.spec();
    conv.validate(spec)?;
    let rec = host.forward_capture(conv, image)?;
    let (m, n, d) = (spec.num_layers, spec.num_heads, spec.hidden_dim);
    let s = conv.len();

    let fail = |msg: String| Err(Error::Contract(msg));
    if rec.attention.shape() != [m, n, s, s] {
        return fail(format!("attention shape {:?}, expected {:?}", rec.attention.shape(), [m, n, s, s]));
    }
    if rec.hidden_states.shape() != [m, s, d] {
        return fail(format!("hidden_states shape {:?}", rec.hidden_states.shape()));
    }
    if rec.final_hidden.shape() != [s, d] {
        return fail(format!("final_hidden shape {:?}", rec.final_hidden.shape()));
    }
    let all_finite = rec
        .attention
        .data()
        .iter()
        .chain(rec.hidden_states.data())
        .chain(rec.final_hidden.data())
        .all(|v| v.is_finite());
    if !all_finite {
        return fail("record contains non-finite values".into());
    }

    let mut max_err: f64 = 0.0;
    for layer in 0..m {
        for head in 0..n {
            for i in 0..s {
                let row = rec.attention_row(layer, head, i);
                if let Some(j) = (i + 1..s).find(|&j| row[j] != 0.0) {
                    return fail(format!("non-causal weight at layer {layer} head {head} ({i}, {j})"));
                }
                if row[..=i].iter().any(|&w| w < 0.0) {
                    return fail(format!("negative weight at layer {layer} head {head} row {i}"));
                }
                let err = (row[..=i].iter().sum::<f64>() - 1.0).abs();
                max_err = max_err.max(err);
            }
        }
    }
    if max_err > ROW_SUM_TOL {
        return fail(format!("attention row sum off by {max_err:e}"));
    }

    let again = host.forward_capture(conv, image)?;
    if again != rec {
        return fail("forward_capture is not deterministic".into());
    }
    Ok(ConformanceReport {
        seq_len: s,
        max_row_sum_error: max_err,
    })
}

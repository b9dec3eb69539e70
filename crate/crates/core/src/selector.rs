//! Linear keyword selector over final hidden states.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::host::{Role, TokenizedConversation};
use crate::nn::{Bound, ParamStore, Tape, Var};
use crate::tensor::{sigmoid, Tensor};

/// Probabilities are clamped to `[ε, 1 − ε]` inside [`selector_loss`].
pub const SCORE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorConfig {
    pub threshold: f64,
    pub supervise_roles: Vec<Role>,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            threshold: 0.3,
            supervise_roles: vec![Role::Assistant],
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.threshold > 0.0 && self.threshold < 1.0,
            InvalidArgument,
            "threshold {} must lie in (0, 1)",
            self.threshold
        );
        Ok(())
    }

    pub fn supervises(&self, role: Role) -> bool {
        self.supervise_roles.contains(&role)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordSpan {
    pub tokens: Range<usize>,
    /// Answer-relative character interval.
    pub chars: (usize, usize),
    pub max_score: f64,
}

/// `weight [1, d]`, `bias [1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeywordSelector {
    params: ParamStore,
}

impl KeywordSelector {
    pub fn new(hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.insert(
            "weight",
            Tensor::uniform(&[1, hidden_dim], (1.0 / hidden_dim as f64).sqrt(), &mut rng),
        );
        params.insert("bias", Tensor::zeros(&[1]));
        Self { params }
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let w = params.get("weight").map(|t| t.shape().to_vec());
        let b = params.get("bias").map(|t| t.shape().to_vec());
        ensure!(
            matches!(&w, Some(s) if s.len() == 2 && s[0] == 1) && b.as_deref() == Some(&[1]) && params.len() == 2,
            Format,
            "keyword selector expects weight [1, d] and bias [1]"
        );
        Ok(Self { params })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn hidden_dim(&self) -> usize {
        self.params.get("weight").unwrap().shape()[1]
    }

    /// Pre-sigmoid scores `[S, 1]` on the tape.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, hidden: Var) -> Result<Var> {
        let s = tape.shape(hidden);
        ensure!(
            s.len() == 2 && s[1] == self.hidden_dim(),
            Contract,
            "selector expects [S, {}] hidden states, got {:?}",
            self.hidden_dim(),
            s
        );
        Ok(tape.linear(hidden, p.var("weight"), p.var("bias")))
    }

    /// `sigmoid(linear(hidden))` per token.
    pub fn score_tokens(&self, final_hidden: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let h = tape.constant(final_hidden.clone());
        let out = self.logits(&mut tape, &p, h)?;
        Ok(tape.value(out).data().iter().map(|&x| sigmoid(x)).collect())
    }
}

/// Maximal runs of tokens with `score > λ` and a supervised role.
pub fn select_spans(scores: &[f64], roles: &[Role], cfg: &SelectorConfig) -> Vec<Range<usize>> {
    debug_assert_eq!(scores.len(), roles.len());
    let positive = |i: usize| scores[i] > cfg.threshold && cfg.supervises(roles[i]);
    let mut spans = Vec::new();
    let mut i = 0;
    while i < scores.len() {
        if positive(i) {
            let start = i;
            while i < scores.len() && positive(i) {
                i += 1;
            }
            spans.push(start..i);
        } else {
            i += 1;
        }
    }
    spans
}

/// [`select_spans`] plus character intervals and peak scores.
pub fn keyword_spans(scores: &[f64], conv: &TokenizedConversation, cfg: &SelectorConfig) -> Vec<KeywordSpan> {
    select_spans(scores, &conv.roles, cfg)
        .into_iter()
        .filter_map(|tokens| {
            let chars = conv.tokens_to_char_span(tokens.clone())?;
            let max_score = scores[tokens.clone()].iter().cloned().fold(f64::MIN, f64::max);
            Some(KeywordSpan {
                tokens,
                chars,
                max_score,
            })
        })
        .collect()
}

/// Mean BCE over supervised positions, with probabilities clamped by [`SCORE_EPS`].
pub fn selector_loss(scores: &[f64], labels: &[bool], roles: &[Role], cfg: &SelectorConfig) -> Result<f64> {
    ensure!(
        scores.len() == labels.len() && scores.len() == roles.len(),
        Contract,
        "scores, labels and roles differ in length"
    );
    let mut total = 0.0;
    let mut n = 0usize;
    for ((&s, &y), &r) in scores.iter().zip(labels).zip(roles) {
        if !cfg.supervises(r) {
            continue;
        }
        let p = s.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
        total -= if y { p.ln() } else { (1.0 - p).ln() };
        n += 1;
    }
    ensure!(n > 0, InvalidArgument, "no supervised positions for the selector loss");
    Ok(total / n as f64)
}

/// Differentiable selector BCE over the supervised rows of `logits [S, 1]`.
pub fn selector_loss_var(
    tape: &mut Tape,
    logits: Var,
    labels: &[bool],
    roles: &[Role],
    cfg: &SelectorConfig,
) -> Result<Var> {
    let rows: Vec<usize> = (0..roles.len()).filter(|&i| cfg.supervises(roles[i])).collect();
    ensure!(!rows.is_empty(), InvalidArgument, "no supervised positions for the selector loss");
    let start = rows[0];
    let end = rows[rows.len() - 1] + 1;
    let contiguous = rows.len() == end - start;
    let picked = if contiguous {
        tape.slice_rows(logits, start, end)
    } else {
        let parts: Vec<Var> = rows.iter().map(|&i| tape.slice_rows(logits, i, i + 1)).collect();
        tape.concat0(&parts)
    };
    let target = Tensor::from_parts(
        &[rows.len(), 1],
        rows.iter().map(|&i| labels[i] as u8 as f64).collect(),
    );
    Ok(tape.bce_with_logits(picked, &target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_params;
    use rand::Rng;

    fn assistant(n: usize) -> Vec<Role> {
        vec![Role::Assistant; n]
    }

    #[test]
    fn score_saturation() {
        let mut sel = KeywordSelector::new(4, 0);
        sel.params_mut().get_mut("weight").unwrap().data_mut().fill(0.0);
        let h = Tensor::full(&[3, 4], 2.0);
        assert_eq!(sel.score_tokens(&h).unwrap(), vec![0.5; 3]);
        sel.params_mut().get_mut("bias").unwrap().data_mut()[0] = -30.0;
        assert!(sel.score_tokens(&h).unwrap().iter().all(|&s| s < 1e-12));
    }

    #[test]
    fn spans_from_thresholding() {
        let cfg = SelectorConfig::default();
        assert_eq!(select_spans(&[0.1, 0.5, 0.6, 0.2, 0.9], &assistant(5), &cfg), vec![1..3, 4..5]);
        assert!(select_spans(&[0.3], &assistant(1), &cfg).is_empty());
        let roles = [Role::User, Role::Assistant, Role::System];
        assert_eq!(select_spans(&[0.9, 0.9, 0.9], &roles, &cfg), vec![1..2]);
    }

    #[test]
    fn spans_match_brute_force_set() {
        let cfg = SelectorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all = [Role::System, Role::User, Role::Assistant, Role::Image];
        for _ in 0..500 {
            let n = rng.random_range(1..30);
            let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let roles: Vec<Role> = (0..n).map(|_| all[rng.random_range(0..4)]).collect();
            let spans = select_spans(&scores, &roles, &cfg);
            let union: Vec<usize> = spans.iter().flat_map(|s| s.clone()).collect();
            let expect: Vec<usize> = (0..n).filter(|&i| scores[i] > 0.3 && roles[i] == Role::Assistant).collect();
            assert_eq!(union, expect);
            for s in &spans {
                assert!(s.end > s.start);
                if s.start > 0 {
                    assert!(!(scores[s.start - 1] > 0.3 && roles[s.start - 1] == Role::Assistant));
                }
                if s.end < n {
                    assert!(!(scores[s.end] > 0.3 && roles[s.end] == Role::Assistant));
                }
            }
        }
    }

    #[test]
    fn raising_threshold_shrinks_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.random_range(1..20);
            let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let roles = assistant(n);
            let (a, b) = (rng.random_range(0.01..0.99), rng.random_range(0.01..0.99));
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let set = |t: f64| -> Vec<usize> {
                let cfg = SelectorConfig {
                    threshold: t,
                    ..SelectorConfig::default()
                };
                select_spans(&scores, &roles, &cfg).into_iter().flatten().collect()
            };
            let (small, large) = (set(hi), set(lo));
            assert!(small.iter().all(|i| large.contains(i)));
        }
    }

    #[test]
    fn loss_values() {
        let cfg = SelectorConfig::default();
        let labels = [true, false, true];
        assert!(selector_loss(&[1.0, 0.0, 1.0], &labels, &assistant(3), &cfg).unwrap() < 1e-5);
        let half = selector_loss(&[0.5; 3], &labels, &assistant(3), &cfg).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-9);

        let scores = [0.9, 0.2, 0.7, 0.4, 0.99, 0.05];
        let labels = [true, false, false, true, true, false];
        let roles = [Role::User, Role::Assistant, Role::Assistant, Role::Assistant, Role::System, Role::Assistant];
        let expect = -((0.8f64).ln() + (0.3f64).ln() + (0.4f64).ln() + (0.95f64).ln()) / 4.0;
        let got = selector_loss(&scores, &labels, &roles, &cfg).unwrap();
        assert!((got - expect).abs() < 1e-12);

        assert!(selector_loss(&[0.5], &[true], &[Role::User], &cfg).is_err());
    }

    #[test]
    fn tape_loss_matches_eager() {
        let cfg = SelectorConfig::default();
        let sel = KeywordSelector::new(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = Tensor::randn(&[7, 6], 1.0, &mut rng);
        let labels = [false, true, true, false, true, false, false];
        let roles = [Role::System, Role::User, Role::Assistant, Role::Assistant, Role::Assistant, Role::User, Role::Assistant];
        let mut tape = Tape::new();
        let p = sel.params().bind(&mut tape, false);
        let hv = tape.constant(h.clone());
        let l = sel.logits(&mut tape, &p, hv).unwrap();
        let loss = selector_loss_var(&mut tape, l, &labels, &roles, &cfg).unwrap();
        let eager = selector_loss(&sel.score_tokens(&h).unwrap(), &labels, &roles, &cfg).unwrap();
        assert!((tape.value(loss).item() - eager).abs() < 1e-10);
    }

    #[test]
    fn selector_gradients() {
        let cfg = SelectorConfig::default();
        let sel = KeywordSelector::new(12, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = Tensor::randn(&[9, 12], 1.0, &mut rng);
        let labels: Vec<bool> = (0..9).map(|i| i % 3 == 0).collect();
        let roles = assistant(9);
        let r = check_params(sel.params(), 10, 7, 1e-3, &|tape, p| {
            let hv = tape.constant(h.clone());
            let l = sel.logits(tape, p, hv).unwrap();
            selector_loss_var(tape, l, &labels, &roles, &cfg).unwrap()
        });
        assert_eq!(r.checked, 10);
        assert!(r.max_rel_err < 1e-3, "{:?}", r.samples);
    }
}

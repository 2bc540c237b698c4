//! Windowed perplexity detection with a pluggable likelihood scorer.
//!
//! The default offline scorer is a character-trigram model fit on the
//! evaluation corpus's undefended texts; the flagging threshold is
//! calibrated as a high quantile of clean-window perplexities.

use std::collections::HashMap;

use super::Span;

/// Per-token score: the token's byte span and its mean per-character log
/// likelihood under the scorer's model.
#[derive(Debug, Clone, Copy)]
pub struct TokenScore {
    pub span: Span,
    pub log_likelihood: f64,
}

/// Anything that can assign log likelihoods to whitespace-delimited tokens.
pub trait LikelihoodScorer: Send + Sync {
    fn token_log_likelihoods(&self, text: &str) -> Vec<TokenScore>;
}

/// Assigns every token the same log likelihood. Windows then all share one
/// perplexity, which makes threshold edge cases easy to reason about.
#[derive(Debug, Clone, Copy)]
pub struct UniformScorer(pub f64);

impl LikelihoodScorer for UniformScorer {
    fn token_log_likelihoods(&self, text: &str) -> Vec<TokenScore> {
        token_spans(text)
            .into_iter()
            .map(|span| TokenScore {
                span,
                log_likelihood: self.0,
            })
            .collect()
    }
}

fn token_spans(text: &str) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    for (idx, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push(Span {
                    offset: s,
                    length: idx - s,
                });
            }
        } else if start.is_none() {
            start = Some(idx);
        }
    }
    if let Some(s) = start {
        spans.push(Span {
            offset: s,
            length: text.len() - s,
        });
    }
    spans
}

/// A window of consecutive tokens whose perplexity exceeded the threshold.
#[derive(Debug, Clone, Copy)]
pub struct FlaggedWindow {
    pub index: usize,
    /// Span in the original text, extended to the start of the next window
    /// so that removing flagged windows leaves no orphaned separators.
    pub span: Span,
    pub perplexity: f64,
}

/// Split `text` into consecutive windows of `window` tokens and flag every
/// window whose perplexity `exp(-mean log likelihood)` exceeds `threshold`.
pub fn detect_perplexity(
    text: &str,
    scorer: &dyn LikelihoodScorer,
    window: usize,
    threshold: f64,
) -> Vec<FlaggedWindow> {
    let window = window.max(1);
    let scores = scorer.token_log_likelihoods(text);
    let mut flagged = Vec::new();
    for (index, chunk) in scores.chunks(window).enumerate() {
        let mean = chunk.iter().map(|t| t.log_likelihood).sum::<f64>() / chunk.len() as f64;
        let perplexity = (-mean).exp();
        if perplexity > threshold {
            let start = chunk[0].span.offset;
            let next_start = scores
                .get(index * window + chunk.len())
                .map(|t| t.span.offset)
                .unwrap_or(text.len());
            flagged.push(FlaggedWindow {
                index,
                span: Span {
                    offset: start,
                    length: next_start - start,
                },
                perplexity,
            });
        }
    }
    flagged
}

/// All window perplexities of a text (used for calibration).
pub fn window_perplexities(text: &str, scorer: &dyn LikelihoodScorer, window: usize) -> Vec<f64> {
    let window = window.max(1);
    scorer
        .token_log_likelihoods(text)
        .chunks(window)
        .map(|chunk| {
            let mean = chunk.iter().map(|t| t.log_likelihood).sum::<f64>() / chunk.len() as f64;
            (-mean).exp()
        })
        .collect()
}

/// Threshold at the given quantile (e.g. 0.99) of clean-window
/// perplexities over the undefended corpus. `None` when the corpus
/// produced no windows.
pub fn calibrate_threshold<'a>(
    scorer: &dyn LikelihoodScorer,
    texts: impl IntoIterator<Item = &'a str>,
    window: usize,
    quantile: f64,
) -> Option<f64> {
    let mut perplexities: Vec<f64> = texts
        .into_iter()
        .flat_map(|t| window_perplexities(t, scorer, window))
        .collect();
    if perplexities.is_empty() {
        return None;
    }
    perplexities.sort_by(|a, b| a.partial_cmp(b).expect("perplexities are finite"));
    let rank =
        ((quantile * perplexities.len() as f64).ceil() as usize).clamp(1, perplexities.len());
    Some(perplexities[rank - 1])
}

/// Character-trigram language model with add-one smoothing.
///
/// Scores each token by the mean log probability of its characters given
/// the two preceding characters (token-local context, space-padded).
pub struct CharTrigramScorer {
    transitions: HashMap<(char, char), HashMap<char, u32>>,
    row_totals: HashMap<(char, char), u32>,
    alphabet_size: usize,
}

impl CharTrigramScorer {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut transitions: HashMap<(char, char), HashMap<char, u32>> = HashMap::new();
        let mut row_totals: HashMap<(char, char), u32> = HashMap::new();
        let mut alphabet = std::collections::HashSet::new();
        for text in texts {
            let mut ctx = (' ', ' ');
            for c in text.chars() {
                alphabet.insert(c);
                *transitions.entry(ctx).or_default().entry(c).or_insert(0) += 1;
                *row_totals.entry(ctx).or_insert(0) += 1;
                ctx = (ctx.1, c);
            }
        }
        CharTrigramScorer {
            transitions,
            row_totals,
            // +1 reserves mass for unseen characters.
            alphabet_size: alphabet.len() + 1,
        }
    }

    fn char_log_prob(&self, ctx: (char, char), c: char) -> f64 {
        let count = self
            .transitions
            .get(&ctx)
            .and_then(|row| row.get(&c))
            .copied()
            .unwrap_or(0);
        let total = self.row_totals.get(&ctx).copied().unwrap_or(0);
        f64::from(count + 1).ln() - f64::from(total + self.alphabet_size as u32 + 1).ln()
    }
}

impl LikelihoodScorer for CharTrigramScorer {
    fn token_log_likelihoods(&self, text: &str) -> Vec<TokenScore> {
        token_spans(text)
            .into_iter()
            .map(|span| {
                let token = &text[span.offset..span.offset + span.length];
                let mut ctx = (' ', ' ');
                let mut total = 0.0;
                let mut chars = 0usize;
                for c in token.chars() {
                    total += self.char_log_prob(ctx, c);
                    ctx = (ctx.1, c);
                    chars += 1;
                }
                TokenScore {
                    span,
                    log_likelihood: if chars == 0 {
                        0.0
                    } else {
                        total / chars as f64
                    },
                }
            })
            .collect()
    }
}

//! Sliding windows over token streams.
//!
//! Training windows of size `W` advance by the prediction length `P`
//! (each token serves once as context and once as prediction target), or
//! by `W * (1 - overlap)` in the enlarged-dataset variant. Detection uses
//! one context per line, sized so the scored line's tokens sit at the tail
//! of a `W - 1` window.

use crate::tokenizer::{EncodedTrace, LINE_SEP};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum WindowError {
    #[error("window config error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WindowConfig {
    /// Window size in tokens.
    pub window: usize,
    /// Prediction length in tokens; the prompt is `window - pred_len`.
    pub pred_len: usize,
    /// When set, stride becomes `window * (1 - overlap_fraction)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_fraction: Option<f64>,
}

impl WindowConfig {
    pub fn new(window: usize, pred_len: usize) -> Self {
        WindowConfig { window, pred_len, overlap_fraction: None }
    }

    pub fn validate(&self) -> Result<(), WindowError> {
        if self.pred_len == 0 || self.pred_len >= self.window {
            return Err(WindowError::Config(format!(
                "need 0 < P < W, got P={} W={}",
                self.pred_len, self.window
            )));
        }
        if let Some(f) = self.overlap_fraction {
            if !(0.0..1.0).contains(&f) {
                return Err(WindowError::Config(format!(
                    "overlapFraction must be in [0, 1), got {f}"
                )));
            }
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        match self.overlap_fraction {
            Some(f) => (((1.0 - f) * self.window as f64).round() as usize).max(1),
            None => self.pred_len,
        }
    }
}

/// One training window: `prompt_len` context tokens followed by the
/// prediction segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub source_offset: usize,
}

/// Cuts full windows at offsets 0, s, 2s, ...; trailing tokens that cannot
/// fill a window are dropped.
pub fn make_windows(token_ids: &[u32], cfg: &WindowConfig) -> Result<Vec<Window>, WindowError> {
    cfg.validate()?;
    let stride = cfg.stride();
    let mut windows = Vec::new();
    let mut offset = 0;
    while offset + cfg.window <= token_ids.len() {
        windows.push(Window {
            tokens: token_ids[offset..offset + cfg.window].to_vec(),
            prompt_len: cfg.window - cfg.pred_len,
            source_offset: offset,
        });
        offset += stride;
    }
    Ok(windows)
}

/// Scoring context for one line: up to `W - 1` tokens ending at the line's
/// last span token. Earlier lines fill the remaining positions; initial
/// lines get a left-truncated context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineContext {
    pub tokens: Vec<u32>,
    pub line_index: usize,
    /// Index within `tokens` where the scored line's span begins.
    pub line_start: usize,
}

/// Builds exactly one context per trace line.
pub fn detection_contexts(enc: &EncodedTrace, w: usize) -> Result<Vec<LineContext>, WindowError> {
    let ctx_len = w.saturating_sub(1);
    let mut contexts = Vec::with_capacity(enc.line_count());
    for (line_index, &(start, end)) in enc.line_spans.iter().enumerate() {
        let span = end - start;
        if span > ctx_len {
            return Err(WindowError::Config(format!(
                "line {line_index} has {span} tokens, exceeding the W-1 = {ctx_len} context"
            )));
        }
        let ctx_start = end.saturating_sub(ctx_len);
        contexts.push(LineContext {
            tokens: enc.token_ids[ctx_start..end].to_vec(),
            line_index,
            line_start: start - ctx_start,
        });
    }
    Ok(contexts)
}

/// A fine-tuning window of whole lines with its aligned anomaly mask.
/// Window boundaries snap to line separators so no line is ever split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledWindow {
    pub tokens: Vec<u32>,
    pub mask: Vec<u8>,
    pub first_line: usize,
}

/// Packs consecutive whole lines (span + trailing line separator) into
/// windows of at most `max_tokens`, advancing by `stride_lines`.
pub fn labeled_line_windows(
    enc: &EncodedTrace,
    mask: &[u8],
    max_tokens: usize,
    stride_lines: usize,
) -> Result<Vec<LabeledWindow>, WindowError> {
    if mask.len() != enc.token_ids.len() {
        return Err(WindowError::Config(format!(
            "mask length {} does not match token count {}",
            mask.len(),
            enc.token_ids.len()
        )));
    }
    if stride_lines == 0 {
        return Err(WindowError::Config("strideLines must be >= 1".into()));
    }
    let line_block = |i: usize| -> (usize, usize) {
        let (start, end) = enc.line_spans[i];
        debug_assert_eq!(enc.token_ids[end], LINE_SEP);
        (start, end + 1)
    };
    let mut windows = Vec::new();
    let n = enc.line_count();
    let mut first = 0;
    while first < n {
        let (start, mut end) = line_block(first);
        if end - start > max_tokens {
            return Err(WindowError::Config(format!(
                "line {first} alone exceeds the {max_tokens}-token window"
            )));
        }
        let mut last = first;
        while last + 1 < n {
            let (_, next_end) = line_block(last + 1);
            if next_end - start > max_tokens {
                break;
            }
            last += 1;
            end = next_end;
        }
        windows.push(LabeledWindow {
            tokens: enc.token_ids[start..end].to_vec(),
            mask: mask[start..end].to_vec(),
            first_line: first,
        });
        if last + 1 >= n {
            break;
        }
        first += stride_lines;
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::LINE_SEP;

    #[test]
    fn offsets_follow_the_stride() {
        let stream: Vec<u32> = (0..10).collect();
        let cfg = WindowConfig::new(4, 2);
        let windows = make_windows(&stream, &cfg).unwrap();
        let offsets: Vec<usize> = windows.iter().map(|w| w.source_offset).collect();
        assert_eq!(offsets, vec![0, 2, 4, 6]);
        for w in &windows {
            assert_eq!(w.tokens.len(), 4);
            assert_eq!(w.prompt_len, 2);
        }
    }

    #[test]
    fn stream_equal_to_window_gives_one_window() {
        let stream: Vec<u32> = (0..8).collect();
        let windows = make_windows(&stream, &WindowConfig::new(8, 4)).unwrap();
        assert_eq!(windows.len(), 1);
    }

    #[test]
    fn short_stream_gives_no_windows() {
        let stream: Vec<u32> = (0..3).collect();
        let windows = make_windows(&stream, &WindowConfig::new(8, 4)).unwrap();
        assert!(windows.is_empty());
    }

    #[test]
    fn invalid_pred_len_is_a_config_error() {
        assert!(make_windows(&[0, 1, 2], &WindowConfig::new(4, 4)).is_err());
        assert!(make_windows(&[0, 1, 2], &WindowConfig::new(4, 0)).is_err());
    }

    #[test]
    fn half_overlap_strides_half_a_window() {
        let cfg = WindowConfig { window: 8, pred_len: 4, overlap_fraction: Some(0.5) };
        assert_eq!(cfg.stride(), 4);
        let stream: Vec<u32> = (0..20).collect();
        let offsets: Vec<usize> =
            make_windows(&stream, &cfg).unwrap().iter().map(|w| w.source_offset).collect();
        assert_eq!(offsets, vec![0, 4, 8, 12]);
    }

    fn toy_encoded(lines: usize, span: usize) -> EncodedTrace {
        let mut token_ids = Vec::new();
        let mut line_spans = Vec::new();
        for i in 0..lines {
            let start = token_ids.len();
            for j in 0..span {
                token_ids.push(10 + (i * span + j) as u32);
            }
            line_spans.push((start, token_ids.len()));
            token_ids.push(LINE_SEP);
        }
        EncodedTrace { token_ids, line_spans }
    }

    #[test]
    fn single_line_context_is_the_line_itself() {
        let enc = toy_encoded(1, 5);
        let ctxs = detection_contexts(&enc, 64).unwrap();
        assert_eq!(ctxs.len(), 1);
        assert_eq!(ctxs[0].line_index, 0);
        assert_eq!(ctxs[0].line_start, 0);
        assert_eq!(ctxs[0].tokens.len(), 5);
    }

    #[test]
    fn context_holds_previous_line_when_window_allows() {
        let span = 5;
        let enc = toy_encoded(3, span);
        // W = 2*span + 2 -> context length 2*span + 1 covers the previous
        // line's block (span + separator) plus the scored line.
        let ctxs = detection_contexts(&enc, 2 * span + 2).unwrap();
        let c = &ctxs[1];
        assert_eq!(c.tokens.len(), 2 * span + 1);
        assert_eq!(c.line_start, span + 1);
        // Context starts exactly at line 0's first token.
        assert_eq!(c.tokens[0], enc.token_ids[enc.line_spans[0].0]);
    }

    #[test]
    fn one_context_per_line() {
        let enc = toy_encoded(7, 4);
        let ctxs = detection_contexts(&enc, 11).unwrap();
        assert_eq!(ctxs.len(), 7);
        for (i, c) in ctxs.iter().enumerate() {
            assert_eq!(c.line_index, i);
        }
    }

    #[test]
    fn oversized_line_is_a_config_error() {
        let enc = toy_encoded(2, 30);
        assert!(detection_contexts(&enc, 16).is_err());
    }

    #[test]
    fn labeled_windows_never_split_lines() {
        let enc = toy_encoded(10, 4);
        let mut mask = vec![0u8; enc.token_ids.len()];
        let (s, e) = enc.line_spans[3];
        for m in &mut mask[s..=e] {
            *m = 1;
        }
        let windows = labeled_line_windows(&enc, &mask, 12, 2).unwrap();
        for w in &windows {
            // 12 tokens fit two 5-token line blocks.
            assert_eq!(w.tokens.len() % 5, 0);
            assert_eq!(*w.tokens.last().unwrap(), LINE_SEP);
            assert_eq!(w.tokens.len(), w.mask.len());
        }
        let firsts: Vec<usize> = windows.iter().map(|w| w.first_line).collect();
        assert_eq!(firsts, vec![0, 2, 4, 6, 8]);
        // Only the window covering lines 2-3 sees the masked line.
        let masked_windows = windows.iter().filter(|w| w.mask.iter().any(|&m| m == 1)).count();
        assert_eq!(masked_windows, 1);
    }
}

//! Domain tokenization for PDU traces.
//!
//! Lines render in a canonical field order with a field separator between
//! fields and a line separator after each line. Numeric fields (ports,
//! timestamp, delta time) are always tokenized digit by digit and no
//! learned merge may contain a digit character; merges also never cross
//! field or line boundaries. Besides the BPE tokenizer there are two
//! baselines: Row (one token per distinct full line) and Group (one token
//! for the PDU name plus one for the rest of the fields).

use crate::trace::{LineLabels, PduMessage, Trace};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

/// Reserved special token ids.
pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const FIELD_SEP: u32 = 2;
pub const LINE_SEP: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;

const SPECIAL_TEXTS: [&str; 4] = ["<pad>", "<unk>", "<sep>", "<nl>"];

/// Glyph used between fields in the canonical text rendering.
pub const FIELD_GLYPH: char = '|';

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("training error: {0}")]
    Training(String),
    #[error("decode error: unknown token id {0}")]
    UnknownId(u32),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Bijective token-text <-> token-id table with reserved specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    texts: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn with_specials() -> Self {
        let mut v = Vocab { texts: Vec::new(), index: HashMap::new() };
        for text in SPECIAL_TEXTS {
            v.push(text.to_string());
        }
        v
    }

    fn push(&mut self, text: String) -> u32 {
        debug_assert!(!self.index.contains_key(&text), "duplicate token {text:?}");
        let id = self.texts.len() as u32;
        self.index.insert(text.clone(), id);
        self.texts.push(text);
        id
    }

    pub fn size(&self) -> usize {
        self.texts.len()
    }

    pub fn id_of(&self, text: &str) -> Option<u32> {
        self.index.get(text).copied()
    }

    pub fn text_of(&self, id: u32) -> Option<&str> {
        self.texts.get(id as usize).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Row,
    Group,
    Bpe,
}

/// A trained tokenizer: vocabulary plus (for BPE) the ordered merge list.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub kind: TokenizerKind,
    pub vocab: Vocab,
    pub merges: Vec<(String, String)>,
    // (left id, right id) -> (rank, merged id); rebuilt on load.
    merge_table: HashMap<(u32, u32), (usize, u32)>,
    char_index: HashMap<char, u32>,
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    fn assemble(kind: TokenizerKind, vocab: Vocab, merges: Vec<(String, String)>) -> Self {
        let merge_table = Self::build_merge_table(&vocab, &merges);
        let mut char_index = HashMap::new();
        for (id, text) in vocab.texts.iter().enumerate().skip(NUM_SPECIALS as usize) {
            let mut chars = text.chars();
            if let (Some(c), None) = (chars.next(), chars.next()) {
                char_index.insert(c, id as u32);
            }
        }
        Tokenizer { kind, vocab, merges, merge_table, char_index }
    }

    fn build_merge_table(vocab: &Vocab, merges: &[(String, String)]) -> HashMap<(u32, u32), (usize, u32)> {
        let mut table = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let (Some(li), Some(ri)) = (vocab.id_of(l), vocab.id_of(r)) else { continue };
            let merged = format!("{l}{r}");
            if let Some(mi) = vocab.id_of(&merged) {
                table.insert((li, ri), (rank, mi));
            }
        }
        table
    }
}

/// A tokenized trace plus the per-line token span map used to align
/// line-level labels with token-level metrics. Spans cover each line's
/// field tokens (including the internal field separators) and exclude the
/// trailing line separator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedTrace {
    pub token_ids: Vec<u32>,
    pub line_spans: Vec<(usize, usize)>,
}

impl EncodedTrace {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn line_count(&self) -> usize {
        self.line_spans.len()
    }

    pub fn mean_tokens_per_line(&self) -> f64 {
        if self.line_spans.is_empty() {
            return 0.0;
        }
        self.token_ids.len() as f64 / self.line_spans.len() as f64
    }
}

/// Canonical field order: pduName, source, srcIp, srcPort, dstIp, dstPort,
/// timestampUs, deltaTimeUs, activityState.
pub fn render_fields(msg: &PduMessage) -> [String; 9] {
    [
        msg.pdu_name.clone(),
        msg.source.clone(),
        msg.src_ip.clone(),
        msg.src_port.to_string(),
        msg.dst_ip.clone(),
        msg.dst_port.to_string(),
        msg.timestamp_us.to_string(),
        msg.delta_time_us.to_string(),
        msg.activity_state.tag().to_string(),
    ]
}

/// Fields tokenized digit by digit, never merged.
const NUMERIC_FIELDS: [usize; 4] = [3, 5, 6, 7];

pub fn render_line(msg: &PduMessage) -> String {
    render_fields(msg).join("|")
}

fn is_mergeable(text: &str) -> bool {
    !text.chars().any(|c| c.is_ascii_digit())
}

/// Trains the custom BPE on a corpus. Merges are learned greedily on the
/// most frequent adjacent pair within text fields; ties break on the
/// lexicographically smallest pair, so training is deterministic. Stops at
/// `target_vocab_size` or when no mergeable pair remains (the caller can
/// compare `vocab_size()` against the target).
pub fn train_bpe(corpus: &[Trace], target_vocab_size: usize) -> Result<Tokenizer, TokenizerError> {
    if corpus.iter().all(|t| t.is_empty()) {
        return Err(TokenizerError::Training("empty corpus".into()));
    }
    if target_vocab_size <= NUM_SPECIALS as usize {
        return Err(TokenizerError::Training(format!(
            "target vocab size {target_vocab_size} does not exceed the {NUM_SPECIALS} specials"
        )));
    }

    // Distinct field values with multiplicities; only text fields are
    // merge material, but numeric fields still contribute base characters.
    let mut text_words: BTreeMap<String, u64> = BTreeMap::new();
    let mut alphabet: BTreeSet<char> = BTreeSet::new();
    for trace in corpus {
        for msg in &trace.messages {
            for (idx, field) in render_fields(msg).iter().enumerate() {
                alphabet.extend(field.chars());
                if !NUMERIC_FIELDS.contains(&idx) {
                    *text_words.entry(field.clone()).or_insert(0) += 1;
                }
            }
        }
    }

    let mut vocab = Vocab::with_specials();
    for ch in &alphabet {
        vocab.push(ch.to_string());
    }
    if vocab.size() > target_vocab_size {
        return Err(TokenizerError::Training(format!(
            "base alphabet ({}) already exceeds target vocab size {target_vocab_size}",
            vocab.size()
        )));
    }

    // Working sequences over token ids, one per distinct text field value.
    let mut sequences: Vec<(Vec<u32>, u64)> = text_words
        .iter()
        .map(|(word, &count)| {
            let ids = word
                .chars()
                .map(|c| vocab.id_of(&c.to_string()).expect("alphabet covers corpus"))
                .collect();
            (ids, count)
        })
        .collect();

    let mut merges: Vec<(String, String)> = Vec::new();
    while vocab.size() < target_vocab_size {
        let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (seq, mult) in &sequences {
            for pair in seq.windows(2) {
                let l = vocab.text_of(pair[0]).unwrap();
                let r = vocab.text_of(pair[1]).unwrap();
                if is_mergeable(l) && is_mergeable(r) {
                    *counts.entry((l.to_string(), r.to_string())).or_insert(0) += mult;
                }
            }
        }
        // BTreeMap iteration is lexicographic, so the first max is the
        // tie-broken winner.
        let Some((pair, _)) = counts.iter().fold(None::<(&(String, String), u64)>, |best, (p, &c)| {
            match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((p, c)),
            }
        }) else {
            break; // nothing left to merge
        };
        let pair = pair.clone();
        let (li, ri) = (vocab.id_of(&pair.0).unwrap(), vocab.id_of(&pair.1).unwrap());
        let merged_text = format!("{}{}", pair.0, pair.1);
        let merged_id = vocab.push(merged_text);
        merges.push(pair);
        for (seq, _) in &mut sequences {
            let mut out = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && seq[i] == li && seq[i + 1] == ri {
                    out.push(merged_id);
                    i += 2;
                } else {
                    out.push(seq[i]);
                    i += 1;
                }
            }
            *seq = out;
        }
    }

    Ok(Tokenizer::assemble(TokenizerKind::Bpe, vocab, merges))
}

/// Row baseline: one token per distinct full-line rendering.
pub fn build_row_tokenizer(corpus: &[Trace]) -> Result<Tokenizer, TokenizerError> {
    if corpus.iter().all(|t| t.is_empty()) {
        return Err(TokenizerError::Training("empty corpus".into()));
    }
    let mut lines: BTreeSet<String> = BTreeSet::new();
    for trace in corpus {
        for msg in &trace.messages {
            lines.insert(render_line(msg));
        }
    }
    let mut vocab = Vocab::with_specials();
    for line in lines {
        vocab.push(line);
    }
    Ok(Tokenizer::assemble(TokenizerKind::Row, vocab, Vec::new()))
}

/// Group baseline: one token per distinct pduName plus one per distinct
/// rest-of-fields rendering.
pub fn build_group_tokenizer(corpus: &[Trace]) -> Result<Tokenizer, TokenizerError> {
    if corpus.iter().all(|t| t.is_empty()) {
        return Err(TokenizerError::Training("empty corpus".into()));
    }
    let mut names: BTreeSet<String> = BTreeSet::new();
    let mut rests: BTreeSet<String> = BTreeSet::new();
    for trace in corpus {
        for msg in &trace.messages {
            let fields = render_fields(msg);
            names.insert(fields[0].clone());
            rests.insert(fields[1..].join("|"));
        }
    }
    let mut vocab = Vocab::with_specials();
    // PDU names contain no '|', rest renderings always do, so the two
    // namespaces cannot collide.
    for name in names {
        vocab.push(name);
    }
    for rest in rests {
        vocab.push(rest);
    }
    Ok(Tokenizer::assemble(TokenizerKind::Group, vocab, Vec::new()))
}

fn bpe_encode_word(tok: &Tokenizer, word: &str, numeric: bool) -> Vec<u32> {
    let mut ids: Vec<u32> = word
        .chars()
        .map(|c| tok.char_index.get(&c).copied().unwrap_or(UNK))
        .collect();
    if numeric || tok.merge_table.is_empty() {
        return ids;
    }
    loop {
        let mut best: Option<(usize, usize, u32)> = None; // (rank, position, merged)
        for i in 0..ids.len().saturating_sub(1) {
            if let Some(&(rank, merged)) = tok.merge_table.get(&(ids[i], ids[i + 1])) {
                if best.map_or(true, |(br, _, _)| rank < br) {
                    best = Some((rank, i, merged));
                }
            }
        }
        match best {
            Some((_, i, merged)) => {
                ids[i] = merged;
                ids.remove(i + 1);
            }
            None => break,
        }
    }
    ids
}

/// Encodes a trace into token ids with the per-line span map populated.
/// Unknown symbols map to `UNK`.
pub fn encode(trace: &Trace, tok: &Tokenizer) -> EncodedTrace {
    let mut token_ids = Vec::new();
    let mut line_spans = Vec::with_capacity(trace.len());
    // Text field values repeat heavily; memoize their encodings.
    let mut memo: HashMap<String, Vec<u32>> = HashMap::new();
    for msg in &trace.messages {
        let start = token_ids.len();
        match tok.kind {
            TokenizerKind::Row => {
                let line = render_line(msg);
                token_ids.push(tok.vocab.id_of(&line).unwrap_or(UNK));
            }
            TokenizerKind::Group => {
                let fields = render_fields(msg);
                token_ids.push(tok.vocab.id_of(&fields[0]).unwrap_or(UNK));
                token_ids.push(tok.vocab.id_of(&fields[1..].join("|")).unwrap_or(UNK));
            }
            TokenizerKind::Bpe => {
                let fields = render_fields(msg);
                for (idx, field) in fields.iter().enumerate() {
                    if idx > 0 {
                        token_ids.push(FIELD_SEP);
                    }
                    let numeric = NUMERIC_FIELDS.contains(&idx);
                    if numeric {
                        token_ids.extend(bpe_encode_word(tok, field, true));
                    } else if let Some(ids) = memo.get(field) {
                        token_ids.extend_from_slice(ids);
                    } else {
                        let ids = bpe_encode_word(tok, field, false);
                        token_ids.extend_from_slice(&ids);
                        memo.insert(field.clone(), ids);
                    }
                }
            }
        }
        let end = token_ids.len();
        line_spans.push((start, end));
        token_ids.push(LINE_SEP);
    }
    EncodedTrace { token_ids, line_spans }
}

/// Inverse of `encode` up to the canonical rendering; splits on the line
/// separator and renders field separators as `|`. `UNK` becomes a visible
/// `<unk>` placeholder; ids outside the vocabulary are an error.
pub fn decode(token_ids: &[u32], tok: &Tokenizer) -> Result<Vec<String>, TokenizerError> {
    let mut lines = Vec::new();
    let mut current = String::new();
    let mut line_open = false;
    let mut group_first = true;
    for &id in token_ids {
        match id {
            LINE_SEP => {
                lines.push(std::mem::take(&mut current));
                line_open = false;
                group_first = true;
            }
            FIELD_SEP => {
                current.push(FIELD_GLYPH);
                line_open = true;
            }
            PAD => {}
            UNK => {
                if tok.kind == TokenizerKind::Group && !group_first && line_open {
                    current.push(FIELD_GLYPH);
                }
                current.push_str("<unk>");
                line_open = true;
                group_first = false;
            }
            other => {
                let text = tok
                    .vocab
                    .text_of(other)
                    .ok_or(TokenizerError::UnknownId(other))?;
                if tok.kind == TokenizerKind::Group && !group_first && line_open {
                    current.push(FIELD_GLYPH);
                }
                current.push_str(text);
                line_open = true;
                group_first = false;
            }
        }
    }
    if line_open {
        lines.push(current);
    }
    Ok(lines)
}

/// Expands line labels into a token-level binary mask: every token inside
/// the span of an anomalous line, plus its trailing line separator, is 1.
pub fn expand_mask(labels: &LineLabels, enc: &EncodedTrace) -> Result<Vec<u8>, TokenizerError> {
    if labels.len() != enc.line_count() {
        return Err(TokenizerError::Alignment(format!(
            "label count {} does not match line count {}",
            labels.len(),
            enc.line_count()
        )));
    }
    let mut mask = vec![0u8; enc.token_ids.len()];
    for (flag, &(start, end)) in labels.flags.iter().zip(&enc.line_spans) {
        if *flag == 1 {
            for m in &mut mask[start..end] {
                *m = 1;
            }
            debug_assert_eq!(enc.token_ids[end], LINE_SEP);
            mask[end] = 1;
        }
    }
    Ok(mask)
}

/// On-disk tokenizer artifact.
#[derive(Debug, Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    kind: TokenizerKind,
    specials: Vec<String>,
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
}

const TOKENIZER_FILE_VERSION: u32 = 1;

pub fn save_tokenizer(tok: &Tokenizer, path: &Path) -> Result<(), TokenizerError> {
    let file = TokenizerFile {
        version: TOKENIZER_FILE_VERSION,
        kind: tok.kind,
        specials: SPECIAL_TEXTS.iter().map(|s| s.to_string()).collect(),
        tokens: tok.vocab.texts[NUM_SPECIALS as usize..].to_vec(),
        merges: tok.merges.clone(),
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| TokenizerError::Artifact(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_tokenizer(path: &Path) -> Result<Tokenizer, TokenizerError> {
    let json = std::fs::read_to_string(path)?;
    let file: TokenizerFile =
        serde_json::from_str(&json).map_err(|e| TokenizerError::Artifact(e.to_string()))?;
    if file.version != TOKENIZER_FILE_VERSION {
        return Err(TokenizerError::Artifact(format!(
            "unsupported tokenizer file version {}",
            file.version
        )));
    }
    let mut vocab = Vocab::with_specials();
    for text in file.tokens {
        vocab.push(text);
    }
    Ok(Tokenizer::assemble(file.kind, vocab, file.merges))
}

//! Byte-level BPE compatible with the GPT-2 vocabulary.
//!
//! Text is split with the GPT-2 chunking pattern, every byte of a chunk is
//! mapped to a printable stand-in character, and adjacent symbols are merged
//! greedily by lowest merge rank. Symbols are tracked as token ids: every merge
//! result is itself a vocabulary entry.

use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Error, Result};

const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// Marker shown in place of a token's leading space.
pub const SPACE_MARKER: char = '\u{b7}';

/// GPT-2's reversible byte → printable character table.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u8 {
        let printable = matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        table[b as usize] = if printable {
            char::from(b)
        } else {
            let c = char::from_u32(256 + extra).expect("valid code point");
            extra += 1;
            c
        };
    }
    table
}

/// Token strings, their ids and the merge table.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    /// (left id, right id) -> (rank, merged id)
    merges: HashMap<(u32, u32), (u32, u32)>,
}

impl Vocabulary {
    /// Builds a vocabulary from token strings (in byte-level alphabet) and
    /// ordered merge pairs. Ids must be dense and every merge result must be
    /// a token.
    pub fn new(token_to_id: HashMap<String, u32>, merges: &[(String, String)]) -> Result<Self> {
        let n = token_to_id.len();
        let mut id_to_token = vec![None; n];
        for (tok, &id) in &token_to_id {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or_else(|| Error::Validation(format!("token id {id} is not dense in [0, {n})")))?;
            if slot.is_some() {
                return Err(Error::Validation(format!("token id {id} assigned twice")));
            }
            *slot = Some(tok.clone());
        }
        let id_to_token: Vec<String> = id_to_token.into_iter().map(|t| t.expect("dense ids")).collect();

        for c in bytes_to_unicode() {
            if !token_to_id.contains_key(c.encode_utf8(&mut [0; 4]) as &str) {
                return Err(Error::Validation(format!(
                    "vocabulary is missing the byte symbol {c:?}"
                )));
            }
        }

        let mut table = HashMap::with_capacity(merges.len());
        for (rank, (left, right)) in merges.iter().enumerate() {
            let lookup = |s: &str| {
                token_to_id.get(s).copied().ok_or_else(|| {
                    Error::Validation(format!("merge {} `{left} {right}` uses unknown token `{s}`", rank + 1))
                })
            };
            let l = lookup(left)?;
            let r = lookup(right)?;
            let merged = lookup(&format!("{left}{right}"))?;
            table.entry((l, r)).or_insert((rank as u32, merged));
        }

        Ok(Self {
            token_to_id,
            id_to_token,
            merges: table,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    /// `(rank, merged id)` for an adjacent pair, if the pair merges.
    pub fn merge(&self, left: u32, right: u32) -> Option<(u32, u32)> {
        self.merges.get(&(left, right)).copied()
    }

    /// Merge pairs ordered by rank.
    pub fn ranked_merges(&self) -> Vec<(u32, u32)> {
        let mut all: Vec<(u32, u32, u32)> = self.merges.iter().map(|(&(l, r), &(rank, _))| (rank, l, r)).collect();
        all.sort_unstable();
        all.into_iter().map(|(_, l, r)| (l, r)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vocabulary,
    pattern: Regex,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    byte_ids: [u32; 256],
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary) -> Self {
        let byte_encoder = bytes_to_unicode();
        let byte_decoder = byte_encoder
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        let mut byte_ids = [0u32; 256];
        for (b, c) in byte_encoder.iter().enumerate() {
            byte_ids[b] = vocab
                .id(c.encode_utf8(&mut [0; 4]))
                .expect("Vocabulary::new checks byte symbols");
        }
        Self {
            vocab,
            pattern: Regex::new(GPT2_PATTERN).expect("static pattern compiles"),
            byte_encoder,
            byte_decoder,
            byte_ids,
        }
    }

    /// Loads `vocab.json` and `merges.txt` from a model directory.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        Self::from_files(&dir.join("vocab.json"), &dir.join("merges.txt"))
    }

    pub fn from_files(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(vocab_path).map_err(|source| Error::Load {
            path: vocab_path.to_path_buf(),
            source,
        })?;
        let token_to_id: HashMap<String, u32> = serde_json::from_str(&raw).map_err(|e| Error::Parse {
            path: vocab_path.to_path_buf(),
            message: e.to_string(),
        })?;
        let raw = std::fs::read_to_string(merges_path).map_err(|source| Error::Load {
            path: merges_path.to_path_buf(),
            source,
        })?;
        let mut merges = Vec::new();
        for (lineno, line) in raw.lines().enumerate() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let (l, r) = line.split_once(' ').ok_or_else(|| Error::Parse {
                path: merges_path.to_path_buf(),
                message: format!("line {}: expected `left right`", lineno + 1),
            })?;
            merges.push((l.to_string(), r.to_string()));
        }
        let vocab = Vocabulary::new(token_to_id, &merges).map_err(|e| Error::Parse {
            path: merges_path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::new(vocab))
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(text) {
            // the pattern matches every character, so errors can only come from
            // backtracking limits on pathological inputs; fall back to bytes
            match m {
                Ok(m) => self.bpe_chunk(m.as_str().as_bytes(), &mut ids),
                Err(_) => {
                    ids.clear();
                    self.bpe_chunk(text.as_bytes(), &mut ids);
                    return ids;
                }
            }
        }
        ids
    }

    fn bpe_chunk(&self, bytes: &[u8], out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = bytes.iter().map(|&b| self.byte_ids[b as usize]).collect();
        while symbols.len() > 1 {
            let mut best: Option<(u32, usize, u32)> = None;
            for i in 0..symbols.len() - 1 {
                if let Some((rank, merged)) = self.vocab.merge(symbols[i], symbols[i + 1]) {
                    if best.is_none_or(|(r, _, _)| rank < r) {
                        best = Some((rank, i, merged));
                    }
                }
            }
            let Some((_, first, merged)) = best else { break };
            let (left, right) = (symbols[first], symbols[first + 1]);
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i >= first && i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = next;
        }
        out.extend(symbols);
    }

    /// Raw bytes a token stands for.
    pub fn token_bytes(&self, id: u32) -> Result<Vec<u8>> {
        let tok = self.vocab.token(id).ok_or(Error::TokenOutOfRange {
            id,
            vocab_size: self.vocab.len(),
        })?;
        Ok(tok
            .chars()
            .map(|c| self.byte_decoder.get(&c).copied().unwrap_or(b'?'))
            .collect())
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            bytes.extend(self.token_bytes(id)?);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Display form for graph labels: a leading space becomes
    /// [`SPACE_MARKER`], control characters and stray bytes are escaped.
    pub fn render_token(&self, id: u32) -> Result<String> {
        let bytes = self.token_bytes(id)?;
        let mut out = String::new();
        let mut first = true;
        for chunk in bytes.utf8_chunks() {
            for c in chunk.valid().chars() {
                match c {
                    ' ' if first => out.push(SPACE_MARKER),
                    '\n' => out.push_str("\\n"),
                    '\t' => out.push_str("\\t"),
                    '\r' => out.push_str("\\r"),
                    c if c.is_control() => {
                        let mut buf = [0u8; 4];
                        for b in c.encode_utf8(&mut buf).bytes() {
                            out.push_str(&format!("\\x{b:02x}"));
                        }
                    }
                    c => out.push(c),
                }
                first = false;
            }
            for b in chunk.invalid() {
                out.push_str(&format!("\\x{b:02x}"));
                first = false;
            }
        }
        Ok(out)
    }

    /// Byte-level alphabet form of a string (what `vocab.json` keys look like).
    pub fn to_byte_alphabet(&self, text: &str) -> String {
        text.bytes().map(|b| self.byte_encoder[b as usize]).collect()
    }

    /// Id of the single token spelling `text` exactly, if there is one.
    pub fn token_id(&self, text: &str) -> Option<u32> {
        self.vocab.id(&self.to_byte_alphabet(text))
    }
}

/// A tokenizer over the 256 byte symbols plus `extra` merges of lowercase
/// letter pairs ("aa", "ab", ...). Used by random toy models.
pub fn byte_level_tokenizer(extra: usize) -> Result<Tokenizer> {
    let enc = bytes_to_unicode();
    let mut token_to_id = HashMap::new();
    for (b, c) in enc.iter().enumerate() {
        token_to_id.insert(c.to_string(), b as u32);
    }
    let mut merges = Vec::new();
    'outer: for a in b'a'..=b'z' {
        for b in b'a'..=b'z' {
            if merges.len() == extra {
                break 'outer;
            }
            let (l, r) = ((a as char).to_string(), (b as char).to_string());
            token_to_id.insert(format!("{l}{r}"), 256 + merges.len() as u32);
            merges.push((l, r));
        }
    }
    if merges.len() < extra {
        return Err(Error::InvalidArgument(format!(
            "byte-level toy vocabulary supports at most {} extra tokens",
            merges.len()
        )));
    }
    Ok(Tokenizer::new(Vocabulary::new(token_to_id, &merges)?))
}

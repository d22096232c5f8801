//! Closed-vocabulary word-level tokenizer.
//!
//! The vocabulary is fixed at build time: special markers, punctuation,
//! operators, the ten digits, and every word the problem templates can emit.
//! Numbers are spelled digit by digit ("47" → "4","7"), which keeps every
//! numeric value probe-able token by token. Detokenization joins tokens with
//! single spaces except between consecutive digits, which glue back into one
//! number, so `detokenize(tokenize(s)) == s` for every generator rendering.

use crate::error::{CoreError, Result};
use std::collections::HashMap;

pub const PAD: u32 = 0;
pub const END: u32 = 1;
pub const BOT: u32 = 2;
pub const EOT: u32 = 3;

/// Total closed-vocabulary size; checked against the built table in tests.
pub const VOCAB_SIZE: usize = 128;

const SPECIALS: [&str; 4] = ["<pad>", "<end>", "<bot>", "<eot>"];
const PUNCT: [&str; 5] = [".", ",", ";", "?", ":"];
const OPS: [&str; 5] = ["+", "-", "*", "/", "="];

const NAMES: [&str; 16] = [
    "anna", "ben", "carla", "dan", "emma", "farid", "grace", "hugo", "ivy", "jack", "kira",
    "liam", "mara", "nina", "omar", "priya",
];

const ITEMS: [&str; 12] = [
    "apples", "pears", "plums", "marbles", "cards", "shells", "stickers", "cookies", "muffins",
    "beads", "buttons", "stamps",
];

const WORDS: [&str; 73] = [
    "has", "have", "had", "gives", "gave", "more", "how", "many", "does", "now", "of", "them",
    "to", "are", "left", "packs", "into", "each", "box", "boxes", "fit", "in", "shares",
    "equally", "among", "friends", "friend", "get", "eats", "remain", "finds", "find", "did",
    "they", "all", "do", "total", "buys", "with", "then", "away", "starts", "loses", "times",
    "as", "after", "giving", "makes", "every", "day", "days", "sells", "sold", "splits", "the",
    "morning", "afternoon", "and", "pens", "books", "coins", "pay", "rest", "picks", "pack",
    "sell", "crate", "holds", "fills", "crates", "adds", "takes", "keep",
];

const PROMPT_WORDS: [&str; 3] = ["is", "answer", "what"];

pub struct Tokenizer {
    tokens: Vec<String>,
    map: HashMap<String, u32>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut tokens: Vec<String> = Vec::new();
        for group in [
            &SPECIALS[..],
            &PUNCT[..],
            &OPS[..],
        ] {
            tokens.extend(group.iter().map(|s| s.to_string()));
        }
        for d in 0..10u32 {
            tokens.push(d.to_string());
        }
        for group in [&NAMES[..], &ITEMS[..], &WORDS[..], &PROMPT_WORDS[..]] {
            tokens.extend(group.iter().map(|s| s.to_string()));
        }
        let map = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Tokenizer { tokens, map }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.map.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn digit_id(&self, d: u8) -> u32 {
        debug_assert!(d < 10);
        self.map[&d.to_string()]
    }

    pub fn is_digit(&self, id: u32) -> bool {
        let t = self.token(id);
        t.len() == 1 && t.as_bytes()[0].is_ascii_digit()
    }

    /// Whitespace-split words; numeric words expand into digit tokens.
    /// Any word outside the vocabulary is an error (closed vocabulary).
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if let Some(&id) = self.map.get(word) {
                out.push(id);
            } else if !word.is_empty() && word.bytes().all(|b| b.is_ascii_digit()) {
                for b in word.bytes() {
                    out.push(self.digit_id(b - b'0'));
                }
            } else {
                return Err(CoreError::UnknownToken(word.to_string()));
            }
        }
        Ok(out)
    }

    /// Tokenize an integer (with optional leading minus) digit by digit.
    pub fn tokenize_number(&self, n: i64) -> Vec<u32> {
        let mut out = Vec::new();
        if n < 0 {
            out.push(self.map["-"]);
        }
        for b in n.unsigned_abs().to_string().bytes() {
            out.push(self.digit_id(b - b'0'));
        }
        out
    }

    /// Space-join tokens, gluing consecutive digits into one number.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut prev_digit = false;
        for &id in ids {
            let t = self.token(id);
            let cur_digit = self.is_digit(id);
            if !out.is_empty() && !(prev_digit && cur_digit) {
                out.push(' ');
            }
            out.push_str(t);
            prev_digit = cur_digit;
        }
        out
    }
}

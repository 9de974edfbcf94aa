// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic byte-level domains with disjoint alphabets.
//!
//! * `A`: lowercase word-level Markov text.
//! * `B`: integer arithmetic statements such as `12*7=84;`.
//! * `C`: bracket-nested call expressions such as `FX(A,[B]){G()}`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prng::Prng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
    C,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::A, Domain::B, Domain::C];

    pub fn label(self) -> &'static str {
        match self {
            Domain::A => "A",
            Domain::B => "B",
            Domain::C => "C",
        }
    }

    pub fn grammar(self) -> &'static str {
        match self {
            Domain::A => "markov-words-v1",
            Domain::B => "arithmetic-v1",
            Domain::C => "nested-calls-v1",
        }
    }

    /// Every byte the domain can emit.
    pub fn alphabet(self) -> Vec<u8> {
        match self {
            Domain::A => {
                let mut v: Vec<u8> = (b'a'..=b'z').collect();
                v.push(b' ');
                v
            }
            Domain::B => b"0123456789+-*=;".to_vec(),
            Domain::C => {
                let mut v: Vec<u8> = (b'A'..=b'Z').collect();
                v.extend_from_slice(b"()[]{},\n");
                v
            }
        }
    }

    fn salt(self) -> u64 {
        match self {
            Domain::A => 0xA11C_E5ED_0000_000A,
            Domain::B => 0xB0B5_1ED0_0000_000B,
            Domain::C => 0xC0DE_C0DE_0000_000C,
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Domain::A),
            "B" => Ok(Domain::B),
            "C" => Ok(Domain::C),
            other => Err(Error::param(format!(
                "unknown domain id {other:?} (expected A, B or C)"
            ))),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A generated token stream for one domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainCorpus {
    pub domain: Domain,
    pub tokens: Vec<u32>,
    pub grammar: String,
    pub seed: u64,
}

const WORDS: [&str; 24] = [
    "the", "cat", "sat", "on", "mat", "a", "dog", "ran", "to", "park", "and", "bird", "sang", "in",
    "tree", "sun", "rose", "over", "hill", "we", "saw", "small", "red", "boat",
];

fn gen_markov_words(rng: &mut Prng, out: &mut Vec<u8>, length: usize) {
    let w = WORDS.len();
    let mut cur = rng.below(w);
    while out.len() < length {
        out.extend_from_slice(WORDS[cur].as_bytes());
        out.push(b' ');
        let succ = [(cur * 7 + 1) % w, (cur * 5 + 3) % w, (cur * 11 + 2) % w];
        cur = succ[rng.below(succ.len())];
    }
}

fn gen_arithmetic(rng: &mut Prng, out: &mut Vec<u8>, length: usize) {
    while out.len() < length {
        let a = rng.below(100) as i64;
        let b = rng.below(100) as i64;
        let (op, c) = match rng.below(3) {
            0 => ('+', a + b),
            1 => ('-', a - b),
            _ => ('*', a * b),
        };
        out.extend_from_slice(format!("{a}{op}{b}={c};").as_bytes());
    }
}

const NAME_CHARS: &[u8] = b"ABCDEFGHKLMNPRSTXYZ";

fn gen_name(rng: &mut Prng, out: &mut Vec<u8>) {
    for _ in 0..1 + rng.below(2) {
        out.push(NAME_CHARS[rng.below(NAME_CHARS.len())]);
    }
}

fn gen_call(rng: &mut Prng, out: &mut Vec<u8>, depth: usize) {
    gen_name(rng, out);
    out.push(b'(');
    let args = rng.below(3);
    for i in 0..args {
        if i > 0 {
            out.push(b',');
        }
        gen_arg(rng, out, depth + 1);
    }
    out.push(b')');
    if depth < 2 && rng.below(3) == 0 {
        out.push(b'{');
        gen_call(rng, out, depth + 1);
        out.push(b'}');
    }
}

fn gen_arg(rng: &mut Prng, out: &mut Vec<u8>, depth: usize) {
    let choice = if depth >= 3 { 0 } else { rng.below(3) };
    match choice {
        0 => gen_name(rng, out),
        1 => {
            out.push(b'[');
            gen_arg(rng, out, depth + 1);
            out.push(b']');
        }
        _ => gen_call(rng, out, depth),
    }
}

fn gen_nested(rng: &mut Prng, out: &mut Vec<u8>, length: usize) {
    while out.len() < length {
        gen_call(rng, out, 0);
        out.push(b'\n');
    }
}

/// Deterministic corpus of exactly `length` byte tokens for `domain_id`.
pub fn synth_corpus(domain_id: &str, length: usize, seed: u64) -> Result<DomainCorpus> {
    let domain: Domain = domain_id.parse()?;
    if length == 0 {
        return Err(Error::param("corpus length must be positive"));
    }
    let mut rng = Prng::new(seed ^ domain.salt());
    let mut bytes = Vec::with_capacity(length + 64);
    match domain {
        Domain::A => gen_markov_words(&mut rng, &mut bytes, length),
        Domain::B => gen_arithmetic(&mut rng, &mut bytes, length),
        Domain::C => gen_nested(&mut rng, &mut bytes, length),
    }
    bytes.truncate(length);
    Ok(DomainCorpus {
        domain,
        tokens: bytes.into_iter().map(u32::from).collect(),
        grammar: domain.grammar().to_string(),
        seed,
    })
}

impl DomainCorpus {
    pub fn to_bytes(&self) -> Vec<u8> {
        self.tokens.iter().map(|&t| t as u8).collect()
    }

    /// Writes `<dir>/<domain>.bytes`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<std::path::PathBuf> {
        let path = dir.as_ref().join(format!("{}.bytes", self.domain));
        std::fs::write(&path, self.to_bytes()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Reads `<dir>/<domain>.bytes`, checking the alphabet.
    pub fn read_from_dir(dir: impl AsRef<Path>, domain: Domain) -> Result<Self> {
        let path = dir.as_ref().join(format!("{domain}.bytes"));
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let alphabet = domain.alphabet();
        if let Some(b) = bytes.iter().find(|b| !alphabet.contains(b)) {
            return Err(Error::Parse {
                what: path.display().to_string(),
                message: format!("byte {b:#04x} is outside domain {domain}'s alphabet"),
            });
        }
        if bytes.is_empty() {
            return Err(Error::Parse {
                what: path.display().to_string(),
                message: "empty corpus".into(),
            });
        }
        Ok(Self {
            domain,
            tokens: bytes.into_iter().map(u32::from).collect(),
            grammar: domain.grammar().to_string(),
            seed: 0,
        })
    }
}

/// Total-variation distance between two unigram byte distributions.
pub fn unigram_tv_distance(a: &[u32], b: &[u32]) -> f64 {
    let hist = |x: &[u32]| {
        let mut h = [0.0f64; 256];
        for &t in x {
            h[t as usize & 0xFF] += 1.0;
        }
        let n = x.len().max(1) as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    0.5 * ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

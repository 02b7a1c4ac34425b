//! LED flicker ID codes.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

pub const CODE_LEN: usize = 7;
pub const MAX_ZERO_RUN: usize = 3;

pub type Code = [bool; CODE_LEN];

const DEFAULT_TABLE: [(u32, &str); 10] = [
    (0, "1011111"),
    (1, "1011110"),
    (2, "1011101"),
    (3, "1011010"),
    (4, "1011100"),
    (5, "1011001"),
    (6, "1010010"),
    (7, "1001110"),
    (8, "1001111"),
    (9, "1001100"),
];

pub fn parse_code(s: &str) -> Option<Code> {
    let bits: Vec<bool> = s
        .chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| match c {
            '1' => Some(true),
            '0' => Some(false),
            _ => None,
        })
        .collect::<Option<_>>()?;
    bits.try_into().ok()
}

pub fn format_code(c: &Code) -> String {
    c.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

pub fn rotate(c: &Code, k: usize) -> Code {
    std::array::from_fn(|i| c[(i + k) % CODE_LEN])
}

/// Longest run of zeros when the code repeats.
pub fn cyclic_zero_run(c: &Code) -> usize {
    if c.iter().all(|&b| !b) {
        return CODE_LEN;
    }
    let (mut best, mut run) = (0, 0);
    for i in 0..2 * CODE_LEN {
        if c[i % CODE_LEN] {
            run = 0;
        } else {
            run += 1;
            best = best.max(run);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Window starts at the code boundary.
    Anchored,
    /// Window may start anywhere in the repeating code.
    Cyclic,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codebook {
    codes: BTreeMap<u32, Code>,
    rotations: HashMap<Code, Vec<u32>>,
}

impl Default for Codebook {
    fn default() -> Self {
        Codebook::new(DEFAULT_TABLE.iter().map(|(id, s)| (*id, parse_code(s).unwrap()))).expect("default codebook is valid")
    }
}

impl Codebook {
    /// Rejects duplicate ids or codewords and codes with too many dark frames.
    pub fn new(entries: impl IntoIterator<Item = (u32, Code)>) -> Result<Self> {
        let mut codes = BTreeMap::new();
        for (id, code) in entries {
            if cyclic_zero_run(&code) > MAX_ZERO_RUN {
                return Err(Error::InvalidInput(format!("code {} of id {id} has a long dark run", format_code(&code))));
            }
            if codes.values().any(|c| *c == code) {
                return Err(Error::InvalidInput(format!("duplicate code {}", format_code(&code))));
            }
            if codes.insert(id, code).is_some() {
                return Err(Error::InvalidInput(format!("duplicate id {id}")));
            }
        }
        let mut rotations: HashMap<Code, Vec<u32>> = HashMap::new();
        for (&id, code) in &codes {
            for k in 0..CODE_LEN {
                let ids = rotations.entry(rotate(code, k)).or_default();
                if !ids.contains(&id) {
                    ids.push(id);
                }
            }
        }
        Ok(Codebook { codes, rotations })
    }

    /// One `id code` pair per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (k, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.splitn(2, char::is_whitespace);
            let id = it.next().and_then(|s| s.parse::<u32>().ok());
            let code = it.next().and_then(parse_code);
            match (id, code) {
                (Some(id), Some(code)) => entries.push((id, code)),
                _ => return Err(Error::Dataset { line: k + 1, message: format!("bad codebook entry '{line}'") }),
            }
        }
        Codebook::new(entries)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.codes.keys().copied()
    }

    pub fn encode(&self, id: u32) -> Result<Code> {
        self.codes.get(&id).copied().ok_or(Error::UnknownId(id))
    }

    /// Ids whose code shares a rotation with another id's code.
    pub fn rotation_collisions(&self) -> Vec<Vec<u32>> {
        let mut out: Vec<Vec<u32>> = self.rotations.values().filter(|v| v.len() > 1).cloned().collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn decode_window(&self, window: &Code, mode: DecodeMode) -> Result<Option<u32>> {
        match mode {
            DecodeMode::Anchored => Ok(self.codes.iter().find(|(_, c)| *c == window).map(|(id, _)| *id)),
            DecodeMode::Cyclic => match self.rotations.get(window).map(Vec::as_slice) {
                None | Some([]) => Ok(None),
                Some([id]) => Ok(Some(*id)),
                Some(ids) => Err(Error::AmbiguousCode(ids.to_vec())),
            },
        }
    }

    /// Decodes every 7-frame window of an on/off stream.
    pub fn decode_stream(&self, bits: &[bool], mode: DecodeMode) -> Result<Vec<Option<u32>>> {
        bits.windows(CODE_LEN)
            .map(|w| self.decode_window(&w.try_into().expect("window length"), mode))
            .collect()
    }
}

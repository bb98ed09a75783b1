//! Benchmark programs bundled with the library.

use crate::error::{Error, Result};
use crate::ir::Module;

#[derive(Debug, Clone, Copy)]
pub struct CorpusEntry {
    pub name: &'static str,
    pub summary: &'static str,
    pub source: &'static str,
}

pub const CORPUS: &[CorpusEntry] = &[
    CorpusEntry {
        name: "mu",
        summary: "3-Way mu: three secret-dependent branches in a 32-iteration loop",
        source: include_str!("../corpus/mu.tir"),
    },
    CorpusEntry {
        name: "subbytes",
        summary: "AES SubBytes, unrolled: 16 secret-indexed S-box lookups",
        source: include_str!("../corpus/subbytes.tir"),
    },
    CorpusEntry {
        name: "subbytes_loop",
        summary: "AES SubBytes as a loop",
        source: include_str!("../corpus/subbytes_loop.tir"),
    },
    CorpusEntry {
        name: "rc5_rotl",
        summary: "rotate-left by a secret amount via a data-dependent loop",
        source: include_str!("../corpus/rc5_rotl.tir"),
    },
    CorpusEntry {
        name: "led_subcell",
        summary: "LED SubCells: 16-byte S-box inside nested 4x4 loops",
        source: include_str!("../corpus/led_subcell.tir"),
    },
    CorpusEntry {
        name: "aes_key_schedule",
        summary: "key schedule that preloads one table but forgets another",
        source: include_str!("../corpus/aes_key_schedule.tir"),
    },
    CorpusEntry {
        name: "expand_key",
        summary: "key setup into a record; branch on a public field",
        source: include_str!("../corpus/expand_key.tir"),
    },
    CorpusEntry {
        name: "badbranch",
        summary: "loop with two secret-dependent early exits",
        source: include_str!("../corpus/badbranch.tir"),
    },
];

pub fn names() -> impl Iterator<Item = &'static str> {
    CORPUS.iter().map(|e| e.name)
}

pub fn get(name: &str) -> Option<&'static CorpusEntry> {
    CORPUS.iter().find(|e| e.name == name)
}

/// Parses and validates a bundled program.
pub fn load(name: &str) -> Result<Module> {
    let e = get(name).ok_or_else(|| Error::Input(format!("no corpus program named `{name}`")))?;
    crate::load_module(e.source)
}

#![allow(dead_code)]

//! Random labelled corpora with a matching scripted response table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde_json::json;

/// What the scripted model says for one item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reply {
    Yes,
    No,
    Garbage,
}

impl Reply {
    pub fn label(self) -> Option<u8> {
        match self {
            Reply::Yes => Some(1),
            Reply::No => Some(0),
            Reply::Garbage => None,
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            Reply::Yes => "DECOMPOSITION: targets and background\nINITIAL: looks different\nCOUNTERFACTUAL: checked the opposite\nFINAL: YES",
            Reply::No => "DECOMPOSITION: targets and background\nINITIAL: looks equal\nCOUNTERFACTUAL: checked the opposite\nFINAL: NO",
            Reply::Garbage => "The picture is interesting but hard to judge.",
        }
    }
}

pub struct Corpus {
    pub manifest: PathBuf,
    pub table: PathBuf,
    /// `(id, gt, reply)` in manifest order.
    pub items: Vec<(String, u8, Reply)>,
}

pub fn sample_png() -> Vec<u8> {
    std::fs::read(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../fixtures/poggendorff.png"
    ))
    .unwrap()
}

/// Writes a manifest of `n` items (both subsets non-empty) into `dir`.
pub fn random_corpus(dir: &Path, n: usize, rng: &mut impl Rng) -> Corpus {
    assert!(n >= 2);
    std::fs::write(dir.join("img.png"), sample_png()).unwrap();
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let gt = match i {
            0 => 0,
            1 => 1,
            _ => rng.gen_range(0..=1),
        };
        let reply = match rng.gen_range(0..10) {
            0 => Reply::Garbage,
            k if k < 6 => Reply::Yes,
            _ => Reply::No,
        };
        items.push((format!("item-{i:04}-{:x}", rng.gen::<u16>()), gt, reply));
    }
    write_corpus(dir, items)
}

pub fn write_corpus(dir: &Path, items: Vec<(String, u8, Reply)>) -> Corpus {
    if !dir.join("img.png").exists() {
        std::fs::write(dir.join("img.png"), sample_png()).unwrap();
    }
    let mut manifest = String::new();
    let mut table = serde_json::Map::new();
    for (id, gt, reply) in &items {
        let question = format!("Are the lines in <{id}> the same length?");
        let line = json!({"id": id, "image": "img.png", "question": question, "gt": gt});
        writeln!(manifest, "{line}").unwrap();
        table.insert(format!("~<{id}>"), json!(reply.text()));
    }
    let manifest_path = dir.join("manifest.jsonl");
    let table_path = dir.join("table.json");
    std::fs::write(&manifest_path, manifest).unwrap();
    std::fs::write(&table_path, serde_json::Value::Object(table).to_string()).unwrap();
    Corpus {
        manifest: manifest_path,
        table: table_path,
        items,
    }
}

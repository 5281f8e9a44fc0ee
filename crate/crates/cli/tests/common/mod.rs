#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmgru_core::data::{write_features, FeatureMap};
use mmgru_core::linalg::Rng;

pub const WORDS: [&str; 10] = ["dog", "cat", "runs", "sleeps", "on", "grass", "a", "red", "ball", "sofa"];

pub fn mmgru(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmgru"))
        .args(args)
        .output()
        .expect("spawn mmgru")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

pub fn json(o: &Output) -> serde_json::Value {
    serde_json::from_str(stdout(o).trim()).unwrap_or_else(|e| panic!("bad JSON ({e}): {}", stdout(o)))
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub features: PathBuf,
    pub captions: PathBuf,
    /// (id, captions) as written.
    pub entries: Vec<(String, Vec<String>)>,
}

impl Fixture {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn s(p: &Path) -> &str {
        p.to_str().unwrap()
    }
}

/// `images` images with `per_image` distinct 4–5 word captions and
/// `dim`-wide random features.
pub fn fixture(images: usize, per_image: usize, dim: usize, seed: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(seed);
    let mut map = FeatureMap::new(dim);
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for i in 0..images {
        let id = format!("img{i:02}");
        map.insert(id.clone(), (0..dim).map(|_| rng.uniform(-1.0, 1.0) as f32 as f64).collect())
            .unwrap();
        let mut caps = Vec::new();
        while caps.len() < per_image {
            let len = 4 + rng.below(2);
            let c: Vec<&str> = (0..len).map(|_| WORDS[rng.below(WORDS.len())]).collect();
            let c = c.join(" ");
            if seen.insert(c.clone()) {
                caps.push(c);
            }
        }
        entries.push((id, caps));
    }
    let features = dir.path().join("features.mmft");
    write_features(&features, &map).unwrap();
    let captions = dir.path().join("captions.jsonl");
    write_captions(&captions, &entries);
    Fixture {
        dir,
        features,
        captions,
        entries,
    }
}

pub fn write_captions(path: &Path, entries: &[(String, Vec<String>)]) {
    let text: String = entries
        .iter()
        .map(|(id, caps)| format!("{}\n", serde_json::json!({ "id": id, "captions": caps })))
        .collect();
    fs::write(path, text).unwrap();
}

/// Trains on the fixture and returns the checkpoint path.
pub fn train(f: &Fixture, name: &str, extra: &[&str]) -> (PathBuf, Output) {
    let out = f.path(name);
    let mut args = vec![
        "train",
        "--features",
        Fixture::s(&f.features),
        "--captions",
        Fixture::s(&f.captions),
        "--out",
        Fixture::s(&out),
        "--min-count",
        "1",
    ];
    args.extend_from_slice(extra);
    let o = mmgru(&args);
    (out, o)
}

//! On-disk dataset layout.
//!
//! ```text
//! train.tsv dev.tsv test.tsv   "head\trelation\ttail\n", base relation ids
//! entities.jsonl               one EntityRecord per line, ordered by id
//! relations.jsonl              one RelationRecord per line, base then reciprocal
//! visual.emb                   "EMB1", u32 LE (entities, images, rows per image,
//!                              dim), then f32 LE features row-major
//! manifest.json                shapes, generator config, sha256 per file
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{EntityRecord, GenConfig, MkgDataset, RelationRecord, Split, Triple};
use crate::error::{ElmmError, Result};
use crate::numerics::Matrix;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
const EMB_HEADER: usize = 4 + 4 * 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_entities: usize,
    pub num_relations: usize,
    pub n_images: usize,
    pub n_regions: usize,
    pub visual_dim: usize,
    pub vocab_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GenConfig>,
    /// File name to hex sha256.
    pub files: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn triples_tsv(triples: &[Triple]) -> String {
    let mut s = String::new();
    for t in triples {
        s.push_str(&format!("{}\t{}\t{}\n", t.head, t.relation, t.tail));
    }
    s
}

fn jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

fn visual_bytes(d: &MkgDataset) -> Vec<u8> {
    let rows = d.n_regions + 1;
    let mut out = Vec::with_capacity(EMB_HEADER + 4 * d.visual.len() * d.n_images * rows * d.visual_dim);
    out.extend_from_slice(EMB_MAGIC);
    for v in [d.entities.len(), d.n_images, rows, d.visual_dim] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for m in &d.visual {
        for &x in m.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

/// Writes the dataset into `dir` (created if missing) and returns the manifest.
pub fn save_dataset(d: &MkgDataset, generator: Option<&GenConfig>, dir: &Path) -> Result<Manifest> {
    d.validate()?;
    fs::create_dir_all(dir)?;
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    for split in [Split::Train, Split::Dev, Split::Test] {
        files.push((format!("{}.tsv", split.name()), triples_tsv(d.split(split)).into_bytes()));
    }
    files.push(("entities.jsonl".into(), jsonl(&d.entities)?.into_bytes()));
    files.push(("relations.jsonl".into(), jsonl(&d.relations)?.into_bytes()));
    files.push(("visual.emb".into(), visual_bytes(d)));
    let mut hashes = BTreeMap::new();
    for (name, bytes) in &files {
        fs::File::create(dir.join(name))?.write_all(bytes)?;
        hashes.insert(name.clone(), sha256_hex(bytes));
    }
    let manifest = Manifest {
        num_entities: d.entities.len(),
        num_relations: d.num_base_relations,
        n_images: d.n_images,
        n_regions: d.n_regions,
        visual_dim: d.visual_dim,
        vocab_size: d.vocab_size,
        generator: generator.cloned(),
        files: hashes,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    fs::read(dir.join(name)).map_err(|e| ElmmError::Format(format!("{name}: {e}")))
}

fn parse_triples(name: &str, text: &str) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let bad = || ElmmError::Format(format!("{name} line {}: expected three ids, got {line:?}", i + 1));
        if parts.len() != 3 {
            return Err(bad());
        }
        let p = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
        out.push(Triple {
            head: p(parts[0])?,
            relation: p(parts[1])?,
            tail: p(parts[2])?,
        });
    }
    Ok(out)
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(name: &str, text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| ElmmError::Format(format!("{name} line {}: {e}", i + 1)))
        })
        .collect()
}

fn parse_visual(m: &Manifest, bytes: &[u8]) -> Result<Vec<Matrix>> {
    if bytes.len() < EMB_HEADER {
        return Err(ElmmError::DimensionMismatch {
            what: "visual.emb header".into(),
            expected: EMB_HEADER,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != EMB_MAGIC {
        return Err(ElmmError::Format("visual.emb: bad magic".into()));
    }
    let field = |i: usize| {
        u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    let (ne, ni, rows, dim) = (field(0), field(1), field(2), field(3));
    let want = (m.num_entities, m.n_images, m.n_regions + 1, m.visual_dim);
    if (ne, ni, rows, dim) != want {
        return Err(ElmmError::Format(format!(
            "visual.emb: header shape {:?} disagrees with manifest {want:?}",
            (ne, ni, rows, dim)
        )));
    }
    let per = ni * rows * dim;
    let expected = EMB_HEADER + 4 * ne * per;
    if bytes.len() != expected {
        return Err(ElmmError::DimensionMismatch {
            what: "visual.emb".into(),
            expected,
            found: bytes.len(),
        });
    }
    let vals: Vec<f64> = bytes[EMB_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    vals.chunks_exact(per.max(1))
        .take(ne)
        .map(|c| Matrix::from_vec(ni * rows, dim, c.to_vec()))
        .collect()
}

/// Reads and fully validates a dataset directory. Shape problems in
/// `visual.emb` are reported (with byte counts) before any hash comparison.
pub fn load_dataset(dir: &Path) -> Result<(MkgDataset, Manifest)> {
    let manifest: Manifest = serde_json::from_slice(&read(dir, "manifest.json")?)
        .map_err(|e| ElmmError::Format(format!("manifest.json: {e}")))?;
    let visual_raw = read(dir, "visual.emb")?;
    let visual = parse_visual(&manifest, &visual_raw)?;

    let mut contents: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    contents.insert("visual.emb".into(), visual_raw);
    for name in ["train.tsv", "dev.tsv", "test.tsv", "entities.jsonl", "relations.jsonl"] {
        contents.insert(name.into(), read(dir, name)?);
    }
    for (name, bytes) in &contents {
        match manifest.files.get(name) {
            Some(h) if *h == sha256_hex(bytes) => {}
            Some(h) => {
                return Err(ElmmError::Format(format!(
                    "{name}: sha256 {} does not match manifest {h}",
                    sha256_hex(bytes)
                )))
            }
            None => return Err(ElmmError::Format(format!("manifest.json lists no hash for {name}"))),
        }
    }
    let text = |name: &str| {
        String::from_utf8(contents[name].clone())
            .map_err(|_| ElmmError::Format(format!("{name}: not UTF-8")))
    };
    let entities: Vec<EntityRecord> = parse_jsonl("entities.jsonl", &text("entities.jsonl")?)?;
    let relations: Vec<RelationRecord> = parse_jsonl("relations.jsonl", &text("relations.jsonl")?)?;
    let dataset = MkgDataset {
        entities,
        relations,
        num_base_relations: manifest.num_relations,
        train: parse_triples("train.tsv", &text("train.tsv")?)?,
        dev: parse_triples("dev.tsv", &text("dev.tsv")?)?,
        test: parse_triples("test.tsv", &text("test.tsv")?)?,
        visual,
        n_images: manifest.n_images,
        n_regions: manifest.n_regions,
        visual_dim: manifest.visual_dim,
        vocab_size: manifest.vocab_size,
    };
    dataset.validate()?;
    Ok((dataset, manifest))
}

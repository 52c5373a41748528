//! Directory layout (tab-separated decimal ids, LF line endings):
//!
//! | file          | line format              | required |
//! |---------------|--------------------------|----------|
//! | `triples_1`   | `head\trelation\ttail`   | yes      |
//! | `triples_2`   | `head\trelation\ttail`   | yes      |
//! | `ent_links`   | `src_id\ttgt_id`         | yes      |
//! | `dangling_1`  | `id`                     | no       |
//! | `dangling_2`  | `id`                     | no       |
//! | `ent_ids_1/2` | `id` (full vocabulary)   | no       |
//! | `rel_ids_1/2` | `id` (full vocabulary)   | no       |
//!
//! Raw ids may be sparse; each graph is re-indexed densely in ascending raw
//! id order. The vocabulary files let isolated entities and unused relations
//! survive a save/load round trip.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;

use super::{KgPair, Triple, TripleStore};
use crate::error::{Error, Result};

pub const TRIPLES_SRC: &str = "triples_1";
pub const TRIPLES_TGT: &str = "triples_2";
pub const ENT_LINKS: &str = "ent_links";
pub const DANGLING_SRC: &str = "dangling_1";
pub const DANGLING_TGT: &str = "dangling_2";
pub const ENT_IDS_SRC: &str = "ent_ids_1";
pub const ENT_IDS_TGT: &str = "ent_ids_2";
pub const REL_IDS_SRC: &str = "rel_ids_1";
pub const REL_IDS_TGT: &str = "rel_ids_2";

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Parses fixed-arity rows of unsigned integers.
fn parse_rows<const N: usize>(path: &Path, text: &str) -> Result<Vec<[u64; N]>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != N {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("expected {N} tab-separated fields, found {}", fields.len()),
            });
        }
        let mut row = [0u64; N];
        for (slot, field) in row.iter_mut().zip(&fields) {
            *slot = field.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("not a non-negative integer: {field:?}"),
            })?;
        }
        rows.push(row);
    }
    Ok(rows)
}

struct Vocab(BTreeMap<u64, usize>);

impl Vocab {
    fn build(ids: impl IntoIterator<Item = u64>) -> Self {
        let set: BTreeSet<u64> = ids.into_iter().collect();
        Vocab(set.into_iter().enumerate().map(|(i, id)| (id, i)).collect())
    }

    fn get(&self, raw: u64) -> usize {
        self.0[&raw]
    }

    fn len(&self) -> usize {
        self.0.len()
    }
}

struct RawGraph {
    triples: Vec<[u64; 3]>,
    extra_entities: Vec<u64>,
    relations: Vec<u64>,
}

fn read_graph(dir: &Path, triples: &str, ents: &str, rels: &str) -> Result<RawGraph> {
    let path = dir.join(triples);
    let triples = parse_rows::<3>(&path, &read(&path)?)?;
    let ent_path = dir.join(ents);
    let extra_entities = match read_optional(&ent_path)? {
        Some(text) => parse_rows::<1>(&ent_path, &text)?.into_iter().map(|r| r[0]).collect(),
        None => Vec::new(),
    };
    let rel_path = dir.join(rels);
    let relations = match read_optional(&rel_path)? {
        Some(text) => parse_rows::<1>(&rel_path, &text)?.into_iter().map(|r| r[0]).collect(),
        None => Vec::new(),
    };
    Ok(RawGraph {
        triples,
        extra_entities,
        relations,
    })
}

fn read_dangling(dir: &Path, name: &str) -> Result<Option<Vec<u64>>> {
    let path = dir.join(name);
    Ok(match read_optional(&path)? {
        Some(text) => Some(parse_rows::<1>(&path, &text)?.into_iter().map(|r| r[0]).collect()),
        None => None,
    })
}

fn build_store(raw: &RawGraph, ents: &Vocab) -> Result<TripleStore> {
    let rels = Vocab::build(
        raw.triples
            .iter()
            .map(|t| t[1])
            .chain(raw.relations.iter().copied()),
    );
    let mut seen = HashSet::new();
    let mut triples = Vec::with_capacity(raw.triples.len());
    let mut dropped = 0usize;
    for t in &raw.triples {
        let triple = Triple::new(ents.get(t[0]), rels.get(t[1]), ents.get(t[2]));
        if seen.insert(triple) {
            triples.push(triple);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        warn!("dropped {dropped} duplicate triples");
    }
    TripleStore::new(triples, ents.len(), rels.len())
}

/// Reads a pair from a directory in the layout described at module level.
pub fn load_kg_pair(dir: impl AsRef<Path>) -> Result<KgPair> {
    let dir = dir.as_ref();
    let src = read_graph(dir, TRIPLES_SRC, ENT_IDS_SRC, REL_IDS_SRC)?;
    let tgt = read_graph(dir, TRIPLES_TGT, ENT_IDS_TGT, REL_IDS_TGT)?;
    let links_path = dir.join(ENT_LINKS);
    let links = parse_rows::<2>(&links_path, &read(&links_path)?)?;
    let dang_src = read_dangling(dir, DANGLING_SRC)?;
    let dang_tgt = read_dangling(dir, DANGLING_TGT)?;

    let src_ents = Vocab::build(
        src.triples
            .iter()
            .flat_map(|t| [t[0], t[2]])
            .chain(src.extra_entities.iter().copied())
            .chain(links.iter().map(|l| l[0]))
            .chain(dang_src.iter().flatten().copied()),
    );
    let tgt_ents = Vocab::build(
        tgt.triples
            .iter()
            .flat_map(|t| [t[0], t[2]])
            .chain(tgt.extra_entities.iter().copied())
            .chain(links.iter().map(|l| l[1]))
            .chain(dang_tgt.iter().flatten().copied()),
    );

    let source = build_store(&src, &src_ents)?;
    let target = build_store(&tgt, &tgt_ents)?;
    let anchors = links
        .iter()
        .map(|l| (src_ents.get(l[0]), tgt_ents.get(l[1])))
        .collect();
    let dangling_src = dang_src.map(|v| v.into_iter().map(|e| src_ents.get(e)).collect());
    let dangling_tgt = dang_tgt.map(|v| v.into_iter().map(|e| tgt_ents.get(e)).collect());
    KgPair::new(source, target, anchors, dangling_src, dangling_tgt)
}

fn write_file(path: PathBuf, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(&path, e))
}

/// Writes a pair so that [`load_kg_pair`] reproduces it exactly.
pub fn save_kg_pair(pair: &KgPair, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let triple_lines = |s: &TripleStore| {
        s.triples()
            .iter()
            .map(|t| format!("{}\t{}\t{}", t.head, t.relation, t.tail))
            .collect::<Vec<_>>()
            .into_iter()
    };
    write_file(dir.join(TRIPLES_SRC), triple_lines(&pair.source))?;
    write_file(dir.join(TRIPLES_TGT), triple_lines(&pair.target))?;
    write_file(
        dir.join(ENT_LINKS),
        pair.anchors.iter().map(|(s, t)| format!("{s}\t{t}")),
    )?;
    write_file(
        dir.join(ENT_IDS_SRC),
        (0..pair.source.n_entities()).map(|e| e.to_string()),
    )?;
    write_file(
        dir.join(ENT_IDS_TGT),
        (0..pair.target.n_entities()).map(|e| e.to_string()),
    )?;
    write_file(
        dir.join(REL_IDS_SRC),
        (0..pair.source.n_relations()).map(|e| e.to_string()),
    )?;
    write_file(
        dir.join(REL_IDS_TGT),
        (0..pair.target.n_relations()).map(|e| e.to_string()),
    )?;
    if let Some(d) = &pair.truth_dangling_src {
        write_file(dir.join(DANGLING_SRC), d.iter().map(|e| e.to_string()))?;
    }
    if let Some(d) = &pair.truth_dangling_tgt {
        write_file(dir.join(DANGLING_TGT), d.iter().map(|e| e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn toy_directory_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), TRIPLES_SRC, "0\t0\t1\n1\t1\t2\n2\t0\t0\n");
        write(dir.path(), TRIPLES_TGT, "0\t0\t1\n");
        write(dir.path(), ENT_LINKS, "0\t0\n");
        let pair = load_kg_pair(dir.path()).unwrap();
        assert_eq!(pair.source.triples().len(), 3);
        assert_eq!(
            pair.source.triples()[1],
            Triple::new(1, 1, 2),
            "dense ids already, so triples are preserved verbatim"
        );
        assert_eq!(pair.source.n_entities(), 3);
        assert_eq!(pair.anchors, vec![(0, 0)]);
    }

    #[test]
    fn sparse_ids_are_reindexed_in_order() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), TRIPLES_SRC, "10\t7\t30\n30\t9\t20\n");
        write(dir.path(), TRIPLES_TGT, "5\t1\t6\n");
        write(dir.path(), ENT_LINKS, "20\t6\n");
        write(dir.path(), DANGLING_SRC, "10\n");
        let pair = load_kg_pair(dir.path()).unwrap();
        assert_eq!(
            pair.source.triples(),
            &[Triple::new(0, 0, 2), Triple::new(2, 1, 1)]
        );
        assert_eq!(pair.anchors, vec![(1, 1)]);
        assert_eq!(
            pair.truth_dangling_src.unwrap().into_iter().collect::<Vec<_>>(),
            vec![0]
        );
        assert!(pair.truth_dangling_tgt.is_none());
    }

    #[test]
    fn empty_links_give_zero_anchors() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), TRIPLES_SRC, "0\t0\t1\n");
        write(dir.path(), TRIPLES_TGT, "0\t0\t1\n");
        write(dir.path(), ENT_LINKS, "");
        let pair = load_kg_pair(dir.path()).unwrap();
        assert!(pair.anchors.is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), TRIPLES_SRC, "0\t0\t1\n0\tx\t1\n");
        write(dir.path(), TRIPLES_TGT, "0\t0\t1\n");
        write(dir.path(), ENT_LINKS, "");
        match load_kg_pair(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        write(dir.path(), TRIPLES_SRC, "0\t0\n");
        assert!(matches!(
            load_kg_pair(dir.path()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn dangling_overlapping_anchor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), TRIPLES_SRC, "0\t0\t1\n");
        write(dir.path(), TRIPLES_TGT, "0\t0\t1\n");
        write(dir.path(), ENT_LINKS, "0\t0\n");
        write(dir.path(), DANGLING_TGT, "0\n");
        assert!(matches!(
            load_kg_pair(dir.path()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn missing_triples_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_kg_pair(dir.path()), Err(Error::Io { .. })));
    }
}

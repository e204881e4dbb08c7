//! Text formats: vocabularies, label files, manifests and collapse maps.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use super::{read_frames, read_text, write_file};
use crate::error::{Error, Result};
use crate::lattice::{FrameSequence, LabelSequence, Vocabulary};

/// One token per line; blank lines are ignored.
pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = read_text(path)?;
    let tokens: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    Vocabulary::new(tokens).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for tok in vocab.tokens() {
        out.push_str(tok);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn read_labels(path: &Path, vocab: &Vocabulary) -> Result<LabelSequence> {
    let text = read_text(path)?;
    if text.split_whitespace().next().is_none() {
        return Err(Error::format(path, "label file holds no tokens"));
    }
    vocab.encode(&text).map_err(|e| match e {
        Error::UnknownToken(tok) => Error::format(path, format!("unknown token {tok:?}")),
        other => other,
    })
}

pub fn write_labels(path: &Path, labels: &LabelSequence, vocab: &Vocabulary) -> Result<()> {
    let mut line = vocab.decode(labels).join(" ");
    line.push('\n');
    write_file(path, line.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub frames: PathBuf,
    pub labels: PathBuf,
}

/// Utterance list; paths in the file are relative to its directory.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = read_text(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, frames, labels] = fields[..] else {
            return Err(Error::format(
                path,
                format!("line {}: expected 3 tab-separated fields, found {}", n + 1, fields.len()),
            ));
        };
        if !seen.insert(id.to_string()) {
            return Err(Error::format(path, format!("duplicate utterance id {id:?}")));
        }
        let entry = ManifestEntry {
            id: id.to_string(),
            frames: base.join(frames),
            labels: base.join(labels),
        };
        for p in [&entry.frames, &entry.labels] {
            if !p.is_file() {
                return Err(Error::format(
                    path,
                    format!("utterance {id:?} references missing file {}", p.display()),
                ));
            }
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(Error::format(path, "manifest lists no utterances"));
    }
    Ok(Manifest { entries })
}

/// Writes entries with paths made relative to the manifest's directory
/// where possible.
pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut out = String::new();
    for e in &manifest.entries {
        out.push_str(&format!("{}\t{}\t{}\n", e.id, rel(&e.frames), rel(&e.labels)));
    }
    write_file(path, out.as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub frames: FrameSequence,
    pub labels: LabelSequence,
}

pub fn load_dataset(manifest: &Path, vocab: &Vocabulary) -> Result<Vec<Utterance>> {
    read_manifest(manifest)?
        .entries
        .into_iter()
        .map(|e| {
            Ok(Utterance {
                frames: read_frames(&e.frames)?,
                labels: read_labels(&e.labels, vocab)?,
                id: e.id,
            })
        })
        .collect()
}

/// Mapping from a model vocabulary onto a (usually smaller) scoring
/// vocabulary, ordered by first appearance of each target token.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseMap {
    pub target: Vocabulary,
    pub mapping: Vec<Option<usize>>,
}

/// Lines of `source target`; source tokens not listed stay unmapped.
pub fn read_collapse_map(path: &Path, source: &Vocabulary) -> Result<CollapseMap> {
    let text = read_text(path)?;
    let mut targets: Vec<String> = Vec::new();
    let mut mapping = vec![None; source.len()];
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[..] {
            [] => continue,
            [src, dst] => {
                let s = source
                    .index_of(src)
                    .ok_or_else(|| Error::format(path, format!("unknown source token {src:?}")))?;
                if mapping[s].is_some() {
                    return Err(Error::format(path, format!("token {src:?} mapped twice")));
                }
                let d = match targets.iter().position(|t| t == dst) {
                    Some(d) => d,
                    None => {
                        targets.push(dst.to_string());
                        targets.len() - 1
                    }
                };
                mapping[s] = Some(d);
            }
            _ => {
                return Err(Error::format(
                    path,
                    format!("line {}: expected `source target`", n + 1),
                ))
            }
        }
    }
    let target = Vocabulary::new(targets).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(CollapseMap { target, mapping })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_frames;
    use crate::lattice::collapse_labels;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["aa", "b", "c"]).unwrap()
    }

    #[test]
    fn labels_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.txt");
        let y = LabelSequence::new(vec![2, 0, 0, 1], 3).unwrap();
        write_labels(&p, &y, &vocab()).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "c aa aa b\n");
        assert_eq!(read_labels(&p, &vocab()).unwrap(), y);

        std::fs::write(&p, "aa zz\n").unwrap();
        assert!(read_labels(&p, &vocab()).unwrap_err().to_string().contains("\"zz\""));
        std::fs::write(&p, " \n").unwrap();
        assert!(read_labels(&p, &vocab()).is_err());
    }

    #[test]
    fn vocab_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        write_vocab(&p, &vocab()).unwrap();
        assert_eq!(read_vocab(&p).unwrap(), vocab());
        std::fs::write(&p, "a\na\n").unwrap();
        assert!(read_vocab(&p).is_err());
    }

    #[test]
    fn manifest_resolves_relative_paths_and_checks_ids() {
        let dir = tempfile::tempdir().unwrap();
        let frames = FrameSequence::new(vec![0.5; 6], 3, 2).unwrap();
        write_frames(&dir.path().join("f/u1.srnf"), &frames).unwrap();
        write_labels(&dir.path().join("l/u1.txt"), &LabelSequence::new(vec![1], 3).unwrap(), &vocab()).unwrap();
        let m = dir.path().join("m.tsv");
        std::fs::write(&m, "u1\tf/u1.srnf\tl/u1.txt\n").unwrap();
        let data = load_dataset(&m, &vocab()).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data[0].id, "u1");
        assert_eq!(data[0].frames, frames);

        let manifest = read_manifest(&m).unwrap();
        let m2 = dir.path().join("m2.tsv");
        write_manifest(&m2, &manifest).unwrap();
        assert_eq!(std::fs::read_to_string(&m2).unwrap(), "u1\tf/u1.srnf\tl/u1.txt\n");

        std::fs::write(&m, "u1\tf/u1.srnf\tl/u1.txt\nu1\tf/u1.srnf\tl/u1.txt\n").unwrap();
        assert!(read_manifest(&m).unwrap_err().to_string().contains("duplicate"));
        std::fs::write(&m, "u2\tf/u2.srnf\tl/u1.txt\n").unwrap();
        assert!(read_manifest(&m).unwrap_err().to_string().contains("missing"));
        std::fs::write(&m, "u2 f/u1.srnf l/u1.txt\n").unwrap();
        assert!(read_manifest(&m).is_err());
    }

    #[test]
    fn collapse_map_feeds_collapse_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.txt");
        std::fs::write(&p, "aa x\nb x\n\nc y\n").unwrap();
        let map = read_collapse_map(&p, &vocab()).unwrap();
        assert_eq!(map.target.tokens(), &["x", "y"]);
        let y = LabelSequence::new(vec![0, 1, 2, 0], 3).unwrap();
        let out = collapse_labels(&y, &map.mapping, false).unwrap();
        assert_eq!(out.as_slice(), &[0, 0, 1, 0]);

        std::fs::write(&p, "aa x\n").unwrap();
        let map = read_collapse_map(&p, &vocab()).unwrap();
        assert!(collapse_labels(&y, &map.mapping, false).is_err());
        std::fs::write(&p, "q x\n").unwrap();
        assert!(read_collapse_map(&p, &vocab()).is_err());
    }
}

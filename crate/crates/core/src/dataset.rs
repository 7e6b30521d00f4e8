//! JSON-Lines manifests, image stores and minibatch/pair sampling.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{invalid, Error, Result};
use crate::exif::{parse_exif, ExifRecord, ParseDiagnostics};
use crate::imaging::Image;
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Photographic,
    Generated,
}

impl Label {
    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "photographic" => Some(Label::Photographic),
            "generated" => Some(Label::Generated),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Photographic => "photographic",
            Label::Generated => "generated",
        }
    }

    /// Binary target: 1 for photographs.
    pub fn target(self) -> f64 {
        match self {
            Label::Photographic => 1.0,
            Label::Generated => 0.0,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image_path: String,
    pub label: Label,
    pub source: String,
    pub exif: Option<ExifRecord>,
}

impl ManifestEntry {
    pub fn new(image_path: impl Into<String>, label: Label, source: impl Into<String>) -> Self {
        Self {
            image_path: image_path.into(),
            label,
            source: source.into(),
            exif: None,
        }
    }

    pub fn with_exif(mut self, exif: ExifRecord) -> Self {
        self.exif = Some(exif);
        self
    }

    pub fn has_complete_exif(&self) -> bool {
        self.exif.as_ref().is_some_and(ExifRecord::is_complete)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineDiagnostics {
    pub line: usize,
    pub exif: ParseDiagnostics,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// EXIF parse tallies for lines that had something to report.
    pub diagnostics: Vec<LineDiagnostics>,
}

impl DatasetManifest {
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert(e.image_path.as_str()) {
                return Err(Error::Manifest {
                    line: i + 1,
                    message: format!("duplicate image_path `{}`", e.image_path),
                });
            }
        }
        Ok(Self {
            entries,
            diagnostics: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn with_label(&self, label: Label) -> DatasetManifest {
        self.filtered(|e| e.label == label)
    }

    pub fn filtered(&self, keep: impl Fn(&ManifestEntry) -> bool) -> DatasetManifest {
        DatasetManifest {
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
            diagnostics: Vec::new(),
        }
    }

    pub fn parse_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        let mut diagnostics = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (entry, diag) = parse_line(&line).map_err(|message| Error::Manifest {
                line: line_no,
                message,
            })?;
            if !seen.insert(entry.image_path.clone()) {
                return Err(Error::Manifest {
                    line: line_no,
                    message: format!("duplicate image_path `{}`", entry.image_path),
                });
            }
            if let Some(d) = diag.filter(|d| !d.unparseable.is_empty() || d.unknown_keys > 0) {
                diagnostics.push(LineDiagnostics { line: line_no, exif: d });
            }
            entries.push(entry);
        }
        Ok(Self { entries, diagnostics })
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for e in &self.entries {
            let exif = match &e.exif {
                Some(r) => serde_json::to_value(r.to_raw())?,
                None => Value::Null,
            };
            let obj = serde_json::json!({
                "image_path": e.image_path,
                "label": e.label.as_str(),
                "source": e.source,
                "exif": exif,
            });
            writeln!(out, "{obj}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_jsonl(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

fn parse_line(line: &str) -> std::result::Result<(ManifestEntry, Option<ParseDiagnostics>), String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = value.as_object().ok_or("expected a JSON object")?;
    let field = |name: &str| -> std::result::Result<&str, String> {
        match obj.get(name) {
            None | Some(Value::Null) => Err(format!("missing field `{name}`")),
            Some(Value::String(s)) => Ok(s),
            Some(_) => Err(format!("field `{name}` must be a string")),
        }
    };
    let image_path = field("image_path")?;
    if image_path.is_empty() {
        return Err("field `image_path` is empty".into());
    }
    let label = field("label")?;
    let label = Label::parse(label).ok_or_else(|| format!("unknown label `{label}`"))?;
    let source = match obj.get("source") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err("field `source` must be a string".into()),
    };
    let (exif, diag) = match obj.get("exif") {
        None | Some(Value::Null) => (None, None),
        Some(Value::Object(map)) => {
            let raw = map.iter().filter_map(|(k, v)| {
                let text = match v {
                    Value::String(s) => s.clone(),
                    Value::Number(n) => n.to_string(),
                    _ => return None,
                };
                Some((k.as_str(), text))
            });
            let (rec, d) = parse_exif(raw);
            (Some(rec), Some(d))
        }
        Some(_) => return Err("field `exif` must be an object".into()),
    };
    Ok((
        ManifestEntry {
            image_path: image_path.to_string(),
            label,
            source,
            exif,
        },
        diag,
    ))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::parse_jsonl(BufReader::new(fs::File::open(path)?))
}

/// Entries whose EXIF has all fourteen tags.
pub fn filter_complete(manifest: &DatasetManifest) -> DatasetManifest {
    manifest.filtered(ManifestEntry::has_complete_exif)
}

/// Source of decoded pixels for manifest paths.
pub trait ImageStore: Send + Sync {
    fn load(&self, path: &str) -> Result<Image>;
}

/// Reads images from disk, resolving relative paths against `root`.
#[derive(Clone, Debug)]
pub struct DiskStore {
    root: PathBuf,
}

impl DiskStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Store rooted at the directory holding `manifest_path`.
    pub fn beside(manifest_path: &Path) -> Self {
        Self::new(manifest_path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

impl ImageStore for DiskStore {
    fn load(&self, path: &str) -> Result<Image> {
        let full = self.resolve(path);
        if !full.is_file() {
            return Err(Error::MissingImage(full));
        }
        Image::open(&full)
    }
}

/// In-memory images keyed by manifest path.
#[derive(Clone, Debug, Default)]
pub struct MemoryStore {
    images: HashMap<String, Arc<Image>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, image: Image) {
        self.images.insert(path.into(), Arc::new(image));
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl ImageStore for MemoryStore {
    fn load(&self, path: &str) -> Result<Image> {
        self.images
            .get(path)
            .map(|img| (**img).clone())
            .ok_or_else(|| Error::MissingImage(PathBuf::from(path)))
    }
}

#[derive(Clone, Debug)]
pub struct Minibatch {
    pub paths: Vec<String>,
    pub images: Vec<Image>,
    /// Empty records for entries without EXIF.
    pub records: Vec<ExifRecord>,
    pub labels: Vec<Label>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn load(manifest: &DatasetManifest, indices: &[usize], store: &dyn ImageStore) -> Result<Self> {
        let mut batch = Minibatch {
            paths: Vec::with_capacity(indices.len()),
            images: Vec::with_capacity(indices.len()),
            records: Vec::with_capacity(indices.len()),
            labels: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            let e = &manifest.entries[i];
            batch.images.push(store.load(&e.image_path)?);
            batch.paths.push(e.image_path.clone());
            batch.records.push(e.exif.clone().unwrap_or_default());
            batch.labels.push(e.label);
        }
        Ok(batch)
    }
}

/// `size` distinct indices out of `len`, uniformly, fully determined by `seed`.
pub fn sample_indices(len: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size > len {
        return Err(invalid(format!("minibatch of {size} from {len} entries")));
    }
    Ok(index::sample(&mut seeded(seed), len, size).into_vec())
}

pub fn sample_minibatch(
    manifest: &DatasetManifest,
    size: usize,
    seed: u64,
    store: &dyn ImageStore,
) -> Result<Minibatch> {
    let idx = sample_indices(manifest.len(), size, seed)?;
    Minibatch::load(manifest, &idx, store)
}

/// All unordered index pairs `(i, j)` with `i < j`, in lexicographic order.
pub fn enumerate_pairs(batch_len: usize) -> Result<Vec<(usize, usize)>> {
    if batch_len < 2 {
        return Err(invalid(format!("pairs need at least 2 items, got {batch_len}")));
    }
    Ok((0..batch_len)
        .flat_map(|i| (i + 1..batch_len).map(move |j| (i, j)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exif::Tag;

    fn full_exif() -> String {
        let mut m = serde_json::Map::new();
        for t in Tag::ALL {
            let v = match t.kind() {
                crate::exif::TagKind::Categorical => "x".to_string(),
                _ => "2".to_string(),
            };
            m.insert(t.name().to_string(), Value::String(v));
        }
        Value::Object(m).to_string()
    }

    #[test]
    fn loads_valid_lines() {
        let text = format!(
            "{{\"image_path\":\"a.png\",\"label\":\"photographic\",\"source\":\"cam\",\"exif\":{}}}\n\
             {{\"image_path\":\"b.png\",\"label\":\"generated\",\"source\":\"gan\",\"exif\":null}}\n\
             \n\
             {{\"image_path\":\"c.png\",\"label\":\"generated\",\"source\":\"gan\"}}\n",
            full_exif()
        );
        let m = DatasetManifest::parse_jsonl(text.as_bytes()).unwrap();
        assert_eq!(m.len(), 3);
        assert!(m.entries[0].has_complete_exif());
        assert_eq!(m.entries[1].label, Label::Generated);
        assert!(m.diagnostics.is_empty());
    }

    #[test]
    fn rejects_bad_lines() {
        let dup = "{\"image_path\":\"a\",\"label\":\"generated\"}\n{\"image_path\":\"a\",\"label\":\"generated\"}";
        let err = DatasetManifest::parse_jsonl(dup.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err}");

        let missing = "{\"image_path\":\"a\",\"label\":\"generated\"}\n{\"image_path\":\"b\",\"source\":\"s\"}";
        let err = DatasetManifest::parse_jsonl(missing.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"));
        assert!(err.to_string().contains("`label`"));

        let junk = "not json";
        assert!(matches!(
            DatasetManifest::parse_jsonl(junk.as_bytes()),
            Err(Error::Manifest { line: 1, .. })
        ));
    }

    #[test]
    fn exif_diagnostics_are_recorded() {
        let text = "{\"image_path\":\"a\",\"label\":\"photographic\",\"exif\":{\"FocalLength\":\"wide\",\"Foo\":1}}";
        let m = DatasetManifest::parse_jsonl(text.as_bytes()).unwrap();
        assert_eq!(m.diagnostics.len(), 1);
        assert_eq!(m.diagnostics[0].exif.unknown_keys, 1);
        assert_eq!(m.diagnostics[0].exif.unparseable, vec![Tag::FocalLength]);
    }

    fn mixed_manifest() -> DatasetManifest {
        let complete = parse_exif(
            Tag::ALL.map(|t| (t.name(), if t.kind().is_numeric() { "1" } else { "a" })),
        )
        .0;
        let entries = (0..10)
            .map(|i| {
                let mut rec = complete.clone();
                // entries 0, 3, 6, 9 stay complete; the rest lose a tag
                if i % 3 != 0 {
                    rec.set(Tag::ALL[i], crate::exif::ParsedValue::Absent);
                }
                ManifestEntry::new(format!("img{i}"), Label::Photographic, "s").with_exif(rec)
            })
            .collect();
        DatasetManifest::from_entries(entries).unwrap()
    }

    #[test]
    fn filter_complete_matches_presence_oracle() {
        let m = mixed_manifest();
        let oracle = m
            .entries
            .iter()
            .filter(|e| Tag::ALL.iter().all(|&t| e.exif.as_ref().unwrap().get(t).is_present()))
            .count();
        let f = filter_complete(&m);
        assert_eq!(f.len(), oracle);
        assert_eq!(f.len(), 4);
        assert_eq!(filter_complete(&f), f);

        let mut no_flash = m.entries[0].clone();
        no_flash.exif.as_mut().unwrap().set(Tag::Flash, crate::exif::ParsedValue::Absent);
        let single = DatasetManifest::from_entries(vec![no_flash]).unwrap();
        assert!(filter_complete(&single).is_empty());
    }

    #[test]
    fn sampling_is_seeded() {
        assert_eq!(sample_indices(50, 10, 7).unwrap(), sample_indices(50, 10, 7).unwrap());
        let mut all = sample_indices(20, 20, 3).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert!(sample_indices(3, 4, 0).is_err());
    }

    #[test]
    fn sampling_inclusion_is_uniform() {
        let (n, k, draws) = (20usize, 5usize, 1000usize);
        let mut counts = vec![0usize; n];
        for seed in 0..draws as u64 {
            for i in sample_indices(n, k, seed).unwrap() {
                counts[i] += 1;
            }
        }
        let p = k as f64 / n as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "count {c} vs {mean}±{sd}");
        }
    }

    #[test]
    fn minibatch_loads_aligned() {
        let m = mixed_manifest();
        let mut store = MemoryStore::new();
        for e in &m.entries {
            store.insert(e.image_path.clone(), Image::filled(4, 4, 0.5));
        }
        let b = sample_minibatch(&m, 4, 1, &store).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.records.len(), 4);
        assert_eq!(b.labels.len(), 4);
        let b2 = sample_minibatch(&m, 4, 1, &store).unwrap();
        assert_eq!(b.paths, b2.paths);
        assert!(matches!(store.load("nope"), Err(Error::MissingImage(_))));
    }

    #[test]
    fn pairs() {
        assert_eq!(enumerate_pairs(2).unwrap(), vec![(0, 1)]);
        assert_eq!(enumerate_pairs(4).unwrap().len(), 6);
        assert_eq!(enumerate_pairs(64).unwrap().len(), 64 * 63 / 2);
        assert!(enumerate_pairs(1).is_err());
        let p = enumerate_pairs(9).unwrap();
        let set: HashSet<_> = p.iter().copied().collect();
        assert_eq!(set.len(), p.len());
        assert!(p.iter().all(|&(i, j)| i < j));
    }
}

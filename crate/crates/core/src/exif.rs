//! The fourteen camera-metadata tags used as pretext targets.
//!
//! Raw EXIF arrives as string key/value maps (the output of whatever tool
//! pulled it out of the container). [`parse_exif`] turns such a map into an
//! [`ExifRecord`] with canonical units, and [`TagSchema`] holds the per-tag
//! vocabularies and loss weights the pretext heads are built from.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the catch-all category every categorical vocabulary ends with.
pub const OTHERS: &str = "others";

/// Default number of head categories kept per categorical tag.
pub const DEFAULT_TOP_C: usize = 30;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagKind {
    Categorical,
    Ordinal,
    Continuous,
}

impl TagKind {
    pub fn is_numeric(self) -> bool {
        !matches!(self, TagKind::Categorical)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    Flash,
    Make,
    MeteringMode,
    Model,
    SceneCaptureType,
    ExposureMode,
    WhiteBalanceMode,
    ExposureBiasValue,
    IsoSpeedRatings,
    ApertureValue,
    ExposureTime,
    FNumber,
    FocalLength,
    ShutterSpeedValue,
}

impl Tag {
    pub const COUNT: usize = 14;

    pub const ALL: [Tag; Tag::COUNT] = [
        Tag::Flash,
        Tag::Make,
        Tag::MeteringMode,
        Tag::Model,
        Tag::SceneCaptureType,
        Tag::ExposureMode,
        Tag::WhiteBalanceMode,
        Tag::ExposureBiasValue,
        Tag::IsoSpeedRatings,
        Tag::ApertureValue,
        Tag::ExposureTime,
        Tag::FNumber,
        Tag::FocalLength,
        Tag::ShutterSpeedValue,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tag::Flash => "Flash",
            Tag::Make => "Make",
            Tag::MeteringMode => "MeteringMode",
            Tag::Model => "Model",
            Tag::SceneCaptureType => "SceneCaptureType",
            Tag::ExposureMode => "ExposureMode",
            Tag::WhiteBalanceMode => "WhiteBalanceMode",
            Tag::ExposureBiasValue => "ExposureBiasValue",
            Tag::IsoSpeedRatings => "ISOSpeedRatings",
            Tag::ApertureValue => "ApertureValue",
            Tag::ExposureTime => "ExposureTime",
            Tag::FNumber => "F-Number",
            Tag::FocalLength => "FocalLength",
            Tag::ShutterSpeedValue => "ShutterSpeedValue",
        }
    }

    pub fn kind(self) -> TagKind {
        match self {
            Tag::Flash
            | Tag::Make
            | Tag::MeteringMode
            | Tag::Model
            | Tag::SceneCaptureType
            | Tag::ExposureMode
            | Tag::WhiteBalanceMode => TagKind::Categorical,
            Tag::ExposureBiasValue | Tag::IsoSpeedRatings => TagKind::Ordinal,
            _ => TagKind::Continuous,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn unit(self) -> Option<Unit> {
        match self {
            Tag::ExposureTime | Tag::ShutterSpeedValue => Some(Unit::Seconds),
            Tag::FocalLength => Some(Unit::Millimeters),
            Tag::FNumber | Tag::ApertureValue => Some(Unit::FStop),
            Tag::ExposureBiasValue => Some(Unit::Ev),
            Tag::IsoSpeedRatings => Some(Unit::Iso),
            _ => None,
        }
    }

    /// Looks up a tag by its canonical name or a common alias used by EXIF tools.
    pub fn from_key(key: &str) -> Option<Tag> {
        let folded: String = key
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        let tag = match folded.as_str() {
            "flash" => Tag::Flash,
            "make" => Tag::Make,
            "meteringmode" => Tag::MeteringMode,
            "model" => Tag::Model,
            "scenecapturetype" => Tag::SceneCaptureType,
            "exposuremode" => Tag::ExposureMode,
            "whitebalancemode" | "whitebalance" => Tag::WhiteBalanceMode,
            "exposurebiasvalue" | "exposurebias" | "exposurecompensation" => Tag::ExposureBiasValue,
            "isospeedratings" | "iso" | "photographicsensitivity" => Tag::IsoSpeedRatings,
            "aperturevalue" => Tag::ApertureValue,
            "exposuretime" => Tag::ExposureTime,
            "fnumber" => Tag::FNumber,
            "focallength" => Tag::FocalLength,
            "shutterspeedvalue" => Tag::ShutterSpeedValue,
            _ => return None,
        };
        Some(tag)
    }

    pub fn categorical() -> impl Iterator<Item = Tag> {
        Tag::ALL.into_iter().filter(|t| t.kind() == TagKind::Categorical)
    }

    pub fn numeric() -> impl Iterator<Item = Tag> {
        Tag::ALL.into_iter().filter(|t| t.kind().is_numeric())
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    Seconds,
    Millimeters,
    FStop,
    Ev,
    Iso,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub enum ParsedValue {
    Categorical(String),
    Numeric {
        value: f64,
        unit: Unit,
    },
    #[default]
    Absent,
}

impl ParsedValue {
    pub fn is_present(&self) -> bool {
        !matches!(self, ParsedValue::Absent)
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            ParsedValue::Numeric { value, .. } => Some(*value),
            _ => None,
        }
    }

    pub fn as_category(&self) -> Option<&str> {
        match self {
            ParsedValue::Categorical(s) => Some(s),
            _ => None,
        }
    }
}

/// Parsed values of the fourteen tags for one photograph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExifRecord {
    values: [ParsedValue; Tag::COUNT],
}

impl ExifRecord {
    pub fn get(&self, tag: Tag) -> &ParsedValue {
        &self.values[tag.index()]
    }

    pub fn set(&mut self, tag: Tag, value: ParsedValue) {
        self.values[tag.index()] = value;
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(ParsedValue::is_present)
    }

    pub fn present_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_present()).count()
    }

    pub fn number(&self, tag: Tag) -> Option<f64> {
        self.get(tag).as_number()
    }

    /// Canonical string form. Feeding it back through [`parse_exif`]
    /// reproduces this record.
    pub fn to_raw(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for tag in Tag::ALL {
            let text = match self.get(tag) {
                ParsedValue::Absent => continue,
                ParsedValue::Categorical(s) => s.clone(),
                ParsedValue::Numeric { value, unit } => match unit {
                    Unit::Seconds => format!("{value} sec"),
                    Unit::Millimeters => format!("{value} mm"),
                    Unit::FStop => format!("F{value}"),
                    Unit::Ev => format!("{value} EV"),
                    Unit::Iso => format!("{value}"),
                },
            };
            out.insert(tag.name().to_string(), text);
        }
        out
    }
}

/// Tally of what happened while parsing one raw map.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParseDiagnostics {
    pub parsed: usize,
    pub unparseable: Vec<Tag>,
    pub unknown_keys: usize,
}

pub fn parse_exif<K, V, I>(raw: I) -> (ExifRecord, ParseDiagnostics)
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut record = ExifRecord::default();
    let mut diag = ParseDiagnostics::default();
    for (key, value) in raw {
        let Some(tag) = Tag::from_key(key.as_ref()) else {
            diag.unknown_keys += 1;
            continue;
        };
        match parse_value(tag, value.as_ref()) {
            Some(v) => {
                if !record.get(tag).is_present() {
                    diag.parsed += 1;
                }
                record.set(tag, v);
            }
            None => diag.unparseable.push(tag),
        }
    }
    (record, diag)
}

pub fn parse_value(tag: Tag, raw: &str) -> Option<ParsedValue> {
    let text = raw.trim();
    if text.is_empty() {
        return None;
    }
    let Some(unit) = tag.unit() else {
        return Some(ParsedValue::Categorical(text.to_lowercase()));
    };
    let lower = text.to_lowercase();
    let apex = lower.contains("apex");
    let value = match tag {
        Tag::ExposureTime | Tag::ShutterSpeedValue => {
            if apex {
                // Tv = -log2(t)
                parse_number(strip_words(&lower, &["apex", "tv"])).map(|tv| (-tv).exp2())
            } else {
                parse_number(strip_words(&lower, &["seconds", "sec", "s"]))
            }
        }
        Tag::FNumber | Tag::ApertureValue => {
            if apex {
                // Av = 2 log2(N)
                parse_number(strip_words(&lower, &["apex", "av"])).map(|av| (av / 2.0).exp2())
            } else {
                let s = lower.trim_start_matches("f/").trim_start_matches('f');
                parse_number(s)
            }
        }
        Tag::FocalLength => {
            let head = lower.split("mm").next().unwrap_or("");
            parse_number(head)
        }
        Tag::ExposureBiasValue => parse_number(strip_words(&lower, &["ev"])),
        Tag::IsoSpeedRatings => parse_number(strip_words(&lower, &["iso"])),
        _ => unreachable!("categorical tags have no unit"),
    }?;
    let valid = value.is_finite()
        && match tag {
            Tag::ExposureBiasValue => true,
            _ => value >= 0.0,
        };
    valid.then_some(ParsedValue::Numeric { value, unit })
}

fn strip_words<'a>(s: &'a str, words: &[&str]) -> &'a str {
    let mut s = s.trim();
    loop {
        let before = s;
        for w in words {
            if let Some(rest) = s.strip_suffix(w) {
                s = rest.trim_end();
            }
            if let Some(rest) = s.strip_prefix(w) {
                s = rest.trim_start();
            }
        }
        if s == before {
            return s;
        }
    }
}

/// Parses a decimal or a `num/den` rational, either optionally signed.
fn parse_number(s: &str) -> Option<f64> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    let (neg, body) = match s.as_bytes()[0] {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    let v = match body.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().ok()?;
            let d: f64 = d.trim().parse().ok()?;
            if d == 0.0 {
                return None;
            }
            n / d
        }
        None => body.trim().parse().ok()?,
    };
    if body.starts_with(['+', '-']) || !v.is_finite() {
        return None;
    }
    Some(if neg { -v } else { v })
}

/// Top `top_c` categories of `tag` by frequency, then [`OTHERS`].
pub fn build_vocab(records: &[ExifRecord], tag: Tag, top_c: usize) -> Result<Vec<String>> {
    if tag.kind() != TagKind::Categorical {
        return Err(Error::NotCategorical(tag.name()));
    }
    if top_c == 0 {
        return Err(crate::error::invalid("top_c must be at least 1"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut any = false;
    for value in records.iter().filter_map(|r| r.get(tag).as_category()) {
        any = true;
        if value != OTHERS {
            *counts.entry(value).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::NoValues(tag.name()));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut vocab: Vec<String> = ranked
        .into_iter()
        .take(top_c)
        .map(|(s, _)| s.to_string())
        .collect();
    vocab.push(OTHERS.to_string());
    Ok(vocab)
}

pub fn encode_categorical(record: &ExifRecord, tag: Tag, schema: &TagSchema) -> Result<usize> {
    let entry = schema.entry(tag);
    if entry.kind != TagKind::Categorical {
        return Err(Error::NotCategorical(tag.name()));
    }
    if entry.vocabulary.is_empty() {
        return Err(Error::NoVocabulary(tag.name()));
    }
    let value = record
        .get(tag)
        .as_category()
        .ok_or(Error::TagAbsent(tag.name()))?;
    let others = entry.vocabulary.len() - 1;
    Ok(entry.vocabulary[..others]
        .iter()
        .position(|v| v == value)
        .unwrap_or(others))
}

/// 1 when `x`'s value of `tag` is at least `y`'s.
pub fn rank_label(x: &ExifRecord, y: &ExifRecord, tag: Tag) -> Result<u8> {
    if !tag.kind().is_numeric() {
        return Err(Error::NotNumeric(tag.name()));
    }
    let a = x.number(tag).ok_or(Error::TagAbsent(tag.name()))?;
    let b = y.number(tag).ok_or(Error::TagAbsent(tag.name()))?;
    Ok(u8::from(a >= b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagEntry {
    pub name: String,
    pub kind: TagKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vocabulary: Vec<String>,
    pub weight: f64,
}

/// Per-tag kinds, vocabularies and loss weights, in [`Tag::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct TagSchema {
    entries: Vec<TagEntry>,
}

#[derive(Serialize, Deserialize)]
struct SchemaDoc {
    version: u32,
    tags: Vec<TagEntry>,
}

impl TagSchema {
    /// Builds vocabularies for every categorical tag from `records`, all weights 1.
    pub fn build(records: &[ExifRecord], top_c: usize) -> Result<Self> {
        let entries = Tag::ALL
            .into_iter()
            .map(|tag| {
                let vocabulary = match tag.kind() {
                    TagKind::Categorical => build_vocab(records, tag, top_c)?,
                    _ => Vec::new(),
                };
                Ok(TagEntry {
                    name: tag.name().to_string(),
                    kind: tag.kind(),
                    vocabulary,
                    weight: 1.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }

    /// Entries in [`Tag::ALL`] order, validated.
    pub fn from_entries(entries: Vec<TagEntry>) -> Result<Self> {
        let schema = Self { entries };
        schema.validate()?;
        Ok(schema)
    }

    pub fn entry(&self, tag: Tag) -> &TagEntry {
        &self.entries[tag.index()]
    }

    pub fn entries(&self) -> impl Iterator<Item = (Tag, &TagEntry)> {
        Tag::ALL.into_iter().zip(&self.entries)
    }

    pub fn as_slice(&self) -> &[TagEntry] {
        &self.entries
    }

    pub fn weight(&self, tag: Tag) -> f64 {
        self.entry(tag).weight
    }

    /// Zero disables a tag's loss term.
    pub fn set_weight(&mut self, tag: Tag, weight: f64) -> Result<()> {
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(crate::error::invalid(format!("weight for {tag} must be finite and >= 0")));
        }
        self.entries[tag.index()].weight = weight;
        Ok(())
    }

    /// Number of classes `C_i` of a categorical tag, 1 for numeric tags.
    pub fn output_dim(&self, tag: Tag) -> usize {
        match tag.kind() {
            TagKind::Categorical => self.entry(tag).vocabulary.len(),
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(crate::error::invalid(m));
        if self.entries.len() != Tag::COUNT {
            return bad(format!("schema has {} tags, expected 14", self.entries.len()));
        }
        for (tag, e) in self.entries() {
            if e.name != tag.name() || e.kind != tag.kind() {
                return bad(format!("entry `{}` does not match tag {tag}", e.name));
            }
            if !(e.weight.is_finite() && e.weight >= 0.0) {
                return bad(format!("weight of {tag} is {}", e.weight));
            }
            if e.kind == TagKind::Categorical {
                let n_others = e.vocabulary.iter().filter(|v| *v == OTHERS).count();
                if n_others != 1 || e.vocabulary.last().map(String::as_str) != Some(OTHERS) {
                    return bad(format!("vocabulary of {tag} must end with a single `{OTHERS}`"));
                }
            } else if !e.vocabulary.is_empty() {
                return bad(format!("numeric tag {tag} has a vocabulary"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = SchemaDoc {
            version: SCHEMA_VERSION,
            tags: self.entries.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SchemaDoc = serde_json::from_str(text)?;
        if doc.version != SCHEMA_VERSION {
            return Err(crate::error::invalid(format!("unsupported schema version {}", doc.version)));
        }
        let schema = Self { entries: doc.tags };
        schema.validate()?;
        Ok(schema)
    }
}

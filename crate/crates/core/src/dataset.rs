//! Manifest parsing, validation and the per-group 7:1:2 split.
//!
//! A manifest is UTF-8 JSON Lines. Every line is a flat object with exactly
//! the keys `id`, `title`, `description`, `image_path`, `category`, `volume`,
//! `source` and an optional `split`. Blank lines are skipped.
//!
//! Split ratios are ordered train:test:val = 7:1:2.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::rng::SplitMix64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifestError {
    #[error("manifest not found: {0}")]
    FileNotFound(String),
    #[error("failed to read manifest: {0}")]
    Io(String),
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: record {id:?} has category {category} but source {source_kind}")]
    CrossSourceCategory {
        line: usize,
        id: String,
        category: Category,
        source_kind: Source,
    },
}

impl ManifestError {
    pub fn line(&self) -> Option<usize> {
        match self {
            Self::MalformedLine { line, .. }
            | Self::DuplicateId { line, .. }
            | Self::CrossSourceCategory { line, .. } => Some(*line),
            _ => None,
        }
    }
}

macro_rules! string_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown {} {other:?}, expected one of: {}",
                        stringify!($name).to_lowercase(),
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

string_enum!(Category {
    Pattern => "pattern",
    OriginalTextile => "original_textile",
    CroppedPattern => "cropped_pattern",
    Mural => "mural",
});

string_enum!(Source {
    Silk => "silk",
    Dunhuang => "dunhuang",
});

string_enum!(Split {
    Train => "train",
    Test => "test",
    Val => "val",
});

impl Split {
    /// Fraction numerators over 10, in train:test:val order.
    pub const RATIO_TENTHS: [(Split, u64); 3] = [(Split::Train, 7), (Split::Test, 1), (Split::Val, 2)];

    /// Order in which equal remainders receive the leftover seats.
    pub const PRIORITY: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl Category {
    pub fn expected_source(self) -> Source {
        match self {
            Category::Mural => Source::Dunhuang,
            _ => Source::Silk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub title: String,
    pub description: String,
    pub image_path: String,
    pub category: Category,
    pub volume: String,
    pub source: Source,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub split: Option<Split>,
}

impl ManifestRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("manifest records always serialize")
    }
}

const REQUIRED_KEYS: [&str; 7] = ["id", "title", "description", "image_path", "category", "volume", "source"];
const MAX_ID_BYTES: usize = u16::MAX as usize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Collect every error instead of stopping at the first; unknown keys are ignored.
    pub lenient: bool,
}

/// Outcome of a lenient parse: every valid record plus every error found.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParseReport {
    pub records: Vec<ManifestRecord>,
    pub errors: Vec<ManifestError>,
}

fn string_field(obj: &Map<String, Value>, key: &str, line: usize) -> Result<String, ManifestError> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(ManifestError::MalformedLine {
            line,
            reason: format!("key {key:?} must be a string"),
        }),
        None => Err(ManifestError::MalformedLine {
            line,
            reason: format!("missing key {key:?}"),
        }),
    }
}

fn enum_field<T: FromStr<Err = String>>(obj: &Map<String, Value>, key: &str, line: usize) -> Result<T, ManifestError> {
    string_field(obj, key, line)?
        .parse()
        .map_err(|reason| ManifestError::MalformedLine { line, reason })
}

/// Parse one manifest line (1-based `line` for diagnostics).
pub fn parse_line(text: &str, line: usize, opts: ParseOptions) -> Result<ManifestRecord, ManifestError> {
    let value: Value = serde_json::from_str(text).map_err(|e| ManifestError::MalformedLine {
        line,
        reason: format!("invalid JSON: {e}"),
    })?;
    let Value::Object(obj) = value else {
        return Err(ManifestError::MalformedLine {
            line,
            reason: "expected a JSON object".into(),
        });
    };
    if !opts.lenient {
        if let Some(k) = obj.keys().find(|k| !REQUIRED_KEYS.contains(&k.as_str()) && *k != "split") {
            return Err(ManifestError::MalformedLine {
                line,
                reason: format!("unknown key {k:?}"),
            });
        }
    }
    let id = string_field(&obj, "id", line)?;
    let description = string_field(&obj, "description", line)?;
    let image_path = string_field(&obj, "image_path", line)?;
    for (key, value) in [("id", &id), ("description", &description), ("image_path", &image_path)] {
        if value.is_empty() {
            return Err(ManifestError::MalformedLine {
                line,
                reason: format!("{key} must not be empty"),
            });
        }
    }
    if id.len() > MAX_ID_BYTES {
        return Err(ManifestError::MalformedLine {
            line,
            reason: format!("id is {} bytes, limit is {MAX_ID_BYTES}", id.len()),
        });
    }
    let split = match obj.get("split") {
        None | Some(Value::Null) => None,
        Some(_) => Some(enum_field(&obj, "split", line)?),
    };
    let record = ManifestRecord {
        id,
        title: string_field(&obj, "title", line)?,
        description,
        image_path,
        category: enum_field(&obj, "category", line)?,
        volume: string_field(&obj, "volume", line)?,
        source: enum_field(&obj, "source", line)?,
        split,
    };
    if record.category.expected_source() != record.source {
        return Err(ManifestError::CrossSourceCategory {
            line,
            id: record.id,
            category: record.category,
            source_kind: record.source,
        });
    }
    Ok(record)
}

/// Parse manifest text. In strict mode the first error aborts; in lenient mode
/// all errors are collected alongside the records that did validate.
pub fn parse_manifest_str(text: &str, opts: ParseOptions) -> Result<ParseReport, ManifestError> {
    let mut report = ParseReport::default();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed = parse_line(raw, line, opts).and_then(|r| {
            if seen.insert(r.id.clone()) {
                Ok(r)
            } else {
                Err(ManifestError::DuplicateId { line, id: r.id })
            }
        });
        match parsed {
            Ok(r) => report.records.push(r),
            Err(e) if opts.lenient => report.errors.push(e),
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

pub fn parse_manifest_with(path: &Path, opts: ParseOptions) -> Result<ParseReport, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ManifestError::FileNotFound(path.display().to_string()),
        _ => ManifestError::Io(format!("{}: {e}", path.display())),
    })?;
    parse_manifest_str(&text, opts)
}

/// Strict parse of a manifest file.
pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestRecord>, ManifestError> {
    parse_manifest_with(path, ParseOptions::default()).map(|r| r.records)
}

/// Largest-remainder seat counts for a group of `n`, in train, test, val order.
pub fn split_quotas(n: usize) -> [(Split, usize); 3] {
    let n = n as u64;
    let mut seats = Split::RATIO_TENTHS.map(|(s, tenths)| (s, n * tenths / 10, n * tenths % 10));
    let assigned: u64 = seats.iter().map(|s| s.1).sum();
    let mut leftover = n - assigned;
    let mut order: Vec<usize> = (0..3).collect();
    let priority = |s: Split| Split::PRIORITY.iter().position(|&p| p == s).unwrap();
    order.sort_by(|&a, &b| {
        seats[b]
            .2
            .cmp(&seats[a].2)
            .then_with(|| priority(seats[a].0).cmp(&priority(seats[b].0)))
    });
    for i in order {
        if leftover == 0 {
            break;
        }
        seats[i].1 += 1;
        leftover -= 1;
    }
    seats.map(|(s, count, _)| (s, count as usize))
}

/// Record id to split label, in manifest order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub seed: u64,
    pub labels: Vec<(String, Split)>,
}

impl SplitAssignment {
    pub fn get(&self, id: &str) -> Option<Split> {
        self.labels.iter().find(|(i, _)| i == id).map(|(_, s)| *s)
    }

    pub fn as_map(&self) -> HashMap<&str, Split> {
        self.labels.iter().map(|(i, s)| (i.as_str(), *s)).collect()
    }

    /// `id\tsplit` lines in manifest order.
    pub fn to_tsv(&self) -> String {
        self.labels.iter().map(|(id, s)| format!("{id}\t{s}\n")).collect()
    }
}

/// Assign train/test/val labels independently within each (volume, category)
/// group.
///
/// Groups are visited in sorted key order and members in ascending id order,
/// so the result depends only on the record set and the seed. One SplitMix64
/// stream seeded with `seed` drives all group shuffles; after shuffling, the
/// first quota goes to train, the next to test, the rest to val.
pub fn assign_splits(records: &[ManifestRecord], seed: u64) -> SplitAssignment {
    let mut groups: BTreeMap<(&str, Category), Vec<&str>> = BTreeMap::new();
    for r in records {
        groups.entry((r.volume.as_str(), r.category)).or_default().push(&r.id);
    }
    let mut rng = SplitMix64::new(seed);
    let mut label_of: HashMap<&str, Split> = HashMap::with_capacity(records.len());
    for members in groups.values_mut() {
        members.sort_unstable();
        rng.shuffle(members);
        let mut cursor = members.iter();
        for (split, count) in split_quotas(members.len()) {
            for id in cursor.by_ref().take(count) {
                label_of.insert(id, split);
            }
        }
    }
    SplitAssignment {
        seed,
        labels: records.iter().map(|r| (r.id.clone(), label_of[r.id.as_str()])).collect(),
    }
}

/// Copy of `records` with every `split` field filled from `assignment`.
pub fn apply_splits(records: &[ManifestRecord], assignment: &SplitAssignment) -> Vec<ManifestRecord> {
    let map = assignment.as_map();
    records
        .iter()
        .map(|r| ManifestRecord {
            split: map.get(r.id.as_str()).copied(),
            ..r.clone()
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Summary {
    pub groups: BTreeMap<(Source, String, Category), usize>,
    pub total: usize,
}

impl Summary {
    pub fn by_source(&self) -> BTreeMap<Source, usize> {
        let mut out = BTreeMap::new();
        for ((src, _, _), n) in &self.groups {
            *out.entry(*src).or_default() += n;
        }
        out
    }

    /// `source\tvolume\tcategory\tcount` lines followed by a total line.
    pub fn to_tsv(&self) -> String {
        let mut out: String = self
            .groups
            .iter()
            .map(|((s, v, c), n)| format!("{s}\t{v}\t{c}\t{n}\n"))
            .collect();
        out.push_str(&format!("total\t\t\t{}\n", self.total));
        out
    }
}

pub fn summarize(records: &[ManifestRecord]) -> Summary {
    let mut summary = Summary::default();
    for r in records {
        *summary.groups.entry((r.source, r.volume.clone(), r.category)).or_default() += 1;
        summary.total += 1;
    }
    summary
}

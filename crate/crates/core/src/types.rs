//! Shared data model: boxes, question types, puzzle instances and the
//! per-puzzle weight manifest.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in absolute pixels, origin top-left, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(into = "[u32; 4]")]
pub struct BBox {
    x1: u32,
    y1: u32,
    x2: u32,
    y2: u32,
}

impl BBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self> {
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::invalid(
                "bbox",
                format!("degenerate box [{x1},{y1},{x2},{y2}]"),
            ));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Accepts signed coordinates, as found in detector output.
    pub fn from_signed(coords: [i64; 4]) -> Result<Self> {
        let [x1, y1, x2, y2] = coords;
        if coords.iter().any(|&c| c < 0 || c > u32::MAX as i64) {
            return Err(Error::invalid(
                "bbox",
                format!("coordinate out of range in [{x1},{y1},{x2},{y2}]"),
            ));
        }
        Self::new(x1 as u32, y1 as u32, x2 as u32, y2 as u32)
    }

    pub fn x1(&self) -> u32 {
        self.x1
    }
    pub fn y1(&self) -> u32 {
        self.y1
    }
    pub fn x2(&self) -> u32 {
        self.x2
    }
    pub fn y2(&self) -> u32 {
        self.y2
    }
    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }
    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }
    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn coords(&self) -> [u32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.x2 <= width && self.y2 <= height
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = <[i64; 4]>::deserialize(d)?;
        BBox::from_signed(raw).map_err(serde::de::Error::custom)
    }
}

/// `[x1,y1,x2,y2]` with no spaces, the notation used inside model templates.
impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{},{}]", self.x1, self.y1, self.x2, self.y2)
    }
}

pub const DEFAULT_TYPE_NAMES: [&str; 7] = [
    "counting",
    "arithmetic",
    "algebra",
    "spatial reasoning",
    "measuring",
    "logic",
    "path finding",
];

/// A question-type label. Only obtainable through a [`TypeList`], so the
/// name is always a member of some configured list.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct QuestionType(String);

impl QuestionType {
    pub fn name(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Ordered, duplicate-free list of lowercase type names. Order matters: it is
/// the priority for response parsing and vote tie-breaking, and the adapter
/// index in the encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct TypeList(Vec<String>);

impl TypeList {
    pub fn new<S: AsRef<str>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(|s| s.as_ref().to_string()).collect();
        if names.is_empty() {
            return Err(Error::invalid("type list", "must not be empty"));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return Err(Error::invalid("type list", "empty type name"));
            }
            if *n != n.to_lowercase() {
                return Err(Error::invalid("type list", format!("`{n}` is not lowercase")));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::invalid("type list", format!("duplicate type `{n}`")));
            }
        }
        Ok(Self(names))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Result<QuestionType> {
        match self.index_of(name) {
            Some(_) => Ok(QuestionType(name.to_string())),
            None => Err(Error::invalid(
                "question type",
                format!("`{name}` is not in the configured type list"),
            )),
        }
    }

    pub fn by_index(&self, index: usize) -> Option<QuestionType> {
        self.0.get(index).cloned().map(QuestionType)
    }

    pub fn iter(&self) -> impl Iterator<Item = QuestionType> + '_ {
        self.0.iter().cloned().map(QuestionType)
    }
}

impl Default for TypeList {
    fn default() -> Self {
        Self(DEFAULT_TYPE_NAMES.iter().map(|s| s.to_string()).collect())
    }
}

impl<'de> Deserialize<'de> for TypeList {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        TypeList::new(names).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptionLabel {
    A,
    B,
    C,
    D,
    E,
}

impl OptionLabel {
    pub const ALL: [OptionLabel; 5] = [
        OptionLabel::A,
        OptionLabel::B,
        OptionLabel::C,
        OptionLabel::D,
        OptionLabel::E,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_char(self) -> char {
        (b'A' + self as u8) as char
    }
}

impl fmt::Display for OptionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl std::str::FromStr for OptionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Self::A),
            "B" => Ok(Self::B),
            "C" => Ok(Self::C),
            "D" => Ok(Self::D),
            "E" => Ok(Self::E),
            other => Err(Error::invalid(
                "option label",
                format!("`{other}` is not one of A-E"),
            )),
        }
    }
}

/// One puzzle sample. `options[i]` is labeled `A + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PuzzleInstance {
    pub puzzle_id: u64,
    pub instance_id: u64,
    #[serde(rename = "image")]
    pub image_path: PathBuf,
    pub question: String,
    pub options: [String; 5],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<OptionLabel>,
}

/// Reads a JSON-lines instance file. Blank lines are skipped.
pub fn load_instances(path: &Path) -> Result<Vec<PuzzleInstance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))
        })
        .collect()
}

/// Groups instances by puzzle id, ascending.
pub fn group_by_puzzle(instances: &[PuzzleInstance]) -> BTreeMap<u64, Vec<PuzzleInstance>> {
    let mut groups: BTreeMap<u64, Vec<PuzzleInstance>> = BTreeMap::new();
    for inst in instances {
        groups.entry(inst.puzzle_id).or_default().push(inst.clone());
    }
    groups
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Vl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PuzzleEntry {
    pub weight: f64,
    pub modality: Modality,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    puzzle_id: u64,
    weight: f64,
    modality: Modality,
}

/// Per-puzzle weight and modality. Weights are always supplied, never inferred.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PuzzleManifest {
    entries: BTreeMap<u64, PuzzleEntry>,
}

impl PuzzleManifest {
    pub fn from_entries(entries: impl IntoIterator<Item = (u64, PuzzleEntry)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (id, entry) in entries {
            if !(entry.weight.is_finite() && entry.weight > 0.0) {
                return Err(Error::invalid(
                    "manifest",
                    format!("puzzle {id}: weight must be positive, got {}", entry.weight),
                ));
            }
            if map.insert(id, entry).is_some() {
                return Err(Error::invalid("manifest", format!("duplicate puzzle_id {id}")));
            }
        }
        Ok(Self { entries: map })
    }

    pub fn get(&self, puzzle_id: u64) -> Option<&PuzzleEntry> {
        self.entries.get(&puzzle_id)
    }

    pub fn weight(&self, puzzle_id: u64) -> Option<f64> {
        self.get(puzzle_id).map(|e| e.weight)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &PuzzleEntry)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn to_json(&self) -> String {
        let records: Vec<_> = self
            .iter()
            .map(|(id, e)| serde_json::json!({"puzzle_id": id, "weight": e.weight, "modality": e.modality}))
            .collect();
        serde_json::to_string_pretty(&records).expect("manifest serializes")
    }
}

pub fn parse_manifest(text: &str, context: &str) -> Result<PuzzleManifest> {
    let records: Vec<ManifestRecord> = serde_json::from_str(text).map_err(|e| Error::json(context, e))?;
    PuzzleManifest::from_entries(records.into_iter().map(|r| {
        (
            r.puzzle_id,
            PuzzleEntry {
                weight: r.weight,
                modality: r.modality,
            },
        )
    }))
}

pub fn load_manifest(path: &Path) -> Result<PuzzleManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_rejects_degenerate() {
        assert!(BBox::new(0, 0, 10, 10).is_ok());
        assert!(BBox::new(10, 0, 10, 10).is_err());
        assert!(BBox::new(0, 5, 10, 5).is_err());
        assert!(BBox::new(11, 0, 10, 10).is_err());
        assert!(BBox::from_signed([-1, 0, 3, 3]).is_err());
    }

    #[test]
    fn bbox_display_has_no_spaces() {
        assert_eq!(BBox::new(4, 5, 40, 40).unwrap().to_string(), "[4,5,40,40]");
    }

    #[test]
    fn default_type_list_order() {
        let t = TypeList::default();
        assert_eq!(t.len(), 7);
        assert_eq!(t.index_of("counting"), Some(0));
        assert_eq!(t.index_of("path finding"), Some(6));
        assert!(t.get("geometry").is_err());
    }

    #[test]
    fn type_list_rejects_duplicates_and_empty() {
        assert!(TypeList::new(["a", "b", "a"]).is_err());
        assert!(TypeList::new(Vec::<String>::new()).is_err());
        assert!(TypeList::new(["Counting"]).is_err());
    }

    #[test]
    fn manifest_two_entries() {
        let m = parse_manifest(
            r#"[{"puzzle_id":1,"weight":1.0,"modality":"text"},
                {"puzzle_id":2,"weight":2.5,"modality":"vl"}]"#,
            "test",
        )
        .unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.weight(2), Some(2.5));
        assert_eq!(m.get(1).unwrap().modality, Modality::Text);
    }

    #[test]
    fn manifest_rejects_zero_weight() {
        let err = parse_manifest(r#"[{"puzzle_id":1,"weight":0.0,"modality":"text"}]"#, "t");
        assert!(matches!(err, Err(Error::Invalid { .. })));
    }

    #[test]
    fn manifest_missing_modality_names_field() {
        let err = parse_manifest(r#"[{"puzzle_id":1,"weight":1.0}]"#, "t").unwrap_err();
        assert!(err.to_string().contains("modality"), "{err}");
    }

    #[test]
    fn manifest_rejects_duplicate_id() {
        let err = parse_manifest(
            r#"[{"puzzle_id":3,"weight":1.0,"modality":"vl"},
                {"puzzle_id":3,"weight":1.0,"modality":"vl"}]"#,
            "t",
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn instance_needs_five_options() {
        let ok = r#"{"puzzle_id":1,"instance_id":2,"image":"a.png","question":"q",
                     "options":["1","2","3","4","5"],"answer":"C"}"#;
        let inst: PuzzleInstance = serde_json::from_str(ok).unwrap();
        assert_eq!(inst.answer, Some(OptionLabel::C));
        let four = r#"{"puzzle_id":1,"instance_id":2,"image":"a.png","question":"q",
                       "options":["1","2","3","4"]}"#;
        assert!(serde_json::from_str::<PuzzleInstance>(four).is_err());
        let bad = r#"{"puzzle_id":1,"instance_id":2,"image":"a.png","question":"q",
                      "options":["1","2","3","4","5"],"answer":"F"}"#;
        assert!(serde_json::from_str::<PuzzleInstance>(bad).is_err());
    }
}

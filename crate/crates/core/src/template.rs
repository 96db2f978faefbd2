//! Model-input templates: fuse question type, detected objects and OCR text
//! into one canonical string, and parse that string back.
//!
//! Grammar (byte-exact):
//!
//! ```text
//! Question type: <type>. Objects: <name>[x1,y1,x2,y2], ... . Ocr text:<text>[x1,y1,x2,y2], ... .
//! Question: <question> Options: A: <a>; B: <b>; C: <c>; D: <d>; E: <e>.
//! ```
//!
//! (one line; wrapped here). The item lists are joined with `", "` and
//! terminated by `"."` with no space before it. An empty object list renders
//! as `Objects: none.` and an empty OCR list as `Ocr text: none.`. There is
//! no space after `Ocr text:` when the list is non-empty.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BBox, QuestionType, TypeList};

pub const SECTION_MARKERS: [&str; 5] = ["Question type:", "Objects:", "Ocr text:", "Question:", "Options:"];

const TYPE_PREFIX: &str = "Question type: ";
const OBJECTS_SEP: &str = ". Objects: ";
const OCR_SEP: &str = ". Ocr text:";
const QUESTION_SEP: &str = ". Question: ";
const OPTIONS_SEP: &str = " Options: ";
const NONE: &str = "none";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_name: String,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrSpan {
    pub text: String,
    pub bbox: BBox,
    pub score: f64,
}

/// A named box as it appears in the template. Scores are used for ordering
/// upstream but are not part of the serialized form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub label: String,
    pub bbox: BBox,
}

impl From<&Detection> for LabeledBox {
    fn from(d: &Detection) -> Self {
        Self {
            label: d.class_name.clone(),
            bbox: d.bbox,
        }
    }
}

impl From<&OcrSpan> for LabeledBox {
    fn from(s: &OcrSpan) -> Self {
        Self {
            label: s.text.clone(),
            bbox: s.bbox,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    pub qtype: QuestionType,
    pub objects: Vec<LabeledBox>,
    pub ocr: Vec<LabeledBox>,
    /// Already annotated with object boxes.
    pub question: String,
    pub options: [String; 5],
}

impl ModelInput {
    /// Orders the detections, annotates the raw question with them, and
    /// keeps OCR spans in the order given.
    pub fn assemble(
        qtype: QuestionType,
        detections: &[Detection],
        ocr: &[OcrSpan],
        question: &str,
        options: [String; 5],
    ) -> Self {
        let ordered = order_objects(detections);
        Self {
            qtype,
            question: annotate_question(question, &ordered),
            objects: ordered.iter().map(LabeledBox::from).collect(),
            ocr: ocr.iter().map(LabeledBox::from).collect(),
            options,
        }
    }

    /// Whether `parse(build(self)) == self` is guaranteed: no field contains
    /// a section marker or the separator that ends it.
    pub fn is_round_trip_safe(&self) -> bool {
        let has_marker = |s: &str| SECTION_MARKERS.iter().any(|m| s.contains(m));
        let item_ok = |b: &LabeledBox| !b.label.is_empty() && !has_marker(&b.label) && !b.label.contains('[');
        let option_ok = |(i, o): (usize, &String)| {
            let next = (b'B' + i as u8) as char;
            !has_marker(o) && (i == 4 || !o.contains(&format!("; {next}: ")))
        };
        !has_marker(&self.question)
            && self.objects.iter().all(item_ok)
            && self.ocr.iter().all(item_ok)
            && self.options.iter().enumerate().all(option_ok)
    }
}

/// Score descending, then `(x1, y1, class_name)` ascending. Stable.
pub fn order_objects(detections: &[Detection]) -> Vec<Detection> {
    let mut out = detections.to_vec();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.bbox.x1().cmp(&b.bbox.x1()))
            .then(a.bbox.y1().cmp(&b.bbox.y1()))
            .then_with(|| a.class_name.cmp(&b.class_name))
    });
    out
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Byte ranges of case-insensitive whole-word occurrences of `word`.
fn word_matches(text: &str, word: &str) -> Vec<(usize, usize)> {
    let wanted: Vec<char> = word.chars().flat_map(char::to_lowercase).collect();
    if wanted.is_empty() {
        return Vec::new();
    }
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut hits = Vec::new();
    'outer: for start in 0..chars.len() {
        if start > 0 && is_word_char(chars[start - 1].1) && is_word_char(chars[start].1) {
            continue;
        }
        let mut k = 0;
        let mut pos = start;
        while k < wanted.len() {
            let Some(&(_, c)) = chars.get(pos) else {
                continue 'outer;
            };
            for lc in c.to_lowercase() {
                if wanted.get(k) != Some(&lc) {
                    continue 'outer;
                }
                k += 1;
            }
            pos += 1;
        }
        let end_ok = match chars.get(pos) {
            None => true,
            Some(&(_, next)) => !(is_word_char(next) && is_word_char(chars[pos - 1].1)),
        };
        if end_ok {
            let end = chars.get(pos).map_or(text.len(), |&(b, _)| b);
            hits.push((chars[start].0, end));
        }
    }
    hits
}

/// Suffixes the first whole-word, case-insensitive mention of each detected
/// class with the box of that class's best detection. Classes are handled in
/// descending best-score order; a mention overlapping one already claimed is
/// passed over for the next.
pub fn annotate_question(question: &str, detections: &[Detection]) -> String {
    // order_objects is score-descending, so the first hit per class is its best
    let ordered = order_objects(detections);
    let mut best: Vec<&Detection> = Vec::new();
    for d in &ordered {
        if !best.iter().any(|b| b.class_name == d.class_name) {
            best.push(d);
        }
    }

    let mut claimed: Vec<(usize, usize, BBox)> = Vec::new();
    for det in best {
        let free = word_matches(question, &det.class_name)
            .into_iter()
            .find(|&(s, e)| claimed.iter().all(|&(cs, ce, _)| e <= cs || s >= ce));
        if let Some((s, e)) = free {
            claimed.push((s, e, det.bbox));
        }
    }
    claimed.sort_by_key(|&(_, e, _)| e);

    let mut out = String::with_capacity(question.len() + claimed.len() * 20);
    let mut last = 0;
    for (_, end, bbox) in claimed {
        out.push_str(&question[last..end]);
        out.push_str(&bbox.to_string());
        last = end;
    }
    out.push_str(&question[last..]);
    out
}

fn push_items(out: &mut String, items: &[LabeledBox]) {
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&item.label);
        out.push_str(&item.bbox.to_string());
    }
}

pub fn build_model_input(mi: &ModelInput) -> String {
    if SECTION_MARKERS.iter().any(|m| mi.question.contains(m)) {
        log::warn!("question contains a section marker; template will not parse back exactly");
    }
    let mut out = String::new();
    out.push_str(TYPE_PREFIX);
    out.push_str(mi.qtype.name());
    out.push_str(OBJECTS_SEP);
    if mi.objects.is_empty() {
        out.push_str(NONE);
    } else {
        push_items(&mut out, &mi.objects);
    }
    out.push_str(OCR_SEP);
    if mi.ocr.is_empty() {
        out.push(' ');
        out.push_str(NONE);
    } else {
        push_items(&mut out, &mi.ocr);
    }
    out.push_str(QUESTION_SEP);
    out.push_str(&mi.question);
    out.push_str(OPTIONS_SEP);
    for (i, opt) in mi.options.iter().enumerate() {
        if i > 0 {
            out.push_str("; ");
        }
        out.push((b'A' + i as u8) as char);
        out.push_str(": ");
        out.push_str(opt);
    }
    out.push('.');
    out
}

fn parse_err(offset: usize, expected: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        expected: expected.into(),
    }
}

/// Finds `needle` at or after `from`, reporting `from` as the failure offset.
fn find_from(text: &str, from: usize, needle: &str) -> Result<usize> {
    text[from..]
        .find(needle)
        .map(|p| from + p)
        .ok_or_else(|| parse_err(from, format!("`{}`", needle.trim())))
}

/// Parses `[x1,y1,x2,y2]` starting exactly at `at`; returns the box and the
/// byte just past `]`.
fn parse_bracket(text: &str, at: usize) -> Option<(BBox, usize)> {
    let rest = text.get(at..)?;
    let rest = rest.strip_prefix('[')?;
    let close = rest.find(']')?;
    let inner = &rest[..close];
    let mut nums = [0u32; 4];
    let mut parts = inner.split(',');
    for n in nums.iter_mut() {
        let p = parts.next()?;
        if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        *n = p.parse().ok()?;
    }
    if parts.next().is_some() {
        return None;
    }
    let bbox = BBox::new(nums[0], nums[1], nums[2], nums[3]).ok()?;
    Some((bbox, at + 1 + close + 1))
}

/// Parses `label[..], label[..], ...` spanning `text[start..end]`.
fn parse_items(text: &str, start: usize, end: usize) -> Result<Vec<LabeledBox>> {
    let mut items = Vec::new();
    let mut item_start = start;
    let mut cursor = start;
    while item_start < end {
        let open = text[cursor..end]
            .find('[')
            .map(|p| cursor + p)
            .ok_or_else(|| parse_err(cursor, "`[x1,y1,x2,y2]`"))?;
        match parse_bracket(&text[..end], open) {
            Some((bbox, after)) if after == end || text[after..end].starts_with(", ") => {
                if open == item_start {
                    return Err(parse_err(open, "item label"));
                }
                items.push(LabeledBox {
                    label: text[item_start..open].to_string(),
                    bbox,
                });
                item_start = if after == end { end } else { after + 2 };
                cursor = item_start;
                if item_start == end && after != end {
                    return Err(parse_err(end, "item after `, `"));
                }
            }
            _ => cursor = open + 1,
        }
    }
    Ok(items)
}

/// Inverse of [`build_model_input`]. When a field contains a section marker
/// the first marker occurrence wins, so the result may differ from the
/// original input.
pub fn parse_model_input(text: &str, types: &TypeList) -> Result<ModelInput> {
    if !text.starts_with(TYPE_PREFIX) {
        return Err(parse_err(0, format!("`{}`", TYPE_PREFIX.trim_end())));
    }
    let type_start = TYPE_PREFIX.len();
    let type_end = find_from(text, type_start, OBJECTS_SEP)?;
    let qtype = types
        .get(&text[type_start..type_end])
        .map_err(|_| parse_err(type_start, "a configured question type"))?;

    let obj_start = type_end + OBJECTS_SEP.len();
    let obj_end = find_from(text, obj_start, OCR_SEP)?;
    let objects = if &text[obj_start..obj_end] == NONE {
        Vec::new()
    } else {
        parse_items(text, obj_start, obj_end)?
    };

    let ocr_start = obj_end + OCR_SEP.len();
    let ocr_end = find_from(text, ocr_start, QUESTION_SEP)?;
    let ocr = if &text[ocr_start..ocr_end] == " none" {
        Vec::new()
    } else {
        parse_items(text, ocr_start, ocr_end)?
    };

    let q_start = ocr_end + QUESTION_SEP.len();
    let q_end = find_from(text, q_start, OPTIONS_SEP)?;
    let question = text[q_start..q_end].to_string();

    let mut cursor = q_end + OPTIONS_SEP.len();
    let mut options: [String; 5] = Default::default();
    for (i, opt) in options.iter_mut().enumerate() {
        let letter = (b'A' + i as u8) as char;
        let head = format!("{letter}: ");
        if !text[cursor..].starts_with(&head) {
            return Err(parse_err(cursor, format!("`{}`", head.trim_end())));
        }
        cursor += head.len();
        let end = if i < 4 {
            let sep = format!("; {}: ", (letter as u8 + 1) as char);
            find_from(text, cursor, &sep)?
        } else {
            if !text.ends_with('.') || text.len() <= cursor {
                return Err(parse_err(text.len(), "`.` terminating options"));
            }
            text.len() - 1
        };
        *opt = text[cursor..end].to_string();
        cursor = if i < 4 { end + 2 } else { end };
    }

    Ok(ModelInput {
        qtype,
        objects,
        ocr,
        question,
        options,
    })
}

// ---------------------------------------------------------------------------
// Ingestion of detector / OCR output files.

#[derive(Debug, Deserialize)]
struct RawDetectionFile {
    image: String,
    width: u32,
    height: u32,
    detections: Vec<RawDetection>,
}

#[derive(Debug, Deserialize)]
struct RawDetection {
    #[serde(rename = "class")]
    class_name: String,
    bbox: [f64; 4],
    score: f64,
}

#[derive(Debug, Deserialize)]
struct RawOcrFile {
    image: String,
    spans: Vec<RawSpan>,
}

#[derive(Debug, Deserialize)]
struct RawSpan {
    text: String,
    bbox: [f64; 4],
    score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFile {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub detections: Vec<Detection>,
    /// Boxes that became empty after clamping to the image.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcrFile {
    pub image: String,
    pub spans: Vec<OcrSpan>,
    pub dropped: usize,
}

fn check_score(ctx: &str, field: String, score: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::schema(ctx, field, format!("score {score} outside [0, 1]")));
    }
    Ok(())
}

/// Rounds to integer pixels, validates ordering, clamps to `[0, max]`.
/// `Ok(None)` when the clamped box has zero area.
fn clamp_box(
    ctx: &str,
    field: String,
    raw: [f64; 4],
    max_w: Option<u32>,
    max_h: Option<u32>,
) -> Result<Option<BBox>> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::schema(ctx, field, "non-finite coordinate"));
    }
    let [x1, y1, x2, y2] = raw.map(|v| v.round() as i64);
    if x1 >= x2 || y1 >= y2 {
        return Err(Error::schema(
            ctx,
            field,
            format!("degenerate box [{x1},{y1},{x2},{y2}] (need x1<x2, y1<y2)"),
        ));
    }
    let cx = |v: i64| v.clamp(0, max_w.map_or(u32::MAX as i64, i64::from)) as u32;
    let cy = |v: i64| v.clamp(0, max_h.map_or(u32::MAX as i64, i64::from)) as u32;
    Ok(BBox::new(cx(x1), cy(y1), cx(x2), cy(y2)).ok())
}

pub fn parse_detections(text: &str, ctx: &str) -> Result<DetectionFile> {
    let raw: RawDetectionFile = serde_json::from_str(text).map_err(|e| Error::json(ctx, e))?;
    let mut detections = Vec::with_capacity(raw.detections.len());
    let mut dropped = 0;
    for (i, d) in raw.detections.into_iter().enumerate() {
        if d.class_name.is_empty() {
            return Err(Error::schema(
                ctx,
                format!("detections[{i}].class"),
                "empty class name",
            ));
        }
        check_score(ctx, format!("detections[{i}].score"), d.score)?;
        match clamp_box(
            ctx,
            format!("detections[{i}].bbox"),
            d.bbox,
            Some(raw.width),
            Some(raw.height),
        )? {
            Some(bbox) => detections.push(Detection {
                class_name: d.class_name,
                bbox,
                score: d.score,
            }),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("{ctx}: dropped {dropped} detection(s) with zero area after clamping");
    }
    Ok(DetectionFile {
        image: raw.image,
        width: raw.width,
        height: raw.height,
        detections,
        dropped,
    })
}

pub fn ingest_detections(path: &Path) -> Result<DetectionFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, &path.display().to_string())
}

/// OCR files carry no image size, so boxes are only clamped at zero.
pub fn parse_ocr(text: &str, ctx: &str) -> Result<OcrFile> {
    let raw: RawOcrFile = serde_json::from_str(text).map_err(|e| Error::json(ctx, e))?;
    let mut spans = Vec::with_capacity(raw.spans.len());
    let mut dropped = 0;
    for (i, s) in raw.spans.into_iter().enumerate() {
        if s.text.is_empty() {
            return Err(Error::schema(ctx, format!("spans[{i}].text"), "empty span text"));
        }
        check_score(ctx, format!("spans[{i}].score"), s.score)?;
        match clamp_box(ctx, format!("spans[{i}].bbox"), s.bbox, None, None)? {
            Some(bbox) => spans.push(OcrSpan {
                text: s.text,
                bbox,
                score: s.score,
            }),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("{ctx}: dropped {dropped} OCR span(s) with zero area after clamping");
    }
    Ok(OcrFile {
        image: raw.image,
        spans,
        dropped,
    })
}

pub fn ingest_ocr(path: &Path) -> Result<OcrFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ocr(&text, &path.display().to_string())
}

/// One line of the template JSON-lines output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub puzzle_id: u64,
    pub instance_id: u64,
    pub template: String,
}

//! Zero-shot question-type classification by majority vote over a random
//! subsample of a puzzle's instances.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::{Command, Stdio};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::types::{group_by_puzzle, PuzzleInstance, QuestionType, TypeList};

/// Instances queried per puzzle.
pub const DEFAULT_SAMPLE_SIZE: usize = 100;

const PROMPT_HEAD: &str = "There are eight question types: [";
const PROMPT_MID: &str = "]. So, ";
const PROMPT_TAIL: &str = " which type does this question belong to?";

/// Builds the classification prompt for one question. The header keeps the
/// literal word "eight" whatever the list length.
pub fn build_type_prompt(question: &str, types: &TypeList) -> Result<String> {
    if question.is_empty() {
        return Err(Error::Empty("question"));
    }
    let joined = types.names().collect::<Vec<_>>().join(", ");
    Ok(format!(
        "{PROMPT_HEAD}{joined}{PROMPT_MID}{question}{PROMPT_TAIL}"
    ))
}

/// Recovers the question from a prompt built by [`build_type_prompt`].
pub fn question_from_prompt(prompt: &str) -> Option<&str> {
    let rest = prompt.strip_prefix(PROMPT_HEAD)?;
    let start = rest.find(PROMPT_MID)? + PROMPT_MID.len();
    rest[start..].strip_suffix(PROMPT_TAIL)
}

/// First type, in list order, that occurs as a substring of the lowercased
/// response. `None` means unparseable.
pub fn parse_type_response(raw: &str, types: &TypeList) -> Option<QuestionType> {
    let lower = raw.to_lowercase();
    types
        .names()
        .find(|name| lower.contains(name))
        .and_then(|name| types.get(name).ok())
}

/// A backend could not produce a response for one prompt.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct BackendError(pub String);

/// Anything that answers a prompt with text: an external model runner, a
/// rule table, or a closure in tests.
pub trait TypeBackend: Send + Sync {
    fn respond(&self, prompt: &str) -> std::result::Result<String, BackendError>;
}

impl<F> TypeBackend for F
where
    F: Fn(&str) -> std::result::Result<String, BackendError> + Send + Sync,
{
    fn respond(&self, prompt: &str) -> std::result::Result<String, BackendError> {
        self(prompt)
    }
}

/// Deterministic offline stand-in: keyword rules checked in order, first hit
/// wins, default "logic".
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleBackend;

const RULES: &[(&[&str], &str)] = &[
    (&["how many", "count"], "counting"),
    (&["sum", "total", "plus", "minus", "add up"], "arithmetic"),
    (&["equation", "value of", "unknown"], "algebra"),
    (
        &["order", "middle", "left of", "right of", "above", "below"],
        "spatial reasoning",
    ),
    (&["length", "how long", "how tall", "weigh", "cm"], "measuring"),
    (&["path", "route", "maze"], "path finding"),
];

impl RuleBackend {
    pub fn answer(&self, prompt: &str) -> &'static str {
        // Only the question is inspected: the prompt header lists every type
        // name and would otherwise match the path-finding rule.
        let text = question_from_prompt(prompt).unwrap_or(prompt).to_lowercase();
        RULES
            .iter()
            .find(|(keys, _)| keys.iter().any(|k| text.contains(k)))
            .map(|(_, ty)| *ty)
            .unwrap_or("logic")
    }
}

impl TypeBackend for RuleBackend {
    fn respond(&self, prompt: &str) -> std::result::Result<String, BackendError> {
        Ok(self.answer(prompt).to_string())
    }
}

/// Child-process backend: prompt on stdin (then EOF), response on stdout,
/// exit status 0 required.
#[derive(Debug, Clone)]
pub struct ExecBackend {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl ExecBackend {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
        }
    }
}

impl TypeBackend for ExecBackend {
    fn respond(&self, prompt: &str) -> std::result::Result<String, BackendError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| BackendError(format!("spawn {}: {e}", self.program.display())))?;
        {
            let mut stdin = child.stdin.take().expect("stdin is piped");
            // A child that exits without reading gives EPIPE; its exit status decides.
            let _ = stdin.write_all(prompt.as_bytes());
        }
        let output = child
            .wait_with_output()
            .map_err(|e| BackendError(format!("wait: {e}")))?;
        if !output.status.success() {
            return Err(BackendError(format!("backend exited with {}", output.status)));
        }
        String::from_utf8(output.stdout)
            .map(|s| s.trim().to_string())
            .map_err(|_| BackendError("response is not UTF-8".into()))
    }
}

/// Uniform sample of `min(k, n)` items without replacement by partial
/// Fisher-Yates; the returned order is part of the deterministic contract.
pub fn sample_instances<T: Clone>(items: &[T], k: usize, rng: &mut Rng) -> Result<Vec<T>> {
    if items.is_empty() {
        return Err(Error::Empty("instance list"));
    }
    if k == 0 {
        return Err(Error::invalid("sample size", "k must be at least 1"));
    }
    let n = items.len();
    let m = k.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    Ok(idx[..m].iter().map(|&i| items[i].clone()).collect())
}

/// Per-type vote counts (aligned with the type list) plus unparseable count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteTally {
    types: TypeList,
    counts: Vec<usize>,
    unparseable: usize,
}

impl VoteTally {
    pub fn new(types: &TypeList) -> Self {
        Self {
            types: types.clone(),
            counts: vec![0; types.len()],
            unparseable: 0,
        }
    }

    pub fn record(&mut self, vote: Option<&QuestionType>) {
        match vote.and_then(|t| self.types.index_of(t.name())) {
            Some(i) => self.counts[i] += 1,
            None => self.unparseable += 1,
        }
    }

    pub fn add(&mut self, name: &str, n: usize) -> Result<()> {
        let i = self
            .types
            .index_of(name)
            .ok_or_else(|| Error::invalid("tally", format!("`{name}` is not in the type list")))?;
        self.counts[i] += n;
        Ok(())
    }

    pub fn add_unparseable(&mut self, n: usize) {
        self.unparseable += n;
    }

    pub fn count(&self, name: &str) -> usize {
        self.types.index_of(name).map_or(0, |i| self.counts[i])
    }

    pub fn parsed(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn unparseable(&self) -> usize {
        self.unparseable
    }

    pub fn total(&self) -> usize {
        self.parsed() + self.unparseable
    }

    pub fn merge(&mut self, other: &VoteTally) {
        debug_assert_eq!(self.types, other.types);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.unparseable += other.unparseable;
    }

    pub fn as_map(&self) -> BTreeMap<String, usize> {
        self.types
            .names()
            .zip(&self.counts)
            .map(|(n, c)| (n.to_string(), *c))
            .collect()
    }
}

/// Most-voted type; ties go to the type listed first. Unparseable responses
/// never count.
pub fn majority_vote(tally: &VoteTally, types: &TypeList) -> Result<QuestionType> {
    if tally.parsed() == 0 {
        return Err(Error::NoVotes {
            unparseable: tally.unparseable(),
        });
    }
    let mut best: Option<(&str, usize)> = None;
    for name in types.names() {
        let c = tally.count(name);
        if c > 0 && best.is_none_or(|(_, b)| c > b) {
            best = Some((name, c));
        }
    }
    let (name, _) = best.expect("at least one parsed vote");
    types.get(name)
}

/// Samples `k` instances, queries the backend once per sampled question
/// (concurrently), and votes. Backend failures count as unparseable.
pub fn classify_puzzle(
    backend: &dyn TypeBackend,
    instances: &[PuzzleInstance],
    k: usize,
    rng: &mut Rng,
    types: &TypeList,
) -> Result<(QuestionType, VoteTally)> {
    let sample = sample_instances(instances, k, rng)?;
    let prompts = sample
        .iter()
        .map(|inst| build_type_prompt(&inst.question, types))
        .collect::<Result<Vec<_>>>()?;
    let votes: Vec<Option<QuestionType>> = prompts
        .par_iter()
        .map(|p| match backend.respond(p) {
            Ok(raw) => parse_type_response(&raw, types),
            Err(e) => {
                log::debug!("backend failure counted as unparseable: {e}");
                None
            }
        })
        .collect();
    let mut tally = VoteTally::new(types);
    for v in &votes {
        tally.record(v.as_ref());
    }
    let winner = majority_vote(&tally, types)?;
    Ok((winner, tally))
}

/// Per-puzzle output record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub puzzle_id: u64,
    #[serde(rename = "type")]
    pub qtype: String,
    pub tally: BTreeMap<String, usize>,
    pub unparseable: usize,
}

/// Classifies every puzzle in `instances`, ascending by id. Puzzle `p` draws
/// its sample from `derive_seed(master_seed, p)`.
pub fn classify_all(
    backend: &dyn TypeBackend,
    instances: &[PuzzleInstance],
    k: usize,
    master_seed: u64,
    types: &TypeList,
) -> Result<Vec<ClassificationRecord>> {
    group_by_puzzle(instances)
        .into_iter()
        .map(|(puzzle_id, group)| {
            let mut rng = Rng::new(derive_seed(master_seed, puzzle_id));
            let (winner, tally) =
                classify_puzzle(backend, &group, k, &mut rng, types).map_err(|e| match e {
                    Error::NoVotes { unparseable } => Error::invalid(
                        "classification",
                        format!("puzzle {puzzle_id}: all {unparseable} responses unparseable"),
                    ),
                    other => other,
                })?;
            Ok(ClassificationRecord {
                puzzle_id,
                qtype: winner.name().to_string(),
                tally: tally.as_map(),
                unparseable: tally.unparseable(),
            })
        })
        .collect()
}

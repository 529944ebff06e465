//! Verifiable synthetic tasks: vocabulary, dataset generation, and the
//! correctness and format checks that produce rewards.

pub mod arith;
mod vocab;

use std::io::{BufRead, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;

pub use arith::{Expression, Op};
pub use vocab::{sym, Token, TokenEntry, Vocab};

/// One verifiable question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: u64,
    pub prompt: Vec<Token>,
    pub answer: Vec<Token>,
    pub difficulty: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    BranchingArithmetic,
    CopyChain,
}

impl std::str::FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "branching-arithmetic" => Ok(TaskFamily::BranchingArithmetic),
            "copy-chain" => Ok(TaskFamily::CopyChain),
            other => Err(Error::Config(format!("unknown task family {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub count: usize,
    pub difficulty: RangeInclusive<u32>,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("task count must be at least 1".into()));
        }
        if self.difficulty.is_empty() {
            return Err(Error::Config(format!("empty difficulty range {:?}", self.difficulty)));
        }
        if *self.difficulty.start() == 0 {
            return Err(Error::Config("difficulty must be at least 1".into()));
        }
        Ok(())
    }
}

/// Generates `spec.count` instances; a pure function of `spec`.
pub fn generate_dataset(spec: &TaskSpec) -> Result<Vec<TaskInstance>> {
    spec.validate()?;
    let root = SeedStream::new(spec.seed).named("tasks");
    Ok((0..spec.count as u64)
        .map(|id| {
            let mut rng = root.child(id).rng();
            let difficulty = rng.gen_range(spec.difficulty.clone());
            match spec.family {
                TaskFamily::BranchingArithmetic => {
                    let e = Expression::sample(difficulty as usize, &mut rng);
                    TaskInstance { id, prompt: e.prompt(), answer: vec![sym::digit(e.value() as u8)], difficulty }
                }
                TaskFamily::CopyChain => {
                    let payload: Vec<Token> = (0..difficulty).map(|_| sym::digit(rng.gen_range(0..=9))).collect();
                    let mut prompt = vec![sym::QUESTION];
                    prompt.extend(&payload);
                    prompt.push(sym::EQUALS);
                    TaskInstance { id, prompt, answer: payload, difficulty }
                }
            }
        })
        .collect())
}

/// Reference solutions for an instance, used to warm-start the backbone.
/// Arithmetic instances have a direct and an expanded derivation; copy
/// instances have a single one.
pub fn demonstrations(instance: &TaskInstance) -> Vec<(Strategy, Vec<Token>)> {
    match Expression::parse(&instance.prompt) {
        Some(e) if e.steps() > 0 && instance.answer == [sym::digit(e.value() as u8)] => {
            vec![(Strategy::Direct, e.direct_derivation()), (Strategy::Expanded, e.expanded_derivation())]
        }
        _ => {
            let mut d = vec![sym::ANSWER];
            d.extend(&instance.answer);
            d.push(sym::EOS);
            vec![(Strategy::Direct, d)]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Direct,
    Expanded,
}

/// Tokens strictly after the last delimiter and before the next EOS (or the
/// end of the output). Absent when there is no delimiter or the span is empty.
pub fn extract_answer<'a>(vocab: &Vocab, output: &'a [Token]) -> Option<&'a [Token]> {
    let start = output.iter().rposition(|&t| t == vocab.delimiter())? + 1;
    let rest = &output[start..];
    let end = rest.iter().position(|&t| t == vocab.eos()).unwrap_or(rest.len());
    let span = &rest[..end];
    (!span.is_empty()).then_some(span)
}

pub fn verify_correct(vocab: &Vocab, output: &[Token], instance: &TaskInstance) -> bool {
    extract_answer(vocab, output).is_some_and(|a| a == instance.answer.as_slice())
}

/// The structural pattern checked by [`verify_format`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule", content = "tokens")]
pub enum FormatRule {
    /// Exactly one delimiter, a nonempty answer, and a single EOS as the
    /// final token.
    #[default]
    SingleDelimiterEos,
    /// At least one delimiter; the last one is followed by a nonempty answer
    /// and a single final EOS.
    LastDelimiterEos,
    /// The given token string occurs contiguously in the output.
    Contains(Vec<Token>),
}

pub fn verify_format(vocab: &Vocab, output: &[Token], rule: &FormatRule) -> bool {
    let ends_once =
        |out: &[Token]| out.last() == Some(&vocab.eos()) && out.iter().filter(|&&t| t == vocab.eos()).count() == 1;
    match rule {
        FormatRule::SingleDelimiterEos => {
            output.iter().filter(|&&t| t == vocab.delimiter()).count() == 1
                && ends_once(output)
                && extract_answer(vocab, output).is_some()
        }
        FormatRule::LastDelimiterEos => ends_once(output) && extract_answer(vocab, output).is_some(),
        FormatRule::Contains(needle) => {
            needle.is_empty() || output.windows(needle.len()).any(|w| w == needle.as_slice())
        }
    }
}

pub fn write_jsonl<W: Write>(mut w: W, instances: &[TaskInstance]) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<TaskInstance>> {
    read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn save_dataset(path: &Path, instances: &[TaskInstance]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_jsonl(&mut w, instances)?;
    w.flush()?;
    Ok(())
}

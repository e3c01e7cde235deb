//! Synthetic chain-of-thought arithmetic corpus.
//!
//! A query is a chain such as `3 + 5 - 2 =`; its completion writes every
//! step and then the answer:
//!
//! ```text
//! 3 + 5 = 8 ; 8 - 2 = 6 ; answer 6 <eos>
//! ```
//!
//! All arithmetic is modulo the task modulus so every value is one digit
//! token. Training examples may carry a planted corruption.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type Token = u32;

/// Closed vocabulary. Digits occupy ids 0..=9 so a digit's id is its value.
pub const SYMBOLS: [&str; 17] = [
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "-", "*", "=", ";", "answer", "<eos>",
];
pub const VOCAB_SIZE: usize = SYMBOLS.len();
pub const PLUS: Token = 10;
pub const MINUS: Token = 11;
pub const TIMES: Token = 12;
pub const EQUALS: Token = 13;
pub const STEP_SEP: Token = 14;
pub const ANSWER: Token = 15;
pub const EOS: Token = 16;

pub fn symbol(token: Token) -> Option<&'static str> {
    SYMBOLS.get(token as usize).copied()
}

/// Whitespace-separated symbols to token ids.
pub fn tokenize(text: &str) -> Result<Vec<Token>> {
    text.split_whitespace()
        .map(|s| {
            SYMBOLS
                .iter()
                .position(|&sym| sym == s)
                .map(|i| i as Token)
                .ok_or_else(|| Error::input(format!("unknown symbol `{s}`")))
        })
        .collect()
}

pub fn detokenize(tokens: &[Token]) -> Result<String> {
    let syms = tokens
        .iter()
        .map(|&t| symbol(t).ok_or_else(|| Error::input(format!("token id {t} outside vocabulary"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(syms.join(" "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    pub fn token(self) -> Token {
        match self {
            Op::Add => PLUS,
            Op::Sub => MINUS,
            Op::Mul => TIMES,
        }
    }

    pub fn apply(self, a: u32, b: u32, modulus: u32) -> u32 {
        let (a, b, m) = (a as i64, b as i64, modulus as i64);
        let v = match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
        };
        v.rem_euclid(m) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// Only the token after `answer` is wrong; the written steps are correct.
    WrongFinalAnswer,
    /// One non-final step result is wrong and the error propagates through
    /// the remaining steps into the answer.
    WrongIntermediateStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainTask {
    /// Operands are drawn uniformly from `0..=operand_max`.
    pub operand_max: u32,
    /// Number of operations in the chain.
    pub depth: usize,
    pub modulus: u32,
    pub ops: Vec<Op>,
}

impl Default for ChainTask {
    fn default() -> Self {
        Self {
            operand_max: 9,
            depth: 2,
            modulus: 10,
            ops: vec![Op::Add, Op::Sub],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub task: ChainTask,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub corruption_rate: f64,
    pub corruption_mode: CorruptionMode,
    /// Fixed error added to the corrupted value; `None` draws it uniformly per example.
    pub corruption_offset: Option<u32>,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            task: ChainTask::default(),
            n_train: 1000,
            n_val: 200,
            n_test: 200,
            corruption_rate: 0.1,
            corruption_mode: CorruptionMode::WrongIntermediateStep,
            corruption_offset: Some(5),
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.n_train == 0 {
            return Err(Error::input("n_train must be positive"));
        }
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return Err(Error::Config("corruption_rate must lie in [0, 1]".into()));
        }
        if let Some(o) = self.corruption_offset {
            if o == 0 || o >= self.task.modulus {
                return Err(Error::Config(format!("corruption_offset must lie in 1..{}", self.task.modulus)));
            }
        }
        Ok(())
    }
}

impl ChainTask {
    pub fn validate(&self) -> Result<()> {
        if !(2..=10).contains(&self.modulus) {
            return Err(Error::Config(format!("modulus {} outside 2..=10", self.modulus)));
        }
        if self.operand_max > 9 {
            return Err(Error::Config("operands must be single digits".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("chain depth must be at least 1".into()));
        }
        if self.ops.is_empty() {
            return Err(Error::Config("no operators configured".into()));
        }
        Ok(())
    }

    pub fn prompt_len(&self) -> usize {
        2 * self.depth + 2
    }

    pub fn completion_len(&self) -> usize {
        6 * self.depth + 3
    }

    /// Longest sequence (prompt + completion) this task produces.
    pub fn max_sequence_len(&self) -> usize {
        self.prompt_len() + self.completion_len()
    }
}

/// One prompt/completion pair. `loss_mask` covers the concatenated sequence
/// and is true exactly on completion positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub prompt_tokens: Vec<Token>,
    pub completion_tokens: Vec<Token>,
    pub loss_mask: Vec<bool>,
    /// The true answer symbol, even when the written completion is corrupted.
    pub gold_answer: String,
    pub corrupted: bool,
    pub corruption_mode: Option<CorruptionMode>,
}

impl Example {
    pub fn new(id: u64, prompt: Vec<Token>, completion: Vec<Token>, gold_answer: String) -> Self {
        let loss_mask = std::iter::repeat(false)
            .take(prompt.len())
            .chain(std::iter::repeat(true).take(completion.len()))
            .collect();
        Self {
            id,
            prompt_tokens: prompt,
            completion_tokens: completion,
            loss_mask,
            gold_answer,
            corrupted: false,
            corruption_mode: None,
        }
    }

    pub fn sequence(&self) -> Vec<Token> {
        let mut s = self.prompt_tokens.clone();
        s.extend_from_slice(&self.completion_tokens);
        s
    }

    pub fn len(&self) -> usize {
        self.prompt_tokens.len() + self.completion_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same prompt, different completion; used for recorded model outputs.
    pub fn with_completion(&self, completion: Vec<Token>) -> Example {
        let mut e = Example::new(self.id, self.prompt_tokens.clone(), completion, self.gold_answer.clone());
        e.corrupted = self.corrupted;
        e.corruption_mode = self.corruption_mode;
        e
    }

    pub fn validate(&self) -> Result<()> {
        if self.loss_mask.len() != self.len() {
            return Err(Error::input(format!("example {}: mask length mismatch", self.id)));
        }
        let p = self.prompt_tokens.len();
        if self.loss_mask[..p].iter().any(|&m| m) || self.loss_mask[p..].iter().any(|&m| !m) {
            return Err(Error::input(format!(
                "example {}: mask must be false on prompt and true on completion",
                self.id
            )));
        }
        Ok(())
    }
}

struct Chain {
    operands: Vec<u32>,
    ops: Vec<Op>,
}

impl Chain {
    fn sample<R: Rng>(task: &ChainTask, rng: &mut R) -> Self {
        let operands = (0..=task.depth).map(|_| rng.gen_range(0..=task.operand_max)).collect();
        let ops = (0..task.depth).map(|_| task.ops[rng.gen_range(0..task.ops.len())]).collect();
        Chain { operands, ops }
    }

    fn prompt(&self) -> Vec<Token> {
        let mut p = vec![self.operands[0]];
        for (op, &x) in self.ops.iter().zip(&self.operands[1..]) {
            p.push(op.token());
            p.push(x);
        }
        p.push(EQUALS);
        p
    }

    /// Step results, optionally overriding step `k` (1-based) with `value`
    /// and continuing the chain from there.
    fn results(&self, modulus: u32, override_step: Option<(usize, u32)>) -> Vec<u32> {
        let mut vals = vec![self.operands[0] % modulus];
        for k in 1..=self.ops.len() {
            let mut v = self.ops[k - 1].apply(vals[k - 1], self.operands[k], modulus);
            if let Some((step, forced)) = override_step {
                if step == k {
                    v = forced;
                }
            }
            vals.push(v);
        }
        vals
    }

    fn completion(&self, vals: &[u32], answer: u32) -> Vec<Token> {
        let mut c = Vec::with_capacity(6 * self.ops.len() + 3);
        for k in 1..=self.ops.len() {
            c.extend_from_slice(&[vals[k - 1], self.ops[k - 1].token(), self.operands[k], EQUALS, vals[k], STEP_SEP]);
        }
        c.extend_from_slice(&[ANSWER, answer, EOS]);
        c
    }
}

fn clean_example<R: Rng>(task: &ChainTask, id: u64, rng: &mut R) -> Example {
    let chain = Chain::sample(task, rng);
    let vals = chain.results(task.modulus, None);
    let answer = *vals.last().unwrap();
    Example::new(id, chain.prompt(), chain.completion(&vals, answer), answer.to_string())
}

/// The gold answer of a prompt, evaluated directly from its tokens.
pub fn evaluate_prompt(prompt: &[Token], modulus: u32) -> Option<u32> {
    let body = prompt.strip_suffix(&[EQUALS])?;
    let mut acc = *body.first()? % modulus;
    for pair in body[1..].chunks(2) {
        let op = match pair.first()? {
            &PLUS => Op::Add,
            &MINUS => Op::Sub,
            &TIMES => Op::Mul,
            _ => return None,
        };
        acc = op.apply(acc, *pair.get(1)?, modulus);
    }
    Some(acc)
}

fn generate_split(task: &ChainTask, n: usize, seed: u64, stream: u64) -> (Vec<Example>, Vec<Chain>) {
    let mut rng = rng::stream(seed, stream);
    let mut examples = Vec::with_capacity(n);
    let mut chains = Vec::with_capacity(n);
    for id in 0..n {
        let chain = Chain::sample(task, &mut rng);
        let vals = chain.results(task.modulus, None);
        let answer = *vals.last().unwrap();
        examples.push(Example::new(id as u64, chain.prompt(), chain.completion(&vals, answer), answer.to_string()));
        chains.push(chain);
    }
    (examples, chains)
}

/// Generated splits. Example ids are indices within their split.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn generate_corpus(spec: &TaskSpec) -> Result<Corpus> {
    spec.validate()?;
    let task = &spec.task;
    let (mut train, chains) = generate_split(task, spec.n_train, spec.seed, 1);
    let (val, _) = generate_split(task, spec.n_val, spec.seed, 2);
    let (test, _) = generate_split(task, spec.n_test, spec.seed, 3);

    let n_corrupt = (spec.corruption_rate * spec.n_train as f64).round() as usize;
    let mut rng = rng::stream(spec.seed, 4);
    let mut idx: Vec<usize> = (0..spec.n_train).collect();
    idx.shuffle(&mut rng);
    let mut chosen = idx[..n_corrupt].to_vec();
    chosen.sort_unstable();
    for i in chosen {
        let chain = &chains[i];
        let truth = chain.results(task.modulus, None);
        let drawn = rng.gen_range(1..task.modulus);
        let offset = spec.corruption_offset.unwrap_or(drawn);
        let (vals, answer) = match spec.corruption_mode {
            CorruptionMode::WrongFinalAnswer => {
                let a = (truth[task.depth] + offset) % task.modulus;
                (truth.clone(), a)
            }
            CorruptionMode::WrongIntermediateStep => {
                let step = if task.depth >= 2 { rng.gen_range(1..task.depth) } else { 1 };
                let wrong = (truth[step] + offset) % task.modulus;
                let vals = chain.results(task.modulus, Some((step, wrong)));
                let a = vals[task.depth];
                (vals, a)
            }
        };
        let ex = &mut train[i];
        ex.completion_tokens = chain.completion(&vals, answer);
        ex.corrupted = true;
        ex.corruption_mode = Some(spec.corruption_mode);
    }
    Ok(Corpus { train, val, test })
}

/// A clean corpus of `n` examples from an independent stream; used to give
/// the base model some prior competence before fine-tuning.
pub fn generate_clean(task: &ChainTask, n: usize, seed: u64) -> Result<Vec<Example>> {
    task.validate()?;
    let mut rng = rng::stream(seed, 5);
    Ok((0..n).map(|id| clean_example(task, id as u64, &mut rng)).collect())
}

pub fn to_jsonl(examples: &[Example]) -> Result<String> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<Example>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let ex: Example = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            ex.validate().map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok(ex)
        })
        .collect()
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let text = to_jsonl(examples)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_jsonl(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rate: f64, n: usize) -> TaskSpec {
        TaskSpec {
            n_train: n,
            n_val: 50,
            n_test: 10,
            corruption_rate: rate,
            ..TaskSpec::default()
        }
    }

    fn written_answer(e: &Example) -> Token {
        let c = &e.completion_tokens;
        assert_eq!(c[c.len() - 3], ANSWER);
        assert_eq!(c[c.len() - 1], EOS);
        c[c.len() - 2]
    }

    #[test]
    fn clean_corpus_answers_match_gold() {
        let corpus = generate_corpus(&spec(0.0, 300)).unwrap();
        for e in &corpus.train {
            assert_eq!(symbol(written_answer(e)).unwrap(), e.gold_answer);
            assert!(!e.corrupted);
        }
    }

    #[test]
    fn corruption_count_follows_rounding_rule() {
        let corpus = generate_corpus(&spec(0.1, 1000)).unwrap();
        assert_eq!(corpus.train.iter().filter(|e| e.corrupted).count(), 100);
        let corpus = generate_corpus(&spec(0.125, 20)).unwrap();
        assert_eq!(corpus.train.iter().filter(|e| e.corrupted).count(), 3);
    }

    #[test]
    fn gold_answer_of_a_chain() {
        let prompt = tokenize("3 + 5 + 2 =").unwrap();
        assert_eq!(evaluate_prompt(&prompt, 10), Some(0));
        let prompt = tokenize("3 - 5 =").unwrap();
        assert_eq!(evaluate_prompt(&prompt, 10), Some(8));
    }

    #[test]
    fn intermediate_corruption_propagates_and_keeps_gold() {
        let s = TaskSpec {
            task: ChainTask { depth: 3, ..ChainTask::default() },
            ..spec(0.5, 200)
        };
        let corpus = generate_corpus(&s).unwrap();
        for e in corpus.train.iter().filter(|e| e.corrupted) {
            let truth = evaluate_prompt(&e.prompt_tokens, 10).unwrap();
            assert_eq!(e.gold_answer, truth.to_string());
            assert_ne!(written_answer(e), truth, "additive offsets always reach the answer");
            // steps after the corrupted one stay internally consistent
            let c = &e.completion_tokens;
            let steps: Vec<&[Token]> = c[..6 * 3].chunks(6).collect();
            let mut wrong_steps = 0;
            for st in &steps {
                let op = if st[1] == PLUS { Op::Add } else { Op::Sub };
                if op.apply(st[0], st[2], 10) != st[4] {
                    wrong_steps += 1;
                }
            }
            for w in steps.windows(2) {
                assert_eq!(w[0][4], w[1][0]);
            }
            assert_eq!(wrong_steps, 1);
        }
    }

    #[test]
    fn final_answer_corruption_leaves_steps_intact() {
        let s = TaskSpec { corruption_mode: CorruptionMode::WrongFinalAnswer, ..spec(0.3, 100) };
        let corpus = generate_corpus(&s).unwrap();
        for e in corpus.train.iter().filter(|e| e.corrupted) {
            let c = &e.completion_tokens;
            let last_step_value = c[c.len() - 5];
            assert_eq!(symbol(last_step_value).unwrap(), e.gold_answer);
            assert_ne!(symbol(written_answer(e)).unwrap(), e.gold_answer);
        }
    }

    #[test]
    fn validation_split_is_never_corrupted() {
        let corpus = generate_corpus(&spec(1.0, 50)).unwrap();
        assert!(corpus.train.iter().all(|e| e.corrupted));
        assert!(corpus.val.iter().chain(&corpus.test).all(|e| !e.corrupted));
    }

    #[test]
    fn same_spec_gives_identical_jsonl() {
        let a = generate_corpus(&spec(0.1, 200)).unwrap();
        let b = generate_corpus(&spec(0.1, 200)).unwrap();
        assert_eq!(to_jsonl(&a.train).unwrap(), to_jsonl(&b.train).unwrap());
        let c = generate_corpus(&TaskSpec { seed: 9, ..spec(0.1, 200) }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn every_completion_ends_with_marker_answer_eos() {
        let corpus = generate_corpus(&spec(0.2, 300)).unwrap();
        for e in corpus.train.iter().chain(&corpus.val) {
            let a = written_answer(e);
            assert!(a <= 9);
            assert_eq!(e.completion_tokens.iter().filter(|&&t| t == ANSWER).count(), 1);
            e.validate().unwrap();
        }
    }

    #[test]
    fn tokenizer_round_trip_and_errors() {
        let corpus = generate_corpus(&spec(0.1, 100)).unwrap();
        for e in &corpus.train {
            let text = detokenize(&e.sequence()).unwrap();
            assert_eq!(tokenize(&text).unwrap(), e.sequence());
        }
        assert!(tokenize("").unwrap().is_empty());
        assert!(matches!(tokenize("3 + x"), Err(Error::Input(_))));
    }

    #[test]
    fn zero_train_is_an_error() {
        assert!(generate_corpus(&spec(0.0, 0)).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let corpus = generate_corpus(&spec(0.1, 1000)).unwrap();
        write_jsonl(&path, &corpus.train).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), corpus.train);

        let text = to_jsonl(&corpus.train[..3]).unwrap();
        let truncated = &text[..text.len() - 20];
        match from_jsonl(truncated) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        let empty = dir.path().join("empty.jsonl");
        fs::write(&empty, "").unwrap();
        assert!(read_jsonl(&empty).unwrap().is_empty());
    }
}

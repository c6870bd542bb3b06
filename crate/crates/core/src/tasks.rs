//! The eight algorithmic tasks, their length regimes and target oracles.
//!
//! Token ids follow [`Vocab`]: content symbols are `0..|V|` (digits are their
//! own value for the arithmetic tasks) and the unary marker `@` is `|V| + 1`.
//! Arithmetic tasks write numbers least-significant digit first, zero padded.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Items per block in Repeat Copy.
pub const REPEAT_BLOCK: usize = 20;
/// Priorities in Priority Sort are drawn from `1..=MAX_PRIORITY`.
pub const MAX_PRIORITY: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Copy,
    Reverse,
    BigramFlip,
    Double,
    InterleavedAdd,
    OddFirst,
    RepeatCopy,
    PrioritySort,
}

impl Task {
    pub const ALL: [Task; 8] = [
        Task::Copy,
        Task::Reverse,
        Task::BigramFlip,
        Task::Double,
        Task::InterleavedAdd,
        Task::OddFirst,
        Task::RepeatCopy,
        Task::PrioritySort,
    ];

    /// Task number 1 to 8.
    pub fn id(self) -> usize {
        Task::ALL.iter().position(|&t| t == self).unwrap() + 1
    }

    pub fn from_id(id: usize) -> Option<Task> {
        id.checked_sub(1).and_then(|i| Task::ALL.get(i).copied())
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::BigramFlip => "bigram-flip",
            Task::Double => "double",
            Task::InterleavedAdd => "interleaved-add",
            Task::OddFirst => "odd-first",
            Task::RepeatCopy => "repeat-copy",
            Task::PrioritySort => "priority-sort",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        let s = s.to_ascii_lowercase().replace('_', "-");
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .or_else(|| s.parse().ok().and_then(Task::from_id))
    }

    /// Default `(min, max)` size and content vocabulary.
    pub fn defaults(self) -> (usize, usize, usize) {
        match self {
            Task::Copy | Task::Reverse => (2, 64, 128),
            Task::BigramFlip | Task::OddFirst => (1, 16, 128),
            Task::Double => (2, 40, 10),
            Task::InterleavedAdd => (2, 16, 10),
            Task::RepeatCopy => (1, 5, 128),
            Task::PrioritySort => (2, 10, 128),
        }
    }

    pub fn is_arithmetic(self) -> bool {
        matches!(self, Task::Double | Task::InterleavedAdd)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Sizes in `[min, max]`.
    #[default]
    InSample,
    /// Sizes in `[max + 1, 2 max]`.
    #[serde(rename = "2x")]
    Double,
}

impl Regime {
    pub fn parse(s: &str) -> Option<Regime> {
        match s {
            "in-sample" | "in" | "train" => Some(Regime::InSample),
            "2x" | "out" => Some(Regime::Double),
            _ => None,
        }
    }
}

/// A task with its size range (`k`, or `N` for Repeat Copy) and content vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub min: usize,
    pub max: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(task: Task, seed: u64) -> Self {
        let (min, max, vocab) = task.defaults();
        TaskSpec { task, min, max, vocab, seed }
    }

    pub fn with_range(mut self, min: usize, max: usize) -> Self {
        self.min = min;
        self.max = max;
        self
    }

    pub fn with_vocab(mut self, vocab: usize) -> Self {
        self.vocab = vocab;
        self
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab)
    }

    pub fn range(&self, regime: Regime) -> (usize, usize) {
        match regime {
            Regime::InSample => (self.min, self.max),
            Regime::Double => (self.max + 1, 2 * self.max),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min == 0 || self.min > self.max {
            return Err(Error::Config(format!("{}: size range [{}, {}] is empty", self.task.name(), self.min, self.max)));
        }
        if self.task.is_arithmetic() && self.vocab != 10 {
            return Err(Error::Config(format!("{} uses the 10 decimal digits", self.task.name())));
        }
        if self.vocab == 0 {
            return Err(Error::Config("vocabulary must be nonempty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    /// `k`, or `N` for Repeat Copy.
    pub size: usize,
}

/// Draws `count` instances with sizes uniform over the regime's range.
pub fn generate(spec: &TaskSpec, count: usize, regime: Regime) -> Result<Vec<TaskInstance>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument("count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.range(regime);
    Ok((0..count).map(|_| sample(spec, rng.gen_range(lo..=hi), &mut rng)).collect())
}

/// One instance of the given size.
pub fn sample<R: Rng>(spec: &TaskSpec, size: usize, rng: &mut R) -> TaskInstance {
    let v = spec.vocab;
    let mut items = |n: usize| -> Vec<usize> { (0..n).map(|_| rng.gen_range(0..v)).collect() };
    let (input, target) = match spec.task {
        Task::Copy => {
            let a = items(size);
            (a.clone(), a)
        }
        Task::Reverse => {
            let a = items(size);
            let mut r = a.clone();
            r.reverse();
            (a, r)
        }
        Task::BigramFlip => {
            let a = items(2 * size);
            let t = a.chunks(2).flat_map(|p| [p[1], p[0]]).collect();
            (a, t)
        }
        Task::OddFirst => {
            let a = items(2 * size);
            let t = a.iter().step_by(2).chain(a.iter().skip(1).step_by(2)).copied().collect();
            (a, t)
        }
        Task::Double => {
            let a = items(size);
            let t = add_digits(&a, &a, size + 1);
            (a, t)
        }
        Task::InterleavedAdd => {
            let x = items(size);
            let y = items(size);
            let input = x.iter().zip(&y).flat_map(|(&a, &b)| [a, b]).collect();
            (input, add_digits(&x, &y, size + 1))
        }
        Task::RepeatCopy => {
            let block = items(REPEAT_BLOCK);
            let mut input = vec![spec.vocab().at(); size];
            input.extend(&block);
            (input, block.repeat(size))
        }
        Task::PrioritySort => {
            let a = items(size);
            let mut keyed: Vec<(usize, usize)> = a.iter().map(|&x| (rng.gen_range(1..=MAX_PRIORITY), x)).collect();
            let at = spec.vocab().at();
            let input = keyed.iter().flat_map(|&(p, x)| std::iter::repeat(at).take(p).chain([x])).collect();
            keyed.sort_by_key(|&(p, _)| p);
            (input, keyed.into_iter().map(|(_, x)| x).collect())
        }
    };
    TaskInstance { input, target, size }
}

/// Schoolbook addition of two little-endian digit strings, padded to `width`.
fn add_digits(x: &[usize], y: &[usize], width: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(width);
    let mut carry = 0;
    for i in 0..width {
        let s = x.get(i).copied().unwrap_or(0) + y.get(i).copied().unwrap_or(0) + carry;
        out.push(s % 10);
        carry = s / 10;
    }
    out
}

/// Target digits for Double or Interleaved Add.
pub fn oracle_arithmetic(task: Task, input: &[usize]) -> Result<Vec<usize>> {
    if input.iter().any(|&d| d > 9) {
        return Err(Error::MalformedInput("digits must be 0-9".into()));
    }
    let (x, y): (Vec<usize>, Vec<usize>) = match task {
        Task::Double => (input.to_vec(), input.to_vec()),
        Task::InterleavedAdd => {
            if input.len() % 2 != 0 {
                return Err(Error::MalformedInput("interleaved add needs an even number of digits".into()));
            }
            (input.iter().step_by(2).copied().collect(), input.iter().skip(1).step_by(2).copied().collect())
        }
        _ => return Err(Error::InvalidArgument(format!("{} is not an arithmetic task", task.name()))),
    };
    let k = x.len();
    let mut out = vec![0; k + 1];
    let mut carry = 0;
    for (i, slot) in out.iter_mut().enumerate() {
        let s = if i < k { x[i] + y[i] } else { 0 } + carry;
        *slot = s % 10;
        carry = s / 10;
    }
    Ok(out)
}

/// Target for Odd First, Repeat Copy or Priority Sort given `@`'s id.
pub fn oracle_structured(task: Task, input: &[usize], at: usize) -> Result<Vec<usize>> {
    match task {
        Task::OddFirst => {
            if input.len() % 2 != 0 {
                return Err(Error::MalformedInput("odd first needs an even-length input".into()));
            }
            let odd = input.iter().enumerate().filter(|(i, _)| i % 2 == 0).map(|(_, &x)| x);
            let even = input.iter().enumerate().filter(|(i, _)| i % 2 == 1).map(|(_, &x)| x);
            Ok(odd.chain(even).collect())
        }
        Task::RepeatCopy => {
            let n = input.iter().take_while(|&&t| t == at).count();
            let block = &input[n..];
            if n == 0 || block.len() != REPEAT_BLOCK || block.contains(&at) {
                return Err(Error::MalformedInput("expected @^N followed by 20 items".into()));
            }
            Ok(block.repeat(n))
        }
        Task::PrioritySort => {
            let mut pairs = Vec::new();
            let mut run = 0;
            for &t in input {
                if t == at {
                    run += 1;
                } else {
                    if run == 0 {
                        return Err(Error::MalformedInput("item without a priority".into()));
                    }
                    pairs.push((run, t));
                    run = 0;
                }
            }
            if run != 0 {
                return Err(Error::MalformedInput("trailing priority without an item".into()));
            }
            pairs.sort_by_key(|&(p, _)| p);
            Ok(pairs.into_iter().map(|(_, t)| t).collect())
        }
        _ => Err(Error::InvalidArgument(format!("{} is not a structured task", task.name()))),
    }
}

/// Shuffles `instances` in place with a seeded generator.
pub fn shuffle(instances: &mut [TaskInstance], seed: u64) {
    instances.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
}

/// Writes `input<TAB>target` lines of space-separated token ids.
pub fn write_dataset<W: Write>(mut out: W, instances: &[TaskInstance]) -> Result<()> {
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    for inst in instances {
        writeln!(out, "{}\t{}", join(&inst.input), join(&inst.target))?;
    }
    Ok(())
}

/// Reads a dataset file. `size` is recovered for the task when possible and
/// left at the input length otherwise.
pub fn read_dataset<R: BufRead>(input: R, task: Option<Task>, vocab: Vocab) -> Result<Vec<TaskInstance>> {
    let parse = |s: &str, line: usize| -> Result<Vec<usize>> {
        s.split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::MalformedInput(format!("line {line}: bad token {t:?}"))))
            .collect()
    };
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| Error::MalformedInput(format!("line {}: missing tab", n + 1)))?;
        let input = parse(a, n + 1)?;
        let target = parse(b, n + 1)?;
        let size = instance_size(task, &input, vocab);
        out.push(TaskInstance { input, target, size });
    }
    Ok(out)
}

fn instance_size(task: Option<Task>, input: &[usize], vocab: Vocab) -> usize {
    match task {
        Some(Task::BigramFlip | Task::OddFirst | Task::InterleavedAdd) => input.len() / 2,
        Some(Task::RepeatCopy) => input.iter().filter(|&&t| t == vocab.at()).count(),
        Some(Task::PrioritySort) => input.iter().filter(|&&t| t != vocab.at()).count(),
        _ => input.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = TaskSpec::new(Task::Copy, 0);
        let inst = sample(&spec, 2, &mut rng);
        assert_eq!(inst.input, inst.target);
        assert_eq!(oracle_arithmetic(Task::Double, &[3, 1]).unwrap(), vec![6, 2, 0]);
        assert_eq!(oracle_arithmetic(Task::InterleavedAdd, &[3, 5, 1, 2]).unwrap(), vec![8, 3, 0]);
        assert_eq!(oracle_arithmetic(Task::Double, &[0, 0]).unwrap(), vec![0, 0, 0]);
        assert_eq!(oracle_structured(Task::OddFirst, &[1, 2, 3, 4], 999).unwrap(), vec![1, 3, 2, 4]);
        let at = 129;
        let input = [at, at, 79, at, at, at, at, 98, at, 5, at, at, at, 107, at, 119];
        assert_eq!(oracle_structured(Task::PrioritySort, &input, at).unwrap(), vec![5, 119, 79, 107, 98]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(oracle_arithmetic(Task::InterleavedAdd, &[1, 2, 3]).is_err());
        assert!(oracle_arithmetic(Task::Double, &[12]).is_err());
        assert!(oracle_structured(Task::PrioritySort, &[5, 129], 129).is_err());
        assert!(oracle_structured(Task::RepeatCopy, &[1, 2, 3], 129).is_err());
    }

    #[test]
    fn names_round_trip() {
        for t in Task::ALL {
            assert_eq!(Task::parse(t.name()), Some(t));
            assert_eq!(Task::from_id(t.id()), Some(t));
        }
        assert_eq!(Task::parse("7"), Some(Task::RepeatCopy));
    }

    #[test]
    fn dataset_round_trip() {
        let spec = TaskSpec::new(Task::PrioritySort, 3);
        let data = generate(&spec, 20, Regime::InSample).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data).unwrap();
        let back = read_dataset(&buf[..], Some(Task::PrioritySort), spec.vocab()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn zero_count_is_rejected() {
        assert!(generate(&TaskSpec::new(Task::Copy, 0), 0, Regime::InSample).is_err());
    }
}

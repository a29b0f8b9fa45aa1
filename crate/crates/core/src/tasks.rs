//! Synthetic token tasks for the toy model.
//!
//! Four deterministic sequence-to-sequence tasks, each over its own vocab
//! band so a trained gate can identify the task from any content token, not
//! just the leading tag. An episode is
//! `[TAG, c_1..c_L, SEP, y_1..y_L]` where y is the task's transform of c:
//!
//! - copy:      y = c
//! - reverse:   y = c reversed
//! - successor: y_i = c_i + 1, wrapping inside the band
//! - constant:  y_i = the task's fixed answer token
//!
//! Generators are pure functions of the seed.

use crate::rng::Rng;

/// Separator between question and answer inside an episode.
pub const SEP: usize = 1;
/// First tag token; task i uses TAG_BASE + i.
pub const TAG_BASE: usize = 4;
/// Content tokens per episode (and answer length).
pub const SEG_LEN: usize = 6;
/// Width of each task's content band.
pub const BAND: usize = 14;
/// Smallest vocab that fits the tags and four bands.
pub const MIN_VOCAB: usize = TAG_BASE + 4 + 4 * BAND;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
    Successor,
    Constant,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::Successor,
        TaskKind::Constant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Successor => "successor",
            TaskKind::Constant => "constant",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> crate::error::Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                crate::error::Error::Parameter(format!(
                    "unknown task '{s}' (expected copy | reverse | successor | constant)"
                ))
            })
    }
}

/// One synthetic task: generator plus its id in the bank.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    /// Adapter/bank slot and gate class of this task.
    pub id: usize,
}

/// A full worked example: question, separator, answer.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub tokens: Vec<usize>,
    /// Index of the first answer token (right after SEP).
    pub answer_start: usize,
}

impl Episode {
    pub fn question(&self) -> &[usize] {
        &self.tokens[..self.answer_start]
    }

    pub fn answer(&self) -> &[usize] {
        &self.tokens[self.answer_start..]
    }
}

impl SyntheticTask {
    pub fn tag(&self) -> usize {
        TAG_BASE + self.id
    }

    /// Content band: [start, start + BAND).
    pub fn band(&self) -> std::ops::Range<usize> {
        let start = TAG_BASE + 4 + self.id * BAND;
        start..start + BAND
    }

    /// The constant task answers with the last token of its band.
    fn constant_answer(&self) -> usize {
        self.band().end - 1
    }

    pub fn transform(&self, content: &[usize]) -> Vec<usize> {
        let band = self.band();
        match self.kind {
            TaskKind::Copy => content.to_vec(),
            TaskKind::Reverse => content.iter().rev().copied().collect(),
            TaskKind::Successor => content
                .iter()
                .map(|&c| band.start + (c - band.start + 1) % BAND)
                .collect(),
            TaskKind::Constant => vec![self.constant_answer(); content.len()],
        }
    }

    /// Random content from the band; the constant task's answer token is
    /// excluded so answers never leak into questions.
    pub fn gen_content(&self, rng: &mut Rng) -> Vec<usize> {
        let band = self.band();
        let width = match self.kind {
            TaskKind::Constant => BAND - 1,
            _ => BAND,
        };
        (0..SEG_LEN).map(|_| band.start + rng.next_below(width)).collect()
    }

    pub fn gen_episode(&self, rng: &mut Rng) -> Episode {
        let content = self.gen_content(rng);
        let answer = self.transform(&content);
        let mut tokens = Vec::with_capacity(2 + 2 * SEG_LEN);
        tokens.push(self.tag());
        tokens.extend_from_slice(&content);
        tokens.push(SEP);
        let answer_start = tokens.len();
        tokens.extend_from_slice(&answer);
        Episode {
            tokens,
            answer_start,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }
}

/// The four standard tasks with ids 0..4.
pub fn standard_tasks() -> Vec<SyntheticTask> {
    TaskKind::ALL
        .into_iter()
        .enumerate()
        .map(|(id, kind)| SyntheticTask { kind, id })
        .collect()
}

/// Labelled training sample for gate training: a token sequence whose every
/// position carries the task id of its source task.
#[derive(Debug, Clone)]
pub struct GateSample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// Balanced dataset: `per_task` samples from each task. Each sample is
/// one to three full episodes of the same task concatenated, so gates see
/// every context length that later shows up inside composite prompts.
pub fn balanced_gate_dataset(
    tasks: &[SyntheticTask],
    per_task: usize,
    seed: u64,
) -> Vec<GateSample> {
    let mut rng = Rng::new(seed).fork(0x6a7e);
    let mut out = Vec::with_capacity(tasks.len() * per_task);
    for i in 0..per_task {
        for task in tasks {
            let episodes = 1 + i % 3;
            let mut tokens = Vec::with_capacity(episodes * (2 + 2 * SEG_LEN));
            for _ in 0..episodes {
                tokens.extend(task.gen_episode(&mut rng).tokens);
            }
            out.push(GateSample {
                tokens,
                label: task.id,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episodes_are_deterministic_and_well_formed() {
        for task in standard_tasks() {
            let a = task.gen_episode(&mut Rng::new(9));
            let b = task.gen_episode(&mut Rng::new(9));
            assert_eq!(a, b);
            assert_eq!(a.tokens.len(), 2 + 2 * SEG_LEN);
            assert_eq!(a.tokens[0], task.tag());
            assert_eq!(a.tokens[SEG_LEN + 1], SEP);
            assert_eq!(a.answer(), task.transform(&a.tokens[1..1 + SEG_LEN]));
            // All content stays inside the task's band.
            for &t in &a.tokens[1..1 + SEG_LEN] {
                assert!(task.band().contains(&t));
            }
        }
    }

    #[test]
    fn bands_are_disjoint_across_tasks() {
        let tasks = standard_tasks();
        for i in 0..tasks.len() {
            for j in i + 1..tasks.len() {
                let (a, b) = (tasks[i].band(), tasks[j].band());
                assert!(a.end <= b.start || b.end <= a.start);
            }
        }
        assert!(MIN_VOCAB <= 64);
    }

    #[test]
    fn transforms_match_hand_examples() {
        let tasks = standard_tasks();
        let copy = &tasks[0];
        let c0 = copy.band().start;
        assert_eq!(copy.transform(&[c0, c0 + 3]), vec![c0, c0 + 3]);

        let rev = &tasks[1];
        let r0 = rev.band().start;
        assert_eq!(rev.transform(&[r0, r0 + 1, r0 + 2]), vec![r0 + 2, r0 + 1, r0]);

        let succ = &tasks[2];
        let s0 = succ.band().start;
        assert_eq!(succ.transform(&[s0, s0 + BAND - 1]), vec![s0 + 1, s0]);

        let konst = &tasks[3];
        let k0 = konst.band().start;
        assert_eq!(
            konst.transform(&[k0, k0 + 1]),
            vec![konst.constant_answer(); 2]
        );
    }

    #[test]
    fn balanced_dataset_is_balanced() {
        let tasks = standard_tasks();
        let data = balanced_gate_dataset(&tasks, 5, 3);
        assert_eq!(data.len(), 20);
        for t in 0..4 {
            assert_eq!(data.iter().filter(|s| s.label == t).count(), 5);
        }
        // Mixed lengths: one to three episodes per sample.
        let lens: std::collections::BTreeSet<usize> =
            data.iter().map(|s| s.tokens.len()).collect();
        assert_eq!(lens.len(), 3);
    }
}

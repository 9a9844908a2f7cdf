//! Synthetic sequence-to-sequence tasks of graded difficulty, with
//! deterministic generation and train/val splits that cannot overlap.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::rng::RngState;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
    ModAdd,
    Sort,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ModAdd => "modadd",
            TaskKind::Sort => "sort",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "modadd" => Ok(TaskKind::ModAdd),
            "sort" => Ok(TaskKind::Sort),
            other => Err(Error::Config(format!(
                "unknown task kind '{other}', expected copy|reverse|modadd|sort"
            ))),
        }
    }

    pub fn target_len(self, seq_len: usize) -> usize {
        match self {
            TaskKind::ModAdd => seq_len / 2,
            _ => seq_len,
        }
    }

    fn target_for(self, input: &[usize], vocab: usize) -> Vec<usize> {
        match self {
            TaskKind::Copy => input.to_vec(),
            TaskKind::Reverse => input.iter().rev().copied().collect(),
            TaskKind::ModAdd => {
                let half = input.len() / 2;
                (0..half).map(|i| (input[i] + input[half + i]) % vocab).collect()
            }
            TaskKind::Sort => {
                let mut out = input.to_vec();
                out.sort_unstable();
                out
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub task_id: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 {
            return Err(Error::Config(format!(
                "task '{}': vocabulary size {} is below the minimum of 4",
                self.name, self.vocab
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::Config(format!(
                "task '{}': sequence length {} is below the minimum of 2",
                self.name, self.seq_len
            )));
        }
        if self.kind == TaskKind::ModAdd && self.seq_len % 2 != 0 {
            return Err(Error::Config(format!(
                "task '{}': modadd pairs input halves and needs an even length, got {}",
                self.name, self.seq_len
            )));
        }
        let capacity = (self.vocab as u128).saturating_pow(self.seq_len as u32);
        if (self.n_train + self.n_val) as u128 > capacity {
            return Err(Error::Config(format!(
                "task '{}': {} train + {} val samples exceed the {} distinct inputs of V={} L={}",
                self.name, self.n_train, self.n_val, capacity, self.vocab, self.seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub task_id: usize,
}

#[derive(Clone, Debug)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Draws val inputs first into a reject set, then train inputs that must
/// miss it, so the splits are disjoint whatever the collision odds.
pub fn gen_dataset(specs: &[TaskSpec], rng: &RngState) -> Result<Vec<TaskData>> {
    if specs.is_empty() {
        return Err(Error::Config("no task specs given".into()));
    }
    let mut names = HashSet::new();
    for spec in specs {
        spec.validate()?;
        if !names.insert(spec.name.as_str()) {
            return Err(Error::Config(format!("duplicate task name '{}'", spec.name)));
        }
    }

    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut task_rng = rng.substream(rng.stream() ^ (0x9e37_79b9 + spec.task_id as u64));
        let mut val_inputs: HashSet<Vec<usize>> = HashSet::new();
        let mut val = Vec::with_capacity(spec.n_val);
        let mut guard = 0usize;
        while val.len() < spec.n_val {
            let input = draw_input(&mut task_rng, spec);
            guard += 1;
            if guard > 1000 * (spec.n_val + spec.n_train + 1) {
                return Err(Error::Data(format!(
                    "task '{}': sampling stalled while filling the val split",
                    spec.name
                )));
            }
            if !val_inputs.insert(input.clone()) {
                continue;
            }
            let target = spec.kind.target_for(&input, spec.vocab);
            val.push(Sample {
                input,
                target,
                task_id: spec.task_id,
            });
        }

        let mut train = Vec::with_capacity(spec.n_train);
        guard = 0;
        while train.len() < spec.n_train {
            let input = draw_input(&mut task_rng, spec);
            guard += 1;
            if guard > 1000 * (spec.n_val + spec.n_train + 1) {
                return Err(Error::Data(format!(
                    "task '{}': sampling stalled while filling the train split",
                    spec.name
                )));
            }
            if val_inputs.contains(&input) {
                continue;
            }
            let target = spec.kind.target_for(&input, spec.vocab);
            train.push(Sample {
                input,
                target,
                task_id: spec.task_id,
            });
        }

        out.push(TaskData {
            spec: spec.clone(),
            train,
            val,
        });
    }
    Ok(out)
}

fn draw_input(rng: &mut RngState, spec: &TaskSpec) -> Vec<usize> {
    (0..spec.seq_len).map(|_| rng.below(spec.vocab)).collect()
}

/// Training samples of every task interleaved round-robin, for backbone
/// pretraining on the pooled mixture.
pub fn pooled_train(tasks: &[TaskData]) -> Vec<Sample> {
    let mut out = Vec::new();
    let longest = tasks.iter().map(|t| t.train.len()).max().unwrap_or(0);
    for i in 0..longest {
        for task in tasks {
            if let Some(s) = task.train.get(i) {
                out.push(s.clone());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::streams;

    fn spec(name: &str, kind: TaskKind, id: usize) -> TaskSpec {
        TaskSpec {
            name: name.into(),
            kind,
            vocab: 16,
            seq_len: 8,
            n_train: 40,
            n_val: 10,
            task_id: id,
        }
    }

    #[test]
    fn test_copy_echoes_input() {
        assert_eq!(TaskKind::Copy.target_for(&[3, 1, 2], 16), vec![3, 1, 2]);
    }

    #[test]
    fn test_reverse_reverses_input() {
        assert_eq!(TaskKind::Reverse.target_for(&[3, 1, 2], 16), vec![2, 1, 3]);
    }

    #[test]
    fn test_modadd_pairs_halves() {
        assert_eq!(TaskKind::ModAdd.target_for(&[3, 4, 4, 3], 5), vec![2, 2]);
    }

    #[test]
    fn test_sort_orders_input() {
        assert_eq!(TaskKind::Sort.target_for(&[3, 1, 2, 1], 16), vec![1, 1, 2, 3]);
    }

    #[test]
    fn test_modadd_target_is_half_length() {
        assert_eq!(TaskKind::ModAdd.target_len(8), 4);
        assert_eq!(TaskKind::Copy.target_len(8), 8);
    }

    #[test]
    fn test_vocab_too_small_rejected() {
        let mut s = spec("copy", TaskKind::Copy, 0);
        s.vocab = 3;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn test_modadd_odd_length_rejected() {
        let mut s = spec("modadd", TaskKind::ModAdd, 0);
        s.seq_len = 7;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn test_capacity_overflow_rejected() {
        let s = TaskSpec {
            name: "copy".into(),
            kind: TaskKind::Copy,
            vocab: 4,
            seq_len: 2,
            n_train: 12,
            n_val: 6,
            task_id: 0,
        };
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn test_duplicate_names_rejected() {
        let rng = RngState::with_stream(7, streams::DATA);
        let specs = [spec("copy", TaskKind::Copy, 0), spec("copy", TaskKind::Reverse, 1)];
        assert!(matches!(gen_dataset(&specs, &rng), Err(Error::Config(_))));
    }

    #[test]
    fn test_splits_are_disjoint_even_when_tight() {
        let rng = RngState::with_stream(11, streams::DATA);
        let s = TaskSpec {
            name: "copy".into(),
            kind: TaskKind::Copy,
            vocab: 4,
            seq_len: 2,
            n_train: 8,
            n_val: 6,
            task_id: 0,
        };
        let data = gen_dataset(&[s], &rng).unwrap();
        let val: HashSet<_> = data[0].val.iter().map(|s| s.input.clone()).collect();
        assert_eq!(val.len(), 6);
        for sample in &data[0].train {
            assert!(!val.contains(&sample.input));
        }
    }

    #[test]
    fn test_generation_is_deterministic() {
        let specs = [
            spec("copy", TaskKind::Copy, 0),
            spec("reverse", TaskKind::Reverse, 1),
            spec("modadd", TaskKind::ModAdd, 2),
            spec("sort", TaskKind::Sort, 3),
        ];
        let a = gen_dataset(&specs, &RngState::with_stream(5, streams::DATA)).unwrap();
        let b = gen_dataset(&specs, &RngState::with_stream(5, streams::DATA)).unwrap();
        for (ta, tb) in a.iter().zip(&b) {
            assert_eq!(ta.train, tb.train);
            assert_eq!(ta.val, tb.val);
        }
        let c = gen_dataset(&specs, &RngState::with_stream(6, streams::DATA)).unwrap();
        assert_ne!(a[0].train, c[0].train);
    }

    #[test]
    fn test_samples_carry_task_id_and_valid_targets() {
        let specs = [spec("sort", TaskKind::Sort, 2), spec("modadd", TaskKind::ModAdd, 3)];
        let data = gen_dataset(&specs, &RngState::with_stream(9, streams::DATA)).unwrap();
        for task in &data {
            for s in task.train.iter().chain(&task.val) {
                assert_eq!(s.task_id, task.spec.task_id);
                assert_eq!(s.input.len(), task.spec.seq_len);
                assert_eq!(s.target.len(), task.spec.kind.target_len(task.spec.seq_len));
                assert!(s.target.iter().all(|&t| t < task.spec.vocab));
            }
        }
    }

    #[test]
    fn test_pooled_interleaves_tasks() {
        let specs = [spec("copy", TaskKind::Copy, 0), spec("sort", TaskKind::Sort, 1)];
        let data = gen_dataset(&specs, &RngState::with_stream(3, streams::DATA)).unwrap();
        let pooled = pooled_train(&data);
        assert_eq!(pooled.len(), 80);
        assert_eq!(pooled[0].task_id, 0);
        assert_eq!(pooled[1].task_id, 1);
        assert_eq!(pooled[2].task_id, 0);
    }
}

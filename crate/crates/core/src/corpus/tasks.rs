//! Synthetic instruction-following suite: deterministic string transformations
//! over lowercase words, each described by a short English instruction.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{self, SEP};
use crate::error::{HintError, Result};

pub const MIN_WORD: usize = 3;
pub const MAX_WORD: usize = 6;
pub const POOL_SIZE: usize = 8;
pub const EVAL_SIZE: usize = 40;

const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", content = "arg", rename_all = "snake_case")]
pub enum Transform {
    Reverse,
    Uppercase,
    Duplicate,
    /// Moves the last `k` letters to the front.
    RotateRight(usize),
    StripVowels,
    /// Swaps letters 0/1, 2/3, ...; a trailing odd letter stays put.
    SwapPairs,
    Append(String),
    Prepend(String),
}

impl Transform {
    pub fn apply(&self, input: &str) -> String {
        let b = input.as_bytes();
        let bytes: Vec<u8> = match self {
            Transform::Reverse => b.iter().rev().copied().collect(),
            Transform::Uppercase => b.to_ascii_uppercase(),
            Transform::Duplicate => [b, b].concat(),
            Transform::RotateRight(k) => {
                let mut v = b.to_vec();
                if !v.is_empty() {
                    let k = k % v.len();
                    v.rotate_right(k);
                }
                v
            }
            Transform::StripVowels => b.iter().filter(|c| !VOWELS.contains(c)).copied().collect(),
            Transform::SwapPairs => {
                let mut v = b.to_vec();
                for pair in v.chunks_exact_mut(2) {
                    pair.swap(0, 1);
                }
                v
            }
            Transform::Append(s) => [b, s.as_bytes()].concat(),
            Transform::Prepend(s) => [s.as_bytes(), b].concat(),
        };
        String::from_utf8(bytes).expect("ascii in, ascii out")
    }

    fn id(&self) -> String {
        match self {
            Transform::Reverse => "reverse".into(),
            Transform::Uppercase => "uppercase".into(),
            Transform::Duplicate => "duplicate".into(),
            Transform::RotateRight(k) => format!("rotate_right_{k}"),
            Transform::StripVowels => "strip_vowels".into(),
            Transform::SwapPairs => "swap_pairs".into(),
            Transform::Append(s) => format!("append_{s}"),
            Transform::Prepend(s) => format!("prepend_{s}"),
        }
    }

    fn instruction(&self) -> String {
        match self {
            Transform::Reverse => "Write the letters in reverse order.".into(),
            Transform::Uppercase => "Change every letter to upper case.".into(),
            Transform::Duplicate => "Write the word twice.".into(),
            Transform::RotateRight(1) => "Move the last letter to the front.".into(),
            Transform::RotateRight(k) => format!("Move the last {k} letters to the front."),
            Transform::StripVowels => "Delete every vowel.".into(),
            Transform::SwapPairs => "Swap each pair of neighbouring letters.".into(),
            Transform::Append(s) => format!("Add \"{s}\" at the end."),
            Transform::Prepend(s) => format!("Add \"{s}\" at the start."),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
}

/// One labeled (input, output) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub task_id: String,
    pub instruction: String,
    pub transform: Transform,
    pub split: Split,
    /// Labeled pairs shown to the hypernetwork in few-shot prompts.
    pub few_shot_pool: Vec<Example>,
    pub eval_instances: Vec<Example>,
    /// Strings a training sampler must never produce for this task.
    #[serde(skip)]
    reserved: HashSet<String>,
}

impl SyntheticTask {
    /// Builds a task whose pools are drawn from `seed`.
    pub fn new(transform: Transform, split: Split, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::new();
        let mut draw = |n: usize, rng: &mut ChaCha8Rng| {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let w = random_word(rng);
                if seen.insert(w.clone()) {
                    out.push(Example {
                        output: transform.apply(&w),
                        input: w,
                    });
                }
            }
            out
        };
        let few_shot_pool = draw(POOL_SIZE, &mut rng);
        let eval_instances = draw(EVAL_SIZE, &mut rng);
        Self {
            task_id: transform.id(),
            instruction: transform.instruction(),
            transform,
            split,
            few_shot_pool,
            eval_instances,
            reserved: seen,
        }
    }

    pub fn gold(&self, input: &str) -> String {
        self.transform.apply(input)
    }

    /// Fresh training pair, never one of the pool or evaluation strings.
    pub fn sample_train<R: Rng + ?Sized>(&self, rng: &mut R) -> Example {
        loop {
            let w = random_word(rng);
            if !self.reserved.contains(&w) {
                return Example {
                    output: self.gold(&w),
                    input: w,
                };
            }
        }
    }

    /// True when `input` is a pool or evaluation string.
    pub fn is_reserved(&self, input: &str) -> bool {
        self.reserved.contains(input)
    }

    /// Rebuilds derived state after deserialization.
    pub fn rebuild_reserved(&mut self) {
        self.reserved = self
            .few_shot_pool
            .iter()
            .chain(&self.eval_instances)
            .map(|e| e.input.clone())
            .collect();
    }
}

pub fn random_word<R: Rng + ?Sized>(rng: &mut R) -> String {
    let n = rng.gen_range(MIN_WORD..=MAX_WORD);
    (0..n).map(|_| (b'a' + rng.gen_range(0..26u8)) as char).collect()
}

/// The twelve-task suite: nine training tasks, three held out.
///
/// Held-out tasks include new members of the append/prepend families, whose
/// argument is only available from the instruction text.
pub fn make_task_suite(seed: u64) -> Vec<SyntheticTask> {
    use Transform::*;
    let spec = [
        (Reverse, Split::Train),
        (Uppercase, Split::Train),
        (Duplicate, Split::Train),
        (RotateRight(1), Split::Train),
        (StripVowels, Split::Train),
        (Append("ob".into()), Split::Train),
        (Append("vy".into()), Split::Train),
        (Prepend("kt".into()), Split::Train),
        (Prepend("wu".into()), Split::Train),
        (Prepend("ku".into()), Split::HeldOut),
        (Prepend("wt".into()), Split::HeldOut),
        (SwapPairs, Split::HeldOut),
    ];
    spec.into_iter()
        .enumerate()
        .map(|(i, (t, split))| SyntheticTask::new(t, split, task_seed(seed, i)))
        .collect()
}

pub fn train_tasks(suite: &[SyntheticTask]) -> Vec<&SyntheticTask> {
    suite.iter().filter(|t| t.split == Split::Train).collect()
}

pub fn held_out_tasks(suite: &[SyntheticTask]) -> Vec<&SyntheticTask> {
    suite.iter().filter(|t| t.split == Split::HeldOut).collect()
}

/// How a task instance is laid out for the hypernetwork and the main model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Instruction to the hypernetwork, bare instance to the model.
    DefOnly,
    /// Instruction plus `k` pool examples to the hypernetwork.
    DefPlusPos(usize),
    /// No hypernetwork input; instruction (plus `shots` examples) precedes
    /// the instance in the model input.
    ConcatBaseline { shots: usize },
    /// The bare instance only.
    NoInstruct,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formatted {
    pub hyper_input: Vec<u32>,
    pub model_input: Vec<u32>,
    pub target: Vec<u32>,
}

/// Tokens of a few-shot demonstration, `input->output`.
pub fn render_example(e: &Example) -> Vec<u32> {
    tokenizer::encode(&format!("{}->{}", e.input, e.output))
}

/// Instruction followed by `k` demonstrations, SEP between segments.
pub fn task_prompt(task: &SyntheticTask, shots: usize) -> Result<Vec<u32>> {
    if shots > task.few_shot_pool.len() {
        return Err(HintError::Pool {
            requested: shots,
            available: task.few_shot_pool.len(),
        });
    }
    Ok(prompt_with(task, &task.few_shot_pool[..shots]))
}

/// Instruction followed by the given demonstrations.
pub fn prompt_with(task: &SyntheticTask, demos: &[Example]) -> Vec<u32> {
    let mut segments = vec![tokenizer::encode(&task.instruction)];
    segments.extend(demos.iter().map(render_example));
    tokenizer::join(&segments)
}

pub fn format_example(task: &SyntheticTask, instance: &str, mode: PromptMode) -> Result<Formatted> {
    let target = tokenizer::encode(&task.gold(instance));
    let inst = tokenizer::encode(instance);
    let (hyper_input, model_input) = match mode {
        PromptMode::DefOnly => (task_prompt(task, 0)?, inst),
        PromptMode::DefPlusPos(k) => (task_prompt(task, k)?, inst),
        PromptMode::ConcatBaseline { shots } => {
            let mut m = task_prompt(task, shots)?;
            m.push(SEP);
            m.extend(inst);
            (Vec::new(), m)
        }
        PromptMode::NoInstruct => (Vec::new(), inst),
    };
    Ok(Formatted {
        hyper_input,
        model_input,
        target,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    task_id: String,
    instruction: String,
    split: Split,
    transform: Transform,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    seed: u64,
    tasks: Vec<ManifestEntry>,
}

fn task_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Human-readable TOML listing of task ids, instructions and splits.
pub fn suite_manifest(suite: &[SyntheticTask], seed: u64) -> String {
    let m = Manifest {
        seed,
        tasks: suite
            .iter()
            .map(|t| ManifestEntry {
                task_id: t.task_id.clone(),
                instruction: t.instruction.clone(),
                split: t.split,
                transform: t.transform.clone(),
            })
            .collect(),
    };
    toml::to_string_pretty(&m).expect("manifest serializes")
}

/// Rebuilds a suite from its manifest. Each entry's id and instruction must
/// match what its transform produces.
pub fn suite_from_manifest(text: &str) -> Result<(Vec<SyntheticTask>, u64)> {
    let m: Manifest = toml::from_str(text).map_err(|e| HintError::Config(format!("suite manifest: {e}")))?;
    let tasks = m
        .tasks
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let task = SyntheticTask::new(e.transform, e.split, task_seed(m.seed, i));
            if task.task_id != e.task_id || task.instruction != e.instruction {
                return Err(HintError::Data(format!(
                    "suite manifest entry {i} ({}) does not match its transform",
                    e.task_id
                )));
            }
            Ok(task)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((tasks, m.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(id: &str) -> SyntheticTask {
        make_task_suite(0).into_iter().find(|t| t.task_id == id).unwrap()
    }

    #[test]
    fn definitions() {
        assert_eq!(task("reverse").gold("abc"), "cba");
        assert_eq!(task("rotate_right_1").gold("abcd"), "dabc");
        assert_eq!(task("swap_pairs").gold("abcde"), "badce");
        assert_eq!(task("strip_vowels").gold("house"), "hs");
        assert_eq!(task("append_ob").gold("xy"), "xyob");
        assert_eq!(task("prepend_ku").gold("xy"), "kuxy");
    }

    #[test]
    fn suite_shape() {
        let suite = make_task_suite(3);
        assert!(suite.len() >= 12);
        assert_eq!(train_tasks(&suite).len(), 9);
        assert_eq!(held_out_tasks(&suite).len(), 3);
        let ids: HashSet<_> = suite.iter().map(|t| t.task_id.as_str()).collect();
        let instr: HashSet<_> = suite.iter().map(|t| t.instruction.as_str()).collect();
        assert_eq!(ids.len(), suite.len());
        assert_eq!(instr.len(), suite.len());
    }

    // Independent reference implementations, written over chars.
    fn reference(t: &Transform, s: &str) -> String {
        let c: Vec<char> = s.chars().collect();
        match t {
            Transform::Reverse => c.iter().rev().collect(),
            Transform::Uppercase => s.to_uppercase(),
            Transform::Duplicate => format!("{s}{s}"),
            Transform::RotateRight(k) => {
                let k = k % c.len();
                c[c.len() - k..].iter().chain(&c[..c.len() - k]).collect()
            }
            Transform::StripVowels => s.replace(['a', 'e', 'i', 'o', 'u'], ""),
            Transform::SwapPairs => (0..c.len())
                .map(|i| {
                    let j = if i % 2 == 0 { i + 1 } else { i - 1 };
                    if j < c.len() {
                        c[j]
                    } else {
                        c[i]
                    }
                })
                .collect(),
            Transform::Append(x) => s.to_owned() + x,
            Transform::Prepend(x) => x.to_owned() + s,
        }
    }

    #[test]
    fn generators_match_reference_on_random_strings() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for t in make_task_suite(0) {
            for _ in 0..1000 {
                let e = t.sample_train(&mut rng);
                assert_eq!(e.output, reference(&t.transform, &e.input), "{}", t.task_id);
            }
            for e in t.few_shot_pool.iter().chain(&t.eval_instances) {
                assert_eq!(e.output, reference(&t.transform, &e.input));
            }
        }
    }

    #[test]
    fn pool_and_eval_are_disjoint_and_never_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in make_task_suite(1) {
            let pool: HashSet<_> = t.few_shot_pool.iter().map(|e| &e.input).collect();
            assert!(t.eval_instances.iter().all(|e| !pool.contains(&e.input)));
            for _ in 0..2000 {
                assert!(!t.is_reserved(&t.sample_train(&mut rng).input));
            }
        }
    }

    #[test]
    fn suite_is_deterministic_in_seed() {
        let a = make_task_suite(9);
        let b = make_task_suite(9);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.eval_instances, y.eval_instances);
            assert_eq!(x.few_shot_pool, y.few_shot_pool);
        }
        assert_ne!(a[0].eval_instances, make_task_suite(10)[0].eval_instances);
    }

    #[test]
    fn formats() {
        let t = task("reverse");
        let f = format_example(&t, "abc", PromptMode::DefOnly).unwrap();
        assert_eq!(f.model_input, tokenizer::encode("abc"));
        assert_eq!(f.hyper_input, tokenizer::encode(&t.instruction));
        assert_eq!(f.target, tokenizer::encode("cba"));

        let f2 = format_example(&t, "abc", PromptMode::DefPlusPos(2)).unwrap();
        let ex_len: usize = t.few_shot_pool[..2].iter().map(|e| e.input.len() + 2 + e.output.len()).sum();
        assert_eq!(f2.hyper_input.len(), t.instruction.len() + ex_len + 2);

        let c = format_example(&t, "abc", PromptMode::ConcatBaseline { shots: 0 }).unwrap();
        assert!(c.hyper_input.is_empty());
        let mut expected = tokenizer::encode(&t.instruction);
        expected.push(SEP);
        expected.extend(tokenizer::encode("abc"));
        assert_eq!(c.model_input, expected);

        let n = format_example(&t, "abc", PromptMode::NoInstruct).unwrap();
        assert!(n.hyper_input.is_empty());
        assert_eq!(n.model_input, tokenizer::encode("abc"));

        assert!(matches!(
            format_example(&t, "abc", PromptMode::DefPlusPos(POOL_SIZE + 1)),
            Err(HintError::Pool { .. })
        ));
    }

    #[test]
    fn manifest_lists_every_task() {
        let suite = make_task_suite(0);
        let m = suite_manifest(&suite, 0);
        for t in &suite {
            assert!(m.contains(&t.task_id));
        }
        assert!(m.contains("held_out"));
    }

    #[test]
    fn manifest_round_trips() {
        let suite = make_task_suite(3);
        let (back, seed) = suite_from_manifest(&suite_manifest(&suite, 3)).unwrap();
        assert_eq!(seed, 3);
        for (a, b) in suite.iter().zip(&back) {
            assert_eq!(a.task_id, b.task_id);
            assert_eq!(a.eval_instances, b.eval_instances);
            assert_eq!(a.few_shot_pool, b.few_shot_pool);
        }
        let tampered = suite_manifest(&suite, 3).replacen("Write the letters in reverse order.", "Something else.", 1);
        assert!(matches!(suite_from_manifest(&tampered), Err(HintError::Data(_))));
        assert!(matches!(suite_from_manifest("seed = 1\nbogus = 2"), Err(HintError::Config(_))));
    }
}

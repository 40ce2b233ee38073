use serde::Serialize;

use super::config::Setting;
use crate::corpus::tasks::{format_example, task_prompt, Split, SyntheticTask, MAX_WORD};
use crate::corpus::tokenizer;
use crate::error::{HintError, Result};
use crate::hypernet::TaskContext;
use crate::model::HintModel;
use crate::parallel::par_map;

/// Decoding budget; every gold output fits.
pub const MAX_DECODE: usize = 2 * MAX_WORD + 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskScore {
    pub task_id: String,
    pub split: Split,
    pub exact_match: f64,
    pub token_f1: f64,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub shots: usize,
    pub tasks: Vec<TaskScore>,
}

impl EvalReport {
    fn mean(&self, split: Split, f: impl Fn(&TaskScore) -> f64) -> f64 {
        let v: Vec<f64> = self.tasks.iter().filter(|t| t.split == split).map(f).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn exact_match(&self, split: Split) -> f64 {
        self.mean(split, |t| t.exact_match)
    }

    pub fn token_f1(&self, split: Split) -> f64 {
        self.mean(split, |t| t.token_f1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,shots,task_id,split,exact_match,token_f1,instances\n");
        for t in &self.tasks {
            out += &format!(
                "{},{},{},{:?},{:.4},{:.4},{}\n",
                self.setting.name(),
                self.shots,
                t.task_id,
                t.split,
                t.exact_match,
                t.token_f1,
                t.instances
            );
        }
        out
    }
}

/// Bag-of-tokens F1 between a prediction and a reference.
pub fn token_f1(pred: &[u32], gold: &[u32]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let mut remaining = gold.to_vec();
    let mut common = 0usize;
    for t in pred {
        if let Some(p) = remaining.iter().position(|g| g == t) {
            remaining.swap_remove(p);
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// Builds the one context a task's instances share.
pub fn task_context(model: &HintModel, task: &SyntheticTask, setting: Setting, shots: usize) -> Result<TaskContext> {
    let variant = setting
        .variant()
        .ok_or_else(|| HintError::Config(format!("{} has no hypernetwork", setting.name())))?;
    model.context_from_tokens(&task.task_id, task_prompt(task, shots)?, variant.kinds)
}

/// Greedy predictions for every evaluation instance of `task`.
///
/// With `cache` the task context is built once; without it, it is rebuilt for
/// every instance.
pub fn predict_task(
    model: &HintModel,
    task: &SyntheticTask,
    setting: Setting,
    shots: usize,
    cache: bool,
) -> Result<Vec<Vec<u32>>> {
    match setting.variant() {
        Some(v) => {
            let shared = if cache { Some(task_context(model, task, setting, shots)?) } else { None };
            task.eval_instances
                .iter()
                .map(|e| {
                    let input = tokenizer::encode(&e.input);
                    match &shared {
                        Some(ctx) => model.predict(ctx, &input, MAX_DECODE, v.fusion),
                        None => model.predict(&task_context(model, task, setting, shots)?, &input, MAX_DECODE, v.fusion),
                    }
                })
                .collect()
        }
        None => task
            .eval_instances
            .iter()
            .map(|e| {
                let f = format_example(task, &e.input, setting.prompt(shots))?;
                model.predict_vanilla(&f.model_input, MAX_DECODE)
            })
            .collect(),
    }
}

pub fn score_task(task: &SyntheticTask, predictions: &[Vec<u32>]) -> TaskScore {
    let mut em = 0.0;
    let mut f1 = 0.0;
    for (e, p) in task.eval_instances.iter().zip(predictions) {
        let gold = tokenizer::encode(&e.output);
        if *p == gold {
            em += 1.0;
        }
        f1 += token_f1(p, &gold);
    }
    let n = task.eval_instances.len().max(1) as f64;
    TaskScore {
        task_id: task.task_id.clone(),
        split: task.split,
        exact_match: em / n,
        token_f1: f1 / n,
        instances: task.eval_instances.len(),
    }
}

/// Exact match and token-F1 per task; tasks are evaluated in parallel.
pub fn evaluate(model: &HintModel, tasks: &[&SyntheticTask], setting: Setting, shots: usize) -> Result<EvalReport> {
    let scores = par_map(tasks, |t| predict_task(model, t, setting, shots, true).map(|p| score_task(t, &p)));
    Ok(EvalReport {
        setting,
        shots,
        tasks: scores.into_iter().collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_cases() {
        assert_eq!(token_f1(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(token_f1(&[], &[1]), 0.0);
        assert_eq!(token_f1(&[], &[]), 1.0);
        assert!((token_f1(&[1, 2], &[1, 3]) - 0.5).abs() < 1e-12);
        assert!((token_f1(&[1, 1, 1], &[1]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let suite = crate::corpus::make_task_suite(0);
        let task = &suite[0];
        let gold: Vec<Vec<u32>> = task.eval_instances.iter().map(|e| tokenizer::encode(&e.output)).collect();
        assert_eq!(score_task(task, &gold).exact_match, 1.0);
        let empty = vec![Vec::new(); gold.len()];
        assert_eq!(score_task(task, &empty).exact_match, 0.0);
    }

    #[test]
    fn cached_and_regenerated_contexts_agree() {
        let m = HintModel::new(crate::transformer::ModelConfig::tiny(), 5).unwrap();
        let suite = crate::corpus::make_task_suite(0);
        for setting in [Setting::Hint, Setting::LoraOnly] {
            let cached = predict_task(&m, &suite[10], setting, 2, true).unwrap();
            let fresh = predict_task(&m, &suite[10], setting, 2, false).unwrap();
            assert_eq!(cached, fresh);
        }
    }

    #[test]
    fn untrained_model_scores_near_zero_and_reports_every_task() {
        let m = HintModel::new(crate::transformer::ModelConfig::tiny(), 5).unwrap();
        let suite = crate::corpus::make_task_suite(0);
        let held = crate::corpus::tasks::held_out_tasks(&suite);
        let r = evaluate(&m, &held, Setting::NoInstruct, 0).unwrap();
        assert_eq!(r.tasks.len(), held.len());
        assert!(r.exact_match(Split::HeldOut) < 0.05);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + held.len());
        assert!(task_context(&m, held[0], Setting::NoInstruct, 0).is_err());
    }
}

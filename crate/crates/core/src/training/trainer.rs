use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Mode, Setting, TrainConfig};
use super::optim::Adam;
use crate::corpus::tasks::{prompt_with, PromptMode, SyntheticTask};
use crate::corpus::tokenizer;
use crate::corpus::{chunk_split, windows};
use crate::error::{HintError, Result};
use crate::hypernet::HintVariant;
use crate::model::HintModel;
use crate::numerics::{ParamGrads, Tape};
use crate::parallel::par_map;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchItem {
    pub hyper_input: Vec<u32>,
    pub model_input: Vec<u32>,
    pub target: Vec<u32>,
    pub task_id: String,
}

/// Items may come from different tasks; each gets its own generated modules.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

impl Batch {
    /// Target tokens scored, counting the appended end token.
    pub fn target_tokens(&self) -> usize {
        self.items.iter().map(|i| i.target.len() + 1).sum()
    }
}

/// Loss, per-item losses (summed over tokens) and parameter gradients.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub item_losses: Vec<f64>,
    pub grads: ParamGrads,
}

/// Items sharing a hypernetwork input share one hypernetwork pass.
fn group_items(batch: &Batch, variant: Option<HintVariant>) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, item) in batch.items.iter().enumerate() {
        let key = if variant.is_some() { Some(&item.hyper_input) } else { None };
        match groups
            .iter_mut()
            .find(|g| key.is_some() && Some(&batch.items[g[0]].hyper_input) == key)
        {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    groups
}

/// Mean token cross-entropy of `batch` and its gradient, without updating.
///
/// Groups run in parallel; their gradients are summed in group order, so the
/// result does not depend on scheduling.
pub fn batch_gradients(model: &HintModel, batch: &Batch, variant: Option<HintVariant>) -> Result<BatchGradients> {
    if batch.items.is_empty() {
        return Err(HintError::Contract("empty batch".into()));
    }
    let scale = 1.0 / batch.target_tokens() as f64;
    let groups = group_items(batch, variant);
    let results = par_map(&groups, |group| -> Result<(Vec<f64>, ParamGrads)> {
        let mut tape = Tape::new();
        let first = &batch.items[group[0]];
        let items: Vec<(&[u32], &[u32])> = group
            .iter()
            .map(|&i| (batch.items[i].model_input.as_slice(), batch.items[i].target.as_slice()))
            .collect();
        let losses = model.losses_on(&mut tape, &first.hyper_input, &items, variant)?;
        let values: Vec<f64> = losses.iter().map(|&l| tape.scalar(l)).collect();
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let total = tape.scale(total, scale);
        let grads = tape.backward(total)?;
        Ok((values, tape.param_grads(&grads, model.store.len())))
    });
    let mut item_losses = vec![0.0; batch.items.len()];
    let mut grads = ParamGrads::new(model.store.len());
    for (group, r) in groups.iter().zip(results) {
        let (values, g) = r?;
        for (&i, v) in group.iter().zip(values) {
            item_losses[i] = v;
        }
        grads.merge(&g);
    }
    let loss = item_losses.iter().sum::<f64>() * scale;
    Ok(BatchGradients {
        loss,
        item_losses,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub wall_clock_s: f64,
    pub param_norm: f64,
}

/// Optimizer state and log for one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: Adam,
    pub step: usize,
    pub log: Vec<LogRow>,
    started: Instant,
}

impl Trainer {
    pub fn new(model: &HintModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            adam: Adam::new(&model.store, config.learning_rate),
            config,
            step: 0,
            log: Vec::new(),
            started: Instant::now(),
        })
    }

    /// Forward, backward, clip and one Adam update over every parameter.
    pub fn train_step(&mut self, model: &mut HintModel, batch: &Batch) -> Result<f64> {
        let mut bg = batch_gradients(model, batch, self.config.setting.variant())?;
        if !bg.loss.is_finite() {
            return Err(HintError::Divergence {
                step: self.step,
                loss: bg.loss,
            });
        }
        let norm = bg.grads.global_norm();
        if !norm.is_finite() {
            return Err(HintError::Divergence { step: self.step, loss: norm });
        }
        if norm > self.config.clip_norm {
            bg.grads.scale(self.config.clip_norm / norm);
        }
        self.adam.step(&mut model.store, &bg.grads);
        self.step += 1;
        self.log.push(LogRow {
            step: self.step,
            loss: bg.loss,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
            param_norm: model.store.l2_norm(),
        });
        Ok(bg.loss)
    }

    pub fn write_log<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,loss,wall_clock_s,param_norm")?;
        for r in &self.log {
            writeln!(w, "{},{:.6},{:.3},{:.6}", r.step, r.loss, r.wall_clock_s, r.param_norm)?;
        }
        Ok(())
    }
}

/// Chunked-corpus pretraining: each window is split into `(a, b, c)` with `a`
/// fed to the hypernetwork, `b` to the encoder and `c` as the target.
pub fn pretrain(model: &mut HintModel, corpus: &str, config: &TrainConfig) -> Result<Trainer> {
    let mut config = config.clone();
    config.mode = Mode::Pretrain;
    let mut trainer = Trainer::new(model, config.clone())?;
    let wins = windows(corpus, config.window.min(model.config.max_seq_len), config.window / 2);
    if wins.is_empty() || wins[0].len() < 3 {
        return Err(HintError::Data("corpus is too short for pretraining windows".into()));
    }
    let needed = config.steps * config.batch_size;
    if !config.cycle && needed > wins.len() {
        return Err(HintError::Data(format!(
            "corpus yields {} windows, {needed} needed and cycling is off",
            wins.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..wins.len()).collect();
    let mut cursor = order.len();
    for _ in 0..config.steps {
        let mut batch = Batch::default();
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let t = chunk_split(&wins[order[cursor]], &mut rng)?;
            cursor += 1;
            batch.items.push(BatchItem {
                hyper_input: t.a,
                model_input: t.b,
                target: t.c,
                task_id: "corpus".into(),
            });
        }
        trainer.train_step(model, &batch)?;
    }
    Ok(trainer)
}

/// Samples a mixed-task finetuning batch.
pub fn sample_batch<R: Rng>(tasks: &[&SyntheticTask], config: &TrainConfig, rng: &mut R) -> Result<Batch> {
    let mut batch = Batch::default();
    for _ in 0..config.batch_size {
        let task = tasks[rng.gen_range(0..tasks.len())];
        let shots = if rng.gen_bool(config.fewshot_fraction) { config.shots } else { 0 };
        if shots > task.few_shot_pool.len() {
            return Err(HintError::Pool {
                requested: shots,
                available: task.few_shot_pool.len(),
            });
        }
        let demos = &task.few_shot_pool[..shots];
        let ex = task.sample_train(rng);
        let target = tokenizer::encode(&ex.output);
        let input = tokenizer::encode(&ex.input);
        let (hyper_input, model_input) = match config.setting.prompt(shots) {
            PromptMode::DefOnly | PromptMode::DefPlusPos(_) => (prompt_with(task, demos), input),
            PromptMode::ConcatBaseline { .. } => {
                let mut m = prompt_with(task, demos);
                m.push(tokenizer::SEP);
                m.extend(input);
                (Vec::new(), m)
            }
            PromptMode::NoInstruct => (Vec::new(), input),
        };
        batch.items.push(BatchItem {
            hyper_input,
            model_input,
            target,
            task_id: task.task_id.clone(),
        });
    }
    Ok(batch)
}

/// Mixed-task finetuning with tasks drawn uniformly from `tasks`.
pub fn finetune(model: &mut HintModel, tasks: &[&SyntheticTask], config: &TrainConfig) -> Result<Trainer> {
    if tasks.is_empty() {
        return Err(HintError::Data("no training tasks".into()));
    }
    let mut config = config.clone();
    config.mode = Mode::Finetune;
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 0..config.steps {
        let batch = sample_batch(tasks, &config, &mut rng)?;
        trainer.train_step(model, &batch)?;
    }
    Ok(trainer)
}

/// Per-item summed losses with frozen weights.
pub fn item_losses(model: &HintModel, batch: &Batch, setting: Setting) -> Result<Vec<f64>> {
    Ok(batch_gradients(model, batch, setting.variant())?.item_losses)
}

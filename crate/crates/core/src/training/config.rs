use serde::{Deserialize, Serialize};

use crate::corpus::PromptMode;
use crate::error::{HintError, Result};
use crate::hypernet::HintVariant;
use crate::peft::PeftKinds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    Finetune,
}

/// What the model sees. The HINT ablations switch off fusion or restrict the
/// generated module kinds; the two baselines bypass the hypernetwork.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Adapters, prefixes and instruction fusion.
    Hint,
    /// Instruction prepended to the input of the plain model.
    ConcatBaseline,
    /// Plain model, no instruction anywhere.
    NoInstruct,
    /// Adapters and prefixes, no fusion.
    NoFusion,
    /// Fusion only, no generated modules.
    NoPeft,
    AdaptersOnly,
    PrefixesOnly,
    LoraOnly,
}

impl Setting {
    pub const ALL: [Setting; 8] = [
        Setting::Hint,
        Setting::ConcatBaseline,
        Setting::NoInstruct,
        Setting::NoFusion,
        Setting::NoPeft,
        Setting::AdaptersOnly,
        Setting::PrefixesOnly,
        Setting::LoraOnly,
    ];

    pub const ABLATIONS: [Setting; 5] = [
        Setting::AdaptersOnly,
        Setting::PrefixesOnly,
        Setting::LoraOnly,
        Setting::NoFusion,
        Setting::NoPeft,
    ];

    /// The hypernetwork configuration, or `None` for the plain-model baselines.
    ///
    /// The single-kind ablations run without fusion so the generated modules
    /// are the only route for task information.
    pub fn variant(self) -> Option<HintVariant> {
        let kinds = |adapters, prefixes, lora| PeftKinds { adapters, prefixes, lora };
        let v = |kinds, fusion| Some(HintVariant { kinds, fusion });
        match self {
            Setting::Hint => v(PeftKinds::ADAPTERS_PREFIXES, true),
            Setting::ConcatBaseline | Setting::NoInstruct => None,
            Setting::NoFusion => v(PeftKinds::ADAPTERS_PREFIXES, false),
            Setting::NoPeft => v(PeftKinds::NONE, true),
            Setting::AdaptersOnly => v(kinds(true, false, false), false),
            Setting::PrefixesOnly => v(kinds(false, true, false), false),
            Setting::LoraOnly => v(kinds(false, false, true), false),
        }
    }

    pub fn uses_hypernet(self) -> bool {
        self.variant().is_some()
    }

    /// Prompt layout for an instance shown with `shots` demonstrations.
    pub fn prompt(self, shots: usize) -> PromptMode {
        match self {
            Setting::ConcatBaseline => PromptMode::ConcatBaseline { shots },
            Setting::NoInstruct => PromptMode::NoInstruct,
            _ if shots == 0 => PromptMode::DefOnly,
            _ => PromptMode::DefPlusPos(shots),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Setting::Hint => "hint",
            Setting::ConcatBaseline => "concat_baseline",
            Setting::NoInstruct => "no_instruct",
            Setting::NoFusion => "no_fusion",
            Setting::NoPeft => "no_peft",
            Setting::AdaptersOnly => "adapters_only",
            Setting::PrefixesOnly => "prefixes_only",
            Setting::LoraOnly => "lora_only",
        }
    }
}

impl std::str::FromStr for Setting {
    type Err = HintError;

    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| HintError::Config(format!("unknown setting {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub mode: Mode,
    pub setting: Setting,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Fraction of finetuning items whose prompt carries demonstrations.
    pub fewshot_fraction: f64,
    /// Demonstrations per prompt when they are used.
    pub shots: usize,
    /// Pretraining window length in tokens.
    pub window: usize,
    /// Reuse the corpus once every window has been seen.
    pub cycle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            mode: Mode::Finetune,
            setting: Setting::Hint,
            clip_norm: 1.0,
            fewshot_fraction: 0.5,
            shots: 2,
            window: 24,
            cycle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(HintError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(HintError::Config(format!("learning_rate {} is not positive", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.fewshot_fraction) {
            return Err(HintError::Config("fewshot_fraction must lie in [0, 1]".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(HintError::Config("clip_norm must be positive".into()));
        }
        if self.mode == Mode::Pretrain && self.window < 3 {
            return Err(HintError::Config("pretraining windows need at least 3 tokens".into()));
        }
        Ok(())
    }
}

//! Row layout of the generator's embedding table.
//!
//! Each row produces one column (adapters, LoRA) or one token vector
//! (prefixes) of a generated matrix. Rows are grouped by module family so a
//! family's rows form one contiguous range and share one MLP call.

use serde::Serialize;

use crate::peft::PeftKinds;
use crate::transformer::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Family {
    Adapter,
    Prefix,
    Lora,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Adapter, Family::Prefix, Family::Lora];

    pub fn active(self, kinds: PeftKinds) -> bool {
        match self {
            Family::Adapter => kinds.adapters,
            Family::Prefix => kinds.prefixes,
            Family::Lora => kinds.lora,
        }
    }
}

/// Which matrix of a layer a block of rows builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Slot {
    /// Columns of the `d × n_a` down-projection.
    AdapterDown,
    /// Rows of the `n_a × d` up-projection.
    AdapterUp,
    SelfPrefixKeys,
    SelfPrefixValues,
    CrossPrefixKeys,
    CrossPrefixValues,
    LoraQueryA,
    LoraQueryB,
    LoraValueA,
    LoraValueB,
}

impl Slot {
    pub fn family(self) -> Family {
        match self {
            Slot::AdapterDown | Slot::AdapterUp => Family::Adapter,
            Slot::SelfPrefixKeys | Slot::SelfPrefixValues | Slot::CrossPrefixKeys | Slot::CrossPrefixValues => {
                Family::Prefix
            }
            _ => Family::Lora,
        }
    }
}

/// A run of table rows that together form one generated matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Block {
    /// Global layer index: encoder layers first, then decoder layers.
    pub layer: usize,
    pub slot: Slot,
    pub start: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IndexMap {
    blocks: Vec<Block>,
    rows: usize,
}

impl IndexMap {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut blocks = Vec::new();
        let mut rows = 0;
        let mut push = |layer, slot, count| {
            blocks.push(Block {
                layer,
                slot,
                start: rows,
                count,
            });
            rows += count;
        };
        let layers = cfg.total_layers();
        for layer in 0..layers {
            push(layer, Slot::AdapterDown, cfg.adapter_bottleneck);
            push(layer, Slot::AdapterUp, cfg.adapter_bottleneck);
        }
        for layer in 0..layers {
            push(layer, Slot::SelfPrefixKeys, cfg.prefix_length);
            push(layer, Slot::SelfPrefixValues, cfg.prefix_length);
            if layer >= cfg.layers {
                push(layer, Slot::CrossPrefixKeys, cfg.prefix_length);
                push(layer, Slot::CrossPrefixValues, cfg.prefix_length);
            }
        }
        for layer in 0..layers {
            for slot in [Slot::LoraQueryA, Slot::LoraQueryB, Slot::LoraValueA, Slot::LoraValueB] {
                push(layer, slot, cfg.lora_rank);
            }
        }
        Self { blocks, rows }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// The `(layer, slot, offset)` a row feeds.
    pub fn locate(&self, row: usize) -> Option<(usize, Slot, usize)> {
        self.blocks
            .iter()
            .find(|b| (b.start..b.start + b.count).contains(&row))
            .map(|b| (b.layer, b.slot, row - b.start))
    }

    /// Contiguous row range of one family.
    pub fn family_range(&self, family: Family) -> std::ops::Range<usize> {
        let mut it = self.blocks.iter().filter(|b| b.slot.family() == family);
        match it.next() {
            None => 0..0,
            Some(first) => {
                let end = it.last().map_or(first.start + first.count, |b| b.start + b.count);
                first.start..end
            }
        }
    }

    pub fn family_rows(&self, family: Family) -> usize {
        self.family_range(family).len()
    }
}

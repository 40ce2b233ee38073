//! Cross-attention parameter generator.
//!
//! A learned table holds one embedding per generated column or token. One
//! multi-head cross-attention layer lets those embeddings read the encoded
//! instruction, then a per-family two-layer MLP maps each embedding to a
//! `d`-vector, which becomes one column of an adapter or LoRA factor or one
//! prefix key/value token.

use rand::Rng;

use super::index::{Family, IndexMap, Slot};
use crate::error::{HintError, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::peft::{PeftKinds, PeftSet};
use crate::transformer::{
    attention, normal_tensor, ones, Adapter, AdapterVars, LayerAdaptation, LayerVars, Lora, LoraPair, LoraVars,
    ModelConfig, Prefix, PrefixVars, NORM_EPS,
};

/// Init scale of the adapter and LoRA MLP output layers.
const LIVE_OUTPUT_STD: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct GeneratorAttention {
    pub norm: ParamId,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub out: ParamId,
}

/// `W2 · GELU(W1 · norm(x))`, hidden width `n_e`.
#[derive(Debug, Clone)]
pub struct GeneratorMlp {
    pub norm: ParamId,
    pub hidden: ParamId,
    pub out: ParamId,
}

impl GeneratorMlp {
    fn register<R: Rng>(store: &mut ParamStore, name: &str, n_e: usize, d: usize, out_std: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm: store.add(format!("{name}.norm"), ones(n_e))?,
            hidden: store.add(format!("{name}.hidden"), normal_tensor(rng, &[n_e, n_e], 1.0 / (n_e as f64).sqrt()))?,
            out: store.add(format!("{name}.out"), normal_tensor(rng, &[n_e, d], out_std))?,
        })
    }

    fn ids(&self) -> [ParamId; 3] {
        [self.norm, self.hidden, self.out]
    }

    fn apply<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let h = tape.rms_norm(x, NORM_EPS);
        let g = tape.param(store, self.norm);
        let h = tape.mul_row(h, g)?;
        let w1 = tape.param(store, self.hidden);
        let h = tape.matmul(h, w1)?;
        let h = tape.gelu(h);
        let w2 = tape.param(store, self.out);
        tape.matmul(h, w2)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorBank {
    pub config: ModelConfig,
    pub embed_table: ParamId,
    pub cross_attn: GeneratorAttention,
    pub mlp_adapter: GeneratorMlp,
    pub mlp_prefix: GeneratorMlp,
    pub mlp_lora: GeneratorMlp,
    pub index: IndexMap,
}

impl GeneratorBank {
    /// Registers parameters under `hyper.`. The prefix MLP's output layer
    /// starts at zero so freshly generated prefixes are all-zero tokens.
    pub fn register<R: Rng>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, n_e) = (config.model_dim, config.embed_dim);
        let index = IndexMap::new(config);
        let embed_table = store.add("hyper.embed_table", normal_tensor(rng, &[index.rows(), n_e], 0.02))?;
        let proj = |rng: &mut R, r: usize, c: usize| normal_tensor(rng, &[r, c], 1.0 / (r as f64).sqrt());
        let cross_attn = GeneratorAttention {
            norm: store.add("hyper.attn.norm", ones(n_e))?,
            query: store.add("hyper.attn.q", proj(rng, n_e, d))?,
            key: store.add("hyper.attn.k", proj(rng, d, d))?,
            value: store.add("hyper.attn.v", proj(rng, d, d))?,
            out: store.add("hyper.attn.o", proj(rng, d, n_e))?,
        };
        let mlp_adapter = GeneratorMlp::register(store, "hyper.mlp_adapter", n_e, d, LIVE_OUTPUT_STD, rng)?;
        let mlp_prefix = GeneratorMlp::register(store, "hyper.mlp_prefix", n_e, d, 0.0, rng)?;
        let mlp_lora = GeneratorMlp::register(store, "hyper.mlp_lora", n_e, d, LIVE_OUTPUT_STD, rng)?;
        Ok(Self {
            config: config.clone(),
            embed_table,
            cross_attn,
            mlp_adapter,
            mlp_prefix,
            mlp_lora,
            index,
        })
    }

    pub fn mlp(&self, family: Family) -> &GeneratorMlp {
        match family {
            Family::Adapter => &self.mlp_adapter,
            Family::Prefix => &self.mlp_prefix,
            Family::Lora => &self.mlp_lora,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let a = &self.cross_attn;
        let mut ids = vec![self.embed_table, a.norm, a.query, a.key, a.value, a.out];
        for f in Family::ALL {
            ids.extend(self.mlp(f).ids());
        }
        ids
    }

    pub fn mlp_param_count(&self, store: &ParamStore, family: Family) -> usize {
        self.mlp(family).ids().iter().map(|&id| store.get(id).numel()).sum()
    }

    pub fn cross_attn_param_count(&self, store: &ParamStore) -> usize {
        let a = &self.cross_attn;
        [a.norm, a.query, a.key, a.value, a.out]
            .iter()
            .map(|&id| store.get(id).numel())
            .sum()
    }

    pub fn embed_param_count(&self, store: &ParamStore) -> usize {
        store.get(self.embed_table).numel()
    }

    /// All hypernetwork-specific parameters (the tied encoder is not counted).
    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).numel()).sum()
    }

    /// Generates tape-resident modules for every layer from encoded
    /// instruction states (`t × d`). Only rows of active families are computed.
    pub fn generate_on<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        instruction: Var,
        kinds: PeftKinds,
    ) -> Result<Vec<LayerVars>> {
        let cfg = &self.config;
        let mut out = vec![LayerVars::default(); cfg.total_layers()];
        if !kinds.any() {
            return Ok(out);
        }
        if tape.rows(instruction) == 0 {
            return Err(HintError::Contract("cannot generate modules from an empty instruction".into()));
        }
        if tape.cols(instruction) != cfg.model_dim {
            return Err(HintError::Shape(format!(
                "instruction states are {:?}, expected width {}",
                tape.shape(instruction),
                cfg.model_dim
            )));
        }
        let families: Vec<Family> = Family::ALL.into_iter().filter(|f| f.active(kinds)).collect();
        let ranges: Vec<_> = families.iter().map(|&f| self.index.family_range(f)).collect();
        let ids: Vec<usize> = ranges.iter().flat_map(|r| r.clone()).collect();

        let table = tape.param(store, self.embed_table);
        let queries = tape.gather(table, &ids)?;
        let a = &self.cross_attn;
        let h = tape.rms_norm(queries, NORM_EPS);
        let g = tape.param(store, a.norm);
        let h = tape.mul_row(h, g)?;
        let wq = tape.param(store, a.query);
        let wk = tape.param(store, a.key);
        let wv = tape.param(store, a.value);
        let wo = tape.param(store, a.out);
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(instruction, wk)?;
        let v = tape.matmul(instruction, wv)?;
        let read = attention(tape, q, k, v, None, false, cfg.heads)?;
        let read = tape.matmul(read, wo)?;
        let embedded = tape.add(queries, read)?;

        let mut offset = 0;
        for (family, range) in families.iter().zip(&ranges) {
            let rows = tape.slice_rows(embedded, offset, range.len())?;
            offset += range.len();
            let generated = self.mlp(*family).apply(tape, store, rows)?;
            for block in self.index.blocks().iter().filter(|b| b.slot.family() == *family) {
                let m = tape.slice_rows(generated, block.start - range.start, block.count)?;
                place(tape, &mut out[block.layer], block.slot, m, cfg)?;
            }
        }
        Ok(out)
    }
}

fn place(tape: &mut Tape<'_>, layer: &mut LayerVars, slot: Slot, m: Var, cfg: &ModelConfig) -> Result<()> {
    let empty = || PrefixVars { keys: m, values: m };
    let lora = || LoraVars {
        query: (m, m),
        value: (m, m),
        scaling: 1.0 / cfg.lora_rank as f64,
    };
    match slot {
        Slot::AdapterDown => {
            let down = tape.transpose(m);
            layer.adapter.get_or_insert(AdapterVars { down, up: down }).down = down;
        }
        Slot::AdapterUp => layer.adapter.get_or_insert(AdapterVars { down: m, up: m }).up = m,
        Slot::SelfPrefixKeys => layer.self_prefix.get_or_insert_with(empty).keys = m,
        Slot::SelfPrefixValues => layer.self_prefix.get_or_insert_with(empty).values = m,
        Slot::CrossPrefixKeys => layer.cross_prefix.get_or_insert_with(empty).keys = m,
        Slot::CrossPrefixValues => layer.cross_prefix.get_or_insert_with(empty).values = m,
        Slot::LoraQueryA => {
            let a = tape.transpose(m);
            layer.lora.get_or_insert_with(lora).query.0 = a;
        }
        Slot::LoraQueryB => layer.lora.get_or_insert_with(lora).query.1 = m,
        Slot::LoraValueA => {
            let a = tape.transpose(m);
            layer.lora.get_or_insert_with(lora).value.0 = a;
        }
        Slot::LoraValueB => layer.lora.get_or_insert_with(lora).value.1 = m,
    }
    Ok(())
}

/// Reads generated tape values back into a standalone [`PeftSet`].
pub fn peft_from_vars(tape: &Tape<'_>, vars: &[LayerVars], cfg: &ModelConfig, kinds: PeftKinds) -> Result<PeftSet> {
    let (h, k) = (cfg.heads, cfg.head_dim);
    let prefix = |p: &PrefixVars| -> Result<Prefix> {
        let n = tape.rows(p.keys);
        Ok(Prefix {
            keys: Tensor::new(&[n, h, k], tape.data(p.keys).to_vec())?,
            values: Tensor::new(&[n, h, k], tape.data(p.values).to_vec())?,
        })
    };
    let mat = |v: Var| Tensor::new(&[tape.rows(v), tape.cols(v)], tape.data(v).to_vec());
    let mut per_layer = Vec::with_capacity(vars.len());
    for lv in vars {
        per_layer.push(LayerAdaptation {
            adapter: lv
                .adapter
                .map(|a| -> Result<Adapter> {
                    Ok(Adapter {
                        down: mat(a.down)?,
                        up: mat(a.up)?,
                    })
                })
                .transpose()?,
            self_prefix: lv.self_prefix.as_ref().map(prefix).transpose()?,
            cross_prefix: lv.cross_prefix.as_ref().map(prefix).transpose()?,
            lora: lv
                .lora
                .map(|l| -> Result<Lora> {
                    Ok(Lora {
                        query: LoraPair {
                            a: mat(l.query.0)?,
                            b: mat(l.query.1)?,
                        },
                        value: LoraPair {
                            a: mat(l.value.0)?,
                            b: mat(l.value.1)?,
                        },
                    })
                })
                .transpose()?,
        });
    }
    let set = PeftSet { per_layer, kinds };
    set.validate(cfg)?;
    Ok(set)
}

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::adaptation::{LayerVars, PrefixVars};
use super::attention::attention;
use super::ModelConfig;
use crate::corpus::tokenizer::{BOS, EOS};
use crate::error::{HintError, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::peft::{adapter_forward, lora_forward};

pub(crate) const NORM_EPS: f64 = 1e-6;

/// Normal initializer shared by every parameter group.
pub(crate) fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let numel = shape.iter().product();
    let data = if std == 0.0 {
        vec![0.0; numel]
    } else {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..numel).map(|_| dist.sample(rng)).collect()
    };
    Tensor::new(shape, data).expect("shape matches data")
}

pub(crate) fn ones(n: usize) -> Tensor {
    Tensor::new(&[1, n], vec![1.0; n]).expect("row")
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub norm: ParamId,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub out: ParamId,
}

impl AttentionParams {
    fn register<R: Rng>(store: &mut ParamStore, name: &str, d: usize, out_std: f64, rng: &mut R) -> Result<Self> {
        let std = 1.0 / (d as f64).sqrt();
        Ok(Self {
            norm: store.add(format!("{name}.norm"), ones(d))?,
            query: store.add(format!("{name}.q"), normal_tensor(rng, &[d, d], std))?,
            key: store.add(format!("{name}.k"), normal_tensor(rng, &[d, d], std))?,
            value: store.add(format!("{name}.v"), normal_tensor(rng, &[d, d], std))?,
            out: store.add(format!("{name}.o"), normal_tensor(rng, &[d, d], out_std))?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FeedForwardParams {
    pub norm: ParamId,
    pub w_in: ParamId,
    pub w_out: ParamId,
}

impl FeedForwardParams {
    fn register<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        ffn: usize,
        out_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm: store.add(format!("{name}.norm"), ones(d))?,
            w_in: store.add(format!("{name}.w_in"), normal_tensor(rng, &[d, ffn], 1.0 / (d as f64).sqrt()))?,
            w_out: store.add(format!("{name}.w_out"), normal_tensor(rng, &[ffn, d], out_std))?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub self_attn: AttentionParams,
    pub ffn: FeedForwardParams,
}

#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ffn: FeedForwardParams,
}

/// Parameter handles of the underlying encoder-decoder.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: ModelConfig,
    pub token_embedding: ParamId,
    pub encoder_positions: ParamId,
    pub decoder_positions: ParamId,
    pub encoder: Vec<EncoderLayerParams>,
    pub encoder_norm: ParamId,
    pub decoder: Vec<DecoderLayerParams>,
    pub decoder_norm: ParamId,
    pub lm_head: ParamId,
}

impl Transformer {
    /// Register freshly initialized parameters under the `model.` namespace.
    pub fn register<R: Rng>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let out_std = 1.0 / ((d * 2 * config.layers) as f64).sqrt();
        let ffn_out_std = 1.0 / ((config.ffn_dim * 2 * config.layers) as f64).sqrt();
        let token_embedding = store.add("model.embed", normal_tensor(rng, &[config.vocab_size, d], 1.0))?;
        let encoder_positions =
            store.add("model.enc_pos", normal_tensor(rng, &[config.max_seq_len, d], 0.5))?;
        let decoder_positions =
            store.add("model.dec_pos", normal_tensor(rng, &[config.max_seq_len, d], 0.5))?;
        let mut encoder = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            encoder.push(EncoderLayerParams {
                self_attn: AttentionParams::register(store, &format!("model.enc{i}.self"), d, out_std, rng)?,
                ffn: FeedForwardParams::register(store, &format!("model.enc{i}.ffn"), d, config.ffn_dim, ffn_out_std, rng)?,
            });
        }
        let encoder_norm = store.add("model.enc_norm", ones(d))?;
        let mut decoder = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            decoder.push(DecoderLayerParams {
                self_attn: AttentionParams::register(store, &format!("model.dec{i}.self"), d, out_std, rng)?,
                cross_attn: AttentionParams::register(store, &format!("model.dec{i}.cross"), d, out_std, rng)?,
                ffn: FeedForwardParams::register(store, &format!("model.dec{i}.ffn"), d, config.ffn_dim, ffn_out_std, rng)?,
            });
        }
        let decoder_norm = store.add("model.dec_norm", ones(d))?;
        let lm_head = store.add(
            "model.lm_head",
            normal_tensor(rng, &[d, config.vocab_size], 1.0 / (d as f64).sqrt()),
        )?;
        Ok(Self {
            config: config.clone(),
            token_embedding,
            encoder_positions,
            decoder_positions,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            lm_head,
        })
    }

    /// Every parameter handle of the underlying model.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding, self.encoder_positions, self.decoder_positions];
        let attn = |a: &AttentionParams| [a.norm, a.query, a.key, a.value, a.out];
        let ffn = |f: &FeedForwardParams| [f.norm, f.w_in, f.w_out];
        for l in &self.encoder {
            ids.extend(attn(&l.self_attn));
            ids.extend(ffn(&l.ffn));
        }
        ids.push(self.encoder_norm);
        for l in &self.decoder {
            ids.extend(attn(&l.self_attn));
            ids.extend(attn(&l.cross_attn));
            ids.extend(ffn(&l.ffn));
        }
        ids.push(self.decoder_norm);
        ids.push(self.lm_head);
        ids
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n > self.config.max_seq_len {
            return Err(HintError::Length {
                len: n,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    fn check_adaptations(&self, adapt: &[LayerVars]) -> Result<()> {
        if !adapt.is_empty() && adapt.len() != self.config.layers {
            return Err(HintError::Shape(format!(
                "{} layer adaptations for a {}-layer stack",
                adapt.len(),
                self.config.layers
            )));
        }
        Ok(())
    }

    fn embed<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, tokens: &[u32], positions: ParamId) -> Result<Var> {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        if let Some(bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(HintError::Shape(format!("token id {bad} outside vocabulary")));
        }
        let table = tape.param(store, self.token_embedding);
        let tok = tape.gather(table, &ids)?;
        let pos_table = tape.param(store, positions);
        let pos = tape.slice_rows(pos_table, 0, ids.len())?;
        tape.add(tok, pos)
    }

    fn norm<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var, gain: ParamId) -> Result<Var> {
        let n = tape.rms_norm(x, NORM_EPS);
        let g = tape.param(store, gain);
        tape.mul_row(n, g)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        p: &AttentionParams,
        x: Var,
        memory: Option<Var>,
        prefix: Option<&PrefixVars>,
        lora: Option<&super::adaptation::LoraVars>,
        causal: bool,
    ) -> Result<Var> {
        let h = self.norm(tape, store, x, p.norm)?;
        let source = memory.unwrap_or(h);
        let wq = tape.param(store, p.query);
        let wk = tape.param(store, p.key);
        let wv = tape.param(store, p.value);
        let (q, v) = match lora {
            Some(l) => (
                lora_forward(tape, h, wq, l.query.0, l.query.1, l.scaling)?,
                lora_forward(tape, source, wv, l.value.0, l.value.1, l.scaling)?,
            ),
            None => (tape.matmul(h, wq)?, tape.matmul(source, wv)?),
        };
        let k = tape.matmul(source, wk)?;
        let a = attention(tape, q, k, v, prefix, causal, self.config.heads)?;
        let wo = tape.param(store, p.out);
        let o = tape.matmul(a, wo)?;
        tape.add(x, o)
    }

    fn ffn_block<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        p: &FeedForwardParams,
        x: Var,
        adapt: Option<&LayerVars>,
    ) -> Result<Var> {
        let h = self.norm(tape, store, x, p.norm)?;
        let w_in = tape.param(store, p.w_in);
        let w_out = tape.param(store, p.w_out);
        let f = tape.matmul(h, w_in)?;
        let f = tape.gelu(f);
        let mut f = tape.matmul(f, w_out)?;
        if let Some(a) = adapt.and_then(|a| a.adapter) {
            f = adapter_forward(tape, h, f, a.down, a.up)?;
        }
        tape.add(x, f)
    }

    /// Encoder stack over `tokens`; returns the normalized states (`seq × d`).
    pub fn encode_on<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        tokens: &[u32],
        adapt: &[LayerVars],
    ) -> Result<Var> {
        self.check_len(tokens.len())?;
        self.check_adaptations(adapt)?;
        if tokens.is_empty() {
            return Err(HintError::Contract("cannot encode an empty sequence".into()));
        }
        let mut x = self.embed(tape, store, tokens, self.encoder_positions)?;
        for (i, layer) in self.encoder.iter().enumerate() {
            let a = adapt.get(i);
            x = self.attention_block(
                tape,
                store,
                &layer.self_attn,
                x,
                None,
                a.and_then(|a| a.self_prefix.as_ref()),
                a.and_then(|a| a.lora.as_ref()),
                false,
            )?;
            x = self.ffn_block(tape, store, &layer.ffn, x, a)?;
        }
        self.norm(tape, store, x, self.encoder_norm)
    }

    /// Teacher-forced decoder: logits (`len(decoder_input) × vocab`) for every
    /// position, attending over `memory` (`rows × d`).
    pub fn decode_on<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        decoder_input: &[u32],
        memory: Var,
        adapt: &[LayerVars],
    ) -> Result<Var> {
        self.check_len(decoder_input.len())?;
        self.check_adaptations(adapt)?;
        if tape.rows(memory) == 0 {
            return Err(HintError::Contract("decoder needs nonempty encoder states".into()));
        }
        if tape.cols(memory) != self.config.model_dim {
            return Err(HintError::Shape(format!(
                "encoder states have width {}, model_dim is {}",
                tape.cols(memory),
                self.config.model_dim
            )));
        }
        let mut y = self.embed(tape, store, decoder_input, self.decoder_positions)?;
        for (i, layer) in self.decoder.iter().enumerate() {
            let a = adapt.get(i);
            y = self.attention_block(
                tape,
                store,
                &layer.self_attn,
                y,
                None,
                a.and_then(|a| a.self_prefix.as_ref()),
                a.and_then(|a| a.lora.as_ref()),
                true,
            )?;
            y = self.attention_block(
                tape,
                store,
                &layer.cross_attn,
                y,
                Some(memory),
                a.and_then(|a| a.cross_prefix.as_ref()),
                None,
                false,
            )?;
            y = self.ffn_block(tape, store, &layer.ffn, y, a)?;
        }
        let y = self.norm(tape, store, y, self.decoder_norm)?;
        let head = tape.param(store, self.lm_head);
        tape.matmul(y, head)
    }

    /// Summed cross-entropy of `target` (an end token is appended) given memory.
    pub fn target_loss_on<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        target: &[u32],
        memory: Var,
        adapt: &[LayerVars],
    ) -> Result<Var> {
        let (dec_in, labels) = teacher_forcing(target);
        let logits = self.decode_on(tape, store, &dec_in, memory, adapt)?;
        tape.cross_entropy_sum(logits, &labels)
    }

    /// Greedy argmax decoding until the end token or `max_len` tokens.
    ///
    /// Each step re-runs the decoder over the whole prefix (no key/value cache).
    pub fn greedy_on<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        memory: Var,
        adapt: &[LayerVars],
        max_len: usize,
    ) -> Result<Vec<u32>> {
        let mut dec_in = vec![BOS];
        let mut out = Vec::new();
        let budget = max_len.min(self.config.max_seq_len.saturating_sub(1));
        for _ in 0..budget {
            let logits = self.decode_on(tape, store, &dec_in, memory, adapt)?;
            let v = self.config.vocab_size;
            let rows = tape.rows(logits);
            let last = &tape.data(logits)[(rows - 1) * v..rows * v];
            let next = argmax(last) as u32;
            if next == EOS {
                break;
            }
            out.push(next);
            dec_in.push(next);
        }
        Ok(out)
    }
}

/// Decoder input (`BOS + target`) and labels (`target + EOS`).
pub fn teacher_forcing(target: &[u32]) -> (Vec<u32>, Vec<usize>) {
    let mut dec_in = Vec::with_capacity(target.len() + 1);
    dec_in.push(BOS);
    dec_in.extend_from_slice(target);
    let mut labels: Vec<usize> = target.iter().map(|&t| t as usize).collect();
    labels.push(EOS as usize);
    (dec_in, labels)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenizer::encode;
    use crate::model::HintModel;
    use crate::peft::make_identity_peft;

    fn tiny() -> HintModel {
        HintModel::new(ModelConfig::tiny(), 3).unwrap()
    }

    #[test]
    fn teacher_forcing_shifts_by_one() {
        let (dec_in, labels) = teacher_forcing(&[10, 11]);
        assert_eq!(dec_in, vec![BOS, 10, 11]);
        assert_eq!(labels, vec![10, 11, EOS as usize]);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn decoder_is_causal() {
        let m = tiny();
        let enc = m.encode(&encode("abc"), &[]).unwrap();
        let a = m.decode_logits(&enc.states, &[BOS, 10, 20, 30], &[]).unwrap();
        let b = m.decode_logits(&enc.states, &[BOS, 10, 99, 31], &[]).unwrap();
        let v = m.config.vocab_size;
        assert_eq!(&a.data()[..2 * v], &b.data()[..2 * v]);
        assert_ne!(&a.data()[2 * v..3 * v], &b.data()[2 * v..3 * v]);
    }

    #[test]
    fn identity_modules_leave_outputs_unchanged() {
        let m = tiny();
        let peft = make_identity_peft(&m.config);
        let tokens = encode("neutral");
        let plain = m.encode(&tokens, &[]).unwrap();
        let adapted = m.encode(&tokens, peft.encoder_layers(&m.config)).unwrap();
        assert_eq!(plain, adapted);
        let a = m.decode_logits(&plain.states, &[BOS, 5], &[]).unwrap();
        let b = m.decode_logits(&plain.states, &[BOS, 5], peft.decoder_layers(&m.config)).unwrap();
        let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn limits_are_enforced() {
        let m = tiny();
        let long = vec![10u32; m.config.max_seq_len + 1];
        assert!(matches!(m.encode(&long, &[]), Err(HintError::Length { .. })));
        assert!(m.encode(&[], &[]).is_err());
        assert!(m.encode(&[m.config.vocab_size as u32], &[]).is_err());
        let empty = Tensor::zeros(&[0, m.config.model_dim]);
        assert!(m.decode_logits(&empty, &[BOS], &[]).is_err());
        let peft = make_identity_peft(&m.config);
        assert!(m.encode(&[10], &peft.per_layer[..1]).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let a = tiny();
        let b = tiny();
        let x = encode("same seed");
        assert_eq!(a.encode(&x, &[]).unwrap(), b.encode(&x, &[]).unwrap());
        assert_eq!(a.predict_vanilla(&x, 6).unwrap(), b.predict_vanilla(&x, 6).unwrap());
    }
}

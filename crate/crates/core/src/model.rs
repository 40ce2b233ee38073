//! A complete HINT model: the encoder-decoder, its tied hyperencoder and the
//! parameter generator, all in one parameter store.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::tasks::{render_example, Example};
use crate::corpus::tokenizer;
use crate::error::{HintError, Result};
use crate::hypernet::{peft_from_vars, GeneratorBank, HintVariant, TaskContext};
use crate::io::{sha256_hex, Container};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::peft::{PeftKinds, PeftSet};
use crate::transformer::{teacher_forcing, EncoderOutput, LayerAdaptation, LayerVars, ModelConfig, Transformer};

#[derive(Debug, Clone)]
pub struct HintModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub transformer: Transformer,
    pub generator: GeneratorBank,
}

/// Teacher-forced logits or greedily decoded ids.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    Logits(Tensor),
    Tokens(Vec<u32>),
}

#[derive(Debug, Clone, Copy)]
pub enum DecodeMode<'t> {
    /// Teacher-force this target (an end token is appended).
    Target(&'t [u32]),
    Greedy { max_len: usize },
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    fingerprint: String,
}

impl HintModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let transformer = Transformer::register(&mut store, &config, &mut rng)?;
        let generator = GeneratorBank::register(&mut store, &config, &mut rng)?;
        Ok(Self {
            config,
            store,
            transformer,
            generator,
        })
    }

    /// Hash of the architecture; task contexts and checkpoints carry it.
    pub fn fingerprint(&self) -> String {
        config_fingerprint(&self.config)
    }

    fn layer_vars<'a>(&self, tape: &mut Tape<'a>, adapt: &'a [LayerAdaptation], decoder: bool) -> Result<Vec<LayerVars>> {
        if adapt.is_empty() {
            return Ok(Vec::new());
        }
        if adapt.len() != self.config.layers {
            return Err(HintError::Shape(format!(
                "{} layer adaptations for a {}-layer stack",
                adapt.len(),
                self.config.layers
            )));
        }
        adapt.iter().try_for_each(|a| a.validate(&self.config, decoder))?;
        Ok(adapt.iter().map(|a| a.to_vars(tape, &self.config)).collect())
    }

    /// Encoder stack; `adaptations` is empty or one entry per encoder layer.
    pub fn encode(&self, tokens: &[u32], adaptations: &[LayerAdaptation]) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let adapt = self.layer_vars(&mut tape, adaptations, false)?;
        let out = self.transformer.encode_on(&mut tape, &self.store, tokens, &adapt)?;
        Ok(EncoderOutput::new(tape.value(out)))
    }

    /// Teacher-forced logits (`len(decoder_input) × vocab`) over `memory`.
    pub fn decode_logits(&self, memory: &Tensor, decoder_input: &[u32], adaptations: &[LayerAdaptation]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let adapt = self.layer_vars(&mut tape, adaptations, true)?;
        let mem = tape.constant_ref(memory);
        let logits = self.transformer.decode_on(&mut tape, &self.store, decoder_input, mem, &adapt)?;
        Ok(tape.value(logits))
    }

    /// Next-token logits after the start token and `prev_tokens`.
    pub fn decode_step(&self, encoder: &EncoderOutput, prev_tokens: &[u32], adaptations: &[LayerAdaptation]) -> Result<Tensor> {
        let mut input = vec![tokenizer::BOS];
        input.extend_from_slice(prev_tokens);
        let logits = self.decode_logits(&encoder.states, &input, adaptations)?;
        let v = self.config.vocab_size;
        let last = logits.data()[(input.len() - 1) * v..].to_vec();
        Tensor::new(&[v], last)
    }

    pub fn greedy_decode(&self, encoder: &EncoderOutput, adaptations: &[LayerAdaptation], max_len: usize) -> Result<Vec<u32>> {
        if max_len == 0 {
            return Err(HintError::Contract("max_len must be at least 1".into()));
        }
        let mut tape = Tape::new();
        let adapt = self.layer_vars(&mut tape, adaptations, true)?;
        let mem = tape.constant_ref(&encoder.states);
        self.transformer.greedy_on(&mut tape, &self.store, mem, &adapt, max_len)
    }

    /// The tied encoder run over instruction tokens, with nothing injected.
    pub fn hyper_encode(&self, instruction_tokens: &[u32]) -> Result<EncoderOutput> {
        if instruction_tokens.is_empty() {
            return Err(HintError::Contract("instruction is empty".into()));
        }
        self.encode(instruction_tokens, &[])
    }

    pub fn generate_peft(&self, encoded: &EncoderOutput, kinds: PeftKinds) -> Result<PeftSet> {
        let mut tape = Tape::new();
        let instr = tape.constant_ref(&encoded.states);
        let vars = self.generator.generate_on(&mut tape, &self.store, instr, kinds)?;
        peft_from_vars(&tape, &vars, &self.config, kinds)
    }

    /// Instruction and optional demonstrations, SEP-delimited.
    pub fn build_task_context(
        &self,
        task_id: &str,
        instruction: &str,
        fewshot: &[Example],
        kinds: PeftKinds,
    ) -> Result<TaskContext> {
        if instruction.is_empty() {
            return Err(HintError::Contract("instruction is empty".into()));
        }
        let mut segments = vec![tokenizer::encode(instruction)];
        segments.extend(fewshot.iter().map(render_example));
        self.context_from_tokens(task_id, tokenizer::join(&segments), kinds)
    }

    pub fn context_from_tokens(&self, task_id: &str, tokens: Vec<u32>, kinds: PeftKinds) -> Result<TaskContext> {
        let encoded = self.hyper_encode(&tokens)?;
        let peft = self.generate_peft(&encoded, kinds)?;
        Ok(TaskContext {
            task_id: task_id.to_string(),
            instruction_tokens: tokens,
            encoded_instruction: encoded.states,
            peft,
            fingerprint: self.fingerprint(),
        })
    }

    /// Encodes an instance with the context's encoder-side modules.
    pub fn encode_with(&self, ctx: &TaskContext, tokens: &[u32]) -> Result<EncoderOutput> {
        self.encode(tokens, ctx.peft.encoder_layers(&self.config))
    }

    /// Decodes against `[encoded instruction; encoded input]` (or the input
    /// alone when `fusion` is off) with the context's decoder-side modules.
    pub fn fuse_and_decode(&self, ctx: &TaskContext, input: &EncoderOutput, mode: DecodeMode<'_>, fusion: bool) -> Result<Decoded> {
        ctx.validate(&self.config)?;
        if input.states.dims2().1 != self.config.model_dim {
            return Err(HintError::Config(format!(
                "input states have width {}, model_dim is {}",
                input.states.dims2().1,
                self.config.model_dim
            )));
        }
        let mut tape = Tape::new();
        let adapt = self.layer_vars(&mut tape, ctx.peft.decoder_layers(&self.config), true)?;
        let enc = tape.constant_ref(&input.states);
        let memory = if fusion && !ctx.encoded_instruction.data().is_empty() {
            let instr = tape.constant_ref(&ctx.encoded_instruction);
            tape.concat_rows(&[instr, enc])?
        } else {
            enc
        };
        match mode {
            DecodeMode::Target(target) => {
                let (dec_in, _) = teacher_forcing(target);
                let logits = self.transformer.decode_on(&mut tape, &self.store, &dec_in, memory, &adapt)?;
                Ok(Decoded::Logits(tape.value(logits)))
            }
            DecodeMode::Greedy { max_len } => Ok(Decoded::Tokens(
                self.transformer.greedy_on(&mut tape, &self.store, memory, &adapt, max_len)?,
            )),
        }
    }

    /// Greedy prediction for one instance under a cached context.
    pub fn predict(&self, ctx: &TaskContext, input: &[u32], max_len: usize, fusion: bool) -> Result<Vec<u32>> {
        let enc = self.encode_with(ctx, input)?;
        match self.fuse_and_decode(ctx, &enc, DecodeMode::Greedy { max_len }, fusion)? {
            Decoded::Tokens(t) => Ok(t),
            Decoded::Logits(_) => unreachable!("greedy mode returns tokens"),
        }
    }

    /// Greedy prediction for the plain encoder-decoder (baselines).
    pub fn predict_vanilla(&self, input: &[u32], max_len: usize) -> Result<Vec<u32>> {
        let enc = self.encode(input, &[])?;
        self.greedy_decode(&enc, &[], max_len)
    }

    /// Records, on one tape, the hypernetwork pass for `hyper_input` followed
    /// by the summed target cross-entropy of each `(input, target)` item.
    ///
    /// With `variant = None` or an empty `hyper_input` the plain model is used.
    pub fn losses_on<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        hyper_input: &[u32],
        items: &[(&[u32], &[u32])],
        variant: Option<HintVariant>,
    ) -> Result<Vec<Var>> {
        let l = self.config.layers;
        let (instr, adapt) = match variant {
            Some(v) if !hyper_input.is_empty() => {
                let instr = self.transformer.encode_on(tape, &self.store, hyper_input, &[])?;
                let adapt = if v.kinds.any() {
                    self.generator.generate_on(tape, &self.store, instr, v.kinds)?
                } else {
                    Vec::new()
                };
                (v.fusion.then_some(instr), adapt)
            }
            _ => (None, Vec::new()),
        };
        let (enc_adapt, dec_adapt) = if adapt.is_empty() { (&adapt[..], &adapt[..]) } else { adapt.split_at(l) };
        items
            .iter()
            .map(|(input, target)| {
                let enc = self.transformer.encode_on(tape, &self.store, input, enc_adapt)?;
                let memory = match instr {
                    Some(i) => tape.concat_rows(&[i, enc])?,
                    None => enc,
                };
                self.transformer.target_loss_on(tape, &self.store, target, memory, dec_adapt)
            })
            .collect()
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            fingerprint: self.fingerprint(),
        };
        let mut c = Container::new("checkpoint", serde_json::to_value(meta)?);
        for (_, name, t) in self.store.iter() {
            c.push(name, t.clone());
        }
        Ok(c)
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        c.expect_kind("checkpoint")?;
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
        if meta.fingerprint != config_fingerprint(&meta.config) {
            return Err(HintError::Version("checkpoint fingerprint does not match its config".into()));
        }
        let mut model = Self::new(meta.config, 0)?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let t = c.take(&name)?;
            if t.shape() != model.store.get(id).shape() {
                return Err(HintError::Data(format!("checkpoint array {name} has shape {:?}", t.shape())));
            }
            model.store.set_data(id, t.data())?;
        }
        if let Some((name, _)) = c.arrays.first() {
            return Err(HintError::Data(format!("unexpected checkpoint array {name}")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

pub fn config_fingerprint(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    sha256_hex(&json)[..16].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenizer::encode;
    use crate::gradcheck::{finite_difference, rel_err};
    use crate::peft::make_identity_peft;
    use crate::transformer::argmax;

    fn tiny() -> HintModel {
        HintModel::new(ModelConfig::tiny(), 7).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn hyper_encoder_is_the_tied_encoder() {
        let m = tiny();
        let tokens = encode("reverse it");
        let a = m.hyper_encode(&tokens).unwrap();
        let b = m.encode(&tokens, &[]).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.states.shape(), &[tokens.len(), m.config.model_dim]);
        assert!(m.hyper_encode(&[]).is_err());
    }

    #[test]
    fn generated_modules_are_valid_and_not_degenerate() {
        let m = tiny();
        let ctx = m.build_task_context("t", "Delete every vowel.", &[], PeftKinds::ALL).unwrap();
        ctx.peft.validate(&m.config).unwrap();
        let other = m.build_task_context("u", "Write the word twice.", &[], PeftKinds::ALL).unwrap();
        let a = &ctx.peft.per_layer[0].adapter.as_ref().unwrap().up;
        let b = &other.peft.per_layer[0].adapter.as_ref().unwrap().up;
        assert!(a.data().iter().any(|&x| x != 0.0));
        assert_ne!(a, b, "different instructions should give different modules");
    }

    #[test]
    fn context_is_deterministic_and_counts_fewshot_tokens() {
        let m = tiny();
        let shots = [
            Example { input: "abc".into(), output: "cba".into() },
            Example { input: "de".into(), output: "ed".into() },
        ];
        let a = m.build_task_context("rev", "Reverse.", &shots, PeftKinds::ALL).unwrap();
        let b = m.build_task_context("rev", "Reverse.", &shots, PeftKinds::ALL).unwrap();
        assert_eq!(a, b);
        // instruction, then SEP + "abc->cba" and SEP + "de->ed"
        let expected = 8 + (1 + 8) + (1 + 6);
        assert_eq!(a.instruction_tokens.len(), expected);
        assert_eq!(a.encoded_instruction.shape()[0], expected);
    }

    #[test]
    fn identity_modules_and_empty_fusion_match_vanilla_decoding() {
        let m = tiny();
        let input = encode("hello");
        let mut ctx = m.context_from_tokens("t", encode("x"), PeftKinds::ALL).unwrap();
        ctx.peft = make_identity_peft(&m.config);
        ctx.instruction_tokens.clear();
        ctx.encoded_instruction = Tensor::zeros(&[0, m.config.model_dim]);
        let enc = m.encode_with(&ctx, &input).unwrap();
        let plain = m.encode(&input, &[]).unwrap();
        assert!(max_abs_diff(enc.states.data(), plain.states.data()) < 1e-12);
        let target = encode("olleh");
        let Decoded::Logits(fused) = m.fuse_and_decode(&ctx, &enc, DecodeMode::Target(&target), true).unwrap() else {
            panic!()
        };
        let (dec_in, _) = teacher_forcing(&target);
        let vanilla = m.decode_logits(&plain.states, &dec_in, &[]).unwrap();
        assert!(max_abs_diff(fused.data(), vanilla.data()) < 1e-9);
    }

    #[test]
    fn fusion_extends_the_cross_attention_source() {
        let m = tiny();
        let ctx = m.context_from_tokens("t", encode("abcd"), PeftKinds::ALL).unwrap();
        let input = encode("xyz");
        let enc = m.encode_with(&ctx, &input).unwrap();
        let mut tape = Tape::new();
        let instr = tape.constant_ref(&ctx.encoded_instruction);
        let e = tape.constant_ref(&enc.states);
        let mem = tape.concat_rows(&[instr, e]).unwrap();
        assert_eq!(tape.rows(mem), 4 + 3);
        // the decoder also sees p prefix slots per cross-attention
        let keys = tape.rows(mem) + ctx.peft.decoder_layers(&m.config)[0].cross_prefix.as_ref().unwrap().len();
        assert_eq!(keys, 4 + 3 + m.config.prefix_length);

        let target = encode("zyx");
        let on = m.fuse_and_decode(&ctx, &enc, DecodeMode::Target(&target), true).unwrap();
        let off = m.fuse_and_decode(&ctx, &enc, DecodeMode::Target(&target), false).unwrap();
        assert_ne!(on, off);
    }

    #[test]
    fn width_mismatch_is_a_config_error() {
        let m = tiny();
        let ctx = m.context_from_tokens("t", encode("ab"), PeftKinds::ALL).unwrap();
        let bad = EncoderOutput::new(Tensor::zeros(&[3, m.config.model_dim + 1]));
        let err = m.fuse_and_decode(&ctx, &bad, DecodeMode::Greedy { max_len: 3 }, true).unwrap_err();
        assert!(matches!(err, HintError::Config(_)));
    }

    #[test]
    fn decode_step_returns_vocab_logits() {
        let m = tiny();
        let enc = m.encode(&encode("ab"), &[]).unwrap();
        let step = m.decode_step(&enc, &[], &[]).unwrap();
        assert_eq!(step.shape(), &[m.config.vocab_size]);
        let greedy = m.greedy_decode(&enc, &[], 1).unwrap();
        let first = argmax(step.data()) as u32;
        if first == tokenizer::EOS {
            assert!(greedy.is_empty());
        } else {
            assert_eq!(greedy, vec![first]);
        }
        assert!(m.greedy_decode(&enc, &[], 0).is_err());
    }

    #[test]
    fn zero_output_head_decodes_nothing() {
        let mut m = tiny();
        let head = m.transformer.lm_head;
        let n = m.store.get(head).numel();
        m.store.set_data(head, &vec![0.0; n]).unwrap();
        assert!(m.predict_vanilla(&encode("abc"), 8).unwrap().is_empty());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny();
        let bytes = m.to_bytes().unwrap();
        let back = HintModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.store.num_scalars(), m.store.num_scalars());
        for ((_, n1, t1), (_, n2, t2)) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
        assert_eq!(back.content_hash().unwrap(), m.content_hash().unwrap());
    }

    #[test]
    fn checkpoint_with_foreign_config_is_rejected() {
        let m = tiny();
        let mut c = m.to_container().unwrap();
        c.meta["fingerprint"] = serde_json::Value::String("0000".into());
        assert!(matches!(HintModel::from_container(c), Err(HintError::Version(_))));
    }

    #[test]
    fn context_round_trip_and_fingerprint_check() {
        let m = tiny();
        let ctx = m.context_from_tokens("t", encode("abc"), PeftKinds::ALL).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ctx.bin");
        ctx.save(&path, &m.config).unwrap();
        assert_eq!(TaskContext::load(&path, &m.fingerprint()).unwrap(), ctx);
        assert!(matches!(TaskContext::load(&path, "other"), Err(HintError::Version(_))));
    }

    fn loss_of(m: &HintModel, variant: HintVariant) -> (f64, crate::numerics::ParamGrads) {
        let mut tape = Tape::new();
        let hyper = encode("ab->ba");
        let (x, y) = (encode("cde"), encode("edc"));
        let losses = m.losses_on(&mut tape, &hyper, &[(&x, &y)], Some(variant)).unwrap();
        let v = tape.scalar(losses[0]);
        let g = tape.backward(losses[0]).unwrap();
        (v, tape.param_grads(&g, m.store.len()))
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let m = tiny();
        let all = HintVariant { kinds: PeftKinds::ALL, fusion: true };
        let (_, grads) = loss_of(&m, all);
        for (id, name, _) in m.store.iter() {
            if name == "hyper.mlp_prefix.hidden" || name == "hyper.mlp_prefix.norm" {
                // behind the zero-initialized prefix output layer
                continue;
            }
            let g = grads.get(id).unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(g.iter().any(|&x| x != 0.0), "{name} gradient is zero");
        }
    }

    #[test]
    fn sampled_gradients_match_finite_differences() {
        let mut m = tiny();
        // move off the zero-initialized prefix output so every path is live
        let out = m.generator.mlp(crate::hypernet::Family::Prefix).out;
        let n = m.store.get(out).numel();
        let vals: Vec<f64> = (0..n).map(|i| 0.05 * ((i as f64) * 0.7).sin()).collect();
        m.store.set_data(out, &vals).unwrap();
        let all = HintVariant { kinds: PeftKinds::ALL, fusion: true };
        let (_, grads) = loss_of(&m, all);
        for name in ["hyper.mlp_prefix.hidden", "hyper.attn.q", "model.dec1.cross.v", "hyper.mlp_lora.out"] {
            let id = m.store.id(name).unwrap();
            let base = m.store.get(id).clone();
            let analytic = grads.get(id).unwrap().to_vec();
            let numeric = finite_difference(&base, |p| {
                let mut probe = m.clone();
                probe.store.set_data(id, p.data()).unwrap();
                loss_of(&probe, all).0
            });
            let err = rel_err(&analytic, &numeric);
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }
}

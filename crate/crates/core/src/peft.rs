//! Parameter-efficient modules: parallel adapters, attention prefixes and LoRA.

use serde::{Deserialize, Serialize};

use crate::error::{HintError, Result};
use crate::io::Container;
use crate::numerics::{Tape, Tensor, Var};
use crate::transformer::{Adapter, LayerAdaptation, LayerVars, Lora, LoraPair, ModelConfig, Prefix};

/// Which module kinds a [`PeftSet`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeftKinds {
    pub adapters: bool,
    pub prefixes: bool,
    pub lora: bool,
}

impl PeftKinds {
    pub const ALL: PeftKinds = PeftKinds {
        adapters: true,
        prefixes: true,
        lora: true,
    };
    pub const NONE: PeftKinds = PeftKinds {
        adapters: false,
        prefixes: false,
        lora: false,
    };
    /// The default generated combination.
    pub const ADAPTERS_PREFIXES: PeftKinds = PeftKinds {
        adapters: true,
        prefixes: true,
        lora: false,
    };

    pub fn any(self) -> bool {
        self.adapters || self.prefixes || self.lora
    }
}

/// Generated modules for every layer: encoder layers first, then decoder layers.
#[derive(Debug, Clone, PartialEq)]
pub struct PeftSet {
    pub per_layer: Vec<LayerAdaptation>,
    pub kinds: PeftKinds,
}

impl PeftSet {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.per_layer.len() != cfg.total_layers() {
            return Err(HintError::Shape(format!(
                "PEFT set has {} layers, model has {}",
                self.per_layer.len(),
                cfg.total_layers()
            )));
        }
        for (i, layer) in self.per_layer.iter().enumerate() {
            let decoder = i >= cfg.layers;
            layer.validate(cfg, decoder)?;
            let present = (
                layer.adapter.is_some(),
                layer.self_prefix.is_some(),
                layer.cross_prefix.is_some(),
                layer.lora.is_some(),
            );
            let expected = (
                self.kinds.adapters,
                self.kinds.prefixes,
                self.kinds.prefixes && decoder,
                self.kinds.lora,
            );
            if present != expected {
                return Err(HintError::Shape(format!(
                    "layer {i} carries {present:?} but kind flags say {expected:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn encoder_layers(&self, cfg: &ModelConfig) -> &[LayerAdaptation] {
        &self.per_layer[..cfg.layers]
    }

    pub fn decoder_layers(&self, cfg: &ModelConfig) -> &[LayerAdaptation] {
        &self.per_layer[cfg.layers..]
    }

    pub fn to_vars<'a>(&'a self, tape: &mut Tape<'a>, cfg: &ModelConfig) -> Vec<LayerVars> {
        self.per_layer.iter().map(|l| l.to_vars(tape, cfg)).collect()
    }

    /// Total number of injected scalars.
    pub fn num_scalars(&self) -> usize {
        let t = |t: &Tensor| t.numel();
        self.per_layer
            .iter()
            .map(|l| {
                l.adapter.as_ref().map_or(0, |a| t(&a.down) + t(&a.up))
                    + [&l.self_prefix, &l.cross_prefix]
                        .into_iter()
                        .flatten()
                        .map(|p| t(&p.keys) + t(&p.values))
                        .sum::<usize>()
                    + l.lora.as_ref().map_or(0, |l| {
                        t(&l.query.a) + t(&l.query.b) + t(&l.value.a) + t(&l.value.b)
                    })
            })
            .sum()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            "peft",
            serde_json::json!({ "kinds": self.kinds, "layers": self.per_layer.len() }),
        );
        self.push_arrays(&mut c, "");
        c
    }

    pub(crate) fn push_arrays(&self, c: &mut Container, prefix: &str) {
        for (i, l) in self.per_layer.iter().enumerate() {
            let name = |s: &str| format!("{prefix}layer{i}.{s}");
            if let Some(a) = &l.adapter {
                c.push(name("adapter.down"), a.down.clone());
                c.push(name("adapter.up"), a.up.clone());
            }
            for (site, p) in [("self_prefix", &l.self_prefix), ("cross_prefix", &l.cross_prefix)] {
                if let Some(p) = p {
                    c.push(name(&format!("{site}.keys")), p.keys.clone());
                    c.push(name(&format!("{site}.values")), p.values.clone());
                }
            }
            if let Some(lo) = &l.lora {
                c.push(name("lora.query.a"), lo.query.a.clone());
                c.push(name("lora.query.b"), lo.query.b.clone());
                c.push(name("lora.value.a"), lo.value.a.clone());
                c.push(name("lora.value.b"), lo.value.b.clone());
            }
        }
    }

    pub(crate) fn take_arrays(
        c: &mut Container,
        prefix: &str,
        layers: usize,
        kinds: PeftKinds,
        encoder_layers: usize,
    ) -> Result<Self> {
        let mut per_layer = Vec::with_capacity(layers);
        for i in 0..layers {
            let mut take = |s: &str| c.take(&format!("{prefix}layer{i}.{s}"));
            let adapter = if kinds.adapters {
                Some(Adapter {
                    down: take("adapter.down")?,
                    up: take("adapter.up")?,
                })
            } else {
                None
            };
            let self_prefix = if kinds.prefixes {
                Some(Prefix {
                    keys: take("self_prefix.keys")?,
                    values: take("self_prefix.values")?,
                })
            } else {
                None
            };
            let cross_prefix = if kinds.prefixes && i >= encoder_layers {
                Some(Prefix {
                    keys: take("cross_prefix.keys")?,
                    values: take("cross_prefix.values")?,
                })
            } else {
                None
            };
            let lora = if kinds.lora {
                Some(Lora {
                    query: LoraPair {
                        a: take("lora.query.a")?,
                        b: take("lora.query.b")?,
                    },
                    value: LoraPair {
                        a: take("lora.value.a")?,
                        b: take("lora.value.b")?,
                    },
                })
            } else {
                None
            };
            per_layer.push(LayerAdaptation {
                adapter,
                self_prefix,
                cross_prefix,
                lora,
            });
        }
        Ok(Self { per_layer, kinds })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container().to_bytes()
    }

    /// Decode a PEFT set; `encoder_layers` tells which layers own a cross prefix.
    pub fn from_bytes(bytes: &[u8], encoder_layers: usize) -> Result<Self> {
        let mut c = Container::from_bytes(bytes)?;
        c.expect_kind("peft")?;
        let kinds: PeftKinds = serde_json::from_value(c.meta["kinds"].clone())?;
        let layers = c.meta["layers"]
            .as_u64()
            .ok_or_else(|| HintError::Data("peft header lacks a layer count".into()))?
            as usize;
        Self::take_arrays(&mut c, "", layers, kinds, encoder_layers)
    }
}

/// Parallel adapter: `ffn_out + up(GELU(down(x)))`, where `x` is the FFN input.
pub fn adapter_forward(tape: &mut Tape<'_>, x: Var, ffn_out: Var, down: Var, up: Var) -> Result<Var> {
    let h = tape.matmul(x, down)?;
    let h = tape.gelu(h);
    let branch = tape.matmul(h, up)?;
    tape.add(ffn_out, branch)
}

/// `x·W + scaling·(x·A)·B`
pub fn lora_forward(
    tape: &mut Tape<'_>,
    x: Var,
    base_weight: Var,
    a: Var,
    b: Var,
    scaling: f64,
) -> Result<Var> {
    if tape.cols(a) == 0 || tape.rows(b) != tape.cols(a) {
        return Err(HintError::Shape(format!(
            "LoRA factors {:?} and {:?} do not form a rank ≥ 1 product",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    let base = tape.matmul(x, base_weight)?;
    let low = tape.matmul(x, a)?;
    let low = tape.matmul(low, b)?;
    let low = tape.scale(low, scaling);
    tape.add(base, low)
}

/// A PEFT set whose injection is an exact no-op: zero adapter and LoRA
/// matrices and zero-length prefixes, with every kind flagged active.
pub fn make_identity_peft(cfg: &ModelConfig) -> PeftSet {
    let d = cfg.model_dim;
    let empty_prefix = || Prefix {
        keys: Tensor::zeros(&[0, cfg.heads, cfg.head_dim]),
        values: Tensor::zeros(&[0, cfg.heads, cfg.head_dim]),
    };
    let pair = || LoraPair {
        a: Tensor::zeros(&[d, cfg.lora_rank]),
        b: Tensor::zeros(&[cfg.lora_rank, d]),
    };
    let per_layer = (0..cfg.total_layers())
        .map(|i| LayerAdaptation {
            adapter: Some(Adapter {
                down: Tensor::zeros(&[d, cfg.adapter_bottleneck]),
                up: Tensor::zeros(&[cfg.adapter_bottleneck, d]),
            }),
            self_prefix: Some(empty_prefix()),
            cross_prefix: (i >= cfg.layers).then(empty_prefix),
            lora: Some(Lora {
                query: pair(),
                value: pair(),
            }),
        })
        .collect();
    PeftSet {
        per_layer,
        kinds: PeftKinds::ALL,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn zero_up_projection_returns_ffn_output_exactly() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.3, -1.2, 2.0, 0.5], 2, 2);
        let ffn = tape.constant(vec![1.0, 2.0, 3.0, 4.0], 2, 2);
        let down = tape.constant(vec![0.7, -0.1, 0.2, 0.9], 2, 2);
        let up = tape.constant(vec![0.0; 4], 2, 2);
        let out = adapter_forward(&mut tape, x, ffn, down, up).unwrap();
        assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn adapter_scalar_case() {
        // d=2, n_a=1, x=[1,0], down=[[1],[0]], up=[[1,1]] → GELU(1)·[1,1]
        let (x, ffn, down, up) = (
            t(&[&[1.0, 0.0]]),
            t(&[&[0.0, 0.0]]),
            t(&[&[1.0], &[0.0]]),
            t(&[&[1.0, 1.0]]),
        );
        let mut tape = Tape::new();
        let vars = [&x, &ffn, &down, &up].map(|v| tape.constant_ref(v));
        let out = adapter_forward(&mut tape, vars[0], vars[1], vars[2], vars[3]).unwrap();
        for v in tape.data(out) {
            assert!((v - 0.841_344_746_068_543).abs() < 1e-12);
        }
    }

    #[test]
    fn adapter_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rand = |r, c| {
            Tensor::new(&[r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let (x, f, dn, up) = (rand(5, 16), rand(5, 16), rand(16, 4), rand(4, 16));
        let mut tape = Tape::new();
        let v = [&x, &f, &dn, &up].map(|t| tape.constant_ref(t));
        let out = adapter_forward(&mut tape, v[0], v[1], v[2], v[3]).unwrap();
        assert_eq!(tape.shape(out), (5, 16));
    }

    #[test]
    fn adapter_rejects_mismatched_dims() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0; 4], 2, 2);
        let ffn = tape.constant(vec![0.0; 4], 2, 2);
        let down = tape.constant(vec![0.0; 3], 3, 1);
        let up = tape.constant(vec![0.0; 2], 1, 2);
        assert!(adapter_forward(&mut tape, x, ffn, down, up).is_err());
    }

    #[test]
    fn lora_zero_b_is_base_projection() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, -2.0, 0.5, 3.0], 2, 2);
        let w = tape.constant(vec![0.2, 0.4, -0.6, 0.8], 2, 2);
        let a = tape.constant(vec![1.0, 2.0], 2, 1);
        let b = tape.constant(vec![0.0, 0.0], 1, 2);
        let out = lora_forward(&mut tape, x, w, a, b, 1.0).unwrap();
        let base = tape.matmul(x, w).unwrap();
        assert_eq!(tape.data(out), tape.data(base));
    }

    #[test]
    fn lora_scalar_case() {
        // x=[1,2], W=I, a=[[1],[1]], b=[[2,-1]], scaling=1 → [1,2] + 3·[2,-1] = [7,-1]
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0], 1, 2);
        let w = tape.constant(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let a = tape.constant(vec![1.0, 1.0], 2, 1);
        let b = tape.constant(vec![2.0, -1.0], 1, 2);
        let out = lora_forward(&mut tape, x, w, a, b, 1.0).unwrap();
        assert_eq!(tape.data(out), &[7.0, -1.0]);
        let half = lora_forward(&mut tape, x, w, a, b, 0.5).unwrap();
        assert_eq!(tape.data(half), &[4.0, 0.5]);
    }

    #[test]
    fn lora_rejects_rank_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 2.0], 1, 2);
        let w = tape.constant(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let a = tape.constant(vec![], 2, 0);
        let b = tape.constant(vec![], 0, 2);
        assert!(lora_forward(&mut tape, x, w, a, b, 1.0).is_err());
    }

    #[test]
    fn lora_gradient_wrt_a_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rand = |r: usize, c: usize| {
            Tensor::new(&[r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let (x, w, a, b) = (rand(3, 4), rand(4, 4), rand(4, 2), rand(2, 4));
        let weights = rand(3, 4);
        let loss_of = |a_val: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant_ref(&x);
            let wv = tape.constant_ref(&w);
            let av = tape.input(a_val);
            let bv = tape.constant_ref(&b);
            let mix = tape.constant_ref(&weights);
            let out = lora_forward(&mut tape, xv, wv, av, bv, 0.5).unwrap();
            let out = tape.mul(out, mix).unwrap();
            let loss = tape.sum(out);
            let grads = tape.backward(loss).unwrap();
            (tape.scalar(loss), grads.wrt(av).unwrap().to_vec())
        };
        let (_, analytic) = loss_of(&a);
        let numeric = finite_difference(&a, |p| loss_of(p).0);
        assert!(rel_err(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn identity_peft_is_valid_and_fully_flagged() {
        let cfg = ModelConfig::tiny();
        let p = make_identity_peft(&cfg);
        assert_eq!(p.kinds, PeftKinds::ALL);
        p.validate(&cfg).unwrap();
        let back = PeftSet::from_bytes(&p.to_bytes().unwrap(), cfg.layers).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn mixed_presence_is_rejected() {
        let cfg = ModelConfig::tiny();
        let mut p = make_identity_peft(&cfg);
        p.per_layer[1].adapter = None;
        assert!(p.validate(&cfg).is_err());
        let mut p = make_identity_peft(&cfg);
        p.per_layer.pop();
        assert!(p.validate(&cfg).is_err());
    }
}

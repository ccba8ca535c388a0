//! Short-term window encoding, anchor feature decoding and the
//! history-driven anchor refinement (with its ablation variants).

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::error::{HatError, Result};
use crate::history::RefinedHistory;
use crate::numerics::layers::{
    decoder_stack, encoder_stack, run_decoders, run_encoders, TOKEN_INIT_STD,
};
use crate::numerics::{DecoderBlock, EncoderBlock, LayerNorm, Linear, NodeId, ParamId, ParamStore, Scalar, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntegrationMode {
    /// Cross-attention decoder over the refined history, residual, norm.
    Decoder,
    /// Concatenate the mean history token to every anchor row, project back to D.
    Concat,
    /// Add the mean history token, then norm.
    AvgPool,
    /// Anchors pass through unchanged.
    None,
}

impl FromStr for IntegrationMode {
    type Err = HatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder" => Ok(IntegrationMode::Decoder),
            "concat" => Ok(IntegrationMode::Concat),
            "avgpool" => Ok(IntegrationMode::AvgPool),
            "none" => Ok(IntegrationMode::None),
            other => Err(HatError::Config(format!(
                "unknown integration mode `{other}` (decoder|concat|avgpool|none)"
            ))),
        }
    }
}

impl fmt::Display for IntegrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IntegrationMode::Decoder => "decoder",
            IntegrationMode::Concat => "concat",
            IntegrationMode::AvgPool => "avgpool",
            IntegrationMode::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    pub l_s: usize,
    /// Anchor lengths in steps; row `i` of the anchor features stands for `sizes[i]`.
    pub sizes: Vec<usize>,
    pub n_e: usize,
    pub n_d: usize,
    pub n_a: usize,
    pub heads_e: usize,
    pub heads_d: usize,
    pub heads_a: usize,
    pub integration_mode: IntegrationMode,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            l_s: 16,
            sizes: vec![2, 4, 6, 8, 12, 16],
            n_e: 3,
            n_d: 5,
            n_a: 5,
            heads_e: 8,
            heads_d: 4,
            heads_a: 4,
            integration_mode: IntegrationMode::Decoder,
        }
    }
}

impl AnchorConfig {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn max_size(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(0)
    }

    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        if self.l_s == 0 {
            v.push(("window.l_s", "must be at least 1".to_string()));
        }
        if self.sizes.is_empty() {
            v.push(("anchor.sizes", "at least one anchor size is required".to_string()));
        }
        if self.sizes.first() == Some(&0) {
            v.push(("anchor.sizes", "anchor sizes must be positive".to_string()));
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            v.push(("anchor.sizes", "anchor sizes must be strictly increasing".to_string()));
        }
        if self.max_size() > self.l_s {
            v.push((
                "anchor.sizes",
                format!("largest anchor {} exceeds window length {}", self.max_size(), self.l_s),
            ));
        }
        for (key, n) in [
            ("anchor.n_e", self.n_e),
            ("anchor.n_d", self.n_d),
            ("anchor.heads_e", self.heads_e),
            ("anchor.heads_d", self.heads_d),
            ("anchor.heads_a", self.heads_a),
        ] {
            if n == 0 {
                v.push((key, "must be at least 1".to_string()));
            }
        }
        if self.integration_mode == IntegrationMode::Decoder && self.n_a == 0 {
            v.push(("anchor.n_a", "must be at least 1 in decoder mode".to_string()));
        }
        v
    }
}

/// `M×D` features, row `i` for anchor size `i`.
#[derive(Clone, Copy, Debug)]
pub struct AnchorFeatures(pub NodeId);

#[derive(Clone, Debug)]
pub enum Integrator {
    Decoder {
        blocks: Vec<DecoderBlock>,
        norm: LayerNorm,
    },
    Concat {
        projection: Linear,
    },
    AvgPool {
        norm: LayerNorm,
    },
    None,
}

#[derive(Clone, Debug)]
pub struct AnchorModule {
    pub config: AnchorConfig,
    pub d_model: usize,
    pub encoder: Vec<EncoderBlock>,
    /// Learnable anchor queries `Q_anc`, `M×D`.
    pub anchor_queries: ParamId,
    pub decoder: Vec<DecoderBlock>,
    pub integrator: Integrator,
}

impl AnchorModule {
    /// `with_history = false` builds no integration parameters at all.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        config: &AnchorConfig,
        d: usize,
        with_history: bool,
    ) -> Result<Self> {
        if let Some((key, msg)) = config.violations().into_iter().next() {
            return Err(HatError::Config(format!("{key}: {msg}")));
        }
        let encoder = encoder_stack(store, rng, "anchor.encoder", config.n_e, d, config.heads_e)?;
        let anchor_queries =
            store.add_normal("anchor.queries", &[config.count(), d], TOKEN_INIT_STD, rng)?;
        let decoder = decoder_stack(store, rng, "anchor.decoder", config.n_d, d, config.heads_d)?;
        let mode = if with_history {
            config.integration_mode
        } else {
            IntegrationMode::None
        };
        let integrator = match mode {
            IntegrationMode::Decoder => Integrator::Decoder {
                blocks: decoder_stack(store, rng, "anchor.integrator", config.n_a, d, config.heads_a)?,
                norm: LayerNorm::new(store, "anchor.integrator.norm", d)?,
            },
            IntegrationMode::Concat => Integrator::Concat {
                projection: Linear::new(store, rng, "anchor.integrator.projection", 2 * d, d)?,
            },
            IntegrationMode::AvgPool => Integrator::AvgPool {
                norm: LayerNorm::new(store, "anchor.integrator.norm", d)?,
            },
            IntegrationMode::None => Integrator::None,
        };
        Ok(AnchorModule {
            config: config.clone(),
            d_model: d,
            encoder,
            anchor_queries,
            decoder,
            integrator,
        })
    }

    /// `S_enc = e_{N_e} ∘ … ∘ e_1(S)`.
    pub fn encode_window<T: Scalar>(&self, tape: &mut Tape<'_, T>, window: NodeId) -> Result<NodeId> {
        let s = tape.value(window);
        if s.rows() != self.config.l_s || s.cols() != self.d_model {
            return Err(HatError::dim(
                "encode_window",
                format!("expected {}x{}, got {:?}", self.config.l_s, self.d_model, s.shape()),
            ));
        }
        run_encoders(&self.encoder, tape, window)
    }

    pub fn decode_anchors<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        encoded: NodeId,
    ) -> Result<AnchorFeatures> {
        let q = tape.param(self.anchor_queries);
        let (out, _) = run_decoders(&self.decoder, tape, q, encoded)?;
        Ok(AnchorFeatures(out))
    }

    pub fn integration_mode(&self) -> IntegrationMode {
        match self.integrator {
            Integrator::Decoder { .. } => IntegrationMode::Decoder,
            Integrator::Concat { .. } => IntegrationMode::Concat,
            Integrator::AvgPool { .. } => IntegrationMode::AvgPool,
            Integrator::None => IntegrationMode::None,
        }
    }

    /// Combines anchor features with the refined history according to the configured mode.
    pub fn refine_anchors<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        anchors: AnchorFeatures,
        history: RefinedHistory,
    ) -> Result<AnchorFeatures> {
        let a = anchors.0;
        let out = match &self.integrator {
            Integrator::Decoder { blocks, norm } => {
                let (enhanced, _) = run_decoders(blocks, tape, a, history.0)?;
                let res = tape.add(enhanced, a)?;
                norm.forward(tape, res)?
            }
            Integrator::Concat { projection } => {
                let m = tape.value(a).rows();
                let mean = tape.mean_rows(history.0)?;
                let mean = tape.repeat_rows(mean, m)?;
                let joined = tape.concat_cols(&[a, mean])?;
                projection.forward(tape, joined)?
            }
            Integrator::AvgPool { norm } => {
                let mean = tape.mean_rows(history.0)?;
                let sum = tape.add_row(a, mean)?;
                norm.forward(tape, sum)?
            }
            Integrator::None => a,
        };
        Ok(AnchorFeatures(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, probe_loss, random_tensor, Tensor};
    use rand::SeedableRng;

    fn toy(mode: IntegrationMode, sizes: Vec<usize>) -> AnchorConfig {
        AnchorConfig {
            l_s: 8,
            sizes,
            n_e: 1,
            n_d: 1,
            n_a: 1,
            heads_e: 2,
            heads_d: 2,
            heads_a: 2,
            integration_mode: mode,
        }
    }

    fn build(cfg: &AnchorConfig, d: usize) -> (ParamStore<f64>, AnchorModule) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = AnchorModule::new(&mut store, &mut rng, cfg, d, true).unwrap();
        (store, m)
    }

    #[test]
    fn unknown_mode_is_a_config_error() {
        assert!(matches!("sum".parse::<IntegrationMode>(), Err(HatError::Config(_))));
        for m in ["decoder", "concat", "avgpool", "none"] {
            assert_eq!(m.parse::<IntegrationMode>().unwrap().to_string(), m);
        }
    }

    #[test]
    fn full_scale_shapes() {
        let cfg = AnchorConfig {
            n_e: 1,
            n_d: 1,
            n_a: 1,
            ..AnchorConfig::default()
        };
        let (store, m) = build(&cfg, 1024);
        let mut tape = Tape::new(&store);
        let s = tape.input(random_tensor(&[16, 1024], 1));
        let enc = m.encode_window(&mut tape, s).unwrap();
        assert_eq!(tape.value(enc).shape(), &[16, 1024]);
        let a = m.decode_anchors(&mut tape, enc).unwrap();
        assert_eq!(tape.value(a.0).shape(), &[6, 1024]);
    }

    #[test]
    fn single_encoder_equals_one_block() {
        let (store, m) = build(&toy(IntegrationMode::Decoder, vec![2, 4]), 8);
        let s = random_tensor(&[8, 8], 2);
        let mut tape = Tape::new(&store);
        let n = tape.input(s.clone());
        let via = m.encode_window(&mut tape, n).unwrap();
        let direct = m.encoder[0].forward(&mut tape, n).unwrap();
        assert_eq!(tape.value(via), tape.value(direct));
    }

    #[test]
    fn single_anchor_and_stable_rows() {
        let (store, m) = build(&toy(IntegrationMode::Decoder, vec![4]), 8);
        let run = || {
            let mut tape = Tape::new(&store);
            let s = tape.input(random_tensor(&[8, 8], 3));
            let a = m.decode_anchors(&mut tape, s).unwrap();
            tape.value(a.0).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[1, 8]);
        assert_eq!(a, run());
    }

    #[test]
    fn all_modes_keep_shape_and_none_is_identity() {
        for mode in [
            IntegrationMode::Decoder,
            IntegrationMode::Concat,
            IntegrationMode::AvgPool,
            IntegrationMode::None,
        ] {
            let (store, m) = build(&toy(mode, vec![2, 4, 6, 8]), 8);
            assert_eq!(m.integration_mode(), mode);
            let mut tape = Tape::new(&store);
            let a = tape.input(random_tensor(&[4, 8], 4));
            let h = tape.input(random_tensor(&[3, 8], 5));
            let out = m
                .refine_anchors(&mut tape, AnchorFeatures(a), RefinedHistory(h))
                .unwrap();
            assert_eq!(tape.value(out.0).shape(), &[4, 8]);
            if mode == IntegrationMode::None {
                assert_eq!(out.0, a);
            }
        }
    }

    #[test]
    fn decoder_mode_identity_path() {
        let (mut store, m) = build(&toy(IntegrationMode::Decoder, vec![2, 4, 6, 8]), 8);
        let Integrator::Decoder { blocks, norm } = m.integrator.clone() else {
            unreachable!()
        };
        let last = &blocks.last().unwrap().out_norm;
        *store.value_mut(last.gain) = Tensor::zeros(&[8]);
        *store.value_mut(last.bias) = Tensor::zeros(&[8]);
        let mut tape = Tape::new(&store);
        let a = tape.input(random_tensor(&[4, 8], 6));
        let h = tape.input(random_tensor(&[3, 8], 7));
        let out = m
            .refine_anchors(&mut tape, AnchorFeatures(a), RefinedHistory(h))
            .unwrap();
        let expect = norm.forward(&mut tape, a).unwrap();
        assert_eq!(tape.value(out.0), tape.value(expect));
    }

    #[test]
    fn zero_history_with_zero_values_reduces_to_norm_of_anchors() {
        // H_ref = 0, zero value projections and a silenced final norm: only the residual survives.
        let (mut store, m) = build(&toy(IntegrationMode::Decoder, vec![2, 4]), 8);
        let Integrator::Decoder { blocks, norm } = m.integrator.clone() else {
            unreachable!()
        };
        for b in &blocks {
            *store.value_mut(b.cross_attn.value.weight) = Tensor::zeros(&[8, 8]);
            *store.value_mut(b.cross_attn.value.bias) = Tensor::zeros(&[8]);
            *store.value_mut(b.out_norm.gain) = Tensor::zeros(&[8]);
            *store.value_mut(b.out_norm.bias) = Tensor::zeros(&[8]);
        }
        let mut tape = Tape::new(&store);
        let a = tape.input(random_tensor(&[2, 8], 8));
        let h = tape.input(Tensor::zeros(&[3, 8]));
        let out = m
            .refine_anchors(&mut tape, AnchorFeatures(a), RefinedHistory(h))
            .unwrap();
        let expect = norm.forward(&mut tape, a).unwrap();
        assert_eq!(tape.value(out.0), tape.value(expect));
    }

    #[test]
    fn encode_window_gradient_check() {
        let (store, m) = build(&toy(IntegrationMode::Decoder, vec![2, 4]), 8);
        let r = grad_check(&store, &[random_tensor(&[8, 8], 9)], 1e-4, |tape, ids| {
            let enc = m.encode_window(tape, ids[0])?;
            probe_loss(tape, enc, 10)
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn config_rejects_bad_anchor_sizes() {
        let mut cfg = toy(IntegrationMode::Decoder, vec![4, 2]);
        assert!(!cfg.violations().is_empty());
        cfg.sizes = vec![2, 16];
        assert!(!cfg.violations().is_empty());
        cfg.sizes = vec![2, 8];
        assert!(cfg.violations().is_empty());
    }
}

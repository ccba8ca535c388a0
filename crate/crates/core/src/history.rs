//! Future-supervised history: compression of the long-term queue into a
//! fixed number of tokens, a window-level anticipation head used only in
//! training, and refinement of the compressed tokens against the encoded
//! short-term window.

use rand_chacha::ChaCha8Rng;

use crate::error::{HatError, Result};
use crate::numerics::layers::{decoder_stack, run_decoders, TOKEN_INIT_STD};
use crate::numerics::{DecoderBlock, LayerNorm, Linear, NodeId, ParamId, ParamStore, Scalar, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryConfig {
    /// When false the whole module is absent and anchors are used unrefined.
    pub enabled: bool,
    pub l_h: usize,
    pub l_comp: usize,
    pub n_c: usize,
    pub n_r: usize,
    pub heads_c: usize,
    pub heads_r: usize,
    pub anticipation: bool,
    pub refinement: bool,
}

impl Default for HistoryConfig {
    fn default() -> Self {
        HistoryConfig {
            enabled: true,
            l_h: 48,
            l_comp: 8,
            n_c: 5,
            n_r: 2,
            heads_c: 4,
            heads_r: 4,
            anticipation: true,
            refinement: true,
        }
    }
}

impl HistoryConfig {
    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        if !self.enabled {
            return v;
        }
        if self.l_comp == 0 {
            v.push(("history.l_comp", "must be at least 1".to_string()));
        }
        if self.l_comp >= self.l_h {
            v.push((
                "history.l_comp",
                format!("must be smaller than history length {}", self.l_h),
            ));
        }
        for (key, n) in [
            ("history.n_c", self.n_c),
            ("history.heads_c", self.heads_c),
            ("history.heads_r", self.heads_r),
        ] {
            if n == 0 {
                v.push((key, "must be at least 1".to_string()));
            }
        }
        if self.refinement && self.n_r == 0 {
            v.push(("history.n_r", "must be at least 1".to_string()));
        }
        v
    }
}

/// `L_comp×D` tokens produced by the compressor.
#[derive(Clone, Copy, Debug)]
pub struct CompressedHistory(pub NodeId);

/// `L_comp×D` tokens after refinement against the short-term window.
#[derive(Clone, Copy, Debug)]
pub struct RefinedHistory(pub NodeId);

#[derive(Clone, Copy, Debug)]
pub struct AnticipationOutput {
    /// Pre-sigmoid scores, `1×C`.
    pub logits: NodeId,
    /// `1×C`, each in `[0, 1]`.
    pub probabilities: NodeId,
}

pub struct Compression {
    pub compressed: CompressedHistory,
    /// Cross-attention weights, indexed `[block][head]`, each `L_comp×L_h`.
    pub attention: Vec<Vec<NodeId>>,
}

/// Linear `D → D/4` per token, flatten, dense + ReLU, dense + sigmoid.
#[derive(Clone, Debug)]
pub struct AnticipationHead {
    pub reduce: Linear,
    pub hidden: Linear,
    pub output: Linear,
    pub l_comp: usize,
}

impl AnticipationHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        d: usize,
        l_comp: usize,
        classes: usize,
    ) -> Result<Self> {
        if !d.is_multiple_of(4) {
            return Err(HatError::Config(format!(
                "anticipation head needs model width divisible by 4, got {d}"
            )));
        }
        let reduced = d / 4;
        Ok(AnticipationHead {
            reduce: Linear::new(store, rng, "history.anticipation.reduce", d, reduced)?,
            hidden: Linear::new(
                store,
                rng,
                "history.anticipation.hidden",
                l_comp * reduced,
                d,
            )?,
            output: Linear::new(store, rng, "history.anticipation.output", d, classes)?,
            l_comp,
        })
    }

    pub fn flattened_width(&self) -> usize {
        self.reduce.d_out * self.l_comp
    }
}

#[derive(Clone, Debug)]
pub struct HistoryModule {
    pub config: HistoryConfig,
    pub d_model: usize,
    /// Learnable query tokens `Q_hist`, `L_comp×D`.
    pub query_tokens: ParamId,
    pub compressor: Vec<DecoderBlock>,
    pub anticipation: Option<AnticipationHead>,
    pub refiner: Vec<DecoderBlock>,
    pub refine_norm: LayerNorm,
}

impl HistoryModule {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        config: &HistoryConfig,
        d: usize,
        classes: usize,
    ) -> Result<Self> {
        if let Some((key, msg)) = config.violations().into_iter().next() {
            return Err(HatError::Config(format!("{key}: {msg}")));
        }
        let query_tokens =
            store.add_normal("history.query_tokens", &[config.l_comp, d], TOKEN_INIT_STD, rng)?;
        let compressor =
            decoder_stack(store, rng, "history.compressor", config.n_c, d, config.heads_c)?;
        let anticipation = if config.anticipation {
            Some(AnticipationHead::new(store, rng, d, config.l_comp, classes)?)
        } else {
            None
        };
        let refiner = if config.refinement {
            decoder_stack(store, rng, "history.refiner", config.n_r, d, config.heads_r)?
        } else {
            Vec::new()
        };
        let refine_norm = LayerNorm::new(store, "history.refine_norm", d)?;
        Ok(HistoryModule {
            config: config.clone(),
            d_model: d,
            query_tokens,
            compressor,
            anticipation,
            refiner,
            refine_norm,
        })
    }

    /// `H_comp = d_{N_c} ∘ … ∘ d_1(Q_hist, H)`.
    pub fn compress<T: Scalar>(&self, tape: &mut Tape<'_, T>, history: NodeId) -> Result<Compression> {
        let h = tape.value(history);
        if h.rows() != self.config.l_h || h.cols() != self.d_model {
            return Err(HatError::dim(
                "compress_history",
                format!(
                    "expected {}x{}, got {:?}",
                    self.config.l_h,
                    self.d_model,
                    h.shape()
                ),
            ));
        }
        let q = tape.param(self.query_tokens);
        let (out, attention) = run_decoders(&self.compressor, tape, q, history)?;
        Ok(Compression {
            compressed: CompressedHistory(out),
            attention,
        })
    }

    pub fn anticipate<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        compressed: CompressedHistory,
    ) -> Result<AnticipationOutput> {
        let head = self
            .anticipation
            .as_ref()
            .ok_or_else(|| HatError::Config("anticipation head is disabled".into()))?;
        let reduced = head.reduce.forward(tape, compressed.0)?;
        let flat = tape.reshape(reduced, &[1, head.flattened_width()])?;
        let hidden = head.hidden.forward(tape, flat)?;
        let hidden = tape.relu(hidden);
        let logits = head.output.forward(tape, hidden)?;
        let probabilities = tape.sigmoid(logits);
        Ok(AnticipationOutput {
            logits,
            probabilities,
        })
    }

    /// `H_ref = Norm(d_{N_r} ∘ … ∘ d_1(H_comp, S_enc) + H_comp)`.
    pub fn refine<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        compressed: CompressedHistory,
        window: NodeId,
    ) -> Result<RefinedHistory> {
        let (refined, _) = run_decoders(&self.refiner, tape, compressed.0, window)?;
        let res = tape.add(refined, compressed.0)?;
        Ok(RefinedHistory(self.refine_norm.forward(tape, res)?))
    }
}

/// Total cross-attention mass each history frame receives, summed over
/// compressor blocks, heads and query tokens. Returns `(frame_index, mass)`
/// with `frame_index` relative to the start of the history segment.
pub fn export_history_attention<T: Scalar>(
    tape: &Tape<'_, T>,
    attention: &[Vec<NodeId>],
    l_h: usize,
) -> Vec<(usize, f64)> {
    let mut mass = vec![0.0f64; l_h];
    for block in attention {
        for &w in block {
            let w = tape.value(w);
            for r in 0..w.rows() {
                for (m, v) in mass.iter_mut().zip(w.row(r)) {
                    *m += v.f64();
                }
            }
        }
    }
    mass.into_iter().enumerate().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, probe_loss, random_tensor, Tensor};
    use rand::SeedableRng;

    fn config(l_h: usize, l_comp: usize, n_c: usize) -> HistoryConfig {
        HistoryConfig {
            l_h,
            l_comp,
            n_c,
            n_r: 1,
            heads_c: 2,
            heads_r: 2,
            ..HistoryConfig::default()
        }
    }

    fn build(cfg: &HistoryConfig, d: usize, classes: usize) -> (ParamStore<f64>, HistoryModule) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = HistoryModule::new(&mut store, &mut rng, cfg, d, classes).unwrap();
        (store, m)
    }

    #[test]
    fn compression_output_shape_is_fixed_by_config() {
        let (store, m) = build(
            &HistoryConfig {
                n_c: 1,
                n_r: 1,
                ..HistoryConfig::default()
            },
            1024,
            22,
        );
        let mut tape = Tape::new(&store);
        let h = tape.input(random_tensor(&[48, 1024], 1));
        let c = m.compress(&mut tape, h).unwrap();
        assert_eq!(tape.value(c.compressed.0).shape(), &[8, 1024]);
        assert_eq!(m.anticipation.as_ref().unwrap().flattened_width(), 2048);
    }

    #[test]
    fn compression_rejects_wrong_history_length() {
        let (store, m) = build(&config(12, 4, 1), 8, 3);
        let mut tape = Tape::new(&store);
        let h = tape.input(random_tensor(&[10, 8], 1));
        assert!(matches!(
            m.compress(&mut tape, h),
            Err(HatError::Dimension { .. })
        ));
    }

    #[test]
    fn single_block_compressor_equals_decoder_block() {
        let (store, m) = build(&config(12, 4, 1), 8, 3);
        let hist = random_tensor(&[12, 8], 2);
        let mut tape = Tape::new(&store);
        let h = tape.input(hist.clone());
        let c = m.compress(&mut tape, h).unwrap();
        let via_module = tape.value(c.compressed.0).clone();

        let mut tape = Tape::new(&store);
        let h = tape.input(hist);
        let q = tape.param(m.query_tokens);
        let direct = m.compressor[0].forward(&mut tape, q, h).unwrap();
        assert_eq!(tape.value(direct.out), &via_module);
    }

    #[test]
    fn anticipation_range_and_zero_weights() {
        let (mut store, m) = build(&config(12, 4, 2), 8, 5);
        for trial in 0..1000u64 {
            let mut tape = Tape::new(&store);
            let x = tape.input(random_tensor(&[4, 8], trial).scale(3.0));
            let a = m.anticipate(&mut tape, CompressedHistory(x)).unwrap();
            let p = tape.value(a.probabilities);
            assert_eq!(p.shape(), &[1, 5]);
            assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let head = m.anticipation.clone().unwrap();
        *store.value_mut(head.output.weight) = Tensor::zeros(&[8, 5]);
        *store.value_mut(head.output.bias) = Tensor::zeros(&[5]);
        let mut tape = Tape::new(&store);
        let x = tape.input(random_tensor(&[4, 8], 1));
        let a = m.anticipate(&mut tape, CompressedHistory(x)).unwrap();
        assert!(tape.value(a.probabilities).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn anticipation_needs_width_divisible_by_four() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = HistoryConfig {
            heads_c: 1,
            heads_r: 1,
            ..config(12, 4, 1)
        };
        assert!(matches!(
            HistoryModule::new(&mut store, &mut rng, &cfg, 6, 3),
            Err(HatError::Config(_))
        ));
    }

    #[test]
    fn refinement_identity_path() {
        let (mut store, m) = build(&config(12, 4, 1), 8, 3);
        let last = m.refiner.last().unwrap().out_norm.clone();
        *store.value_mut(last.gain) = Tensor::zeros(&[8]);
        *store.value_mut(last.bias) = Tensor::zeros(&[8]);
        let comp = random_tensor(&[4, 8], 5);
        let mut tape = Tape::new(&store);
        let c = tape.input(comp.clone());
        let s = tape.input(random_tensor(&[6, 8], 6));
        let r = m.refine(&mut tape, CompressedHistory(c), s).unwrap();
        let got = tape.value(r.0).clone();
        assert_eq!(got.shape(), &[4, 8]);
        let n = m.refine_norm.forward(&mut tape, c).unwrap();
        assert_eq!(tape.value(n), &got);
    }

    #[test]
    fn refinement_gradient_reaches_both_paths() {
        let (store, m) = build(&config(12, 4, 1), 8, 3);
        let inputs = [random_tensor(&[4, 8], 7), random_tensor(&[6, 8], 8)];
        let r = grad_check(&store, &inputs, 1e-4, |tape, ids| {
            let out = m.refine(tape, CompressedHistory(ids[0]), ids[1])?;
            probe_loss(tape, out.0, 9)
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn attention_export_mass_is_conserved() {
        let cfg = config(12, 4, 2);
        let (store, m) = build(&cfg, 8, 3);
        let mut tape = Tape::new(&store);
        let h = tape.input(random_tensor(&[12, 8], 1));
        let c = m.compress(&mut tape, h).unwrap();
        let pairs = export_history_attention(&tape, &c.attention, cfg.l_h);
        assert_eq!(pairs.len(), 12);
        assert!(pairs.iter().all(|&(_, v)| v >= 0.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        let expected = (cfg.n_c * cfg.heads_c * cfg.l_comp) as f64;
        assert!((total - expected).abs() < 1e-4);
    }
}

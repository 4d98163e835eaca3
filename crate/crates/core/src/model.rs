//! Miniature encoder-decoder.
//!
//! The encoder mean-pools token embeddings and applies an affine map with
//! `tanh`. The decoder is a tanh recurrence seeded with the document vector;
//! each docid position has its own output head over the `k` cluster tokens
//! of that group. Everything here is differentiated by hand.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, softmax, Matrix};

const INIT_SCALE: f64 = 0.08;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Token and docid-token embedding width (E).
    pub embed_dim: usize,
    /// Document vector and decoder state width (D).
    pub hidden_dim: usize,
    /// Docid length (g).
    pub groups: usize,
    /// Clusters per group (k).
    pub clusters: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("groups", self.groups),
            ("clusters", self.clusters),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by groups {}",
                self.hidden_dim, self.groups
            )));
        }
        Ok(())
    }

    /// Dimensions of each PQ subvector.
    pub fn subvector_dim(&self) -> usize {
        self.hidden_dim / self.groups
    }
}

/// All trainable arrays. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub token_embed: Matrix,
    pub enc_w: Matrix,
    pub enc_b: Vec<f64>,
    pub dec_u: Matrix,
    pub dec_v: Matrix,
    pub out_w: Vec<Matrix>,
    pub out_b: Vec<Vec<f64>>,
    pub docid_embed: Matrix,
}

pub type Gradients = Weights;

impl Weights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (v, e, d, g, k) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.groups, cfg.clusters);
        Self {
            token_embed: Matrix::zeros(v, e),
            enc_w: Matrix::zeros(e, d),
            enc_b: vec![0.0; d],
            dec_u: Matrix::zeros(d, d),
            dec_v: Matrix::zeros(e, d),
            out_w: (0..g).map(|_| Matrix::zeros(d, k)).collect(),
            out_b: vec![vec![0.0; k]; g],
            docid_embed: Matrix::zeros(g * k, e),
        }
    }

    /// Every array as a flat slice, in a fixed order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.token_embed.as_slice(),
            self.enc_w.as_slice(),
            &self.enc_b,
            self.dec_u.as_slice(),
            self.dec_v.as_slice(),
        ];
        out.extend(self.out_w.iter().map(Matrix::as_slice));
        out.extend(self.out_b.iter().map(Vec::as_slice));
        out.push(self.docid_embed.as_slice());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.token_embed.as_mut_slice(),
            self.enc_w.as_mut_slice(),
            &mut self.enc_b,
            self.dec_u.as_mut_slice(),
            self.dec_v.as_mut_slice(),
        ];
        out.extend(self.out_w.iter_mut().map(Matrix::as_mut_slice));
        out.extend(self.out_b.iter_mut().map(Vec::as_mut_slice));
        out.push(self.docid_embed.as_mut_slice());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn add_assign(&mut self, other: &Weights) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Weights,
    pub v: Weights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    #[default]
    Adam,
    /// Plain gradient descent, for debugging.
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: Weights,
    pub adam: AdamState,
    pub rng_seed: u64,
}

/// The pooled document representation.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub doc_vector: Vec<f64>,
    mean: Vec<f64>,
}

/// Sequence log-likelihood of a docid, kept in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScore {
    pub log_likelihood: f64,
    pub per_step_log_probs: Vec<f64>,
}

/// Decoder state before emitting the token at `position`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    position: usize,
    hidden: Vec<f64>,
}

impl DecodeState {
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn hidden(&self) -> &[f64] {
        &self.hidden
    }
}

/// Forward activations kept for backprop through one docid.
#[derive(Debug, Clone)]
pub(crate) struct DecodeTrace {
    states: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    pub(crate) score: SequenceScore,
}

impl ModelParams {
    /// Uniform init in [−0.08, 0.08] from a seeded ChaCha stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut weights = Weights::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in weights.slices_mut() {
            for x in s.iter_mut() {
                *x = rng.random_range(-INIT_SCALE..=INIT_SCALE);
            }
        }
        Ok(Self {
            config,
            adam: AdamState {
                step: 0,
                m: Weights::zeros(&config),
                v: Weights::zeros(&config),
            },
            weights,
            rng_seed: seed,
        })
    }

    pub fn encode(&self, tokens: &[u32]) -> Result<EncoderOutput> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("cannot encode an empty token sequence".into()));
        }
        let e = self.config.embed_dim;
        let mut mean = vec![0.0; e];
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Shape(format!(
                    "token id {t} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            for (m, x) in mean.iter_mut().zip(self.weights.token_embed.row(t as usize)) {
                *m += x;
            }
        }
        let n = tokens.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let mut pre = self.weights.enc_b.clone();
        self.weights.enc_w.accumulate_left_mul(&mean, &mut pre);
        let doc_vector = pre.into_iter().map(f64::tanh).collect();
        Ok(EncoderOutput { doc_vector, mean })
    }

    pub fn start_state(&self, encoded: &EncoderOutput) -> DecodeState {
        DecodeState {
            position: 0,
            hidden: encoded.doc_vector.clone(),
        }
    }

    /// Output-head logits at the state's position.
    pub fn step_logits(&self, state: &DecodeState) -> Result<Vec<f64>> {
        let t = state.position;
        if t >= self.config.groups {
            return Err(Error::InvalidDocid(format!(
                "position {t} outside docid length {}",
                self.config.groups
            )));
        }
        let mut logits = self.weights.out_b[t].clone();
        self.weights.out_w[t].accumulate_left_mul(&state.hidden, &mut logits);
        Ok(logits)
    }

    /// Feeds `code` at the current position and returns the next state.
    pub fn advance(&self, state: &DecodeState, code: u32) -> Result<DecodeState> {
        let t = state.position;
        self.check_code(t, code)?;
        let gid = t * self.config.clusters + code as usize;
        let mut pre = vec![0.0; self.config.hidden_dim];
        self.weights.dec_u.accumulate_left_mul(&state.hidden, &mut pre);
        self.weights
            .dec_v
            .accumulate_left_mul(self.weights.docid_embed.row(gid), &mut pre);
        Ok(DecodeState {
            position: t + 1,
            hidden: pre.into_iter().map(f64::tanh).collect(),
        })
    }

    fn check_code(&self, position: usize, code: u32) -> Result<()> {
        if position >= self.config.groups {
            return Err(Error::InvalidDocid(format!(
                "position {position} outside docid length {}",
                self.config.groups
            )));
        }
        if code as usize >= self.config.clusters {
            return Err(Error::InvalidDocid(format!(
                "code {code} at position {position} outside [0, {})",
                self.config.clusters
            )));
        }
        Ok(())
    }

    pub fn check_docid(&self, codes: &[u32]) -> Result<()> {
        if codes.len() != self.config.groups {
            return Err(Error::InvalidDocid(format!(
                "docid has length {}, expected {}",
                codes.len(),
                self.config.groups
            )));
        }
        codes.iter().enumerate().try_for_each(|(t, &c)| self.check_code(t, c))
    }

    /// `log P(docid | tokens)` under the autoregressive decoder.
    pub fn score_docid(&self, tokens: &[u32], codes: &[u32]) -> Result<SequenceScore> {
        let enc = self.encode(tokens)?;
        self.score_encoded(&enc, codes)
    }

    pub fn score_encoded(&self, encoded: &EncoderOutput, codes: &[u32]) -> Result<SequenceScore> {
        Ok(self.trace(encoded, codes)?.score)
    }

    pub(crate) fn trace(&self, encoded: &EncoderOutput, codes: &[u32]) -> Result<DecodeTrace> {
        self.check_docid(codes)?;
        let g = self.config.groups;
        let mut states = Vec::with_capacity(g);
        let mut probs = Vec::with_capacity(g);
        let mut per_step = Vec::with_capacity(g);
        let mut state = self.start_state(encoded);
        let mut total = 0.0;
        for (t, &code) in codes.iter().enumerate() {
            let logits = self.step_logits(&state)?;
            let lp = logits[code as usize] - log_sum_exp(&logits);
            total += lp;
            per_step.push(lp);
            probs.push(softmax(&logits));
            let next = if t + 1 < g {
                Some(self.advance(&state, code)?)
            } else {
                None
            };
            states.push(std::mem::take(&mut state.hidden));
            if let Some(n) = next {
                state = n;
            }
        }
        Ok(DecodeTrace {
            states,
            probs,
            score: SequenceScore {
                log_likelihood: total,
                per_step_log_probs: per_step,
            },
        })
    }

    /// Adds `coef · ∂ℓ/∂θ` of one decoded docid into `grads` (decoder side)
    /// and returns `coef · ∂ℓ/∂h` for the document vector.
    pub(crate) fn backprop_sequence(
        &self,
        trace: &DecodeTrace,
        codes: &[u32],
        coef: f64,
        grads: &mut Gradients,
    ) -> Vec<f64> {
        let g = self.config.groups;
        let k = self.config.clusters;
        let d = self.config.hidden_dim;
        let w = &self.weights;
        // gradient w.r.t. the pre-activation of the state following position t
        let mut d_next_pre: Option<Vec<f64>> = None;
        let mut ds = vec![0.0; d];
        for t in (0..g).rev() {
            let s_t = &trace.states[t];
            ds.iter_mut().for_each(|x| *x = 0.0);
            if let Some(da) = d_next_pre.take() {
                let gid = t * k + codes[t] as usize;
                grads.dec_u.add_outer(s_t, &da);
                grads.dec_v.add_outer(w.docid_embed.row(gid), &da);
                w.dec_v.accumulate_right_mul(&da, grads.docid_embed.row_mut(gid));
                w.dec_u.accumulate_right_mul(&da, &mut ds);
            }
            let mut dz: Vec<f64> = trace.probs[t].iter().map(|p| -coef * p).collect();
            dz[codes[t] as usize] += coef;
            grads.out_w[t].add_outer(s_t, &dz);
            for (b, z) in grads.out_b[t].iter_mut().zip(&dz) {
                *b += z;
            }
            w.out_w[t].accumulate_right_mul(&dz, &mut ds);
            if t > 0 {
                d_next_pre = Some(ds.iter().zip(s_t).map(|(g, s)| g * (1.0 - s * s)).collect());
            }
        }
        ds
    }

    /// Backprop of `∂L/∂h` through the encoder into `grads`.
    pub(crate) fn backprop_encoder(
        &self,
        tokens: &[u32],
        encoded: &EncoderOutput,
        d_vector: &[f64],
        grads: &mut Gradients,
    ) {
        let da: Vec<f64> = d_vector
            .iter()
            .zip(&encoded.doc_vector)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        grads.enc_w.add_outer(&encoded.mean, &da);
        for (b, x) in grads.enc_b.iter_mut().zip(&da) {
            *b += x;
        }
        let mut dmean = vec![0.0; self.config.embed_dim];
        self.weights.enc_w.accumulate_right_mul(&da, &mut dmean);
        let n = tokens.len() as f64;
        for &t in tokens {
            for (g, x) in grads.token_embed.row_mut(t as usize).iter_mut().zip(&dmean) {
                *g += x / n;
            }
        }
    }

    /// Applies one optimizer update. Adam moments live in `self.adam`.
    pub fn optimizer_step(&mut self, grads: &Gradients, lr: f64, rule: UpdateRule) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        match rule {
            UpdateRule::Sgd => {
                for (p, g) in self.weights.slices_mut().into_iter().zip(grads.slices()) {
                    for (x, d) in p.iter_mut().zip(g) {
                        *x -= lr * d;
                    }
                }
            }
            UpdateRule::Adam => {
                self.adam.step += 1;
                let t = self.adam.step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                let params = self.weights.slices_mut();
                let ms = self.adam.m.slices_mut();
                let vs = self.adam.v.slices_mut();
                for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(grads.slices()) {
                    for i in 0..p.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        if !self.weights.is_finite() {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        Ok(())
    }

    pub fn reset_optimizer(&mut self) {
        self.adam = AdamState {
            step: 0,
            m: Weights::zeros(&self.config),
            v: Weights::zeros(&self.config),
        };
    }

    pub fn zero_grads(&self) -> Gradients {
        Weights::zeros(&self.config)
    }
}

// Checkpoint container:
//   magic "GRCK" | u32 version | u64 header length | header JSON
//   | u64 array count | per array: u64 length, little-endian f64 values
// Arrays are the weights, then Adam first moments, then second moments.

const CKPT_MAGIC: &[u8; 4] = b"GRCK";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    rng_seed: u64,
    adam_step: u64,
}

impl ModelParams {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config,
            rng_seed: self.rng_seed,
            adam_step: self.adam.step,
        })?;
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let arrays: Vec<&[f64]> = self
            .weights
            .slices()
            .into_iter()
            .chain(self.adam.m.slices())
            .chain(self.adam.v.slices())
            .collect();
        w.write_all(&(arrays.len() as u64).to_le_bytes())?;
        for a in arrays {
            w.write_all(&(a.len() as u64).to_le_bytes())?;
            for x in a {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor { bytes, pos: 0 };
        if cur.take(4)? != CKPT_MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = cur.u64()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(cur.take(hlen)?)?;
        header.config.validate()?;
        let mut params = Self {
            config: header.config,
            weights: Weights::zeros(&header.config),
            adam: AdamState {
                step: header.adam_step,
                m: Weights::zeros(&header.config),
                v: Weights::zeros(&header.config),
            },
            rng_seed: header.rng_seed,
        };
        let count = cur.u64()? as usize;
        let targets: Vec<&mut [f64]> = params
            .weights
            .slices_mut()
            .into_iter()
            .chain(params.adam.m.slices_mut())
            .chain(params.adam.v.slices_mut())
            .collect();
        if count != targets.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} arrays, config implies {}",
                targets.len()
            )));
        }
        for t in targets {
            let len = cur.u64()? as usize;
            if len != t.len() {
                return Err(Error::Format(format!(
                    "array length {len} does not match expected {}",
                    t.len()
                )));
            }
            for x in t.iter_mut() {
                *x = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(params)
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(v: usize, e: usize, d: usize, g: usize, k: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: v,
            embed_dim: e,
            hidden_dim: d,
            groups: g,
            clusters: k,
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = ModelParams::init(cfg(20, 4, 8, 2, 3), 7).unwrap();
        let b = ModelParams::init(cfg(20, 4, 8, 2, 3), 7).unwrap();
        assert_eq!(a, b);
        assert!(a.weights.max_abs() <= INIT_SCALE);
        let c = ModelParams::init(cfg(20, 4, 8, 2, 3), 8).unwrap();
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn divisibility() {
        assert_eq!(cfg(10, 4, 64, 8, 4).subvector_dim(), 8);
        assert!(ModelParams::init(cfg(10, 4, 10, 3, 4), 0).is_err());
    }

    #[test]
    fn encode_single_token_and_permutation() {
        let p = ModelParams::init(cfg(10, 4, 6, 2, 3), 1).unwrap();
        let out = p.encode(&[3]).unwrap();
        let mut expect = p.weights.enc_b.clone();
        p.weights
            .enc_w
            .accumulate_left_mul(p.weights.token_embed.row(3), &mut expect);
        for (a, b) in out.doc_vector.iter().zip(expect) {
            assert_eq!(*a, b.tanh());
        }
        let x = p.encode(&[1, 2, 5, 7]).unwrap().doc_vector;
        let y = p.encode(&[7, 5, 1, 2]).unwrap().doc_vector;
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(p.encode(&[]).is_err());
    }

    #[test]
    fn zero_weights_encode_to_zero() {
        let mut p = ModelParams::init(cfg(10, 4, 6, 2, 3), 1).unwrap();
        p.weights = Weights::zeros(&p.config);
        assert!(p.encode(&[1, 2]).unwrap().doc_vector.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_cluster_gives_zero_loglik() {
        let p = ModelParams::init(cfg(10, 4, 6, 3, 1), 1).unwrap();
        let s = p.score_docid(&[1, 2], &[0, 0, 0]).unwrap();
        assert_eq!(s.log_likelihood, 0.0);
    }

    #[test]
    fn hand_set_logits() {
        let mut p = ModelParams::init(cfg(10, 4, 2, 1, 2), 1).unwrap();
        p.weights.out_w[0] = Matrix::zeros(2, 2);
        p.weights.out_b[0] = vec![2.0, 1.0];
        let s = p.score_docid(&[3], &[0]).unwrap();
        let expect = -(1.0 + (-1.0f64).exp()).ln();
        assert!((s.log_likelihood - expect).abs() < 1e-12);
        assert!((s.log_likelihood + 0.3133).abs() < 1e-4);
    }

    #[test]
    fn docid_validation() {
        let p = ModelParams::init(cfg(10, 4, 6, 2, 3), 1).unwrap();
        assert!(p.score_docid(&[1], &[0]).is_err());
        assert!(p.score_docid(&[1], &[0, 3]).is_err());
        let state = DecodeState {
            position: 2,
            hidden: vec![0.0; 6],
        };
        assert!(p.step_logits(&state).is_err());
    }

    #[test]
    fn stepwise_matches_score_and_normalizes() {
        let p = ModelParams::init(cfg(10, 4, 6, 3, 3), 4).unwrap();
        let enc = p.encode(&[1, 4, 4]).unwrap();
        let codes = [2, 0, 1];
        let score = p.score_encoded(&enc, &codes).unwrap();
        let mut state = p.start_state(&enc);
        let mut total = 0.0;
        for (t, &c) in codes.iter().enumerate() {
            let logits = p.step_logits(&state).unwrap();
            assert_eq!(logits, p.step_logits(&state).unwrap());
            assert_eq!(logits.len(), 3);
            let lse = log_sum_exp(&logits);
            let mass: f64 = logits.iter().map(|z| (z - lse).exp()).sum();
            assert!((mass - 1.0).abs() < 1e-9);
            total += logits[c as usize] - lse;
            if t + 1 < codes.len() {
                state = p.advance(&state, c).unwrap();
            }
        }
        assert_eq!(total, score.log_likelihood);
        let sum: f64 = score.per_step_log_probs.iter().sum();
        assert!((sum - score.log_likelihood).abs() < 1e-9);
        assert!(score.log_likelihood <= 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ModelParams::init(cfg(3, 1, 1, 1, 1), 2).unwrap();
        let before = p.weights.clone();
        let mut g = p.zero_grads();
        g.token_embed.set(0, 0, 1.0);
        p.optimizer_step(&g, 0.01, UpdateRule::Adam).unwrap();
        let moved = before.token_embed.get(0, 0) - p.weights.token_embed.get(0, 0);
        assert!((moved - 0.01).abs() < 1e-9);
        assert_eq!(before.token_embed.get(1, 0), p.weights.token_embed.get(1, 0));
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let mut p = ModelParams::init(cfg(5, 2, 2, 1, 2), 2).unwrap();
        let before = p.weights.clone();
        let mut g = p.zero_grads();
        g.enc_b[0] = 3.0;
        p.optimizer_step(&g, 0.0, UpdateRule::Adam).unwrap();
        assert_eq!(before, p.weights);
    }

    #[test]
    fn non_finite_grads_rejected() {
        let mut p = ModelParams::init(cfg(5, 2, 2, 1, 2), 2).unwrap();
        let mut g = p.zero_grads();
        g.enc_b[0] = f64::NAN;
        assert!(p.optimizer_step(&g, 0.1, UpdateRule::Adam).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut p = ModelParams::init(cfg(12, 3, 4, 2, 3), 9).unwrap();
        let mut g = p.zero_grads();
        g.dec_u.set(1, 1, 0.5);
        p.optimizer_step(&g, 0.1, UpdateRule::Adam).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        p.save(&path).unwrap();
        let q = ModelParams::load(&path).unwrap();
        assert_eq!(p, q);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        assert!(ModelParams::from_bytes(&bytes).is_err());
    }
}

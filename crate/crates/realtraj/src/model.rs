//! Det2TrajFormer: an encoder-only transformer over identity-free
//! detection tokens plus learnable query tokens.
//!
//! Each detection (position, time index) is embedded as `G(x) + te(t)`,
//! concatenated with `T_pred` learnable query tokens, and run through a
//! stack of pre-norm self-attention blocks. The forecasting heads read the
//! query slots; the pretraining heads (unmasking, denoising, person-ID
//! reconstruction) read the detection slots.
//!
//! Checkpoint format: magic `RTRJ1`, a little-endian u32 length-prefixed
//! JSON header (config plus ordered parameter manifest), then the raw
//! little-endian f64 payloads in manifest order. Round-trips bit-exactly.

use crate::autodiff::{concat_cols, concat_rows, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"RTRJ1";
const ATTENTION_MASK_BIAS: f64 = -1e9;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding dimension.
    pub d: usize,
    /// Encoder depth.
    pub layers: usize,
    /// Attention heads; must divide `d`.
    pub heads: usize,
    /// Person-ID embedding dimension.
    pub d_i: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    /// Number of forecasting heads (1 deterministic, 20 for multi-future).
    pub n_futures: usize,
    /// Feedforward width; 0 means 4*d.
    pub ff_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            layers: 9,
            heads: 4,
            d_i: 64,
            t_obs: 9,
            t_pred: 12,
            n_futures: 1,
            ff_dim: 0,
        }
    }
}

impl ModelConfig {
    pub fn ff(&self) -> usize {
        if self.ff_dim == 0 {
            4 * self.d
        } else {
            self.ff_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.d > 0
            && self.layers > 0
            && self.heads > 0
            && self.d % self.heads == 0
            && self.d_i > 0
            && self.t_obs > 0
            && self.t_pred > 0
            && self.n_futures > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "model config fields must be positive and d divisible by heads".into(),
            ))
        }
    }

    /// Closed-form learnable parameter count.
    pub fn param_count(&self) -> usize {
        let (d, ff) = (self.d, self.ff());
        let embed = 2 * d + d;
        let queries = self.t_pred * d;
        let per_layer = 2 * d                  // ln1
            + 3 * (d * d + d)                  // q, k, v projections
            + (d * d + d)                      // output projection
            + 2 * d                            // ln2
            + d * ff + ff + ff * d + d; // feedforward
        let final_ln = 2 * d;
        let heads = self.n_futures * (2 * d + 2) // forecasting
            + (2 * d + 2)                        // unmasking
            + (2 * d + 2)                        // denoising
            + (d * self.d_i + self.d_i); // person-ID reconstruction
        embed + queries + self.layers * per_layer + final_ln + heads
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Parameter {
    fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Parameter {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len());
        Parameter {
            name: name.into(),
            shape,
            data,
            grad: vec![0.0; n],
        }
    }
}

/// Sinusoidal time-index encoding with the geometric frequency ladder
/// (base 10000), position = t.
pub fn time_encode(t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for j in 0..d {
        let pair = (j / 2 * 2) as f64;
        let freq = 1.0 / 10000f64.powf(pair / d as f64);
        let angle = t as f64 * freq;
        out[j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
    }
    out
}

#[derive(Debug, Clone)]
pub struct Det2TrajFormer {
    pub config: ModelConfig,
    pub params: Vec<Parameter>,
}

impl Det2TrajFormer {
    /// Fresh model: affine weights uniform(+-1/sqrt(fan_in)), biases zero,
    /// queries N(0, 0.02^2), layer-norm gain one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Det2TrajFormer> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut params = Vec::new();
        let (d, ff, d_i) = (config.d, config.ff(), config.d_i);

        let affine = |params: &mut Vec<Parameter>,
                      name: &str,
                      fan_in: usize,
                      fan_out: usize,
                      rng: &mut rand_chacha::ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
                .collect();
            params.push(Parameter::new(format!("{name}.w"), vec![fan_in, fan_out], w));
            params.push(Parameter::new(
                format!("{name}.b"),
                vec![fan_out],
                vec![0.0; fan_out],
            ));
        };
        let layer_norm = |params: &mut Vec<Parameter>, name: &str| {
            params.push(Parameter::new(format!("{name}.gamma"), vec![d], vec![1.0; d]));
            params.push(Parameter::new(format!("{name}.beta"), vec![d], vec![0.0; d]));
        };

        affine(&mut params, "embed", 2, d, &mut rng);
        let queries = Normal::new(0.0, 0.02)
            .unwrap()
            .sample_iter(&mut rng)
            .take(config.t_pred * d)
            .collect();
        params.push(Parameter::new("queries", vec![config.t_pred, d], queries));
        for l in 0..config.layers {
            layer_norm(&mut params, &format!("layer{l}.ln1"));
            affine(&mut params, &format!("layer{l}.attn.q"), d, d, &mut rng);
            affine(&mut params, &format!("layer{l}.attn.k"), d, d, &mut rng);
            affine(&mut params, &format!("layer{l}.attn.v"), d, d, &mut rng);
            affine(&mut params, &format!("layer{l}.attn.out"), d, d, &mut rng);
            layer_norm(&mut params, &format!("layer{l}.ln2"));
            affine(&mut params, &format!("layer{l}.ff.in"), d, ff, &mut rng);
            affine(&mut params, &format!("layer{l}.ff.out"), ff, d, &mut rng);
        }
        layer_norm(&mut params, "final_ln");
        for n in 0..config.n_futures {
            affine(&mut params, &format!("head_f{n}"), d, 2, &mut rng);
        }
        affine(&mut params, "head_m", d, 2, &mut rng);
        affine(&mut params, "head_d", d, 2, &mut rng);
        affine(&mut params, "head_r", d, d_i, &mut rng);

        Ok(Det2TrajFormer { config, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    fn index_of(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the tape's keyed leaf gradients into the parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (key, grad) in tape.param_grads() {
            let dst = &mut self.params[key].grad;
            for (d, g) in dst.iter_mut().zip(&grad) {
                *d += g;
            }
        }
    }

    /// All parameter values flattened in manifest order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for p in &mut self.params {
            let len = p.data.len();
            p.data.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        assert_eq!(offset, flat.len());
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.grad.iter().copied()).collect()
    }

    /// Inference convenience: predictions of every forecasting head, in
    /// window coordinates.
    pub fn predict_values(&self, tokens: &[(usize, [f64; 2])]) -> Result<Vec<Vec<[f64; 2]>>> {
        let tape = Tape::new();
        let bound = BoundModel::new(&tape, self);
        let (preds, _) = bound.predict(tokens, None)?;
        Ok(preds
            .iter()
            .map(|p| {
                p.value()
                    .chunks(2)
                    .map(|c| [c[0], c[1]])
                    .collect::<Vec<[f64; 2]>>()
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let manifest: Vec<ParamManifestEntry> = self
            .params
            .iter()
            .map(|p| ParamManifestEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect();
        let header = CheckpointHeader {
            config: self.config.clone(),
            params: manifest,
        };
        let header_json = serde_json::to_vec(&header).map_err(|e| Error::BadCheckpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(CHECKPOINT_MAGIC).map_err(|e| Error::io(path, e))?;
        file.write_all(&(header_json.len() as u32).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        file.write_all(&header_json).map_err(|e| Error::io(path, e))?;
        let mut payload = Vec::new();
        for p in &self.params {
            for v in &p.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        file.write_all(&payload).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Det2TrajFormer> {
        let path = path.as_ref();
        let bad = |msg: &str| Error::BadCheckpoint {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut magic = [0u8; 5];
        file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut len_bytes = [0u8; 4];
        file.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        file.read_exact(&mut header_json).map_err(|e| Error::io(path, e))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header_json).map_err(|e| bad(&e.to_string()))?;
        header.config.validate()?;

        let mut params = Vec::with_capacity(header.params.len());
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            file.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(Parameter::new(entry.name, entry.shape, data));
        }
        let mut trailing = Vec::new();
        file.read_to_end(&mut trailing).map_err(|e| Error::io(path, e))?;
        if !trailing.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        let model = Det2TrajFormer {
            config: header.config,
            params,
        };
        // The manifest must match what this config would construct.
        let fresh = Det2TrajFormer::new(model.config.clone(), 0)?;
        if fresh.params.len() != model.params.len()
            || fresh
                .params
                .iter()
                .zip(&model.params)
                .any(|(a, b)| a.name != b.name || a.shape != b.shape)
        {
            return Err(bad("parameter manifest does not match config"));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    params: Vec<ParamManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamManifestEntry {
    name: String,
    shape: Vec<usize>,
}

/// Encoder outputs: detection-slot tokens and query-slot tokens.
pub struct ForwardOut {
    pub h_hat: Tensor,
    pub q_hat: Tensor,
    pub n_det: usize,
}

/// A model whose parameters are registered as keyed leaves on one tape, so
/// several windows can share a graph and one backward call.
pub struct BoundModel<'m> {
    pub model: &'m Det2TrajFormer,
    tape: Tape,
    leaves: Vec<Tensor>,
}

impl<'m> BoundModel<'m> {
    pub fn new(tape: &Tape, model: &'m Det2TrajFormer) -> BoundModel<'m> {
        let leaves = model
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param_leaf(&p.data, &p.shape, i))
            .collect();
        BoundModel {
            model,
            tape: tape.clone(),
            leaves,
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn leaf(&self, name: &str) -> Tensor {
        self.leaves[self.model.index_of(name)].clone()
    }

    fn affine(&self, x: &Tensor, name: &str, rows: usize) -> Result<Tensor> {
        let w = self.leaf(&format!("{name}.w"));
        let b = self.leaf(&format!("{name}.b"));
        x.matmul(&w)?.add(&b.broadcast_rows(rows)?)
    }

    fn layer_norm(&self, x: &Tensor, name: &str, rows: usize) -> Result<Tensor> {
        let gamma = self.leaf(&format!("{name}.gamma"));
        let beta = self.leaf(&format!("{name}.beta"));
        x.layer_norm_last()
            .mul(&gamma.broadcast_rows(rows)?)?
            .add(&beta.broadcast_rows(rows)?)
    }

    /// Runs the encoder over detection tokens plus query tokens.
    ///
    /// `pad`, when given, is congruent with `tokens`; `true` slots are
    /// excluded from attention via an additive -1e9 bias on their columns
    /// (their key weight underflows to exactly zero).
    pub fn forward(&self, tokens: &[(usize, [f64; 2])], pad: Option<&[bool]>) -> Result<ForwardOut> {
        let cfg = &self.model.config;
        let n_det = tokens.len();
        let n_real = match pad {
            Some(p) => {
                assert_eq!(p.len(), n_det, "padding mask must be congruent with tokens");
                p.iter().filter(|&&x| !x).count()
            }
            None => n_det,
        };
        if n_real == 0 {
            return Err(Error::NoTokens);
        }
        let (d, heads) = (cfg.d, cfg.heads);
        let dh = d / heads;
        let n = n_det + cfg.t_pred;

        // Detection tokens: G(x) + time encoding.
        let xy: Vec<f64> = tokens.iter().flat_map(|(_, p)| [p[0], p[1]]).collect();
        let x = self.tape.leaf(&xy, &[n_det, 2]);
        let embedded = self.affine(&x, "embed", n_det)?;
        let te: Vec<f64> = tokens
            .iter()
            .flat_map(|&(t, _)| time_encode(t, d))
            .collect();
        let te = self.tape.leaf(&te, &[n_det, d]);
        let det_tokens = embedded.add(&te)?;

        let mut h = concat_rows(&[det_tokens, self.leaf("queries")])?;

        // Column bias: -1e9 on padded detection slots, 0 elsewhere.
        let mask_bias = pad.and_then(|p| {
            if !p.iter().any(|&x| x) {
                return None;
            }
            let mut bias = vec![0.0; n * n];
            for (j, &is_pad) in p.iter().enumerate() {
                if is_pad {
                    for i in 0..n {
                        bias[i * n + j] = ATTENTION_MASK_BIAS;
                    }
                }
            }
            Some(self.tape.leaf(&bias, &[n, n]))
        });

        for l in 0..cfg.layers {
            let normed = self.layer_norm(&h, &format!("layer{l}.ln1"), n)?;
            let q = self.affine(&normed, &format!("layer{l}.attn.q"), n)?;
            let k = self.affine(&normed, &format!("layer{l}.attn.k"), n)?;
            let v = self.affine(&normed, &format!("layer{l}.attn.v"), n)?;
            let mut head_outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (lo, hi) = (hd * dh, (hd + 1) * dh);
                let qh = q.slice_cols(lo, hi)?;
                let kh = k.slice_cols(lo, hi)?;
                let vh = v.slice_cols(lo, hi)?;
                let mut scores = qh.matmul(&kh.transpose()?)?.scale(1.0 / (dh as f64).sqrt());
                if let Some(bias) = &mask_bias {
                    scores = scores.add(bias)?;
                }
                head_outs.push(scores.softmax_last().matmul(&vh)?);
            }
            let attn = self.affine(&concat_cols(&head_outs)?, &format!("layer{l}.attn.out"), n)?;
            h = h.add(&attn)?;

            let normed = self.layer_norm(&h, &format!("layer{l}.ln2"), n)?;
            let ff = self.affine(&normed, &format!("layer{l}.ff.in"), n)?.relu();
            let ff = self.affine(&ff, &format!("layer{l}.ff.out"), n)?;
            h = h.add(&ff)?;
        }
        let h = self.layer_norm(&h, "final_ln", n)?;

        Ok(ForwardOut {
            h_hat: h.slice_rows(0, n_det)?,
            q_hat: h.slice_rows(n_det, n)?,
            n_det,
        })
    }

    /// Forecasting-head outputs, one `[t_pred, 2]` tensor per head.
    pub fn predict(
        &self,
        tokens: &[(usize, [f64; 2])],
        pad: Option<&[bool]>,
    ) -> Result<(Vec<Tensor>, ForwardOut)> {
        let out = self.forward(tokens, pad)?;
        let preds = self.predict_from(&out)?;
        Ok((preds, out))
    }

    pub fn predict_from(&self, out: &ForwardOut) -> Result<Vec<Tensor>> {
        let t_pred = self.model.config.t_pred;
        (0..self.model.config.n_futures)
            .map(|n| self.affine(&out.q_hat, &format!("head_f{n}"), t_pred))
            .collect()
    }

    /// Pretext-head outputs aligned index-for-index with the detection
    /// tokens: (unmasked reconstruction, denoised reconstruction,
    /// person-ID embeddings).
    pub fn pretext(&self, out: &ForwardOut) -> Result<(Tensor, Tensor, Tensor)> {
        let n = out.n_det;
        Ok((
            self.affine(&out.h_hat, "head_m", n)?,
            self.affine(&out.h_hat, "head_d", n)?,
            self.affine(&out.h_hat, "head_r", n)?,
        ))
    }
}

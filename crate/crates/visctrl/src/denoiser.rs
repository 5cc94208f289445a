//! Toy conditional noise predictor standing in for a pretrained U-Net.
//!
//! The latent is treated as a `(h*w) x channels` token matrix fed through
//! `blocks` identical stages: a residual feed-forward sublayer, a hookable
//! residual self-attention sublayer and a residual cross-attention
//! sublayer over the prompt embedding. The predicted noise is the stream
//! update (final tokens minus input tokens), so an all-zero parameter
//! set predicts exactly zero noise (handy for closed-form pipeline
//! checks) without needing a separate output head, and the null prompt (a
//! single zero token) still leaves a real latent-dependent prediction.
//!
//! The image codec is a linear patchify/unpatchify pair with the decoder
//! initialized to the Moore-Penrose pseudo-inverse of the encoder: when
//! `channels >= 3 * patch^2` the round trip is near-lossless, so editing
//! fidelity is attributable to the diffusion loop rather than codec loss.
//!
//! Everything is a deterministic function of (config, seed): weights come
//! from a ChaCha8 stream turned Gaussian by the Box-Muller transform, and
//! prompt tokens are embedded by seeding the same generator with an
//! FNV-1a hash of the token bytes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attn_control::HookSet;
use crate::container::{self, NamedTensor};
use crate::error::{Error, Result};
use crate::numerics::{attention, matmul, Matrix, Tensor3};

/// Structural configuration of the denoiser and codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub latent_h: usize,
    pub latent_w: usize,
    /// Latent channel count; width of the token matrix.
    pub channels: usize,
    /// Projection width of Q/K/V inside the attention sublayers.
    pub attn_dim: usize,
    /// Number of blocks; the layer index of the edit gate runs over these.
    pub blocks: usize,
    pub prompt_dim: usize,
    /// Width of the sinusoidal timestep embedding; must be even.
    pub timestep_dim: usize,
    /// Pixel patch edge: images are `patch` times larger than latents.
    pub patch: usize,
    pub seed: u64,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("latent_h", self.latent_h),
            ("latent_w", self.latent_w),
            ("channels", self.channels),
            ("attn_dim", self.attn_dim),
            ("blocks", self.blocks),
            ("prompt_dim", self.prompt_dim),
            ("timestep_dim", self.timestep_dim),
            ("patch", self.patch),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1, got {v}")));
            }
        }
        if self.timestep_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "timestep_dim must be even, got {}",
                self.timestep_dim
            )));
        }
        Ok(())
    }
}

/// Q/K/V/output projections of one attention sublayer.
#[derive(Debug, Clone)]
pub struct AttnWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

/// Parameters of one block.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub ff1: Matrix,
    pub ff2: Matrix,
    pub self_attn: AttnWeights,
    pub cross_attn: AttnWeights,
}

/// Full parameter set. Immutable after construction and safe to share
/// across threads.
#[derive(Debug, Clone)]
pub struct Weights {
    channels: usize,
    attn_dim: usize,
    prompt_dim: usize,
    timestep_dim: usize,
    patch: usize,
    pub enc: Matrix,
    pub dec: Matrix,
    pub time_proj: Matrix,
    pub blocks: Vec<BlockWeights>,
}

impl Weights {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn attn_dim(&self) -> usize {
        self.attn_dim
    }

    pub fn prompt_dim(&self) -> usize {
        self.prompt_dim
    }

    pub fn timestep_dim(&self) -> usize {
        self.timestep_dim
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn bit_eq(&self, other: &Weights) -> bool {
        self.channels == other.channels
            && self.attn_dim == other.attn_dim
            && self.prompt_dim == other.prompt_dim
            && self.timestep_dim == other.timestep_dim
            && self.patch == other.patch
            && self.enc.bit_eq(&other.enc)
            && self.dec.bit_eq(&other.dec)
            && self.time_proj.bit_eq(&other.time_proj)
            && self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| {
                a.ff1.bit_eq(&b.ff1)
                    && a.ff2.bit_eq(&b.ff2)
                    && a.self_attn.wq.bit_eq(&b.self_attn.wq)
                    && a.self_attn.wk.bit_eq(&b.self_attn.wk)
                    && a.self_attn.wv.bit_eq(&b.self_attn.wv)
                    && a.self_attn.wo.bit_eq(&b.self_attn.wo)
                    && a.cross_attn.wq.bit_eq(&b.cross_attn.wq)
                    && a.cross_attn.wk.bit_eq(&b.cross_attn.wk)
                    && a.cross_attn.wv.bit_eq(&b.cross_attn.wv)
                    && a.cross_attn.wo.bit_eq(&b.cross_attn.wo)
            })
    }
}

/// One standard Gaussian via Box-Muller; one variate per uniform pair so
/// the stream layout stays obvious.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]: ln stays finite
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Extra damping on matrices that write into the residual stream (the
/// feed-forward down projection and both attention output projections).
/// Keeps the noise prediction a mild function of the latent, so applying
/// the model dozens of times along an inversion trajectory stays stable.
const RESIDUAL_WRITE_GAIN: f64 = 0.03;

/// Row-major Gaussian fill scaled by `gain / (sqrt(fan_in) + sqrt(fan_out))`.
/// The denominator puts the expected operator norm of the projection near
/// `gain`; plain `1/sqrt(fan_in)` lets the attention path amplify and
/// long trajectories blow up.
fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Matrix {
    let scale = gain / ((rows as f64).sqrt() + (cols as f64).sqrt());
    let data: Vec<f32> = (0..rows * cols)
        .map(|_| (gaussian(rng) * scale) as f32)
        .collect();
    Matrix::from_raw(rows, cols, data)
}

fn attn_shapes(cfg: &DenoiserConfig, kv_rows: usize) -> [(usize, usize); 4] {
    [
        (cfg.channels, cfg.attn_dim),
        (kv_rows, cfg.attn_dim),
        (kv_rows, cfg.attn_dim),
        (cfg.attn_dim, cfg.channels),
    ]
}

/// Draws a full parameter set from a ChaCha8 stream seeded by `cfg.seed`.
/// Matrices are filled in a fixed order (encoder, timestep projection,
/// then per block: ff1, ff2, self q/k/v/o, cross q/k/v/o); the decoder is
/// the pseudo-inverse of the encoder rather than a fresh draw. The same
/// config always regenerates bit-identical weights.
pub fn init_weights(cfg: &DenoiserConfig) -> Result<Weights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pixels = cfg.patch * cfg.patch * 3;
    let enc = init_matrix(&mut rng, pixels, cfg.channels, 1.0);
    let dec = pseudo_inverse(&enc)?;
    // The timestep projection writes straight into the stream; damp it
    // like the other residual writers.
    let time_proj = init_matrix(
        &mut rng,
        cfg.timestep_dim,
        cfg.channels,
        RESIDUAL_WRITE_GAIN,
    );
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for _ in 0..cfg.blocks {
        let ff1 = init_matrix(&mut rng, cfg.channels, 2 * cfg.channels, 1.0);
        let ff2 = init_matrix(
            &mut rng,
            2 * cfg.channels,
            cfg.channels,
            RESIDUAL_WRITE_GAIN,
        );
        let self_shapes = attn_shapes(cfg, cfg.channels);
        let cross_shapes = attn_shapes(cfg, cfg.prompt_dim);
        let self_attn = AttnWeights {
            wq: init_matrix(&mut rng, self_shapes[0].0, self_shapes[0].1, 1.0),
            wk: init_matrix(&mut rng, self_shapes[1].0, self_shapes[1].1, 1.0),
            wv: init_matrix(&mut rng, self_shapes[2].0, self_shapes[2].1, 1.0),
            wo: init_matrix(
                &mut rng,
                self_shapes[3].0,
                self_shapes[3].1,
                RESIDUAL_WRITE_GAIN,
            ),
        };
        let cross_attn = AttnWeights {
            wq: init_matrix(&mut rng, cross_shapes[0].0, cross_shapes[0].1, 1.0),
            wk: init_matrix(&mut rng, cross_shapes[1].0, cross_shapes[1].1, 1.0),
            wv: init_matrix(&mut rng, cross_shapes[2].0, cross_shapes[2].1, 1.0),
            wo: init_matrix(
                &mut rng,
                cross_shapes[3].0,
                cross_shapes[3].1,
                RESIDUAL_WRITE_GAIN,
            ),
        };
        blocks.push(BlockWeights {
            ff1,
            ff2,
            self_attn,
            cross_attn,
        });
    }
    Ok(Weights {
        channels: cfg.channels,
        attn_dim: cfg.attn_dim,
        prompt_dim: cfg.prompt_dim,
        timestep_dim: cfg.timestep_dim,
        patch: cfg.patch,
        enc,
        dec,
        time_proj,
        blocks,
    })
}

/// Seeded codec with an all-zero noise predictor: every forward pass
/// returns exactly zero, which makes DDIM trajectories closed-form.
pub fn zero_denoiser_weights(cfg: &DenoiserConfig) -> Result<Weights> {
    let mut w = init_weights(cfg)?;
    w.time_proj = Matrix::zeros(cfg.timestep_dim, cfg.channels);
    for blk in &mut w.blocks {
        blk.ff1 = Matrix::zeros(cfg.channels, 2 * cfg.channels);
        blk.ff2 = Matrix::zeros(2 * cfg.channels, cfg.channels);
        for attn in [&mut blk.self_attn, &mut blk.cross_attn] {
            attn.wq = Matrix::zeros(attn.wq.rows(), attn.wq.cols());
            attn.wk = Matrix::zeros(attn.wk.rows(), attn.wk.cols());
            attn.wv = Matrix::zeros(attn.wv.rows(), attn.wv.cols());
            attn.wo = Matrix::zeros(attn.wo.rows(), attn.wo.cols());
        }
    }
    Ok(w)
}

/// Moore-Penrose pseudo-inverse via the normal equations, solved in f64
/// with partial pivoting. Fine for the small projection matrices here.
fn pseudo_inverse(m: &Matrix) -> Result<Matrix> {
    let (rows, cols) = m.shape();
    let a: Vec<Vec<f64>> = (0..rows)
        .map(|i| (0..cols).map(|j| m.get(i, j) as f64).collect())
        .collect();
    let at: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| a[i][j]).collect())
        .collect();
    let mul = |x: &[Vec<f64>], y: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let (n, inner, p) = (x.len(), y.len(), y[0].len());
        let mut out = vec![vec![0.0; p]; n];
        for i in 0..n {
            for j in 0..p {
                let mut acc = 0.0;
                for k in 0..inner {
                    acc += x[i][k] * y[k][j];
                }
                out[i][j] = acc;
            }
        }
        out
    };
    // rows <= cols: pinv = m^T (m m^T)^-1 ; otherwise pinv = (m^T m)^-1 m^T.
    let pinv = if rows <= cols {
        let gram = mul(&a, &at);
        let inv = solve_linear(gram, identity_f64(rows))?;
        mul(&at, &inv)
    } else {
        let gram = mul(&at, &a);
        solve_linear(gram, at)?
    };
    let data: Vec<f32> = pinv.iter().flatten().map(|&v| v as f32).collect();
    Matrix::from_vec(cols, rows, data)
}

fn identity_f64(n: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; n]; n];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

/// Solves `A X = B` by Gauss-Jordan elimination with partial pivoting.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::Domain(
                "encoder projection is singular; cannot build decoder".into(),
            ));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        let diag = a[col][col];
        for v in a[col].iter_mut() {
            *v /= diag;
        }
        for v in b[col].iter_mut() {
            *v /= diag;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = a[row][col];
            if factor == 0.0 {
                continue;
            }
            for k in 0..n {
                let sub = factor * a[col][k];
                a[row][k] -= sub;
            }
            for k in 0..b[0].len() {
                let sub = factor * b[col][k];
                b[row][k] -= sub;
            }
        }
    }
    Ok(b)
}

/// Deterministic per-token prompt embedding.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    vectors: Matrix,
}

impl PromptEmbedding {
    pub fn tokens(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    /// Null condition used for the unconditional branch of guidance: a
    /// single all-zero token, so cross-attention contributes nothing.
    pub fn unconditional(prompt_dim: usize) -> PromptEmbedding {
        PromptEmbedding {
            vectors: Matrix::zeros(1, prompt_dim),
        }
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Whitespace-tokenizes the prompt and maps each token to a Gaussian
/// vector drawn from a ChaCha8 stream seeded with the FNV-1a hash of the
/// token bytes. The same token always yields the same vector.
pub fn embed_prompt(prompt: &str, prompt_dim: usize) -> Result<PromptEmbedding> {
    let tokens: Vec<&str> = prompt.split_whitespace().collect();
    if tokens.is_empty() {
        return Err(Error::Input("prompt is empty".into()));
    }
    let mut data = Vec::with_capacity(tokens.len() * prompt_dim);
    for token in &tokens {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(token.as_bytes()));
        for _ in 0..prompt_dim {
            data.push(gaussian(&mut rng) as f32);
        }
    }
    Ok(PromptEmbedding {
        vectors: Matrix::from_vec(tokens.len(), prompt_dim, data)?,
    })
}

/// Non-overlapping patchify followed by a linear projection per patch.
/// An all-zero image maps to an all-zero latent (no bias terms).
pub fn encode_image(img: &Tensor3, w: &Weights) -> Result<Tensor3> {
    let (h, wd, c) = img.shape();
    if c != 3 {
        return Err(Error::Shape(format!("image needs 3 channels, got {c}")));
    }
    let p = w.patch;
    if h % p != 0 || wd % p != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{wd} is not divisible by patch {p}"
        )));
    }
    let (lh, lw) = (h / p, wd / p);
    let pixels = p * p * 3;
    let mut out = vec![0.0f32; lh * lw * w.channels];
    for gi in 0..lh {
        for gj in 0..lw {
            for oc in 0..w.channels {
                let mut acc = 0.0f64;
                for pi in 0..p {
                    for pj in 0..p {
                        for ch in 0..3 {
                            let r = (pi * p + pj) * 3 + ch;
                            acc += img.get(gi * p + pi, gj * p + pj, ch) as f64
                                * w.enc.get(r, oc) as f64;
                        }
                    }
                }
                out[(gi * lw + gj) * w.channels + oc] = acc as f32;
            }
        }
    }
    debug_assert_eq!(w.enc.rows(), pixels);
    Tensor3::from_vec(lh, lw, w.channels, out)
}

/// Linear unpatchify with the decoder weights, clamped to `[0, 1]`.
pub fn decode_latent(z: &Tensor3, w: &Weights) -> Result<Tensor3> {
    let (lh, lw, c) = z.shape();
    if c != w.channels {
        return Err(Error::Shape(format!(
            "latent has {c} channels, decoder expects {}",
            w.channels
        )));
    }
    let p = w.patch;
    let mut out = vec![0.0f32; lh * p * lw * p * 3];
    for gi in 0..lh {
        for gj in 0..lw {
            for r in 0..p * p * 3 {
                let mut acc = 0.0f64;
                for ic in 0..c {
                    acc += z.get(gi, gj, ic) as f64 * w.dec.get(ic, r) as f64;
                }
                let (pi, pj, ch) = (r / (p * 3), (r / 3) % p, r % 3);
                let row = gi * p + pi;
                let col = gj * p + pj;
                out[(row * lw * p + col) * 3 + ch] = (acc.clamp(0.0, 1.0)) as f32;
            }
        }
    }
    Tensor3::from_vec(lh * p, lw * p, 3, out)
}

/// Per-block observation of a probed forward pass; test instrumentation
/// for substitution-scope checks.
#[derive(Debug, Clone)]
pub struct BlockProbe {
    pub layer: usize,
    pub q: Matrix,
    pub k_used: Matrix,
    pub v_used: Matrix,
    pub attn_map: Matrix,
    pub cross_k: Matrix,
    pub cross_v: Matrix,
}

/// Base angular rate of the timestep sinusoid. The fastest component
/// completes half a period over ~1024 training timesteps, so the
/// embedding varies smoothly across coarse inference grids instead of
/// decorrelating between adjacent grid points.
const TIMESTEP_SCALE: f64 = std::f64::consts::PI / 1024.0;

fn sinusoid(t_index: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut emb = vec![0.0f64; dim];
    for i in 0..half {
        let freq = TIMESTEP_SCALE * (10_000.0f64).powf(-(i as f64) / half as f64);
        let angle = t_index as f64 * freq;
        emb[i] = angle.sin();
        emb[half + i] = angle.cos();
    }
    emb
}

fn add_matrices(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.shape(), b.shape());
    let data: Vec<f32> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 + y as f64) as f32)
        .collect();
    Matrix::from_raw(a.rows(), a.cols(), data)
}

fn tanh_map(m: &Matrix) -> Matrix {
    let data: Vec<f32> = m.data().iter().map(|&v| (v as f64).tanh() as f32).collect();
    Matrix::from_raw(m.rows(), m.cols(), data)
}

/// Predicts the noise in `z_t` at training timestep `t_index` under
/// condition `c`. Hooks see the self-attention K/V of every block exactly
/// once, in layer order; cross-attention K/V come from the prompt alone
/// and never pass through the hooks.
pub fn forward(
    z_t: &Tensor3,
    t_index: usize,
    c: &PromptEmbedding,
    w: &Weights,
    hooks: &mut HookSet,
) -> Result<Tensor3> {
    forward_impl(z_t, t_index, c, w, hooks, None)
}

/// [`forward`] plus per-block probes; used by instrumentation tests.
pub fn forward_probed(
    z_t: &Tensor3,
    t_index: usize,
    c: &PromptEmbedding,
    w: &Weights,
    hooks: &mut HookSet,
    probes: &mut Vec<BlockProbe>,
) -> Result<Tensor3> {
    forward_impl(z_t, t_index, c, w, hooks, Some(probes))
}

fn forward_impl(
    z_t: &Tensor3,
    t_index: usize,
    c: &PromptEmbedding,
    w: &Weights,
    hooks: &mut HookSet,
    mut probes: Option<&mut Vec<BlockProbe>>,
) -> Result<Tensor3> {
    let (h, wd, ch) = z_t.shape();
    if ch != w.channels {
        return Err(Error::Shape(format!(
            "latent has {ch} channels, model expects {}",
            w.channels
        )));
    }
    if c.dim() != w.prompt_dim {
        return Err(Error::Shape(format!(
            "prompt embedding dim {} does not match model prompt_dim {}",
            c.dim(),
            w.prompt_dim
        )));
    }

    let input_tokens = z_t.to_matrix();
    let mut tokens = input_tokens.clone();

    // Timestep conditioning: sinusoid projected to the channel width,
    // added to every token.
    let emb = sinusoid(t_index, w.timestep_dim);
    let mut trow = vec![0.0f32; w.channels];
    for (j, t) in trow.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for (i, &e) in emb.iter().enumerate() {
            acc += e * w.time_proj.get(i, j) as f64;
        }
        *t = acc as f32;
    }
    let data: Vec<f32> = tokens
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| (v as f64 + trow[idx % w.channels] as f64) as f32)
        .collect();
    tokens = Matrix::from_raw(tokens.rows(), tokens.cols(), data);

    for (layer, blk) in w.blocks.iter().enumerate() {
        // Residual feed-forward.
        let hidden = tanh_map(&matmul(&tokens, &blk.ff1)?);
        tokens = add_matrices(&tokens, &matmul(&hidden, &blk.ff2)?);

        // Residual self-attention; K/V pass through the hooks.
        let q = matmul(&tokens, &blk.self_attn.wq)?;
        let k = matmul(&tokens, &blk.self_attn.wk)?;
        let v = matmul(&tokens, &blk.self_attn.wv)?;
        let step = hooks.step();
        let (k_used, v_used) = hooks.on_self_attention(step, layer, &k, &v)?;
        if k_used.shape() != k.shape() || v_used.shape() != v.shape() {
            return Err(Error::Injection(format!(
                "hook returned K/V shapes {:?}/{:?}, expected {:?}/{:?}",
                k_used.shape(),
                v_used.shape(),
                k.shape(),
                v.shape()
            )));
        }
        let (attn_out, attn_map) = attention(&q, &k_used, &v_used, w.attn_dim)?;
        hooks.record_map(layer, &attn_map);
        tokens = add_matrices(&tokens, &matmul(&attn_out, &blk.self_attn.wo)?);

        // Residual cross-attention: queries from tokens, keys/values from
        // the prompt embedding only.
        let xq = matmul(&tokens, &blk.cross_attn.wq)?;
        let xk = matmul(c.vectors(), &blk.cross_attn.wk)?;
        let xv = matmul(c.vectors(), &blk.cross_attn.wv)?;
        let (xout, _) = attention(&xq, &xk, &xv, w.attn_dim)?;
        if let Some(list) = probes.as_deref_mut() {
            list.push(BlockProbe {
                layer,
                q: q.clone(),
                k_used: k_used.clone(),
                v_used: v_used.clone(),
                attn_map: attn_map.clone(),
                cross_k: xk.clone(),
                cross_v: xv.clone(),
            });
        }
        tokens = add_matrices(&tokens, &matmul(&xout, &blk.cross_attn.wo)?);
    }

    // The prediction is the stream update; with all-zero parameters every
    // sublayer (and the timestep term) contributes nothing, so the
    // predicted noise is exactly zero.
    let data: Vec<f32> = tokens
        .data()
        .iter()
        .zip(input_tokens.data())
        .map(|(&out, &inp)| (out as f64 - inp as f64) as f32)
        .collect();
    Tensor3::from_matrix(&Matrix::from_raw(tokens.rows(), tokens.cols(), data), h, wd)
}

const TENSOR_ENC: &str = "enc";
const TENSOR_DEC: &str = "dec";
const TENSOR_TIME: &str = "time_proj";

fn mat_tensor(name: String, m: &Matrix) -> NamedTensor {
    NamedTensor {
        name,
        dims: vec![m.rows() as u32, m.cols() as u32],
        data: m.data().to_vec(),
    }
}

/// Serializes the parameter set into the tensor container. `save` then
/// `load` is bit-identical.
pub fn save_weights(w: &Weights, path: &Path) -> Result<()> {
    let mut tensors = vec![
        mat_tensor(TENSOR_ENC.into(), &w.enc),
        mat_tensor(TENSOR_DEC.into(), &w.dec),
        mat_tensor(TENSOR_TIME.into(), &w.time_proj),
    ];
    for (i, blk) in w.blocks.iter().enumerate() {
        tensors.push(mat_tensor(format!("blk{i}.ff1"), &blk.ff1));
        tensors.push(mat_tensor(format!("blk{i}.ff2"), &blk.ff2));
        for (tag, attn) in [("self", &blk.self_attn), ("cross", &blk.cross_attn)] {
            tensors.push(mat_tensor(format!("blk{i}.{tag}.wq"), &attn.wq));
            tensors.push(mat_tensor(format!("blk{i}.{tag}.wk"), &attn.wk));
            tensors.push(mat_tensor(format!("blk{i}.{tag}.wv"), &attn.wv));
            tensors.push(mat_tensor(format!("blk{i}.{tag}.wo"), &attn.wo));
        }
    }
    container::write_tensors(path, &tensors)
}

fn take_matrix(
    map: &mut std::collections::HashMap<String, NamedTensor>,
    name: &str,
) -> Result<Matrix> {
    let t = map
        .remove(name)
        .ok_or_else(|| Error::Format(format!("weights file is missing tensor '{name}'")))?;
    if t.dims.len() != 2 {
        return Err(Error::Format(format!(
            "tensor '{name}' has rank {}, expected 2",
            t.dims.len()
        )));
    }
    Matrix::from_vec(t.dims[0] as usize, t.dims[1] as usize, t.data)
        .map_err(|e| Error::Format(format!("tensor '{name}': {e}")))
}

fn expect_shape(name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Format(format!(
            "tensor '{name}' has shape {:?}, expected ({rows}, {cols})",
            m.shape()
        )));
    }
    Ok(())
}

/// Loads weights, reconstructing the model geometry from tensor shapes.
pub fn load_weights(path: &Path) -> Result<Weights> {
    let tensors = container::read_tensors(path)?;
    let mut map: std::collections::HashMap<String, NamedTensor> = tensors
        .into_iter()
        .map(|t| (t.name.clone(), t))
        .collect();

    let enc = take_matrix(&mut map, TENSOR_ENC)?;
    if enc.rows() % 3 != 0 {
        return Err(Error::Format(format!(
            "encoder rows {} are not a multiple of 3",
            enc.rows()
        )));
    }
    let per_patch = enc.rows() / 3;
    let patch = (per_patch as f64).sqrt().round() as usize;
    if patch * patch != per_patch || patch == 0 {
        return Err(Error::Format(format!(
            "encoder rows {} do not describe a square patch",
            enc.rows()
        )));
    }
    let channels = enc.cols();
    let dec = take_matrix(&mut map, TENSOR_DEC)?;
    expect_shape(TENSOR_DEC, &dec, channels, enc.rows())?;
    let time_proj = take_matrix(&mut map, TENSOR_TIME)?;
    expect_shape(TENSOR_TIME, &time_proj, time_proj.rows(), channels)?;
    let timestep_dim = time_proj.rows();
    if timestep_dim % 2 != 0 {
        return Err(Error::Format(format!(
            "timestep embedding width {timestep_dim} is odd"
        )));
    }

    let mut blocks = Vec::new();
    let mut attn_dim = 0usize;
    let mut prompt_dim = 0usize;
    for i in 0.. {
        let ff1_name = format!("blk{i}.ff1");
        if !map.contains_key(&ff1_name) {
            break;
        }
        let ff1 = take_matrix(&mut map, &ff1_name)?;
        expect_shape(&ff1_name, &ff1, channels, 2 * channels)?;
        let ff2 = take_matrix(&mut map, &format!("blk{i}.ff2"))?;
        expect_shape(&format!("blk{i}.ff2"), &ff2, 2 * channels, channels)?;

        let swq = take_matrix(&mut map, &format!("blk{i}.self.wq"))?;
        if i == 0 {
            attn_dim = swq.cols();
        }
        expect_shape(&format!("blk{i}.self.wq"), &swq, channels, attn_dim)?;
        let swk = take_matrix(&mut map, &format!("blk{i}.self.wk"))?;
        expect_shape(&format!("blk{i}.self.wk"), &swk, channels, attn_dim)?;
        let swv = take_matrix(&mut map, &format!("blk{i}.self.wv"))?;
        expect_shape(&format!("blk{i}.self.wv"), &swv, channels, attn_dim)?;
        let swo = take_matrix(&mut map, &format!("blk{i}.self.wo"))?;
        expect_shape(&format!("blk{i}.self.wo"), &swo, attn_dim, channels)?;

        let xwq = take_matrix(&mut map, &format!("blk{i}.cross.wq"))?;
        expect_shape(&format!("blk{i}.cross.wq"), &xwq, channels, attn_dim)?;
        let xwk = take_matrix(&mut map, &format!("blk{i}.cross.wk"))?;
        if i == 0 {
            prompt_dim = xwk.rows();
        }
        expect_shape(&format!("blk{i}.cross.wk"), &xwk, prompt_dim, attn_dim)?;
        let xwv = take_matrix(&mut map, &format!("blk{i}.cross.wv"))?;
        expect_shape(&format!("blk{i}.cross.wv"), &xwv, prompt_dim, attn_dim)?;
        let xwo = take_matrix(&mut map, &format!("blk{i}.cross.wo"))?;
        expect_shape(&format!("blk{i}.cross.wo"), &xwo, attn_dim, channels)?;

        blocks.push(BlockWeights {
            ff1,
            ff2,
            self_attn: AttnWeights {
                wq: swq,
                wk: swk,
                wv: swv,
                wo: swo,
            },
            cross_attn: AttnWeights {
                wq: xwq,
                wk: xwk,
                wv: xwv,
                wo: xwo,
            },
        });
    }
    if blocks.is_empty() {
        return Err(Error::Format("weights file has no blocks".into()));
    }
    if let Some(name) = map.keys().next() {
        return Err(Error::Format(format!(
            "weights file has unexpected tensor '{name}'"
        )));
    }
    Ok(Weights {
        channels,
        attn_dim,
        prompt_dim,
        timestep_dim,
        patch,
        enc,
        dec,
        time_proj,
        blocks,
    })
}

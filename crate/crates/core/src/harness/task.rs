// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic captioning task with exact hallucination labels.
//!
//! Each prompt shows `m` objects drawn from a vocabulary of `V_obj`. The
//! decoder is built by hand so that it lists objects it attends to in the
//! image, with a constant logit preference for a "popular" subset. A
//! positional drift grows with the decode step and shrinks the component
//! that grounding queries read, so grounding decays and the popular prior
//! takes over late in the caption. An emitted object token is hallucinated
//! iff it is not in the prompt's object set.
//!
//! Residual-stream layout. All directions are orthonormal and zero-mean,
//! so the layer norm acts as a pure rescaling on them.
//!
//! - `e_o` per object: object identity, carried by image embeddings.
//! - `e'_o` per object: retrieved identity, written by grounding heads and
//!   read by the output head.
//! - `u`: image tag, carried by image embeddings only.
//! - `s`: grounding marker, carried by every token embedding and read by
//!   grounding queries. After the prompt the positional table subtracts a
//!   growing multiple of `s`.
//! - `r`: text marker, carried by every token embedding and read by the
//!   history head.
//! - `b`: attention sink, carried by BOS.
//! - `f_o` per object: "already said" marker. The markers live in the
//!   remaining subspace as a near-tight frame plus a shared component `z`.
//!
//! Image embeddings are `image_scale` times `u` plus `e_o`, so what the
//! grounding heads write at image positions barely moves them.
//!
//! Layer 0 sums the `f` content of all text positions into the residual
//! (a running memory of what was said), and the output head subtracts it.
//! In each grounding layer, head `h` owns the objects `o ≡ h (mod H)`.
//! Its query reads `s`, its keys read `u` and `e`, and its values copy `e_o`
//! into `e'_o`. EOS reads `z`, which grows with every object said, and
//! `-s`, which grows with the drift.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_model, ModelConfig, ModelWeights, Prompt};
use crate::numeric::{norm, Matrix, Rng};

/// Token ids of the synthetic vocabulary.
pub const EOS: u32 = 0;
pub const BOS: u32 = 1;
pub const DESCRIBE: u32 = 2;
/// First object token id.
pub const OBJECT_BASE: u32 = 3;

/// Residual width of [`TaskConfig::model_config`].
pub const TASK_D_MODEL: usize = 96;

/// Task parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// Object vocabulary size `V_obj`.
    pub n_objects: usize,
    /// Objects per image `m`.
    pub objects_per_image: usize,
    /// Size of the popular subset `P`.
    pub n_popular: usize,
    /// Constant logit added to popular objects.
    pub prior_bias: f64,
    /// Drift added per decode step along the drift direction.
    pub drift_rate: f64,
    /// Layers whose heads read the image; normally the steered layers.
    pub grounding_layers: Vec<usize>,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_objects: 32,
            objects_per_image: 8,
            n_popular: 6,
            prior_bias: 3.0,
            drift_rate: 0.06,
            grounding_layers: vec![2, 3, 4],
            seed: 7,
        }
    }
}

/// Gains of the hand-built circuit.
///
/// The defaults are the tuned operating point of the task; the behaviour
/// the harness checks depends on them jointly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Circuit {
    pub grounding_marker: f64,
    pub text_marker: f64,
    pub said_marker: f64,
    /// Pairwise overlap shared by all said markers.
    pub said_overlap: f64,
    pub image_tag: f64,
    pub image_tag_spread: f64,
    pub query_grounding: f64,
    pub key_grounding: f64,
    pub query_identity: f64,
    pub value_gain: f64,
    pub history_gain: f64,
    pub history_focus: f64,
    pub bos_sink: f64,
    pub history_image_penalty: f64,
    pub readout: f64,
    pub said_penalty: f64,
    pub eos_readout: f64,
    pub eos_bias: f64,
    /// EOS gain on the missing grounding marker, so long captions end.
    pub eos_drift: f64,
    pub jitter: f64,
    pub weight_noise: f64,
    /// Overall scale of image embeddings, large so that what grounding
    /// heads write at image positions barely moves them.
    pub image_scale: f64,
}

impl Default for Circuit {
    fn default() -> Self {
        Self {
            grounding_marker: 1.0,
            text_marker: 3.0,
            said_marker: 1.0,
            said_overlap: 0.05,
            image_tag: 1.0,
            image_tag_spread: 0.5,
            query_grounding: 1.0,
            key_grounding: 1.0,
            query_identity: 0.0,
            value_gain: 1.5,
            history_gain: 20.0,
            history_focus: 0.5,
            bos_sink: 2.0,
            history_image_penalty: 3.0,
            readout: 2.0,
            said_penalty: 10.0,
            eos_readout: 1.0,
            eos_bias: -2.0,
            eos_drift: 6.0,
            jitter: 0.05,
            weight_noise: 0.02,
            image_scale: 30.0,
        }
    }
}

/// One task prompt and its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrompt {
    pub index: usize,
    pub prompt: Prompt,
    /// Object token ids present in the image, ascending.
    pub objects: Vec<u32>,
}

/// Generated task: vocabulary layout, popular set and prompt generator.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub circuit: Circuit,
    /// Popular object token ids, ascending.
    pub popular: Vec<u32>,
    object_dirs: Vec<Vec<f64>>,
    image_tag: Vec<f64>,
    d_model: usize,
}

/// Orthonormal vectors spanning part of the zero-mean subspace of `R^d`.
fn zero_mean_basis(d: usize, count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        let mean = v.iter().sum::<f64>() / d as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        orthogonalize(&mut v, &basis);
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    // Two passes for numerical orthogonality.
    for _ in 0..2 {
        for b in basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
}

/// `count` unit vectors in the span of `span`, as close to orthogonal as the
/// dimension allows: rows of a random matrix with orthonormal columns.
fn frame(span: &[Vec<f64>], count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let k = span.len();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut c: Vec<f64> = (0..count).map(|_| rng.gaussian()).collect();
        orthogonalize(&mut c, &cols);
        let n = norm(&c);
        if n > 1e-6 {
            c.iter_mut().for_each(|x| *x /= n);
            cols.push(c);
        }
    }
    (0..count)
        .map(|i| {
            let mut v = vec![0.0; span[0].len()];
            for (col, dir) in cols.iter().zip(span) {
                add_scaled(&mut v, dir, col[i]);
            }
            let n = norm(&v);
            v.iter_mut().for_each(|x| *x /= n);
            v
        })
        .collect()
}

fn add_scaled(dst: &mut [f64], src: &[f64], k: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += k * s);
}

fn add_column(m: &mut Matrix, col: usize, dir: &[f64], k: f64) {
    for (r, v) in dir.iter().enumerate() {
        let cur = m.get(r, col);
        m.set(r, col, cur + k * v);
    }
}

impl TaskConfig {
    /// Vocabulary size implied by this config.
    #[must_use]
    pub fn vocab_size(&self) -> usize {
        self.n_objects + OBJECT_BASE as usize
    }

    /// Image embeddings plus `[BOS, DESCRIBE]`.
    #[must_use]
    pub fn prompt_len(&self) -> usize {
        self.objects_per_image + 2
    }

    /// Model dimensions for this task: the default toy scale with a matching
    /// vocabulary and room for a full-length continuation.
    #[must_use]
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size(),
            max_seq: self.prompt_len() + crate::model::DEFAULT_MAX_NEW,
            d_model: TASK_D_MODEL,
            d_head: TASK_D_MODEL / ModelConfig::default().n_heads,
            seed: self.seed,
            eos_token: Some(EOS),
            ..ModelConfig::default()
        }
    }

    /// # Errors
    ///
    /// [`Error::Config`] for inconsistent sizes.
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        model.validate()?;
        if self.objects_per_image == 0 || self.objects_per_image > self.n_objects {
            return Err(Error::Config(format!(
                "objects_per_image {} must be in 1..={}",
                self.objects_per_image, self.n_objects
            )));
        }
        if self.n_popular > self.n_objects {
            return Err(Error::Config("n_popular exceeds n_objects".into()));
        }
        if model.vocab_size != self.vocab_size() {
            return Err(Error::Config(format!(
                "model vocab_size {} != task vocabulary {}",
                model.vocab_size,
                self.vocab_size()
            )));
        }
        let group = self.n_objects.div_ceil(model.n_heads);
        if model.d_head < group + 1 {
            return Err(Error::Config(format!(
                "d_head {} too small for {group} objects per head",
                model.d_head
            )));
        }
        // Object and retrieved directions, three markers, the shared and sink
        // directions, and at least 4 dims for the said markers.
        if 2 * self.n_objects + 3 + 2 + 4 > model.d_model - 1 {
            return Err(Error::Config(format!(
                "d_model {} too small for {} objects",
                model.d_model, self.n_objects
            )));
        }
        if self.prompt_len() + 1 > model.max_seq {
            return Err(Error::Config("max_seq shorter than the prompt".into()));
        }
        if self.grounding_layers.is_empty() {
            return Err(Error::Config("grounding_layers is empty".into()));
        }
        if let Some(&l) = self.grounding_layers.iter().find(|&&l| l >= model.n_layers) {
            return Err(Error::Config(format!("grounding layer {l} outside model")));
        }
        if self.grounding_layers.contains(&0) {
            return Err(Error::Config("layer 0 is reserved for the history head".into()));
        }
        if !self.drift_rate.is_finite() || !self.prior_bias.is_finite() || self.drift_rate < 0.0 {
            return Err(Error::Config(
                "prior_bias must be finite and drift_rate finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Build the task and its hand-wired decoder weights with the default circuit.
///
/// # Errors
///
/// [`Error::Config`] when the sizes are inconsistent with each other or the model.
pub fn build_synthetic_task(
    model: &ModelConfig,
    config: &TaskConfig,
) -> Result<(SyntheticTask, ModelWeights)> {
    build_with_circuit(model, config, &Circuit::default())
}

/// [`build_synthetic_task`] with explicit circuit gains.
///
/// # Errors
///
/// As [`build_synthetic_task`].
pub fn build_with_circuit(
    model: &ModelConfig,
    config: &TaskConfig,
    c: &Circuit,
) -> Result<(SyntheticTask, ModelWeights)> {
    config.validate(model)?;
    let d = model.d_model;
    let heads = model.n_heads;
    let dh = model.d_head;
    let n_obj = config.n_objects;
    let mut rng = Rng::new(config.seed ^ 0x5eed_7a5c);

    let basis = zero_mean_basis(d, d - 1, &mut rng);
    let object_dirs: Vec<Vec<f64>> = basis[..n_obj].to_vec();
    let retrieved_dirs: Vec<Vec<f64>> = basis[n_obj..2 * n_obj].to_vec();
    let image_tag = basis[2 * n_obj].clone();
    let grounding_marker = basis[2 * n_obj + 1].clone();
    let text_marker = basis[2 * n_obj + 2].clone();
    let rest: Vec<Vec<f64>> = basis[2 * n_obj + 3..].to_vec();
    // A shared component keeps every pairwise overlap positive, so saying
    // one object never raises another object's logit.
    let shared = rest[0].clone();
    let sink = rest[1].clone();
    let memory: Vec<Vec<f64>> = std::iter::once(shared.clone())
        .chain(rest[2..].iter().cloned())
        .collect();
    let said_dirs: Vec<Vec<f64>> = frame(&rest[2..], n_obj, &mut rng)
        .into_iter()
        .map(|v| {
            let mut f: Vec<f64> = v.iter().map(|x| x * (1.0 - c.said_overlap).sqrt()).collect();
            add_scaled(&mut f, &shared, c.said_overlap.sqrt());
            f
        })
        .collect();

    let mut popular: Vec<u32> = (0..n_obj as u32).collect();
    rng.shuffle(&mut popular);
    popular.truncate(config.n_popular);
    popular.iter_mut().for_each(|p| *p += OBJECT_BASE);
    popular.sort_unstable();

    let mut w = init_model(model)?;
    // init_model draws N(0, 1/d); shrink everything to a faint background.
    let shrink = c.weight_noise;
    let scale = |m: &mut Matrix| m.as_mut_slice().iter_mut().for_each(|v| *v *= shrink);
    for layer in &mut w.layers {
        layer
            .w_q
            .iter_mut()
            .chain(layer.w_k.iter_mut())
            .chain(layer.w_v.iter_mut())
            .for_each(&scale);
        scale(&mut layer.w_o);
        scale(&mut layer.ffn_in);
        scale(&mut layer.ffn_out);
    }
    scale(&mut w.lm_head);

    for t in 0..config.vocab_size() {
        let row = w.embeddings.row_mut(t);
        row.fill(0.0);
        add_scaled(row, &grounding_marker, c.grounding_marker);
        add_scaled(row, &text_marker, c.text_marker);
        if t >= OBJECT_BASE as usize {
            add_scaled(row, &said_dirs[t - OBJECT_BASE as usize], c.said_marker);
        }
        if t == BOS as usize {
            add_scaled(row, &sink, 1.0);
        }
    }

    // Nothing inside the prompt; from the first decode step on, the
    // grounding marker shrinks linearly.
    let onset = config.prompt_len() - 1;
    for p in 0..model.max_seq {
        let row = w.positions.row_mut(p);
        row.fill(0.0);
        add_scaled(
            row,
            &grounding_marker,
            -config.drift_rate * p.saturating_sub(onset) as f64,
        );
    }

    let slot = |o: usize| (o % heads, o / heads);

    // Layer 0: every head sums said markers over text positions. Keys on the
    // sink `b` give BOS a fixed share of the attention.
    {
        let l0 = &mut w.layers[0];
        // The memory gain would amplify background noise in this path.
        l0.w_v.iter_mut().for_each(|m| m.as_mut_slice().fill(0.0));
        l0.w_o.as_mut_slice().fill(0.0);
        let per_head = memory.len().div_ceil(heads);
        for h in 0..heads {
            add_scaled(l0.w_q[h].row_mut(0), &text_marker, c.history_focus);
            add_scaled(l0.w_k[h].row_mut(0), &text_marker, c.history_focus);
            add_scaled(l0.w_k[h].row_mut(0), &sink, c.bos_sink);
            add_scaled(l0.w_k[h].row_mut(0), &image_tag, -c.history_image_penalty);
        }
        for (k, dir) in memory.iter().enumerate() {
            let (h, i) = (k / per_head, k % per_head);
            add_scaled(l0.w_v[h].row_mut(i), dir, 1.0);
            add_column(&mut l0.w_o, h * dh + i, dir, c.history_gain);
        }
    }

    for &l in &config.grounding_layers {
        let layer = &mut w.layers[l];
        for h in 0..heads {
            add_scaled(layer.w_q[h].row_mut(0), &grounding_marker, c.query_grounding);
            add_scaled(layer.w_k[h].row_mut(0), &image_tag, c.key_grounding);
        }
        for (o, dir) in object_dirs.iter().enumerate() {
            let (h, i) = slot(o);
            let out = &retrieved_dirs[o];
            add_scaled(layer.w_q[h].row_mut(1 + i), out, c.query_identity);
            add_scaled(layer.w_k[h].row_mut(1 + i), dir, 1.0);
            add_scaled(layer.w_v[h].row_mut(i), dir, 1.0);
            add_column(&mut layer.w_o, h * dh + i, out, c.value_gain);
        }
    }

    for o in 0..n_obj {
        let row = w.lm_head.row_mut(o + OBJECT_BASE as usize);
        add_scaled(row, &retrieved_dirs[o], c.readout);
        add_scaled(row, &said_dirs[o], -c.said_penalty);
    }
    // EOS reads the shared said component, which grows with every object said.
    add_scaled(w.lm_head.row_mut(EOS as usize), &shared, c.eos_readout);
    add_scaled(w.lm_head.row_mut(EOS as usize), &grounding_marker, -c.eos_drift);
    for (t, b) in w.logit_bias.iter_mut().enumerate() {
        *b = match t as u32 {
            EOS => c.eos_bias,
            t if t < OBJECT_BASE => -20.0,
            _ => 0.0,
        };
    }
    for &p in &popular {
        w.logit_bias[p as usize] = config.prior_bias;
    }
    w.validate()?;

    let task = SyntheticTask {
        config: config.clone(),
        circuit: *c,
        popular,
        object_dirs,
        image_tag,
        d_model: d,
    };
    Ok((task, w))
}

impl SyntheticTask {
    /// Prompt `index`: `m` distinct objects and their image embeddings.
    ///
    /// Deterministic in `(task seed, index)`.
    #[must_use]
    pub fn prompt(&self, index: usize) -> TaskPrompt {
        let c = &self.circuit;
        let cfg = &self.config;
        let mut rng = Rng::new(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index as u64);
        let mut pool: Vec<usize> = (0..cfg.n_objects).collect();
        rng.shuffle(&mut pool);
        pool.truncate(cfg.objects_per_image);

        // Some images hold attention better than others.
        let strength = c.image_tag * (1.0 + c.image_tag_spread * (2.0 * rng.uniform() - 1.0));
        let images = pool
            .iter()
            .map(|&o| {
                let mut v = vec![0.0; self.d_model];
                add_scaled(&mut v, &self.image_tag, c.image_scale * strength);
                add_scaled(
                    &mut v,
                    &self.object_dirs[o],
                    c.image_scale * (1.0 + c.jitter * rng.gaussian()),
                );
                v
            })
            .collect();
        let mut objects: Vec<u32> = pool.iter().map(|&o| o as u32 + OBJECT_BASE).collect();
        objects.sort_unstable();
        TaskPrompt {
            index,
            prompt: Prompt {
                images,
                tokens: vec![BOS, DESCRIBE],
            },
            objects,
        }
    }

    /// Whether `token` names an object.
    #[must_use]
    pub fn is_object(&self, token: u32) -> bool {
        token >= OBJECT_BASE && ((token - OBJECT_BASE) as usize) < self.config.n_objects
    }
}

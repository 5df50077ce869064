//! Reference polyphonic detection network: two small convolutions over the
//! log-mel grid, a unidirectional GRU over time, and a per-frame sigmoid
//! readout. Includes training, binarization, and checkpoint persistence.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::diffgraph::{adam_step, AdamState, GraphError, NodeId, Tape, Tensor};
use crate::features::{FeatureError, LogMelSpectrogram};

pub const NUM_CLASSES: usize = 4;
pub const N_MELS: usize = 40;
pub const CONV_CHANNELS: usize = 16;
pub const GRU_HIDDEN: usize = 32;
/// Conv stack output per frame: channels × (mels / 4).
pub const FRAME_FEATURES: usize = CONV_CHANNELS * (N_MELS / 4);

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint {path} does not start with the expected magic")]
    BadMagic { path: String },
    #[error("checkpoint holds unknown parameter {name:?}")]
    UnknownParam { name: String },
    #[error("checkpoint is missing parameter {name:?}")]
    MissingParam { name: String },
    #[error("parameter {name:?} has shape {got:?}, architecture expects {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint payload truncated: expected {expected} bytes, got {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("malformed checkpoint manifest line {line:?}")]
    MalformedManifest { line: String },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("mel input has {got} mel bands, architecture expects {expected}")]
    MelWidth { expected: usize, got: usize },
    #[error("labels are {got:?}, expected {expected:?} to match the mel frames")]
    LabelShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Frame-level event probabilities, clamped to [1e−7, 1−1e−7].
#[derive(Debug, Clone, PartialEq)]
pub struct EventPosteriors {
    probs: Vec<f64>,
    t: usize,
    c: usize,
}

impl EventPosteriors {
    pub fn from_probs(probs: Vec<f64>, t: usize, c: usize) -> Self {
        assert_eq!(probs.len(), t * c);
        let probs = probs
            .into_iter()
            .map(|p| p.clamp(1e-7, 1.0 - 1e-7))
            .collect();
        Self { probs, t, c }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_frames(&self) -> usize {
        self.t
    }

    pub fn num_classes(&self) -> usize {
        self.c
    }

    pub fn at(&self, t: usize, c: usize) -> f64 {
        self.probs[t * self.c + c]
    }
}

/// T×C binary activation grid; used both for model output and scene labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivityGrid {
    active: Vec<bool>,
    t: usize,
    c: usize,
}

impl ActivityGrid {
    pub fn new(active: Vec<bool>, t: usize, c: usize) -> Self {
        assert_eq!(active.len(), t * c);
        Self { active, t, c }
    }

    pub fn zeros(t: usize, c: usize) -> Self {
        Self {
            active: vec![false; t * c],
            t,
            c,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.t
    }

    pub fn num_classes(&self) -> usize {
        self.c
    }

    pub fn at(&self, t: usize, c: usize) -> bool {
        self.active[t * self.c + c]
    }

    pub fn set(&mut self, t: usize, c: usize, v: bool) {
        self.active[t * self.c + c] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.active
    }

    pub fn count_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Strict threshold at 0.5: active iff p > 0.5.
pub fn binarize(p: &EventPosteriors) -> ActivityGrid {
    ActivityGrid {
        active: p.probs.iter().map(|&v| v > 0.5).collect(),
        t: p.t,
        c: p.c,
    }
}

/// All learnable tensors, in the fixed order used by checkpoints and the
/// optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub gru_w_update: Tensor,
    pub gru_u_update: Tensor,
    pub gru_b_update: Tensor,
    pub gru_w_reset: Tensor,
    pub gru_u_reset: Tensor,
    pub gru_b_reset: Tensor,
    pub gru_w_cand: Tensor,
    pub gru_u_cand: Tensor,
    pub gru_b_cand: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

/// (name, shape) of every parameter, in checkpoint order.
pub fn parameter_spec() -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("conv1.weight", vec![CONV_CHANNELS, 1, 3, 3]),
        ("conv1.bias", vec![CONV_CHANNELS]),
        ("conv2.weight", vec![CONV_CHANNELS, CONV_CHANNELS, 3, 3]),
        ("conv2.bias", vec![CONV_CHANNELS]),
        ("gru.w_update", vec![FRAME_FEATURES, GRU_HIDDEN]),
        ("gru.u_update", vec![GRU_HIDDEN, GRU_HIDDEN]),
        ("gru.b_update", vec![1, GRU_HIDDEN]),
        ("gru.w_reset", vec![FRAME_FEATURES, GRU_HIDDEN]),
        ("gru.u_reset", vec![GRU_HIDDEN, GRU_HIDDEN]),
        ("gru.b_reset", vec![1, GRU_HIDDEN]),
        ("gru.w_cand", vec![FRAME_FEATURES, GRU_HIDDEN]),
        ("gru.u_cand", vec![GRU_HIDDEN, GRU_HIDDEN]),
        ("gru.b_cand", vec![1, GRU_HIDDEN]),
        ("readout.weight", vec![GRU_HIDDEN, NUM_CLASSES]),
        ("readout.bias", vec![1, NUM_CLASSES]),
    ]
}

impl ModelParams {
    pub fn zeros() -> Self {
        let mut it = parameter_spec().into_iter().map(|(_, s)| Tensor::zeros(s));
        Self {
            conv1_w: it.next().unwrap(),
            conv1_b: it.next().unwrap(),
            conv2_w: it.next().unwrap(),
            conv2_b: it.next().unwrap(),
            gru_w_update: it.next().unwrap(),
            gru_u_update: it.next().unwrap(),
            gru_b_update: it.next().unwrap(),
            gru_w_reset: it.next().unwrap(),
            gru_u_reset: it.next().unwrap(),
            gru_b_reset: it.next().unwrap(),
            gru_w_cand: it.next().unwrap(),
            gru_u_cand: it.next().unwrap(),
            gru_b_cand: it.next().unwrap(),
            out_w: it.next().unwrap(),
            out_b: it.next().unwrap(),
        }
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) weights; conv biases start at +0.1 so
    /// no channel is born dead, other biases at zero. Deterministic per seed.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros();
        for (name, tensor) in params.named_mut() {
            if name.starts_with("conv") && name.ends_with("bias") {
                tensor.values_mut().fill(0.1);
                continue;
            }
            if name.ends_with("bias") || name.contains(".b_") {
                continue;
            }
            let shape = tensor.shape().to_vec();
            let fan_in: usize = match shape.len() {
                4 => shape[1] * shape[2] * shape[3],
                2 => shape[0],
                _ => shape.iter().product(),
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in tensor.values_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        params
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("conv1.weight", &self.conv1_w),
            ("conv1.bias", &self.conv1_b),
            ("conv2.weight", &self.conv2_w),
            ("conv2.bias", &self.conv2_b),
            ("gru.w_update", &self.gru_w_update),
            ("gru.u_update", &self.gru_u_update),
            ("gru.b_update", &self.gru_b_update),
            ("gru.w_reset", &self.gru_w_reset),
            ("gru.u_reset", &self.gru_u_reset),
            ("gru.b_reset", &self.gru_b_reset),
            ("gru.w_cand", &self.gru_w_cand),
            ("gru.u_cand", &self.gru_u_cand),
            ("gru.b_cand", &self.gru_b_cand),
            ("readout.weight", &self.out_w),
            ("readout.bias", &self.out_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("conv1.weight", &mut self.conv1_w),
            ("conv1.bias", &mut self.conv1_b),
            ("conv2.weight", &mut self.conv2_w),
            ("conv2.bias", &mut self.conv2_b),
            ("gru.w_update", &mut self.gru_w_update),
            ("gru.u_update", &mut self.gru_u_update),
            ("gru.b_update", &mut self.gru_b_update),
            ("gru.w_reset", &mut self.gru_w_reset),
            ("gru.u_reset", &mut self.gru_u_reset),
            ("gru.b_reset", &mut self.gru_b_reset),
            ("gru.w_cand", &mut self.gru_w_cand),
            ("gru.u_cand", &mut self.gru_u_cand),
            ("gru.b_cand", &mut self.gru_b_cand),
            ("readout.weight", &mut self.out_w),
            ("readout.bias", &mut self.out_b),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Node ids of the parameters after insertion into a tape.
pub struct ParamNodes {
    ids: Vec<NodeId>,
}

impl ParamNodes {
    pub fn insert(tape: &mut Tape, params: &ModelParams, needs_grad: bool) -> Self {
        let ids = params
            .named()
            .into_iter()
            .map(|(_, t)| tape.leaf(t, needs_grad))
            .collect();
        Self { ids }
    }

    pub fn from_ids(ids: Vec<NodeId>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn get(&self, i: usize) -> NodeId {
        self.ids[i]
    }
}

/// Builds the full network on the tape, from a (T × 40) mel node to a
/// (T × C) posterior node (sigmoid output; clamping happens off-tape).
pub fn forward_on_tape(
    tape: &mut Tape,
    nodes: &ParamNodes,
    mel: NodeId,
) -> Result<NodeId, ModelError> {
    let shape = tape.shape(mel).to_vec();
    if shape.len() != 2 || shape[1] != N_MELS {
        return Err(ModelError::MelWidth {
            expected: N_MELS,
            got: *shape.last().unwrap_or(&0),
        });
    }
    let t_frames = shape[0];

    let x3 = tape.reshape(mel, vec![1, t_frames, N_MELS])?;
    let c1 = tape.conv2d(x3, nodes.get(0), nodes.get(1))?;
    let r1 = tape.relu(c1);
    let p1 = tape.maxpool_freq(r1)?;
    let c2 = tape.conv2d(p1, nodes.get(2), nodes.get(3))?;
    let r2 = tape.relu(c2);
    let p2 = tape.maxpool_freq(r2)?;
    let feats = tape.flatten_frames(p2)?; // (T, FRAME_FEATURES)

    let (w_z, u_z, b_z) = (nodes.get(4), nodes.get(5), nodes.get(6));
    let (w_r, u_r, b_r) = (nodes.get(7), nodes.get(8), nodes.get(9));
    let (w_n, u_n, b_n) = (nodes.get(10), nodes.get(11), nodes.get(12));

    let mut h = tape.leaf_from(vec![1, GRU_HIDDEN], vec![0.0; GRU_HIDDEN], false)?;
    let mut hidden_rows = Vec::with_capacity(t_frames);
    for t in 0..t_frames {
        let x_t = tape.slice_row(feats, t)?;

        let xz = tape.matmul(x_t, w_z)?;
        let hz = tape.matmul(h, u_z)?;
        let zsum = tape.add(xz, hz)?;
        let zb = tape.add(zsum, b_z)?;
        let z = tape.sigmoid(zb);

        let xr = tape.matmul(x_t, w_r)?;
        let hr = tape.matmul(h, u_r)?;
        let rsum = tape.add(xr, hr)?;
        let rb = tape.add(rsum, b_r)?;
        let r = tape.sigmoid(rb);

        let xn = tape.matmul(x_t, w_n)?;
        let hn = tape.matmul(h, u_n)?;
        let gated = tape.mul(r, hn)?;
        let nsum = tape.add(xn, gated)?;
        let nb = tape.add(nsum, b_n)?;
        let n = tape.tanh(nb);

        // h' = (1 − z)·n + z·h
        let neg_z = tape.scale(z, -1.0);
        let one_minus_z = tape.add_scalar(neg_z, 1.0);
        let new_part = tape.mul(one_minus_z, n)?;
        let kept_part = tape.mul(z, h)?;
        h = tape.add(new_part, kept_part)?;
        hidden_rows.push(h);
    }

    let hs = tape.concat_time(&hidden_rows)?; // (T, GRU_HIDDEN)
    let logits = tape.matmul(hs, nodes.get(13))?;
    let biased = tape.add_rows(logits, nodes.get(14))?;
    Ok(tape.sigmoid(biased))
}

/// Forward pass without gradients.
pub fn forward(
    params: &ModelParams,
    mel: &LogMelSpectrogram,
) -> Result<EventPosteriors, ModelError> {
    let mut tape = Tape::new();
    let nodes = ParamNodes::insert(&mut tape, params, false);
    let mel_id = tape.leaf_from(
        vec![mel.num_frames(), mel.num_mels()],
        mel.frames().to_vec(),
        false,
    )?;
    let out = forward_on_tape(&mut tape, &nodes, mel_id)?;
    Ok(EventPosteriors::from_probs(
        tape.value(out).to_vec(),
        mel.num_frames(),
        NUM_CLASSES,
    ))
}

/// One training example: precomputed mel features and the aligned labels.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub mel: LogMelSpectrogram,
    pub labels: ActivityGrid,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

fn example_loss_and_grads(
    params: &ModelParams,
    example: &TrainExample,
) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
    let t = example.mel.num_frames();
    if (example.labels.num_frames(), example.labels.num_classes()) != (t, NUM_CLASSES) {
        return Err(ModelError::LabelShape {
            expected: (t, NUM_CLASSES),
            got: (example.labels.num_frames(), example.labels.num_classes()),
        });
    }
    let mut tape = Tape::new();
    let nodes = ParamNodes::insert(&mut tape, params, true);
    let mel_id = tape.leaf_from(
        vec![t, example.mel.num_mels()],
        example.mel.frames().to_vec(),
        false,
    )?;
    let probs = forward_on_tape(&mut tape, &nodes, mel_id)?;
    let targets: Vec<f64> = example
        .labels
        .as_slice()
        .iter()
        .map(|&b| f64::from(b))
        .collect();
    let total = tape.bce(probs, &targets)?;
    let loss = tape.scale(total, 1.0 / (t * NUM_CLASSES) as f64);
    tape.backward(loss)?;
    let grads = nodes
        .ids()
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(id).len()])
        })
        .collect();
    Ok((tape.value(loss)[0], grads))
}

/// Minimizes mean frame-wise BCE with Adam. Deterministic given the seed
/// (per-example gradients are computed in parallel but reduced in index
/// order); returns per-epoch mean training loss.
pub fn train(
    params: &mut ModelParams,
    dataset: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<Vec<f64>, ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let batch = cfg.batch.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam: Vec<AdamState> = params
        .named()
        .iter()
        .map(|(_, t)| AdamState::new(t.len()))
        .collect();

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for (batch_idx, chunk) in order.chunks(batch).enumerate() {
            let per_example: Vec<(f64, Vec<Vec<f64>>)> = chunk
                .par_iter()
                .map(|&i| example_loss_and_grads(params, &dataset[i]))
                .collect::<Result<_, _>>()?;

            let scale = 1.0 / per_example.len() as f64;
            let mut batch_loss = 0.0;
            let mut mean_grads: Vec<Vec<f64>> = params
                .named()
                .iter()
                .map(|(_, t)| vec![0.0; t.len()])
                .collect();
            for (loss, grads) in &per_example {
                batch_loss += loss * scale;
                for (acc, g) in mean_grads.iter_mut().zip(grads) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v * scale;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_loss += batch_loss * per_example.len() as f64;

            for ((state, grads), (_, tensor)) in
                adam.iter_mut().zip(&mean_grads).zip(params.named_mut())
            {
                adam_step(tensor.values_mut(), grads, state, cfg.lr)?;
            }
        }
        history.push(epoch_loss / dataset.len() as f64);
    }
    Ok(history)
}

/// Frame-level micro-averaged F1 over (prediction, label) pairs.
pub fn micro_f1(pairs: &[(ActivityGrid, ActivityGrid)]) -> f64 {
    let (mut tp, mut fp, mut fne) = (0u64, 0u64, 0u64);
    for (pred, label) in pairs {
        for (p, l) in pred.as_slice().iter().zip(label.as_slice()) {
            match (p, l) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                (false, false) => {}
            }
        }
    }
    if 2 * tp + fp + fne == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fne) as f64
}

const CHECKPOINT_MAGIC: &[u8] = b"SEDLAB-CKPT-1\n";

/// Writes a manifest (names, shapes, byte offsets) followed by little-endian
/// f32 payloads.
pub fn save_checkpoint<P: AsRef<Path>>(params: &ModelParams, path: P) -> Result<(), ModelError> {
    let mut header = Vec::new();
    header.extend_from_slice(CHECKPOINT_MAGIC);
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in params.named() {
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        header.extend_from_slice(
            format!(
                "param {} {} offset={} len={}\n",
                name,
                dims.join("x"),
                payload.len(),
                tensor.len()
            )
            .as_bytes(),
        );
        for &v in tensor.values() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    header.extend_from_slice(b"data\n");
    let mut file = fs::File::create(path)?;
    file.write_all(&header)?;
    file.write_all(&payload)?;
    Ok(())
}

/// Loads and validates a checkpoint against the fixed architecture.
pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<ModelParams, ModelError> {
    let path_str = path.as_ref().display().to_string();
    let bytes = fs::read(&path)?;
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(ModelError::BadMagic { path: path_str });
    }
    let mut pos = CHECKPOINT_MAGIC.len();
    let mut entries: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .ok_or_else(|| ModelError::MalformedManifest {
                line: "<missing data marker>".into(),
            })?;
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| ModelError::MalformedManifest {
                line: format!("{:?}", &bytes[pos..end.min(pos + 40)]),
            })?
            .to_string();
        pos = end + 1;
        if line == "data" {
            break;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 5 || parts[0] != "param" {
            return Err(ModelError::MalformedManifest { line });
        }
        let shape: Vec<usize> = parts[2]
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| ModelError::MalformedManifest { line: line.clone() })?;
        let offset: usize = parts[3]
            .strip_prefix("offset=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ModelError::MalformedManifest { line: line.clone() })?;
        let len: usize = parts[4]
            .strip_prefix("len=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ModelError::MalformedManifest { line: line.clone() })?;
        entries.push((parts[1].to_string(), shape, offset, len));
    }
    let payload = &bytes[pos..];

    let spec = parameter_spec();
    let mut params = ModelParams::zeros();
    let mut seen = vec![false; spec.len()];
    for (name, shape, offset, len) in entries {
        let idx = spec
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| ModelError::UnknownParam { name: name.clone() })?;
        let expected = &spec[idx].1;
        if &shape != expected || len != expected.iter().product::<usize>() {
            return Err(ModelError::ParamShape {
                name,
                expected: expected.clone(),
                got: shape,
            });
        }
        let byte_end = offset + len * 4;
        if byte_end > payload.len() {
            return Err(ModelError::TruncatedPayload {
                expected: byte_end,
                got: payload.len(),
            });
        }
        let values: Vec<f64> = payload[offset..byte_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mut named = params.named_mut();
        named[idx].1.values_mut().copy_from_slice(&values);
        seen[idx] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(ModelError::MissingParam {
            name: spec[missing].0.to_string(),
        });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffgraph::grad_check;
    use crate::features::{frontend_eval, MelFrontendConfig};
    use crate::signal::Waveform;

    fn random_mel(seed: u64, t: usize) -> LogMelSpectrogram {
        // Noise through the real frontend keeps values in a realistic range.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = t * 256;
        let w = Waveform::new(
            (0..n).map(|_| rng.random_range(-0.3..0.3)).collect(),
            8000,
        )
        .unwrap();
        frontend_eval(&w, &MelFrontendConfig::default()).unwrap()
    }

    fn random_labels(seed: u64, t: usize) -> ActivityGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ActivityGrid::new(
            (0..t * NUM_CLASSES).map(|_| rng.random::<bool>()).collect(),
            t,
            NUM_CLASSES,
        )
    }

    #[test]
    fn parameter_count_is_fixed() {
        let params = ModelParams::zeros();
        // conv1 160 + conv2 2320 + gru 3·(5120+1024+32) + readout 132
        assert_eq!(params.parameter_count(), 21_140);
    }

    #[test]
    fn forward_shape_and_range() {
        let params = ModelParams::init(1);
        let mel = random_mel(2, 125);
        let out = forward(&params, &mel).unwrap();
        assert_eq!(out.num_frames(), 125);
        assert_eq!(out.num_classes(), 4);
        assert!(out.probs().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn zero_params_give_half_posteriors() {
        let params = ModelParams::zeros();
        let mel = random_mel(3, 20);
        let out = forward(&params, &mel).unwrap();
        assert!(out.probs().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn binarize_is_strict_at_half() {
        let p = EventPosteriors::from_probs(vec![0.5, 0.500001, 0.1, 0.9], 2, 2);
        let b = binarize(&p);
        assert_eq!(b.as_slice(), &[false, true, false, true]);
    }

    #[test]
    fn binarize_alternating() {
        let probs: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 0.1 } else { 0.9 }).collect();
        let b = binarize(&EventPosteriors::from_probs(probs, 3, 4));
        for (i, &v) in b.as_slice().iter().enumerate() {
            assert_eq!(v, i % 2 == 1);
        }
    }

    /// Tone burst in noise with aligned frame labels; structured enough for
    /// a small model to fit, which keeps the loss (and with it the ulp noise
    /// of the finite-difference oracle) low at the check point.
    fn tone_scene(seed: u64, t_frames: usize) -> (LogMelSpectrogram, ActivityGrid) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = t_frames * 256;
        let mut samples: Vec<f64> = (0..n).map(|_| rng.random_range(-0.01..0.01)).collect();
        let class = (seed % 4) as usize;
        let freq = [440.0, 880.0, 1760.0, 220.0][class];
        let (lo, hi) = (n / 4, 3 * n / 4);
        for (i, s) in samples.iter_mut().enumerate().take(hi).skip(lo) {
            *s += 0.5 * (std::f64::consts::TAU * freq * i as f64 / 8000.0).sin();
        }
        let w = Waveform::new(samples, 8000).unwrap();
        let mel = frontend_eval(&w, &MelFrontendConfig::default()).unwrap();
        let mut labels = ActivityGrid::zeros(t_frames, NUM_CLASSES);
        for t in 0..t_frames {
            let center = t * 256;
            if center >= lo && center < hi {
                labels.set(t, class, true);
            }
        }
        (mel, labels)
    }

    #[test]
    fn model_loss_gradient_passes_check_on_short_input() {
        // Mean BCE w.r.t. every parameter on a 10-frame input, checked at a
        // fitted point where the finite-difference oracle has signal.
        let t_frames = 10;
        let dataset: Vec<TrainExample> = (0..4)
            .map(|s| {
                let (mel, labels) = tone_scene(s, t_frames);
                TrainExample { mel, labels }
            })
            .collect();
        let mut params = ModelParams::init(0);
        let cfg = TrainConfig {
            epochs: 300,
            batch: 4,
            lr: 3e-3,
            seed: 0,
        };
        train(&mut params, &dataset, &cfg).unwrap();

        let (mel, labels) = tone_scene(0, t_frames);
        let targets: Vec<f64> = labels.as_slice().iter().map(|&b| f64::from(b)).collect();
        let mel_tensor = mel.into_tensor();
        let tensors: Vec<Tensor> = params.named().iter().map(|(_, t)| (*t).clone()).collect();
        let build = move |tape: &mut Tape, ids: &[NodeId]| {
            let nodes = ParamNodes::from_ids(ids.to_vec());
            let mel_id = tape.leaf(&mel_tensor, false);
            let probs = forward_on_tape(tape, &nodes, mel_id).map_err(|e| match e {
                ModelError::Graph(g) => g,
                other => GraphError::InvalidArgument(other.to_string()),
            })?;
            let total = tape.bce(probs, &targets)?;
            Ok(tape.scale(total, 1.0 / targets.len() as f64))
        };
        let err = grad_check(&build, &tensors, 1e-4).unwrap();
        assert!(err < 1e-4, "model grad check err {err}");
    }

    #[test]
    fn forward_is_deterministic() {
        let params = ModelParams::init(4);
        let mel = random_mel(5, 50);
        let a = forward(&params, &mel).unwrap();
        let b = forward(&params, &mel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn causality_with_conv_lookahead_bound() {
        // The GRU is strictly causal; each conv adds one frame of lookahead.
        // Zeroing mel frames > t leaves posteriors [0 .. t−2] bitwise intact.
        let params = ModelParams::init(11);
        let mel = random_mel(12, 60);
        let full = forward(&params, &mel).unwrap();

        let cut = 30usize;
        let silence_level = crate::features::FLOOR_ENERGY.ln();
        let mut frames = mel.frames().to_vec();
        for t in cut + 1..mel.num_frames() {
            for f in 0..mel.num_mels() {
                frames[t * mel.num_mels() + f] = silence_level;
            }
        }
        let truncated = Tensor::new(vec![mel.num_frames(), mel.num_mels()], frames).unwrap();
        let mut tape = Tape::new();
        let nodes = ParamNodes::insert(&mut tape, &params, false);
        let mel_id = tape.leaf(&truncated, false);
        let out = forward_on_tape(&mut tape, &nodes, mel_id).unwrap();
        let cut_probs =
            EventPosteriors::from_probs(tape.value(out).to_vec(), mel.num_frames(), NUM_CLASSES);

        for t in 0..=cut - 2 {
            for c in 0..NUM_CLASSES {
                assert_eq!(
                    full.at(t, c).to_bits(),
                    cut_probs.at(t, c).to_bits(),
                    "posterior changed at frame {t} class {c}"
                );
            }
        }
    }

    #[test]
    fn training_overfits_a_single_example() {
        let (mel, labels) = tone_scene(1, 30);
        let dataset = vec![TrainExample { mel, labels }];
        let mut params = ModelParams::init(0);
        let cfg = TrainConfig {
            epochs: 300,
            batch: 1,
            lr: 3e-3,
            seed: 0,
        };
        let history = train(&mut params, &dataset, &cfg).unwrap();
        let final_loss = *history.last().unwrap();
        assert!(final_loss < 0.05, "failed to overfit: loss {final_loss}");
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let dataset: Vec<TrainExample> = (0..6)
            .map(|i| TrainExample {
                mel: random_mel(30 + i, 20),
                labels: random_labels(40 + i, 20),
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch: 3,
            lr: 1e-3,
            seed: 123,
        };
        let mut p1 = ModelParams::init(99);
        let h1 = train(&mut p1, &dataset, &cfg).unwrap();
        let mut p2 = ModelParams::init(99);
        let h2 = train(&mut p2, &dataset, &cfg).unwrap();
        assert_eq!(h1, h2);
        for ((_, a), (_, b)) in p1.named().iter().zip(p2.named().iter()) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = ModelParams::init(17);
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        // Quantization to f32 is idempotent: a second round trip is bitwise
        // stable, and forward passes agree exactly.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        let loaded2 = load_checkpoint(&path2).unwrap();
        assert_eq!(loaded, loaded2);
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());

        let mel = random_mel(18, 40);
        let a = forward(&loaded, &mel).unwrap();
        let b = forward(&loaded2, &mel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_tamper_detection_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ModelParams::init(1), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // Manifest is ASCII: rewrite conv1.weight's shape 16x1x3x3 → 16x2x3x3.
        let needle: &[u8] = b"param conv1.weight 16x1x3x3";
        let at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        let shape_at = at + b"param conv1.weight 16x".len();
        assert_eq!(bytes[shape_at], b'1');
        bytes[shape_at] = b'2';
        fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(ModelError::ParamShape { name, .. }) => assert_eq!(name, "conv1.weight"),
            other => panic!("expected ParamShape error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ModelParams::init(1), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(ModelError::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn micro_f1_basics() {
        let perfect = ActivityGrid::new(vec![true, false, true, false], 2, 2);
        assert_eq!(micro_f1(&[(perfect.clone(), perfect.clone())]), 1.0);
        let empty = ActivityGrid::zeros(2, 2);
        assert_eq!(micro_f1(&[(empty.clone(), empty.clone())]), 1.0);
        let wrong = ActivityGrid::new(vec![false, true, false, true], 2, 2);
        assert_eq!(micro_f1(&[(wrong, perfect)]), 0.0);
    }
}

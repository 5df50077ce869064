//! Targeted attack engine: the attacker's intent as (frame, class) target
//! regions, localized perturbation masks, the dual adversarial/preservation
//! objective, and projected iterative optimization. The global-mask and
//! no-preservation baselines share the same loop.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::diffgraph::{adam_step, sign_step, AdamState, GraphError, Tape};
use crate::features::{self, FeatureError, MelFrontendConfig};
use crate::metrics::{self, AggregateReport, MetricsError, MetricsReport};
use crate::model::{self, ActivityGrid, EventPosteriors, ModelError, ModelParams, ParamNodes};
use crate::scenegen::Scene;
use crate::signal::{self, SignalError, Waveform};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("edit interval [{start}, {end}) is invalid for a {clip} s clip")]
    BadInterval { start: f64, end: f64, clip: f64 },
    #[error("edit class {0} is out of range")]
    BadClass(usize),
    #[error("edit interval rounded to an empty frame range")]
    EmptyInterval,
    #[error("conflicting edits: frame {frame}, class {class} is assigned both values")]
    ConflictingEdits { frame: usize, class: usize },
    #[error("attack needs a non-empty target region")]
    EmptyTarget,
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Mute deletes (target 0), mirage inserts (target 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditValue {
    Mute,
    Mirage,
}

impl EditValue {
    pub fn as_bool(self) -> bool {
        matches!(self, EditValue::Mirage)
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.as_bool())
    }
}

/// One requested edit: force `class_id` to `value` over [start_sec, end_sec).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetEdit {
    pub class_id: usize,
    pub start_sec: f64,
    pub end_sec: f64,
    pub value: EditValue,
}

impl TargetEdit {
    pub fn validate(&self, clip_seconds: f64, num_classes: usize) -> Result<(), AttackError> {
        if self.class_id >= num_classes {
            return Err(AttackError::BadClass(self.class_id));
        }
        if !(0.0 <= self.start_sec
            && self.start_sec < self.end_sec
            && self.end_sec <= clip_seconds + 1e-9)
        {
            return Err(AttackError::BadInterval {
                start: self.start_sec,
                end: self.end_sec,
                clip: clip_seconds,
            });
        }
        Ok(())
    }
}

/// Inclusive frame interval on the output grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameInterval {
    pub lo: usize,
    pub hi: usize,
}

impl FrameInterval {
    pub fn len(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Half-open seconds to inclusive frames: lo = floor(start·fps),
/// hi = ceil(end·fps) − 1. A 1e-9 slack absorbs the one-ulp wobble of
/// sample-grid-aligned onsets; it is seven orders of magnitude below the
/// frame quantum.
pub fn edits_to_frames(
    edit: &TargetEdit,
    cfg: &MelFrontendConfig,
    t_frames: usize,
) -> Result<FrameInterval, AttackError> {
    let fps = cfg.fps();
    let lo = (edit.start_sec * fps + 1e-9).floor() as usize;
    let hi_raw = (edit.end_sec * fps - 1e-9).ceil() as isize - 1;
    if hi_raw < lo as isize {
        return Err(AttackError::EmptyInterval);
    }
    let hi = (hi_raw as usize).min(t_frames.saturating_sub(1));
    if lo >= t_frames {
        return Err(AttackError::EmptyInterval);
    }
    Ok(FrameInterval { lo, hi })
}

/// The index set T with its per-pair target values.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetRegion {
    target: Vec<Option<bool>>,
    t: usize,
    c: usize,
    len: usize,
}

impl TargetRegion {
    pub fn from_pairs(
        t: usize,
        c: usize,
        pairs: &[(usize, usize, bool)],
    ) -> Result<Self, AttackError> {
        let mut target = vec![None; t * c];
        let mut len = 0;
        for &(frame, class, value) in pairs {
            let cell = &mut target[frame * c + class];
            match cell {
                None => {
                    *cell = Some(value);
                    len += 1;
                }
                Some(existing) if *existing == value => {}
                Some(_) => {
                    return Err(AttackError::ConflictingEdits { frame, class });
                }
            }
        }
        Ok(Self { target, t, c, len })
    }

    pub fn num_frames(&self) -> usize {
        self.t
    }

    pub fn num_classes(&self) -> usize {
        self.c
    }

    /// |T|
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// |O|
    pub fn total(&self) -> usize {
        self.t * self.c
    }

    pub fn contains(&self, frame: usize, class: usize) -> bool {
        self.target[frame * self.c + class].is_some()
    }

    pub fn value(&self, frame: usize, class: usize) -> Option<bool> {
        self.target[frame * self.c + class]
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, bool)> + '_ {
        let c = self.c;
        self.target
            .iter()
            .enumerate()
            .filter_map(move |(i, v)| v.map(|value| (i / c, i % c, value)))
    }
}

/// y*: target values on T, the clean binarized outputs elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetLabels {
    y_star: Vec<f64>,
    t: usize,
    c: usize,
}

impl TargetLabels {
    pub fn from_region(y_hat: &ActivityGrid, region: &TargetRegion) -> Self {
        let (t, c) = (y_hat.num_frames(), y_hat.num_classes());
        let mut y_star = vec![0.0; t * c];
        for frame in 0..t {
            for class in 0..c {
                y_star[frame * c + class] = match region.value(frame, class) {
                    Some(v) => f64::from(v),
                    None => f64::from(y_hat.at(frame, class)),
                };
            }
        }
        Self { y_star, t, c }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.y_star
    }

    pub fn at(&self, frame: usize, class: usize) -> f64 {
        self.y_star[frame * self.c + class]
    }
}

/// Builds T and y* from the requested edits against the clean output ŷ.
pub fn build_target(
    edits: &[TargetEdit],
    y_hat: &ActivityGrid,
    cfg: &MelFrontendConfig,
) -> Result<(TargetRegion, TargetLabels), AttackError> {
    let t_frames = y_hat.num_frames();
    let mut pairs = Vec::new();
    for edit in edits {
        let clip_seconds = t_frames as f64 * cfg.hop as f64 / cfg.sample_rate as f64;
        edit.validate(clip_seconds, y_hat.num_classes())?;
        let interval = edits_to_frames(edit, cfg, t_frames)?;
        for frame in interval.lo..=interval.hi {
            pairs.push((frame, edit.class_id, edit.value.as_bool()));
        }
    }
    let region = TargetRegion::from_pairs(t_frames, y_hat.num_classes(), &pairs)?;
    let labels = TargetLabels::from_region(y_hat, &region);
    Ok((region, labels))
}

/// Where the perturbation may be nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationMask {
    active: Vec<bool>,
}

impl PerturbationMask {
    pub fn as_slice(&self) -> &[bool] {
        &self.active
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn density(&self) -> f64 {
        self.active.iter().filter(|&&a| a).count() as f64 / self.active.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    /// Localized mask with the preservation objective: the full method.
    Localized,
    /// Full-clip mask, no preservation: the global baseline.
    Global,
    /// Localized mask, no preservation: the ablation baseline.
    LocalNoPreserve,
}

impl AttackMode {
    pub fn uses_preservation(self) -> bool {
        matches!(self, AttackMode::Localized)
    }

    pub fn name(self) -> &'static str {
        match self {
            AttackMode::Localized => "localized",
            AttackMode::Global => "global",
            AttackMode::LocalNoPreserve => "local-no-preserve",
        }
    }
}

/// Sample spans covered by the target frames, widened by half a window on
/// each side so every sample any target frame reads is attackable; global
/// mode masks the whole clip.
pub fn init_mask(
    edits: &[TargetEdit],
    mode: AttackMode,
    n_samples: usize,
    cfg: &MelFrontendConfig,
) -> Result<PerturbationMask, AttackError> {
    let mut active = vec![false; n_samples];
    if mode == AttackMode::Global {
        active.fill(true);
        return Ok(PerturbationMask { active });
    }
    let t_frames = cfg.frame_count(n_samples);
    let half = cfg.window_len / 2;
    for edit in edits {
        let interval = edits_to_frames(edit, cfg, t_frames)?;
        let lo = (interval.lo * cfg.hop).saturating_sub(half);
        let hi = ((interval.hi + 1) * cfg.hop + half).min(n_samples);
        for cell in active[lo..hi].iter_mut() {
            *cell = true;
        }
    }
    Ok(PerturbationMask { active })
}

/// Summed BCE over T only (zero-weight elsewhere); evaluated off-tape.
pub fn adversarial_loss(posteriors: &EventPosteriors, region: &TargetRegion) -> f64 {
    let mut sum = 0.0;
    for (frame, class, value) in region.pairs() {
        let p = posteriors.at(frame, class);
        let t = f64::from(value);
        sum -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    sum
}

/// Summed BCE over O∖T anchoring the attacked posteriors to the clean soft
/// posteriors; evaluated off-tape.
pub fn preservation_loss(
    adv: &EventPosteriors,
    clean: &EventPosteriors,
    region: &TargetRegion,
) -> f64 {
    let mut sum = 0.0;
    for frame in 0..region.num_frames() {
        for class in 0..region.num_classes() {
            if region.contains(frame, class) {
                continue;
            }
            let p = adv.at(frame, class);
            let t = clean.at(frame, class);
            sum -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
    }
    sum
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sign,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sign => "sign",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub mode: AttackMode,
    /// Preservation weight; forced to zero outside Localized mode.
    pub alpha: f64,
    /// ℓ∞ budget on the perturbation.
    pub tau: f64,
    /// Learning rate (adam) or step size (sign).
    pub beta: f64,
    pub n_iters: usize,
    pub optimizer: OptimizerKind,
    pub random_init: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            mode: AttackMode::Localized,
            alpha: 10.0,
            tau: 0.02,
            beta: 1e-3,
            n_iters: 500,
            optimizer: OptimizerKind::Adam,
            random_init: false,
        }
    }
}

/// (total, adversarial, preservation) at the start of one iteration.
#[derive(Debug, Clone, Copy)]
pub struct LossPoint {
    pub total: f64,
    pub adversarial: f64,
    pub preservation: f64,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub clean: Waveform,
    pub adversarial: Waveform,
    /// Full-length perturbation; zero off-mask, bounded by τ.
    pub delta: Vec<f64>,
    pub loss_trace: Vec<LossPoint>,
    pub iterations_run: usize,
    pub posteriors_clean: EventPosteriors,
    pub posteriors_adv: EventPosteriors,
    pub activity_clean: ActivityGrid,
    pub activity_adv: ActivityGrid,
    pub region: TargetRegion,
    pub labels: TargetLabels,
    pub mask: PerturbationMask,
    pub edits: Vec<TargetEdit>,
}

/// Projected iterative optimization of the perturbation. Deterministic per
/// seed (the seed only matters with `random_init`).
pub fn run_attack(
    params: &ModelParams,
    clean: &Waveform,
    edits: &[TargetEdit],
    fcfg: &MelFrontendConfig,
    acfg: &AttackConfig,
    seed: u64,
) -> Result<AttackResult, AttackError> {
    let n = clean.len();
    let mel_clean = features::frontend_eval(clean, fcfg)?;
    let posteriors_clean = model::forward(params, &mel_clean)?;
    let y_hat = model::binarize(&posteriors_clean);

    if edits.is_empty() {
        return Err(AttackError::EmptyTarget);
    }
    let (region, labels) = build_target(edits, &y_hat, fcfg)?;
    if region.is_empty() {
        return Err(AttackError::EmptyTarget);
    }
    let mask = init_mask(edits, acfg.mode, n, fcfg)?;

    let mut delta = vec![0.0; n];
    if acfg.random_init {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (d, &m) in delta.iter_mut().zip(mask.as_slice()) {
            let v = rng.random_range(-acfg.tau..acfg.tau);
            if m {
                *d = v;
            }
        }
    }

    // Constant loss coefficients for the whole run.
    let total_cells = region.total();
    let mut adv_weights = vec![0.0; total_cells];
    let mut pre_weights = vec![1.0; total_cells];
    for (frame, class, _) in region.pairs() {
        adv_weights[frame * region.num_classes() + class] = 1.0;
        pre_weights[frame * region.num_classes() + class] = 0.0;
    }
    let adv_targets = labels.as_slice().to_vec();
    let pre_targets = posteriors_clean.probs().to_vec();
    let use_preservation = acfg.mode.uses_preservation() && acfg.alpha > 0.0;

    let mut adam = AdamState::new(n);
    let mut trace = Vec::with_capacity(acfg.n_iters);
    for iteration in 0..acfg.n_iters {
        let mut tape = Tape::new();
        let nodes = ParamNodes::insert(&mut tape, params, false);
        let delta_id = tape.leaf_from(vec![n], delta.clone(), true)?;
        let x_id = tape.leaf_from(vec![n], clean.samples().to_vec(), false)?;
        let perturbed = tape.add(x_id, delta_id)?;
        let mel = features::frontend(&mut tape, perturbed, fcfg)?;
        let probs_id = model::forward_on_tape(&mut tape, &nodes, mel)?;
        let l_adv = tape.bce_weighted(probs_id, &adv_targets, &adv_weights)?;

        let mut pre_value = f64::NAN;
        let total_id = if use_preservation {
            let l_pre = tape.bce_weighted(probs_id, &pre_targets, &pre_weights)?;
            pre_value = tape.value(l_pre)[0];
            let scaled = tape.scale(l_pre, acfg.alpha);
            tape.add(l_adv, scaled)?
        } else {
            l_adv
        };
        if !use_preservation {
            // Keep the trace informative without touching the update path.
            let probs_now = EventPosteriors::from_probs(
                tape.value(probs_id).to_vec(),
                region.num_frames(),
                region.num_classes(),
            );
            pre_value = preservation_loss(&probs_now, &posteriors_clean, &region);
        }

        let total_value = tape.value(total_id)[0];
        let adv_value = tape.value(l_adv)[0];
        if !total_value.is_finite() {
            return Err(AttackError::NonFiniteLoss { iteration });
        }
        trace.push(LossPoint {
            total: total_value,
            adversarial: adv_value,
            preservation: pre_value,
        });

        tape.backward(total_id)?;
        let grad = tape
            .grad(delta_id)
            .expect("loss depends on delta")
            .to_vec();
        match acfg.optimizer {
            OptimizerKind::Adam => adam_step(&mut delta, &grad, &mut adam, acfg.beta)?,
            OptimizerKind::Sign => sign_step(&mut delta, &grad, acfg.beta)?,
        }
        // Projection: zero off-mask, then the ℓ∞ ball.
        for (d, &m) in delta.iter_mut().zip(mask.as_slice()) {
            if !m {
                *d = 0.0;
            } else {
                *d = d.clamp(-acfg.tau, acfg.tau);
            }
        }
    }

    // The amplitude clamp happens once, at the end, so metrics see exactly
    // what save_wav would persist.
    let perturbed = Waveform::new(
        clean
            .samples()
            .iter()
            .zip(&delta)
            .map(|(x, d)| x + d)
            .collect(),
        clean.sample_rate(),
    )?;
    let adversarial = signal::clamp(&perturbed, -1.0, 1.0)?;
    let mel_adv = features::frontend_eval(&adversarial, fcfg)?;
    let posteriors_adv = model::forward(params, &mel_adv)?;
    let activity_adv = model::binarize(&posteriors_adv);

    Ok(AttackResult {
        clean: clean.clone(),
        adversarial,
        delta,
        loss_trace: trace,
        iterations_run: acfg.n_iters,
        activity_clean: y_hat,
        posteriors_clean,
        posteriors_adv,
        activity_adv,
        region,
        labels,
        mask,
        edits: edits.to_vec(),
    })
}

/// What the campaign asks of each scene: k edits of a fixed duration.
#[derive(Debug, Clone)]
pub struct ScenarioPlan {
    pub edits_per_scene: usize,
    pub duration_sec: f64,
    /// A (frame, class, value) candidate is eligible when the clean output
    /// disagrees with the target value on at least this fraction of frames.
    pub eligibility: f64,
}

impl ScenarioPlan {
    pub fn single_target() -> Self {
        Self {
            edits_per_scene: 1,
            duration_sec: 3.0,
            eligibility: 0.9,
        }
    }

    pub fn multi_target(k: usize) -> Self {
        Self {
            edits_per_scene: k,
            duration_sec: 2.0,
            eligibility: 0.9,
        }
    }
}

/// Picks k compatible edits on the frame-aligned onset grid: mirage where ŷ
/// is inactive on ≥ eligibility of the interval, mute where active.
/// Returns None when the scene cannot host k compatible edits.
pub fn sample_scenario(
    y_hat: &ActivityGrid,
    plan: &ScenarioPlan,
    fcfg: &MelFrontendConfig,
    clip_seconds: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Vec<TargetEdit>>, AttackError> {
    let t_frames = y_hat.num_frames();
    let step = fcfg.hop as f64 / fcfg.sample_rate as f64;
    let max_onset_idx = ((clip_seconds - plan.duration_sec) / step + 1e-9).floor();
    if max_onset_idx < 0.0 {
        return Ok(None);
    }

    struct Candidate {
        edit: TargetEdit,
        interval: FrameInterval,
    }
    let mut candidates = Vec::new();
    for m in 0..=max_onset_idx as usize {
        let start = m as f64 * step;
        let end = start + plan.duration_sec;
        for class in 0..y_hat.num_classes() {
            let probe = TargetEdit {
                class_id: class,
                start_sec: start,
                end_sec: end,
                value: EditValue::Mirage,
            };
            let interval = edits_to_frames(&probe, fcfg, t_frames)?;
            let active = (interval.lo..=interval.hi)
                .filter(|&t| y_hat.at(t, class))
                .count();
            let frames = interval.len();
            let value = if active as f64 >= plan.eligibility * frames as f64 {
                Some(EditValue::Mute)
            } else if (frames - active) as f64 >= plan.eligibility * frames as f64 {
                Some(EditValue::Mirage)
            } else {
                None
            };
            if let Some(value) = value {
                candidates.push(Candidate {
                    edit: TargetEdit { value, ..probe },
                    interval,
                });
            }
        }
    }

    candidates.shuffle(rng);
    let mut chosen: Vec<Candidate> = Vec::with_capacity(plan.edits_per_scene);
    for candidate in candidates {
        if chosen.len() == plan.edits_per_scene {
            break;
        }
        let conflict = chosen.iter().any(|c| {
            c.edit.class_id == candidate.edit.class_id
                && c.edit.value != candidate.edit.value
                && c.interval.lo <= candidate.interval.hi
                && candidate.interval.lo <= c.interval.hi
        });
        let duplicate = chosen.iter().any(|c| {
            c.edit.class_id == candidate.edit.class_id && c.interval == candidate.interval
        });
        if !conflict && !duplicate {
            chosen.push(candidate);
        }
    }
    if chosen.len() < plan.edits_per_scene {
        return Ok(None);
    }
    Ok(Some(chosen.into_iter().map(|c| c.edit).collect()))
}

/// One attacked scene with its per-run report.
#[derive(Debug, Clone)]
pub struct ScenarioRecord {
    pub scene_index: usize,
    pub result: AttackResult,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct CampaignOutcome {
    pub records: Vec<ScenarioRecord>,
    /// Scenes with no eligible scenario, in index order.
    pub skipped: Vec<usize>,
    pub aggregate: AggregateReport,
}

fn campaign_scene_seed(seed: u64, scene_index: usize) -> u64 {
    seed ^ (scene_index as u64 + 1).wrapping_mul(0x5851_F42D_4C95_7F2D)
}

/// Attacks every scene that can host a scenario; scenes run in parallel over
/// shared read-only parameters, reduced in scene order.
pub fn run_campaign(
    params: &ModelParams,
    scenes: &[Scene],
    plan: &ScenarioPlan,
    fcfg: &MelFrontendConfig,
    acfg: &AttackConfig,
    seed: u64,
) -> Result<CampaignOutcome, AttackError> {
    let outcomes: Vec<(usize, Option<ScenarioRecord>)> = scenes
        .par_iter()
        .enumerate()
        .map(|(index, scene)| -> Result<_, AttackError> {
            let scene_seed = campaign_scene_seed(seed, index);
            let mel = features::frontend_eval(&scene.waveform, fcfg)?;
            let posteriors = model::forward(params, &mel)?;
            let y_hat = model::binarize(&posteriors);
            let clip_seconds = scene.waveform.duration_secs();
            let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
            let Some(edits) = sample_scenario(&y_hat, plan, fcfg, clip_seconds, &mut rng)? else {
                return Ok((index, None));
            };
            let result = run_attack(params, &scene.waveform, &edits, fcfg, acfg, scene_seed)?;
            let counts = metrics::count_edits(
                &result.activity_clean,
                &result.activity_adv,
                &result.region,
                &result.labels,
            )?;
            let report = metrics::compute_report(counts, &scene.waveform, &result.adversarial)?;
            Ok((index, Some(ScenarioRecord {
                scene_index: index,
                result,
                report,
            })))
        })
        .collect::<Result<_, _>>()?;

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (index, outcome) in outcomes {
        match outcome {
            Some(record) => records.push(record),
            None => skipped.push(index),
        }
    }
    let reports: Vec<MetricsReport> = records.iter().map(|r| r.report.clone()).collect();
    let aggregate = metrics::aggregate(&reports)?;
    Ok(CampaignOutcome {
        records,
        skipped,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{binarize, NUM_CLASSES};

    fn fcfg() -> MelFrontendConfig {
        MelFrontendConfig::default()
    }

    fn mirage(class_id: usize, start: f64, end: f64) -> TargetEdit {
        TargetEdit {
            class_id,
            start_sec: start,
            end_sec: end,
            value: EditValue::Mirage,
        }
    }

    fn mute(class_id: usize, start: f64, end: f64) -> TargetEdit {
        TargetEdit {
            class_id,
            start_sec: start,
            end_sec: end,
            value: EditValue::Mute,
        }
    }

    #[test]
    fn frame_interval_arithmetic() {
        let cfg = fcfg();
        let i = edits_to_frames(&mirage(0, 1.0, 3.0), &cfg, 125).unwrap();
        assert_eq!((i.lo, i.hi), (31, 93));

        let i = edits_to_frames(&mirage(0, 0.0, 4.0), &cfg, 125).unwrap();
        assert_eq!((i.lo, i.hi), (0, 124));

        let i = edits_to_frames(&mirage(0, 1.0, 1.02), &cfg, 125).unwrap();
        assert_eq!((i.lo, i.hi), (31, 31));
    }

    #[test]
    fn build_target_examples() {
        let cfg = fcfg();
        let y_hat = ActivityGrid::zeros(125, NUM_CLASSES);

        // Single mirage on class 2 over [1.0, 3.0) → 63 pairs.
        let (region, labels) = build_target(&[mirage(2, 1.0, 3.0)], &y_hat, &cfg).unwrap();
        assert_eq!(region.len(), 63);
        for (frame, class, value) in region.pairs() {
            assert!(value);
            assert_eq!(class, 2);
            assert!((31..=93).contains(&frame));
            assert_eq!(labels.at(frame, class), 1.0);
        }

        // Empty edit list: T = ∅, y* = ŷ.
        let (region, labels) = build_target(&[], &y_hat, &cfg).unwrap();
        assert_eq!(region.len(), 0);
        assert!(labels.as_slice().iter().all(|&v| v == 0.0));

        // Two disjoint-class edits: 32 + 32 pairs.
        let edits = [mute(0, 0.0, 1.0), mirage(1, 1.0, 2.0)];
        let (region, _) = build_target(&edits, &y_hat, &cfg).unwrap();
        assert_eq!(region.len(), 64);
    }

    #[test]
    fn conflicting_edits_are_rejected() {
        let cfg = fcfg();
        let y_hat = ActivityGrid::zeros(125, NUM_CLASSES);
        let edits = [mirage(0, 1.0, 2.0), mute(0, 1.5, 2.5)];
        assert!(matches!(
            build_target(&edits, &y_hat, &cfg),
            Err(AttackError::ConflictingEdits { .. })
        ));
        // Same value overlapping is a union, not a conflict.
        let edits = [mirage(0, 1.0, 2.0), mirage(0, 1.5, 2.5)];
        assert!(build_target(&edits, &y_hat, &cfg).is_ok());
    }

    #[test]
    fn mask_construction() {
        let cfg = fcfg();
        let n = 32000;

        // Overlapping edits share one contiguous span.
        let edits = [mirage(0, 1.0, 3.0), mirage(1, 2.5, 4.0)];
        let mask = init_mask(&edits, AttackMode::Localized, n, &cfg).unwrap();
        let first_true = mask.as_slice().iter().position(|&b| b).unwrap();
        let last_true = n - 1 - mask.as_slice().iter().rev().position(|&b| b).unwrap();
        assert_eq!(first_true, 31 * 256 - 256);
        assert_eq!(last_true, n - 1);
        // Contiguous: no gap between first and last.
        assert!(mask.as_slice()[first_true..=last_true].iter().all(|&b| b));

        // Global mode masks everything.
        let mask = init_mask(&edits, AttackMode::Global, n, &cfg).unwrap();
        assert_eq!(mask.density(), 1.0);

        // A single 2 s edit in a 4 s clip: density in [0.50, 0.52].
        let mask = init_mask(&[mirage(0, 1.0, 3.0)], AttackMode::Localized, n, &cfg).unwrap();
        let density = mask.density();
        assert!((0.50..=0.52).contains(&density), "density {density}");
    }

    #[test]
    fn adversarial_loss_values() {
        let y_hat = ActivityGrid::zeros(5, 2);
        let region = TargetRegion::from_pairs(
            5,
            2,
            &(0..5).map(|t| (t, 0usize, true)).collect::<Vec<_>>(),
        )
        .unwrap();
        let _ = &y_hat;

        // Posteriors equal y* on T (after clamping): loss below |T|·2e−7.
        let probs: Vec<f64> = (0..10)
            .map(|i| if i % 2 == 0 { 1.0 } else { 0.3 })
            .collect();
        let p = EventPosteriors::from_probs(probs, 5, 2);
        let loss = adversarial_loss(&p, &region);
        assert!(loss < 5.0 * 2e-7, "loss {loss}");

        // Posterior 0.5 on every target pair, |T| = 5 → 5·ln 2.
        let p = EventPosteriors::from_probs(vec![0.5; 10], 5, 2);
        let loss = adversarial_loss(&p, &region);
        assert!((loss - 5.0 * std::f64::consts::LN_2).abs() < 1e-9);

        // Mirage target with posterior 0.1 contributes −ln(0.1) per pair.
        let probs: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { 0.1 } else { 0.9 }).collect();
        let p = EventPosteriors::from_probs(probs, 5, 2);
        let loss = adversarial_loss(&p, &region);
        assert!((loss - 5.0 * (-(0.1f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn preservation_loss_values_and_minimum() {
        // One target pair at (0,0); everything else off-target.
        let region = TargetRegion::from_pairs(2, 2, &[(0, 0, true)]).unwrap();

        // adv = clean with saturated clean posteriors → loss ≈ 0.
        let saturated: Vec<f64> = vec![1.0, 0.0, 1.0, 0.0];
        let clean = EventPosteriors::from_probs(saturated.clone(), 2, 2);
        let adv = EventPosteriors::from_probs(saturated, 2, 2);
        let loss = preservation_loss(&adv, &clean, &region);
        assert!(loss < 3.0 * 2e-6, "saturated preservation loss {loss}");

        // clean = adv = 0.5 on one off-target pair contributes ln 2.
        let clean = EventPosteriors::from_probs(vec![1.0, 0.5, 1.0, 1.0], 2, 2);
        let adv = clean.clone();
        let loss = preservation_loss(&adv, &clean, &region);
        let expected = std::f64::consts::LN_2;
        assert!((loss - expected).abs() < 1e-4, "loss {loss}");

        // For fixed clean p, the per-pair loss over adv q is minimized at q = p.
        let p = 0.37;
        let term = |q: f64| -(p * q.ln() + (1.0 - p) * (1.0 - q).ln());
        let mut best_q = 0.0;
        let mut best = f64::INFINITY;
        for step in 1..100 {
            let q = step as f64 / 100.0;
            if term(q) < best {
                best = term(q);
                best_q = q;
            }
        }
        assert!((best_q - p).abs() < 0.011, "argmin {best_q}");
    }

    #[test]
    fn preservation_at_zero_delta_is_entropy_sum() {
        let region = TargetRegion::from_pairs(3, 2, &[(0, 0, true), (1, 1, false)]).unwrap();
        let probs = vec![0.9, 0.2, 0.6, 0.4, 0.5, 0.7];
        let clean = EventPosteriors::from_probs(probs, 3, 2);
        let loss = preservation_loss(&clean, &clean, &region);
        let mut entropy = 0.0;
        for frame in 0..3 {
            for class in 0..2 {
                if region.contains(frame, class) {
                    continue;
                }
                let p = clean.at(frame, class);
                entropy -= p * p.ln() + (1.0 - p) * (1.0 - p).ln();
            }
        }
        assert!((loss - entropy).abs() < 1e-12);
    }

    fn test_scene() -> Waveform {
        let cfg = crate::scenegen::SceneConfig::default();
        crate::scenegen::generate_scene(17, &cfg).unwrap().waveform
    }

    #[test]
    fn zero_iterations_is_a_no_op() {
        let params = ModelParams::init(5);
        let clean = test_scene();
        let acfg = AttackConfig {
            n_iters: 0,
            ..AttackConfig::default()
        };
        let result = run_attack(&params, &clean, &[mirage(1, 1.0, 3.0)], &fcfg(), &acfg, 0).unwrap();
        assert_eq!(result.adversarial.samples(), clean.samples());
        assert!(result.delta.iter().all(|&d| d == 0.0));
        assert_eq!(result.activity_adv, result.activity_clean);
        assert!(result.loss_trace.is_empty());
    }

    #[test]
    fn budget_and_mask_invariants_hold() {
        let params = ModelParams::init(5);
        let clean = test_scene();
        let acfg = AttackConfig {
            n_iters: 4,
            ..AttackConfig::default()
        };
        let result = run_attack(&params, &clean, &[mirage(1, 1.0, 3.0)], &fcfg(), &acfg, 0).unwrap();
        let max_delta = result.delta.iter().fold(0.0f64, |m, &d| m.max(d.abs()));
        assert!(max_delta <= acfg.tau, "max|δ| = {max_delta}");
        for (d, &m) in result.delta.iter().zip(result.mask.as_slice()) {
            if !m {
                assert_eq!(*d, 0.0);
            }
        }
        assert_eq!(result.loss_trace.len(), 4);
        assert!(result.loss_trace.iter().all(|p| p.total.is_finite()));
    }

    #[test]
    fn alpha_zero_paths_are_bitwise_identical() {
        // Localized with α=0 must equal the no-preservation baseline with
        // the same seed, bit for bit.
        let params = ModelParams::init(5);
        let clean = test_scene();
        let base = AttackConfig {
            n_iters: 3,
            ..AttackConfig::default()
        };
        let localized_zero = AttackConfig {
            mode: AttackMode::Localized,
            alpha: 0.0,
            ..base.clone()
        };
        let no_preserve = AttackConfig {
            mode: AttackMode::LocalNoPreserve,
            alpha: 123.0, // ignored outside Localized mode
            ..base
        };
        let edits = [mirage(1, 1.0, 3.0)];
        let a = run_attack(&params, &clean, &edits, &fcfg(), &localized_zero, 9).unwrap();
        let b = run_attack(&params, &clean, &edits, &fcfg(), &no_preserve, 9).unwrap();
        for (x, y) in a.delta.iter().zip(&b.delta) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a
            .adversarial
            .samples()
            .iter()
            .zip(b.adversarial.samples())
        {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn empty_edits_are_rejected() {
        let params = ModelParams::init(5);
        let clean = test_scene();
        assert!(matches!(
            run_attack(&params, &clean, &[], &fcfg(), &AttackConfig::default(), 0),
            Err(AttackError::EmptyTarget)
        ));
    }

    #[test]
    fn scenario_sampler_is_deterministic_and_aligned() {
        let y_hat = ActivityGrid::zeros(125, NUM_CLASSES);
        let plan = ScenarioPlan::single_target();
        let cfg = fcfg();

        let mut rng1 = ChaCha8Rng::seed_from_u64(7);
        let e1 = sample_scenario(&y_hat, &plan, &cfg, 4.0, &mut rng1)
            .unwrap()
            .unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let e2 = sample_scenario(&y_hat, &plan, &cfg, 4.0, &mut rng2)
            .unwrap()
            .unwrap();
        assert_eq!(e1, e2);

        // All-inactive ŷ only admits mirage edits; an aligned 3 s window
        // covers 94 frames.
        assert_eq!(e1.len(), 1);
        assert_eq!(e1[0].value, EditValue::Mirage);
        let (region, _) = build_target(&e1, &y_hat, &cfg).unwrap();
        assert_eq!(region.len(), 94);
    }

    #[test]
    fn scenario_sampler_respects_eligibility() {
        // Class 0 active everywhere → only mute candidates for class 0,
        // only mirage candidates for the others.
        let mut y_hat = ActivityGrid::zeros(125, NUM_CLASSES);
        for t in 0..125 {
            y_hat.set(t, 0, true);
        }
        let plan = ScenarioPlan {
            edits_per_scene: 4,
            duration_sec: 2.0,
            eligibility: 0.9,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let edits = sample_scenario(&y_hat, &plan, &fcfg(), 4.0, &mut rng)
            .unwrap()
            .unwrap();
        assert_eq!(edits.len(), 4);
        for edit in &edits {
            if edit.class_id == 0 {
                assert_eq!(edit.value, EditValue::Mute);
            } else {
                assert_eq!(edit.value, EditValue::Mirage);
            }
        }
    }

    #[test]
    fn scenario_sampler_gives_up_when_clip_is_too_short() {
        let y_hat = ActivityGrid::zeros(10, NUM_CLASSES);
        let plan = ScenarioPlan {
            edits_per_scene: 1,
            duration_sec: 3.0,
            eligibility: 0.9,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // 10 frames ≈ 0.32 s of audio: no room for a 3 s edit.
        let sampled = sample_scenario(&y_hat, &plan, &fcfg(), 0.32, &mut rng).unwrap();
        assert!(sampled.is_none());
    }

    #[test]
    fn binarize_round_trip_on_attack_outputs() {
        let params = ModelParams::init(5);
        let clean = test_scene();
        let acfg = AttackConfig {
            n_iters: 2,
            ..AttackConfig::default()
        };
        let result = run_attack(&params, &clean, &[mirage(0, 0.5, 2.0)], &fcfg(), &acfg, 1).unwrap();
        assert_eq!(binarize(&result.posteriors_adv), result.activity_adv);
        assert_eq!(binarize(&result.posteriors_clean), result.activity_clean);
    }
}

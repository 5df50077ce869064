//! Experiment orchestration behind the command-line interface: config files,
//! the synth/train/attack/defend/sweep/scale-edits commands, and their CSV
//! reports. Every emitted row carries the config hash and seed so runs are
//! self-describing; no command overwrites a previous command's artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attack::{
    self, AttackConfig, AttackError, AttackMode, CampaignOutcome, EditValue, OptimizerKind,
    ScenarioPlan, TargetEdit,
};
use crate::defense::{self, DefenseCase, DefenseConfig, DefenseError, DefenseKind};
use crate::features::{self, FeatureError, MelFrontendConfig};
use crate::metrics::{AggregateReport, MetricsError, MetricsReport};
use crate::model::{self, ModelError, ModelParams, TrainConfig, TrainExample};
use crate::scenegen::{self, Scene, SceneConfig, SceneError};
use crate::signal::{self, SignalError, WavError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config {path}:{line}: {reason}")]
    Config {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("output {0} already exists; outputs are write-once per directory")]
    OutputExists(PathBuf),
    #[error("missing artifact {path} — run `{hint}` first")]
    MissingArtifact { path: PathBuf, hint: &'static str },
    #[error("{0}")]
    BadArgument(String),
    #[error("training stage failed: {0}")]
    Train(#[source] ModelError),
    #[error("attack stage failed: {0}")]
    Attack(#[source] AttackError),
    #[error("defense stage failed: {0}")]
    Defense(#[source] DefenseError),
    #[error("dataset stage failed: {0}")]
    Dataset(#[source] SceneError),
    #[error("feature stage failed: {0}")]
    Feature(#[source] FeatureError),
    #[error("metrics stage failed: {0}")]
    Metrics(#[source] MetricsError),
    #[error("model stage failed: {0}")]
    Model(#[source] ModelError),
    #[error("audio i/o failed: {0}")]
    Wav(#[source] WavError),
    #[error("signal stage failed: {0}")]
    Signal(#[source] SignalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    /// 1 for validation problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config { .. }
            | ExperimentError::OutputExists(_)
            | ExperimentError::MissingArtifact { .. }
            | ExperimentError::BadArgument(_) => 1,
            _ => 2,
        }
    }
}

impl From<ModelError> for ExperimentError {
    fn from(e: ModelError) -> Self {
        ExperimentError::Model(e)
    }
}
impl From<AttackError> for ExperimentError {
    fn from(e: AttackError) -> Self {
        ExperimentError::Attack(e)
    }
}
impl From<DefenseError> for ExperimentError {
    fn from(e: DefenseError) -> Self {
        ExperimentError::Defense(e)
    }
}
impl From<SceneError> for ExperimentError {
    fn from(e: SceneError) -> Self {
        ExperimentError::Dataset(e)
    }
}
impl From<FeatureError> for ExperimentError {
    fn from(e: FeatureError) -> Self {
        ExperimentError::Feature(e)
    }
}
impl From<MetricsError> for ExperimentError {
    fn from(e: MetricsError) -> Self {
        ExperimentError::Metrics(e)
    }
}
impl From<WavError> for ExperimentError {
    fn from(e: WavError) -> Self {
        ExperimentError::Wav(e)
    }
}
impl From<SignalError> for ExperimentError {
    fn from(e: SignalError) -> Self {
        ExperimentError::Signal(e)
    }
}

/// Everything a run needs; flat key = value text with [sections].
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub attack_scenes: usize,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub scenario: ScenarioPlan,
    pub defense_kinds: Vec<DefenseKind>,
    pub defense: DefenseConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            train_scenes: 400,
            val_scenes: 100,
            attack_scenes: 50,
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
            attack: AttackConfig::default(),
            scenario: ScenarioPlan::single_target(),
            defense_kinds: vec![
                DefenseKind::None,
                DefenseKind::Downsample,
                DefenseKind::Gaussian,
                DefenseKind::MeanSmooth,
                DefenseKind::MedianSmooth,
            ],
            defense: DefenseConfig::of_kind(DefenseKind::None),
        }
    }
}

/// Parses the sectioned key = value format; unknown sections or keys are
/// hard errors naming the offender.
pub fn parse_config(text: &str, path: &str) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = ExperimentConfig::default();
    let mut section = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let lineno = idx + 1;
        let fail = |reason: String| ExperimentError::Config {
            path: path.to_string(),
            line: lineno,
            reason,
        };
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| fail("unterminated section header".into()))?;
            match name {
                "dataset" | "train" | "attack" | "scenario" | "defense" => {
                    section = name.to_string();
                }
                other => return Err(fail(format!("unknown section [{other}]"))),
            }
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| fail("expected key = value".into()))?;
        let bad_value = || fail(format!("invalid value {value:?} for key {key:?}"));

        macro_rules! parse_into {
            ($target:expr) => {{
                $target = value.parse().map_err(|_| bad_value())?;
            }};
        }

        match (section.as_str(), key) {
            ("", "seed") => parse_into!(cfg.seed),
            ("", "out_dir") => cfg.out_dir = PathBuf::from(value),
            ("dataset", "train_scenes") => parse_into!(cfg.train_scenes),
            ("dataset", "val_scenes") => parse_into!(cfg.val_scenes),
            ("dataset", "attack_scenes") => parse_into!(cfg.attack_scenes),
            ("dataset", "min_events") => parse_into!(cfg.scene.min_events),
            ("dataset", "max_events") => parse_into!(cfg.scene.max_events),
            ("dataset", "overlap_allowed") => parse_into!(cfg.scene.overlap_allowed),
            ("train", "epochs") => parse_into!(cfg.train.epochs),
            ("train", "batch") => parse_into!(cfg.train.batch),
            ("train", "lr") => parse_into!(cfg.train.lr),
            ("attack", "mode") => {
                cfg.attack.mode = match value {
                    "localized" => AttackMode::Localized,
                    "global" => AttackMode::Global,
                    "local-no-preserve" => AttackMode::LocalNoPreserve,
                    _ => return Err(bad_value()),
                };
            }
            ("attack", "alpha") => parse_into!(cfg.attack.alpha),
            ("attack", "tau") => parse_into!(cfg.attack.tau),
            ("attack", "beta") => parse_into!(cfg.attack.beta),
            ("attack", "iters") => parse_into!(cfg.attack.n_iters),
            ("attack", "random_init") => parse_into!(cfg.attack.random_init),
            ("attack", "optimizer") => {
                cfg.attack.optimizer = match value {
                    "adam" => OptimizerKind::Adam,
                    "sign" => OptimizerKind::Sign,
                    _ => return Err(bad_value()),
                };
            }
            ("scenario", "edits") => parse_into!(cfg.scenario.edits_per_scene),
            ("scenario", "duration") => parse_into!(cfg.scenario.duration_sec),
            ("scenario", "eligibility") => parse_into!(cfg.scenario.eligibility),
            ("defense", "kinds") => {
                cfg.defense_kinds = value
                    .split(',')
                    .map(|k| DefenseKind::parse(k.trim()).ok_or_else(bad_value))
                    .collect::<Result<_, _>>()?;
            }
            ("defense", "down_rate") => parse_into!(cfg.defense.down_rate),
            ("defense", "sigma") => parse_into!(cfg.defense.sigma),
            ("defense", "window") => parse_into!(cfg.defense.window),
            ("defense", "anti_alias") => parse_into!(cfg.defense.anti_alias),
            (sec, key) => {
                let place = if sec.is_empty() {
                    "top level".to_string()
                } else {
                    format!("section [{sec}]")
                };
                return Err(fail(format!("unknown key {key:?} in {place}")));
            }
        }
    }
    if cfg.attack.tau <= 0.0 || cfg.attack.alpha < 0.0 || cfg.attack.n_iters < 1 {
        return Err(ExperimentError::Config {
            path: path.to_string(),
            line: 0,
            reason: "attack requires tau > 0, alpha >= 0, iters >= 1".into(),
        });
    }
    Ok(cfg)
}

/// Loads a config file and hashes its raw bytes (the hash stamped into every
/// CSV row).
pub fn load_config(path: &Path) -> Result<(ExperimentConfig, String), ExperimentError> {
    let bytes = fs::read(path).map_err(|_| ExperimentError::MissingArtifact {
        path: path.to_path_buf(),
        hint: "create a config file",
    })?;
    let digest = Sha256::digest(&bytes);
    let mut hash = String::new();
    for b in digest.iter().take(6) {
        let _ = write!(hash, "{b:02x}");
    }
    let text = String::from_utf8_lossy(&bytes);
    let cfg = parse_config(&text, &path.display().to_string())?;
    Ok((cfg, hash))
}

/// One loaded experiment: config, its hash, and the effective output root.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, hash: String, out_override: Option<PathBuf>, seed_override: Option<u64>) -> Self {
        let mut cfg = cfg;
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        let out = out_override.unwrap_or_else(|| cfg.out_dir.clone());
        Self { cfg, hash, out }
    }

    pub fn frontend(&self) -> MelFrontendConfig {
        MelFrontendConfig::default()
    }

    fn dataset_dir(&self, subset: &str) -> PathBuf {
        self.out.join("dataset").join(subset)
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.out.join("model").join("checkpoint.bin")
    }

    fn require_fresh(&self, dir: &Path) -> Result<(), ExperimentError> {
        if dir.exists() {
            return Err(ExperimentError::OutputExists(dir.to_path_buf()));
        }
        Ok(())
    }

    fn load_subset(&self, subset: &str, hint: &'static str) -> Result<Vec<Scene>, ExperimentError> {
        let dir = self.dataset_dir(subset);
        if !dir.exists() {
            return Err(ExperimentError::MissingArtifact { path: dir, hint });
        }
        Ok(scenegen::load_dataset(&dir)?)
    }

    /// Writes the train/val/attack scene subsets.
    pub fn cmd_synth(&self) -> Result<SynthSummary, ExperimentError> {
        let root = self.out.join("dataset");
        self.require_fresh(&root)?;
        let subsets = [
            ("train", self.cfg.train_scenes, 0x7261_u64),
            ("val", self.cfg.val_scenes, 0x7661_u64),
            ("attack", self.cfg.attack_scenes, 0x6174_u64),
        ];
        for (name, count, stream) in subsets {
            let dir = self.dataset_dir(name);
            scenegen::make_dataset(&dir, self.cfg.seed ^ (stream << 32), count, &self.cfg.scene)?;
        }
        Ok(SynthSummary {
            train: self.cfg.train_scenes,
            val: self.cfg.val_scenes,
            attack: self.cfg.attack_scenes,
        })
    }

    /// Trains on the train subset, reports micro-F1 on the validation
    /// subset, and persists the checkpoint plus the loss history.
    pub fn cmd_train(&self) -> Result<TrainSummary, ExperimentError> {
        let model_dir = self.out.join("model");
        self.require_fresh(&model_dir)?;
        let train_scenes = self.load_subset("train", "synth")?;
        let val_scenes = self.load_subset("val", "synth")?;
        let fcfg = self.frontend();

        let to_examples = |scenes: &[Scene]| -> Result<Vec<TrainExample>, ExperimentError> {
            scenes
                .par_iter()
                .map(|scene| {
                    Ok(TrainExample {
                        mel: features::frontend_eval(&scene.waveform, &fcfg)?,
                        labels: scene.label.clone(),
                    })
                })
                .collect()
        };
        let train_examples = to_examples(&train_scenes)?;
        let val_examples = to_examples(&val_scenes)?;

        let mut params = ModelParams::init(self.cfg.seed);
        let train_cfg = TrainConfig {
            seed: self.cfg.seed,
            ..self.cfg.train.clone()
        };
        let history = model::train(&mut params, &train_examples, &train_cfg).map_err(ExperimentError::Train)?;

        let pairs: Vec<_> = val_examples
            .par_iter()
            .map(|ex| -> Result<_, ExperimentError> {
                let posteriors = model::forward(&params, &ex.mel)?;
                Ok((model::binarize(&posteriors), ex.labels.clone()))
            })
            .collect::<Result<_, _>>()?;
        let val_f1 = model::micro_f1(&pairs);

        fs::create_dir_all(&model_dir)?;
        model::save_checkpoint(&params, self.checkpoint_path())?;
        let mut loss_csv = String::from("epoch,mean_loss\n");
        for (epoch, loss) in history.iter().enumerate() {
            let _ = writeln!(loss_csv, "{epoch},{loss}");
        }
        fs::write(model_dir.join("loss_history.csv"), loss_csv)?;
        fs::write(
            model_dir.join("train_summary.txt"),
            format!(
                "config_hash = {}\nseed = {}\nepochs = {}\nfinal_loss = {}\nval_f1 = {}\n",
                self.hash,
                self.cfg.seed,
                history.len(),
                history.last().copied().unwrap_or(f64::NAN),
                val_f1
            ),
        )?;
        Ok(TrainSummary {
            val_f1,
            final_loss: history.last().copied().unwrap_or(f64::NAN),
            checkpoint: self.checkpoint_path(),
        })
    }

    fn load_checkpoint(&self) -> Result<ModelParams, ExperimentError> {
        let path = self.checkpoint_path();
        if !path.exists() {
            return Err(ExperimentError::MissingArtifact { path, hint: "train" });
        }
        Ok(model::load_checkpoint(&path)?)
    }

    /// Runs the configured campaign over the attack subset and persists
    /// per-run artifacts plus per-run and aggregate CSVs.
    pub fn cmd_attack(&self) -> Result<AttackSummary, ExperimentError> {
        let attack_dir = self.out.join("attack");
        self.require_fresh(&attack_dir)?;
        let params = self.load_checkpoint()?;
        let scenes = self.load_subset("attack", "synth")?;
        let fcfg = self.frontend();
        let outcome = attack::run_campaign(
            &params,
            &scenes,
            &self.cfg.scenario,
            &fcfg,
            &self.cfg.attack,
            self.cfg.seed,
        )?;

        fs::create_dir_all(&attack_dir)?;
        for record in &outcome.records {
            let base = attack_dir.join(format!("run_{:04}", record.scene_index));
            signal::save_wav(
                &record.result.adversarial,
                base.with_extension("adv.wav"),
            )?;
            let delta = signal::Waveform::new(
                record.result.delta.clone(),
                record.result.adversarial.sample_rate(),
            )?;
            signal::save_wav(&delta, base.with_extension("delta.wav"))?;
            fs::write(base.with_extension("meta"), self.run_metadata(record))?;
        }
        if !outcome.skipped.is_empty() {
            let lines: Vec<String> = outcome.skipped.iter().map(|i| i.to_string()).collect();
            fs::write(attack_dir.join("skipped.txt"), lines.join("\n") + "\n")?;
        }

        let runs_csv = attack_dir.join("runs.csv");
        fs::write(&runs_csv, self.runs_csv(&outcome, "none"))?;
        let aggregate_csv = attack_dir.join("aggregate.csv");
        fs::write(
            &aggregate_csv,
            self.aggregate_csv(&outcome.aggregate, outcome.skipped.len(), "none"),
        )?;
        Ok(AttackSummary {
            outcome,
            runs_csv,
            aggregate_csv,
        })
    }

    fn run_metadata(&self, record: &attack::ScenarioRecord) -> String {
        let mut out = String::new();
        let r = &record.result;
        let _ = writeln!(out, "scenario = {}", record.scene_index);
        let _ = writeln!(out, "config_hash = {}", self.hash);
        let _ = writeln!(out, "seed = {}", self.cfg.seed);
        let _ = writeln!(out, "mode = {}", self.cfg.attack.mode.name());
        let _ = writeln!(out, "alpha = {}", self.cfg.attack.alpha);
        let _ = writeln!(out, "tau = {}", self.cfg.attack.tau);
        let _ = writeln!(out, "beta = {}", self.cfg.attack.beta);
        let _ = writeln!(out, "optimizer = {}", self.cfg.attack.optimizer.name());
        let _ = writeln!(out, "iters = {}", r.iterations_run);
        let _ = writeln!(out, "edits = {}", r.edits.len());
        for e in &r.edits {
            let value = match e.value {
                EditValue::Mirage => "mirage",
                EditValue::Mute => "mute",
            };
            let _ = writeln!(
                out,
                "edit class={} value={} start={} end={}",
                e.class_id, value, e.start_sec, e.end_sec
            );
        }
        let c = record.report.counts;
        let _ = writeln!(out, "counts se={} fe={} ue={} ne={}", c.se, c.fe, c.ue, c.ne);
        let _ = writeln!(out, "ep = {}", record.report.ep);
        let _ = writeln!(out, "asr = {}", record.report.asr);
        let _ = writeln!(out, "uer = {}", record.report.uer);
        let _ = writeln!(out, "snr_db = {}", record.report.snr_db);
        let _ = writeln!(out, "trace_len = {}", r.loss_trace.len());
        for point in &r.loss_trace {
            let _ = writeln!(
                out,
                "trace {} {} {}",
                point.total, point.adversarial, point.preservation
            );
        }
        out
    }

    const RUNS_HEADER: &'static str =
        "scenario,config_hash,seed,mode,alpha,tau,optimizer,iters,defense,ep,asr,uer,snr_db,se,fe,ue,ne\n";

    fn runs_row(&self, scenario: usize, report: &MetricsReport, defense: &str) -> String {
        let c = report.counts;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            scenario,
            self.hash,
            self.cfg.seed,
            self.cfg.attack.mode.name(),
            self.cfg.attack.alpha,
            self.cfg.attack.tau,
            self.cfg.attack.optimizer.name(),
            self.cfg.attack.n_iters,
            defense,
            report.ep,
            report.asr,
            report.uer,
            report.snr_db,
            c.se,
            c.fe,
            c.ue,
            c.ne
        )
    }

    fn runs_csv(&self, outcome: &CampaignOutcome, defense: &str) -> String {
        let mut out = String::from(Self::RUNS_HEADER);
        for record in &outcome.records {
            out.push_str(&self.runs_row(record.scene_index, &record.report, defense));
        }
        out
    }

    const AGGREGATE_HEADER: &'static str =
        "config_hash,seed,mode,alpha,tau,optimizer,iters,defense,n_runs,n_skipped,ep,asr,uer,snr_mean_db,snr_infinite_runs,se,fe,ue,ne\n";

    fn aggregate_row(&self, agg: &AggregateReport, skipped: usize, defense: &str) -> String {
        let c = agg.counts;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            self.hash,
            self.cfg.seed,
            self.cfg.attack.mode.name(),
            self.cfg.attack.alpha,
            self.cfg.attack.tau,
            self.cfg.attack.optimizer.name(),
            self.cfg.attack.n_iters,
            defense,
            agg.n_runs,
            skipped,
            agg.ep,
            agg.asr,
            agg.uer,
            format_opt(agg.snr_mean_db),
            agg.snr_infinite_runs,
            c.se,
            c.fe,
            c.ue,
            c.ne
        )
    }

    fn aggregate_csv(&self, agg: &AggregateReport, skipped: usize, defense: &str) -> String {
        format!(
            "{}{}",
            Self::AGGREGATE_HEADER,
            self.aggregate_row(agg, skipped, defense)
        )
    }

    /// Reconstructs the stored attack results and re-evaluates them under
    /// every configured defense.
    pub fn cmd_defend(&self) -> Result<DefendSummary, ExperimentError> {
        let defense_dir = self.out.join("defense");
        self.require_fresh(&defense_dir)?;
        let params = self.load_checkpoint()?;
        let cases = self.load_defense_cases(&params)?;
        if cases.is_empty() {
            return Err(ExperimentError::BadArgument(
                "attack directory holds no runs to defend".into(),
            ));
        }
        let fcfg = self.frontend();
        fs::create_dir_all(&defense_dir)?;

        let mut rows = Vec::new();
        let mut summary = String::from(
            "defense,config_hash,seed,n_runs,ep,asr,uer,snr_mean_db,snr_infinite_runs,se,fe,ue,ne\n",
        );
        for &kind in &self.cfg.defense_kinds {
            let dcfg = DefenseConfig {
                kind,
                ..self.cfg.defense.clone()
            };
            let evaluation =
                defense::evaluate_under_defense(&params, &cases, &dcfg, &fcfg, self.cfg.seed)?;
            let mut runs = String::from(Self::RUNS_HEADER);
            for (case_idx, report) in evaluation.per_run.iter().enumerate() {
                runs.push_str(&self.runs_row(case_idx, report, kind.name()));
            }
            fs::write(defense_dir.join(format!("{}_runs.csv", kind.name())), runs)?;
            let agg = &evaluation.aggregate;
            let c = agg.counts;
            let _ = writeln!(
                summary,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                kind.name(),
                self.hash,
                self.cfg.seed,
                agg.n_runs,
                agg.ep,
                agg.asr,
                agg.uer,
                format_opt(agg.snr_mean_db),
                agg.snr_infinite_runs,
                c.se,
                c.fe,
                c.ue,
                c.ne
            );
            rows.push((kind, evaluation.aggregate));
        }
        let summary_csv = defense_dir.join("summary.csv");
        fs::write(&summary_csv, summary)?;
        Ok(DefendSummary { rows, summary_csv })
    }

    /// Rebuilds DefenseCases from the attack directory: clean scene WAVs,
    /// adversarial WAVs, and the edits recorded in each run's metadata.
    fn load_defense_cases(
        &self,
        params: &ModelParams,
    ) -> Result<Vec<DefenseCase>, ExperimentError> {
        let attack_dir = self.out.join("attack");
        if !attack_dir.exists() {
            return Err(ExperimentError::MissingArtifact {
                path: attack_dir,
                hint: "attack",
            });
        }
        let fcfg = self.frontend();
        let mut cases = Vec::new();
        for index in 0..self.cfg.attack_scenes {
            let base = attack_dir.join(format!("run_{index:04}"));
            let meta_path = base.with_extension("meta");
            if !meta_path.exists() {
                continue; // skipped scene
            }
            let edits = parse_edits(&fs::read_to_string(&meta_path)?).map_err(|reason| {
                ExperimentError::BadArgument(format!(
                    "{}: {reason}",
                    meta_path.display()
                ))
            })?;
            let adversarial = signal::load_wav(base.with_extension("adv.wav"))?;
            let scene = scenegen::load_scene(&self.dataset_dir("attack"), index)?;
            let mel = features::frontend_eval(&scene.waveform, &fcfg)?;
            let y_hat = model::binarize(&model::forward(params, &mel)?);
            let (region, labels) = attack::build_target(&edits, &y_hat, &fcfg)?;
            cases.push(DefenseCase {
                clean: scene.waveform,
                adversarial,
                region,
                labels,
            });
        }
        Ok(cases)
    }

    /// Re-runs the campaign once per parameter value with fixed seeds and
    /// emits one CSV row per value.
    pub fn cmd_sweep(&self, parameter: &str, values: &[f64]) -> Result<SweepSummary, ExperimentError> {
        if values.is_empty() {
            return Err(ExperimentError::BadArgument(
                "sweep needs at least one value".into(),
            ));
        }
        if parameter != "alpha" && parameter != "tau" {
            return Err(ExperimentError::BadArgument(format!(
                "unknown sweep parameter {parameter:?} (expected alpha or tau)"
            )));
        }
        let sweep_dir = self.out.join(format!("sweep_{parameter}"));
        self.require_fresh(&sweep_dir)?;
        let params = self.load_checkpoint()?;
        let scenes = self.load_subset("attack", "synth")?;
        let fcfg = self.frontend();

        let mut rows = Vec::new();
        let mut csv = String::from(
            "parameter,value,config_hash,seed,mode,optimizer,iters,n_runs,n_skipped,ep,asr,uer,snr_mean_db,se,fe,ue,ne\n",
        );
        for &value in values {
            let mut acfg = self.cfg.attack.clone();
            match parameter {
                "alpha" => acfg.alpha = value,
                "tau" => acfg.tau = value,
                _ => unreachable!(),
            }
            let outcome = attack::run_campaign(
                &params,
                &scenes,
                &self.cfg.scenario,
                &fcfg,
                &acfg,
                self.cfg.seed,
            )?;
            let agg = &outcome.aggregate;
            let c = agg.counts;
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                parameter,
                value,
                self.hash,
                self.cfg.seed,
                acfg.mode.name(),
                acfg.optimizer.name(),
                acfg.n_iters,
                agg.n_runs,
                outcome.skipped.len(),
                agg.ep,
                agg.asr,
                agg.uer,
                format_opt(agg.snr_mean_db),
                c.se,
                c.fe,
                c.ue,
                c.ne
            );
            rows.push((value, outcome.aggregate.clone()));
        }
        fs::create_dir_all(&sweep_dir)?;
        let csv_path = sweep_dir.join("sweep.csv");
        fs::write(&csv_path, csv)?;
        Ok(SweepSummary {
            rows,
            csv: csv_path,
        })
    }

    /// Campaigns with k = each requested edit count; one CSV row per k.
    pub fn cmd_scale_edits(&self, ks: &[usize]) -> Result<ScaleSummary, ExperimentError> {
        if ks.is_empty() {
            return Err(ExperimentError::BadArgument(
                "scale-edits needs at least one k".into(),
            ));
        }
        let scale_dir = self.out.join("scale_edits");
        self.require_fresh(&scale_dir)?;
        let params = self.load_checkpoint()?;
        let scenes = self.load_subset("attack", "synth")?;
        let fcfg = self.frontend();

        let mut rows = Vec::new();
        let mut csv = String::from(
            "k,config_hash,seed,mode,alpha,tau,optimizer,iters,n_runs,n_skipped,ep,asr,uer,snr_mean_db,se,fe,ue,ne\n",
        );
        for &k in ks {
            let plan = ScenarioPlan {
                edits_per_scene: k,
                ..self.cfg.scenario.clone()
            };
            let outcome = attack::run_campaign(
                &params,
                &scenes,
                &plan,
                &fcfg,
                &self.cfg.attack,
                self.cfg.seed,
            )?;
            let agg = &outcome.aggregate;
            let c = agg.counts;
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                k,
                self.hash,
                self.cfg.seed,
                self.cfg.attack.mode.name(),
                self.cfg.attack.alpha,
                self.cfg.attack.tau,
                self.cfg.attack.optimizer.name(),
                self.cfg.attack.n_iters,
                agg.n_runs,
                outcome.skipped.len(),
                agg.ep,
                agg.asr,
                agg.uer,
                format_opt(agg.snr_mean_db),
                c.se,
                c.fe,
                c.ue,
                c.ne
            );
            rows.push((k, outcome.aggregate.clone()));
        }
        fs::create_dir_all(&scale_dir)?;
        let csv_path = scale_dir.join("scale_edits.csv");
        fs::write(&csv_path, csv)?;
        Ok(ScaleSummary {
            rows,
            csv: csv_path,
        })
    }
}

fn format_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "na".to_string(),
    }
}

/// Reads the `edit class=.. value=.. start=.. end=..` lines back out of a
/// run's metadata record.
pub fn parse_edits(meta: &str) -> Result<Vec<TargetEdit>, String> {
    let mut edits = Vec::new();
    for line in meta.lines() {
        let Some(rest) = line.strip_prefix("edit ") else {
            continue;
        };
        let mut class_id = None;
        let mut value = None;
        let mut start = None;
        let mut end = None;
        for field in rest.split(' ') {
            let (key, v) = field
                .split_once('=')
                .ok_or_else(|| format!("bad edit field {field:?}"))?;
            match key {
                "class" => class_id = v.parse().ok(),
                "value" => {
                    value = match v {
                        "mirage" => Some(EditValue::Mirage),
                        "mute" => Some(EditValue::Mute),
                        _ => None,
                    }
                }
                "start" => start = v.parse().ok(),
                "end" => end = v.parse().ok(),
                _ => return Err(format!("unknown edit field {key:?}")),
            }
        }
        match (class_id, value, start, end) {
            (Some(class_id), Some(value), Some(start_sec), Some(end_sec)) => {
                edits.push(TargetEdit {
                    class_id,
                    value,
                    start_sec,
                    end_sec,
                });
            }
            _ => return Err(format!("incomplete edit line {line:?}")),
        }
    }
    Ok(edits)
}

#[derive(Debug, Clone, Copy)]
pub struct SynthSummary {
    pub train: usize,
    pub val: usize,
    pub attack: usize,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub val_f1: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

#[derive(Debug)]
pub struct AttackSummary {
    pub outcome: CampaignOutcome,
    pub runs_csv: PathBuf,
    pub aggregate_csv: PathBuf,
}

#[derive(Debug)]
pub struct DefendSummary {
    pub rows: Vec<(DefenseKind, AggregateReport)>,
    pub summary_csv: PathBuf,
}

#[derive(Debug)]
pub struct SweepSummary {
    pub rows: Vec<(f64, AggregateReport)>,
    pub csv: PathBuf,
}

#[derive(Debug)]
pub struct ScaleSummary {
    pub rows: Vec<(usize, AggregateReport)>,
    pub csv: PathBuf,
}

//! Experiment harness: configuration, trained-artifact persistence, and the
//! drivers behind the CLI subcommands (training, threshold sweeps, defense
//! evaluation, latent projections, evasion runs, and monitor replay).

pub mod checkpoint;
pub mod pca;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    self, fgsm_stream, npd_attack, syn_uniform_stream, FgsmKind, NpdStrategy,
};
use crate::data::{
    benign_stream, gen_synthetic_dataset, load_raw_tensors, make_outlier_dataset_with_weight,
    split_holdout_classes, Dataset, Provenance, QueryStream, SplitBundle,
};
use crate::error::{Error, Result};
use crate::mmd::MmdConfig;
use crate::models::{
    train_classifier, train_substitute, AttackKind, Classifier, EarlyStop, QueryTranscript,
    TrainConfig,
};
use crate::monitor::{
    run_stream, write_alarms_jsonl, write_trace_csv, Detector, MonitorConfig, MonitorRun,
};
use crate::numerics::{LayerSpec, ModelParams, Tensor};
use crate::rng::Rng;
use crate::vae::{
    build_reference, train_detector_vae, LatentReference, LatentTargets, VaeModel,
    VaeTrainConfig,
};

// phase streams for seed derivation; fixed so runs are reproducible
const STREAM_DATA: u64 = 1;
const STREAM_CLASSIFIER: u64 = 2;
const STREAM_VAE: u64 = 3;
const STREAM_ATTACKS: u64 = 4;
const STREAM_MONITOR: u64 = 5;
const STREAM_NPD_POOL: u64 = 6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSettings {
    pub d: usize,
    pub k: usize,
    pub n_per_class: usize,
    pub spread: f64,
    pub holdout_fraction: f64,
    /// Raw-tensor dataset directory; generated synthetically when absent.
    pub dataset_dir: Option<PathBuf>,
    /// Fixed mixing weight for the outlier construction; drawn per sample
    /// when absent. Low values make outliers decisively noisy, which keeps
    /// the detector keyed on texture rather than template positions.
    #[serde(default)]
    pub outlier_weight: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierSettings {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub early_stop: bool,
}

impl ClassifierSettings {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(seed);
        cfg.hidden = self.hidden.clone();
        cfg.epochs = self.epochs;
        cfg.batch_size = self.batch_size;
        cfg.lr = self.lr;
        cfg.early_stop = self.early_stop.then(EarlyStop::default);
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeSettings {
    pub hidden: usize,
    pub latent_dim: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub recon_on_outliers: bool,
}

impl VaeSettings {
    pub fn to_train_config(&self, seed: u64) -> VaeTrainConfig {
        let mut cfg = VaeTrainConfig::new(seed);
        cfg.hidden = self.hidden;
        cfg.latent_dim = self.latent_dim;
        cfg.max_epochs = self.max_epochs;
        cfg.batch_size = self.batch_size;
        cfg.lr = self.lr;
        cfg.recon_on_outliers = self.recon_on_outliers;
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonitorSettings {
    pub window: usize,
    pub thresholds: Vec<f64>,
    pub block_threshold: f64,
    pub subsample_count: usize,
    pub subsample_size: usize,
    pub check_stride: usize,
}

impl MonitorSettings {
    pub fn to_monitor_config(&self, seed: u64, blocking: bool) -> MonitorConfig {
        let mut mmd = MmdConfig::new(seed);
        mmd.subsample_count = self.subsample_count;
        mmd.subsample_size = self.subsample_size;
        let mut cfg = MonitorConfig::new(seed);
        cfg.mmd = mmd;
        cfg.window = self.window;
        cfg.thresholds = self.thresholds.clone();
        cfg.check_stride = self.check_stride;
        cfg.block_threshold = blocking.then_some(self.block_threshold);
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSettings {
    pub budget: usize,
    pub advpd_kind: FgsmKind,
    pub advpd_eps: f64,
    pub advpd_iters: usize,
    pub advpd_seed_count: usize,
    pub npd_strategy: NpdStrategy,
    pub npd_rounds: usize,
    pub npd_pool_classes: usize,
    pub npd_pool_spread: f64,
    pub npd_epochs: usize,
    pub dilution_percents: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvasionSettings {
    pub grid_iters: usize,
    pub per_query_iters: usize,
    pub stream_len: usize,
    pub ascend: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSettings,
    pub classifier: ClassifierSettings,
    pub vae: VaeSettings,
    pub monitor: MonitorSettings,
    pub attacks: AttackSettings,
    pub sweep_thresholds: Vec<f64>,
    pub transfer_eps: f64,
    pub replay_stream: Provenance,
    pub evasion: EvasionSettings,
}

impl ExperimentConfig {
    /// Desk-scale defaults: synthetic 64-dim 4-class blobs, 5000-query
    /// budgets, the standard monitor window of 100.
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            seed,
            data: DataSettings {
                d: 64,
                k: 4,
                n_per_class: 500,
                spread: 0.05,
                holdout_fraction: 0.25,
                dataset_dir: None,
                outlier_weight: Some(0.3),
            },
            classifier: ClassifierSettings {
                hidden: vec![64, 32],
                epochs: 30,
                batch_size: 32,
                lr: 1e-3,
                early_stop: true,
            },
            vae: VaeSettings {
                hidden: 64,
                latent_dim: 32,
                max_epochs: 400,
                batch_size: 64,
                lr: 5e-3,
                recon_on_outliers: true,
            },
            monitor: MonitorSettings {
                window: 100,
                thresholds: vec![0.0, 0.25, 0.5, 1.0, 1.5, 2.5],
                block_threshold: 0.25,
                subsample_count: 100,
                subsample_size: 20,
                check_stride: 1,
            },
            attacks: AttackSettings {
                budget: 5000,
                advpd_kind: FgsmKind::N,
                advpd_eps: 0.1,
                advpd_iters: 1,
                advpd_seed_count: 50,
                npd_strategy: NpdStrategy::uncertainty(),
                npd_rounds: attacks::DEFAULT_NPD_ROUNDS,
                npd_pool_classes: 8,
                npd_pool_spread: 0.3,
                npd_epochs: 100,
                dilution_percents: vec![100, 25, 5],
            },
            sweep_thresholds: vec![0.0, 0.25, 0.5, 1.0, 1.5, 2.5],
            transfer_eps: 0.1,
            replay_stream: Provenance::Pd,
            evasion: EvasionSettings {
                grid_iters: attacks::DEFAULT_EVASION_ITERS,
                per_query_iters: 500,
                stream_len: 150,
                ascend: false,
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads a config and applies `key=value` overrides on dotted JSON paths.
    pub fn load_with_overrides(path: &Path, sets: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut value: serde_json::Value = serde_json::from_str(&text)?;
        for set in sets {
            apply_override(&mut value, set)?;
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Sets a dotted key (`monitor.window=50`) inside a JSON config value. The
/// right-hand side parses as JSON when possible, else as a string.
pub fn apply_override(value: &mut serde_json::Value, set: &str) -> Result<()> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| Error::argument(format!("override '{set}' is not key=value")))?;
    let new: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cursor
            .as_object_mut()
            .ok_or_else(|| Error::argument(format!("override '{key}': '{part}' not an object")))?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), new);
            return Ok(());
        }
        cursor = map
            .get_mut(*part)
            .ok_or_else(|| Error::argument(format!("override '{key}': unknown key '{part}'")))?;
    }
    unreachable!("parts is nonempty")
}

/// Everything a deployed experiment needs: datasets, the served classifier,
/// the trained encoder, and the frozen reference.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub splits: SplitBundle,
    pub outliers: Dataset,
    pub classifier: Classifier,
    pub vae: VaeModel,
    pub targets: LatentTargets,
    pub reference: LatentReference,
}

impl Artifacts {
    pub fn detector(&self, cfg: &ExperimentConfig, blocking: bool) -> Result<Detector> {
        let mcfg = cfg
            .monitor
            .to_monitor_config(Rng::with_stream(cfg.seed, STREAM_MONITOR).next_u64(), blocking);
        Detector::new(self.vae.clone(), self.reference.clone(), mcfg)
    }
}

fn base_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data.dataset_dir {
        Some(dir) => load_raw_tensors(dir),
        None => {
            let mut rng = Rng::with_stream(cfg.seed, STREAM_DATA);
            gen_synthetic_dataset(
                cfg.data.d,
                cfg.data.k,
                cfg.data.n_per_class,
                cfg.data.spread,
                &mut rng,
            )
        }
    }
}

/// Trains the full pipeline from a config: classifier on the retained
/// classes, outlier construction, the two-target VAE, and the reference set.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let ds = base_dataset(cfg)?;
    let splits = split_holdout_classes(&ds, cfg.data.holdout_fraction)?;
    let classifier_cfg = cfg
        .classifier
        .to_train_config(Rng::with_stream(cfg.seed, STREAM_CLASSIFIER).next_u64());
    let classifier = train_classifier(&splits.train, &classifier_cfg)?;
    let mut outlier_rng = Rng::with_stream(cfg.seed, STREAM_DATA).split(1);
    let outliers =
        make_outlier_dataset_with_weight(&splits.train, &mut outlier_rng, cfg.data.outlier_weight)?;
    let vae_cfg = cfg
        .vae
        .to_train_config(Rng::with_stream(cfg.seed, STREAM_VAE).next_u64());
    let targets = LatentTargets::standard(vae_cfg.latent_dim);
    let mut vae_rng = Rng::with_stream(cfg.seed, STREAM_VAE).split(1);
    let (vae, _losses) =
        train_detector_vae(&splits.train, &outliers, &targets, &vae_cfg, &mut vae_rng)?;
    let reference = build_reference(&vae, &splits.train)?;
    Ok(Artifacts {
        splits,
        outliers,
        classifier,
        vae,
        targets,
        reference,
    })
}

const MODEL_FILE: &str = "model.json";

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    classifier_specs: Vec<LayerSpec>,
    classifier_classes: usize,
    trunk_specs: Vec<LayerSpec>,
    mu_specs: Vec<LayerSpec>,
    logvar_specs: Vec<LayerSpec>,
    decoder_specs: Vec<LayerSpec>,
    latent_dim: usize,
    input_dim: usize,
    targets: LatentTargets,
    reference_len: usize,
}

fn prefixed(out: &mut IndexMap<String, Tensor>, prefix: &str, params: &ModelParams) {
    for (name, t) in params.iter() {
        out.insert(format!("{prefix}.{name}"), t.clone());
    }
}

fn strip_prefix(
    tensors: &IndexMap<String, Tensor>,
    prefix: &str,
) -> Result<ModelParams> {
    let mut params = ModelParams::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) {
            params.insert(rest, t.clone());
        }
    }
    if params.iter().next().is_none() {
        return Err(Error::structure(format!(
            "checkpoint has no parameter group '{prefix}'"
        )));
    }
    Ok(params)
}

/// Saves the trained models and reference under `dir`.
pub fn save_artifacts(dir: &Path, artifacts: &Artifacts) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tensors = IndexMap::new();
    prefixed(&mut tensors, "g", &artifacts.classifier.params);
    prefixed(&mut tensors, "f_mu.trunk", &artifacts.vae.trunk.params);
    prefixed(&mut tensors, "f_mu.head", &artifacts.vae.mu_head.params);
    prefixed(&mut tensors, "f_sigma.head", &artifacts.vae.logvar_head.params);
    prefixed(&mut tensors, "f_dec", &artifacts.vae.decoder.params);
    let n = artifacts.reference.len();
    let latent = artifacts.reference.latent_dim;
    let flat: Vec<f64> = artifacts
        .reference
        .embeddings
        .iter()
        .flat_map(|e| e.iter().copied())
        .collect();
    tensors.insert(
        "reference.embeddings".to_string(),
        Tensor::new(vec![n, latent], flat)?,
    );
    checkpoint::save_tensors(dir, &tensors)?;
    let meta = ModelMeta {
        classifier_specs: artifacts.classifier.specs.clone(),
        classifier_classes: artifacts.classifier.num_classes,
        trunk_specs: artifacts.vae.trunk.specs.clone(),
        mu_specs: artifacts.vae.mu_head.specs.clone(),
        logvar_specs: artifacts.vae.logvar_head.specs.clone(),
        decoder_specs: artifacts.vae.decoder.specs.clone(),
        latent_dim: artifacts.vae.latent_dim,
        input_dim: artifacts.vae.input_dim,
        targets: artifacts.targets.clone(),
        reference_len: n,
    };
    let mut f = std::fs::File::create(dir.join(MODEL_FILE))?;
    serde_json::to_writer_pretty(&mut f, &meta)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Loads models from a checkpoint directory and rebuilds the datasets from
/// the config (data generation is a pure function of the seed).
pub fn load_artifacts(dir: &Path, cfg: &ExperimentConfig) -> Result<Artifacts> {
    if !dir.join(checkpoint::MANIFEST_FILE).exists() {
        return Err(Error::structure(format!(
            "missing checkpoint at {}; run the train subcommand first",
            dir.display()
        )));
    }
    let tensors = checkpoint::load_tensors(dir)?;
    let meta: ModelMeta =
        serde_json::from_str(&std::fs::read_to_string(dir.join(MODEL_FILE))?)?;
    let classifier = Classifier {
        specs: meta.classifier_specs,
        params: strip_prefix(&tensors, "g")?,
        num_classes: meta.classifier_classes,
    };
    let vae = VaeModel {
        trunk: crate::vae::Subnet {
            specs: meta.trunk_specs,
            params: strip_prefix(&tensors, "f_mu.trunk")?,
        },
        mu_head: crate::vae::Subnet {
            specs: meta.mu_specs,
            params: strip_prefix(&tensors, "f_mu.head")?,
        },
        logvar_head: crate::vae::Subnet {
            specs: meta.logvar_specs,
            params: strip_prefix(&tensors, "f_sigma.head")?,
        },
        decoder: crate::vae::Subnet {
            specs: meta.decoder_specs,
            params: strip_prefix(&tensors, "f_dec")?,
        },
        latent_dim: meta.latent_dim,
        input_dim: meta.input_dim,
    };
    let reft = tensors
        .get("reference.embeddings")
        .ok_or_else(|| Error::structure("checkpoint has no reference embeddings"))?;
    if reft.shape() != [meta.reference_len, meta.latent_dim] {
        return Err(Error::structure(format!(
            "reference shape {:?} disagrees with model metadata",
            reft.shape()
        )));
    }
    let embeddings: Vec<Vec<f64>> = reft
        .data()
        .chunks_exact(meta.latent_dim)
        .map(|c| c.to_vec())
        .collect();
    let reference = LatentReference {
        embeddings,
        latent_dim: meta.latent_dim,
    };
    let ds = base_dataset(cfg)?;
    let splits = split_holdout_classes(&ds, cfg.data.holdout_fraction)?;
    let mut outlier_rng = Rng::with_stream(cfg.seed, STREAM_DATA).split(1);
    let outliers =
        make_outlier_dataset_with_weight(&splits.train, &mut outlier_rng, cfg.data.outlier_weight)?;
    Ok(Artifacts {
        splits,
        outliers,
        classifier,
        vae,
        targets: meta.targets,
        reference,
    })
}

/// The non-problem-domain pool: synthetic blobs with fresh templates and a
/// wider spread than the confidential data.
pub fn npd_pool(cfg: &ExperimentConfig) -> Result<Dataset> {
    let per_class = (cfg.attacks.budget * 6 / 5).div_ceil(cfg.attacks.npd_pool_classes);
    let mut rng = Rng::with_stream(cfg.seed, STREAM_NPD_POOL);
    gen_synthetic_dataset(
        cfg.data.d,
        cfg.attacks.npd_pool_classes,
        per_class,
        cfg.attacks.npd_pool_spread,
        &mut rng,
    )
}

fn attack_rng(cfg: &ExperimentConfig, lane: u64) -> Rng {
    Rng::with_stream(cfg.seed, STREAM_ATTACKS).split(lane)
}

fn advpd_seeds(cfg: &ExperimentConfig, artifacts: &Artifacts) -> Dataset {
    let n = cfg.attacks.advpd_seed_count.min(artifacts.splits.train.len());
    let idx: Vec<usize> = (0..n).collect();
    artifacts.splits.train.subset(&idx)
}

/// Builds the query stream for one provenance, with a budget override.
pub fn build_stream(
    cfg: &ExperimentConfig,
    artifacts: &Artifacts,
    kind: Provenance,
    budget: usize,
) -> Result<QueryStream> {
    match kind {
        Provenance::Pd => benign_stream(
            Provenance::Pd,
            &artifacts.splits.test,
            budget,
            &mut attack_rng(cfg, 0),
        ),
        Provenance::AltPd => benign_stream(
            Provenance::AltPd,
            &artifacts.splits.held_out,
            budget,
            &mut attack_rng(cfg, 1),
        ),
        Provenance::Syn => syn_uniform_stream(cfg.data.d, budget, &mut attack_rng(cfg, 2)),
        Provenance::AdvPd => fgsm_stream(
            cfg.attacks.advpd_kind,
            &artifacts.classifier,
            &advpd_seeds(cfg, artifacts),
            cfg.attacks.advpd_eps,
            cfg.attacks.advpd_iters,
            budget,
            &mut attack_rng(cfg, 3),
        ),
        Provenance::Npd => {
            let pool = npd_pool(cfg)?;
            let mut tcfg = AttackKind::Npd.default_train_config(0);
            tcfg.epochs = cfg.attacks.npd_epochs;
            let out = npd_attack(
                &artifacts.classifier,
                &pool,
                cfg.attacks.npd_strategy,
                budget,
                cfg.attacks.npd_rounds,
                &tcfg,
                &mut attack_rng(cfg, 4),
            )?;
            Ok(out.stream)
        }
        other => Err(Error::argument(format!(
            "no stream generator for provenance {}",
            other.as_str()
        ))),
    }
}

pub const SWEEP_STREAMS: [Provenance; 5] = [
    Provenance::Pd,
    Provenance::AltPd,
    Provenance::Syn,
    Provenance::AdvPd,
    Provenance::Npd,
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub stream: String,
    pub delta: f64,
    pub alarmed: bool,
}

/// Per-threshold alarm matrix plus the traces behind it.
#[derive(Debug)]
pub struct DetectionReport {
    pub rows: Vec<SweepRow>,
    pub runs: Vec<(Provenance, MonitorRun)>,
}

impl DetectionReport {
    /// Alarmed at delta implies alarmed at every smaller delta.
    pub fn assert_monotone(&self) -> Result<()> {
        let streams: Vec<&str> = {
            let mut s: Vec<&str> = self.rows.iter().map(|r| r.stream.as_str()).collect();
            s.dedup();
            s
        };
        for stream in streams {
            let mut rows: Vec<&SweepRow> = self
                .rows
                .iter()
                .filter(|r| r.stream == stream)
                .collect();
            rows.sort_by(|a, b| a.delta.total_cmp(&b.delta));
            for w in rows.windows(2) {
                if w[1].alarmed && !w[0].alarmed {
                    return Err(Error::structure(format!(
                        "alarm matrix not monotone for {stream}: alarmed at {} but not {}",
                        w[1].delta, w[0].delta
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn alarmed(&self, stream: Provenance, delta: f64) -> Option<bool> {
        self.rows
            .iter()
            .find(|r| r.stream == stream.as_str() && r.delta == delta)
            .map(|r| r.alarmed)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "stream,delta,alarmed")?;
        for r in &self.rows {
            writeln!(f, "{},{},{}", r.stream, r.delta, r.alarmed)?;
        }
        Ok(())
    }
}

/// Runs the five evaluation streams through a non-blocking detector and
/// tabulates alarms per sweep threshold.
pub fn run_sweep(cfg: &ExperimentConfig, artifacts: &Artifacts) -> Result<DetectionReport> {
    let detector = artifacts.detector(cfg, false)?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for kind in SWEEP_STREAMS {
        let stream = build_stream(cfg, artifacts, kind, cfg.attacks.budget)?;
        let run = run_stream(&detector, &artifacts.classifier, stream.queries())?;
        for &delta in &cfg.sweep_thresholds {
            rows.push(SweepRow {
                stream: kind.as_str().to_string(),
                delta,
                alarmed: run.checks_above(delta) > 0,
            });
        }
        runs.push((kind, run));
    }
    let report = DetectionReport { rows, runs };
    report.assert_monotone()?;
    Ok(report)
}

fn transcript_from_stream(
    oracle: &Classifier,
    stream: &QueryStream,
) -> Result<QueryTranscript> {
    let mut transcript = QueryTranscript::default();
    for q in stream.queries() {
        let response = oracle.predict_proba(q.data())?;
        transcript.entries.push((q.clone(), response));
    }
    Ok(transcript)
}

/// Fraction of single-step FGSM examples crafted on the substitute (from test
/// samples) that flip the served model's prediction.
pub fn transferability(
    oracle: &Classifier,
    substitute: &Classifier,
    test: &Dataset,
    eps: f64,
    cap: usize,
) -> Result<f64> {
    let mut flips = 0usize;
    let mut total = 0usize;
    for (x, _) in test.samples().iter().take(cap) {
        let label = substitute.predict_label(x.data())?;
        let grad = substitute.input_gradient(x.data(), label)?;
        let crafted: Vec<f64> = x
            .data()
            .iter()
            .zip(&grad)
            .map(|(v, g)| (v + eps * if *g == 0.0 { 0.0 } else { g.signum() }).clamp(0.0, 1.0))
            .collect();
        if oracle.predict_label(x.data())? != oracle.predict_label(&crafted)? {
            flips += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(Error::argument("transferability needs test samples"));
    }
    Ok(flips as f64 / total as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefendEvalRow {
    pub attack: String,
    pub defended: bool,
    pub answered: usize,
    pub accuracy: f64,
    pub transferability: f64,
}

pub const DEFEND_EVAL_ATTACKS: [Provenance; 2] = [Provenance::Syn, Provenance::Npd];

fn substitute_kind(kind: Provenance) -> AttackKind {
    match kind {
        Provenance::Syn => AttackKind::Syn,
        Provenance::AdvPd => AttackKind::AdvPd,
        _ => AttackKind::Npd,
    }
}

/// Undefended-vs-defended substitute quality per attack.
pub fn run_defend_eval(
    cfg: &ExperimentConfig,
    artifacts: &Artifacts,
) -> Result<Vec<DefendEvalRow>> {
    let detector = artifacts.detector(cfg, true)?;
    let d = artifacts.splits.train.dim();
    let k = artifacts.classifier.num_classes;
    let test = &artifacts.splits.test;
    let mut rows = Vec::new();
    for kind in DEFEND_EVAL_ATTACKS {
        let stream = build_stream(cfg, artifacts, kind, cfg.attacks.budget)?;
        let full = transcript_from_stream(&artifacts.classifier, &stream)?;
        let defended_run = run_stream(&detector, &artifacts.classifier, stream.queries())?;
        let mut defended_transcript = full.clone();
        defended_transcript.truncation = defended_run.transcript.truncation;
        for (label, transcript) in [(false, &full), (true, &defended_transcript)] {
            let mut tcfg = substitute_kind(kind).default_train_config(cfg.seed ^ 0x5B);
            if substitute_kind(kind) == AttackKind::Npd {
                tcfg.epochs = cfg.attacks.npd_epochs;
            }
            let outcome = train_substitute(transcript, substitute_kind(kind), d, k, &tcfg)?;
            let accuracy = outcome.accuracy(test)?;
            let transfer = match outcome.classifier() {
                Some(sub) => transferability(
                    &artifacts.classifier,
                    sub,
                    test,
                    cfg.transfer_eps,
                    200,
                )?,
                None => 0.0,
            };
            rows.push(DefendEvalRow {
                attack: kind.as_str().to_string(),
                defended: label,
                answered: transcript.answered().len(),
                accuracy,
                transferability: transfer,
            });
        }
    }
    Ok(rows)
}

pub fn write_defend_eval_csv(rows: &[DefendEvalRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "attack,defended,answered,accuracy,transferability")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.attack, r.defended, r.answered, r.accuracy, r.transferability
        )?;
    }
    Ok(())
}

/// Embedding sets projected for the latent-space figure data.
pub fn run_project(
    cfg: &ExperimentConfig,
    artifacts: &Artifacts,
) -> Result<Vec<(String, Vec<f64>)>> {
    let embed = |ds: &[Tensor]| -> Result<Vec<Vec<f64>>> {
        ds.iter()
            .map(|x| artifacts.vae.encode_mu(x.data()))
            .collect()
    };
    let dc: Vec<Tensor> = artifacts.splits.train.inputs().cloned().collect();
    let do_: Vec<Tensor> = artifacts.outliers.inputs().cloned().collect();
    let da = build_stream(cfg, artifacts, Provenance::Syn, 1000.min(cfg.attacks.budget))?;
    let sets = [
        ("D_C", embed(&dc)?),
        ("D_O", embed(&do_)?),
        ("D_A", embed(da.queries())?),
    ];
    let union: Vec<Vec<f64>> = sets.iter().flat_map(|(_, e)| e.iter().cloned()).collect();
    let pca = pca::fit_pca(&union, 3)?;
    let mut rows = Vec::with_capacity(union.len());
    for (name, embeddings) in &sets {
        for e in embeddings {
            rows.push((name.to_string(), pca.project(e)));
        }
    }
    Ok(rows)
}

pub fn write_project_csv(rows: &[(String, Vec<f64>)], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "set,comp1,comp2,comp3")?;
    for (set, comps) in rows {
        writeln!(f, "{},{},{},{}", set, comps[0], comps[1], comps[2])?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvasionReportRow {
    pub epsilon: f64,
    pub alarmed: bool,
    pub max_mmd: f64,
    pub final_latent_distance: f64,
}

#[derive(Debug)]
pub struct EvasionOutcome {
    pub traces: Vec<attacks::EvasionTrace>,
    pub report: Vec<EvasionReportRow>,
}

/// Grid-searches the evasion step size on one attack sample, then replays a
/// perturbed attack stream per epsilon through the monitor.
pub fn run_evasion(cfg: &ExperimentConfig, artifacts: &Artifacts) -> Result<EvasionOutcome> {
    let stream = build_stream(
        cfg,
        artifacts,
        Provenance::Syn,
        cfg.evasion.stream_len.max(cfg.monitor.window + 50),
    )?;
    let probe = stream.queries()[0].data();
    let traces = attacks::evasion_grid(
        &artifacts.vae,
        &artifacts.targets,
        probe,
        cfg.evasion.grid_iters,
        cfg.evasion.ascend,
    )?;
    // stop once inside the typical reference radius
    let radius = {
        let n = artifacts.reference.len() as f64;
        artifacts
            .reference
            .embeddings
            .iter()
            .map(|e| crate::numerics::euclidean_distance(e, &artifacts.targets.mu_c))
            .sum::<f64>()
            / n
    };
    let detector = artifacts.detector(cfg, false)?;
    let mut report = Vec::new();
    for trace in &traces {
        let mut perturbed = Vec::with_capacity(stream.len());
        let mut final_distance = 0.0;
        for q in stream.queries() {
            let (x, dist_trace) = attacks::evasion_perturb(
                &artifacts.vae,
                &artifacts.targets,
                q.data(),
                trace.epsilon,
                cfg.evasion.per_query_iters,
                cfg.evasion.ascend,
                Some(radius),
            )?;
            final_distance = *dist_trace.last().expect("trace never empty");
            perturbed.push(x);
        }
        let run = run_stream(&detector, &artifacts.classifier, &perturbed)?;
        report.push(EvasionReportRow {
            epsilon: trace.epsilon,
            alarmed: run.checks_above(cfg.monitor.block_threshold) > 0,
            max_mmd: run.max_mmd().unwrap_or(0.0),
            final_latent_distance: final_distance,
        });
    }
    Ok(EvasionOutcome { traces, report })
}

pub fn write_evasion_report_csv(rows: &[EvasionReportRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epsilon,alarmed,max_mmd,final_latent_distance")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{}",
            r.epsilon, r.alarmed, r.max_mmd, r.final_latent_distance
        )?;
    }
    Ok(())
}

pub const CHECKPOINT_DIR: &str = "checkpoint";

/// `train`: fit everything and write the checkpoint plus the resolved config.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let artifacts = prepare(cfg)?;
    save_artifacts(&out.join(CHECKPOINT_DIR), &artifacts)?;
    cfg.save(&out.join("config.json"))?;
    Ok(())
}

fn load_for_eval(cfg: &ExperimentConfig, out: &Path) -> Result<Artifacts> {
    load_artifacts(&out.join(CHECKPOINT_DIR), cfg)
}

/// `sweep`: the per-threshold alarm matrix plus per-stream traces.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let artifacts = load_for_eval(cfg, out)?;
    let report = run_sweep(cfg, &artifacts)?;
    report.write_csv(&out.join("sweep.csv"))?;
    for (kind, run) in &report.runs {
        write_trace_csv(
            &run.trace,
            &out.join(format!("trace_{}.csv", kind.as_str())),
        )?;
        write_alarms_jsonl(
            &run.alarms,
            &out.join(format!("alarms_{}.jsonl", kind.as_str())),
        )?;
    }
    Ok(())
}

/// `defend-eval`: substitute accuracy and transferability with and without
/// blocking.
pub fn cmd_defend_eval(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let artifacts = load_for_eval(cfg, out)?;
    let rows = run_defend_eval(cfg, &artifacts)?;
    write_defend_eval_csv(&rows, &out.join("defend_eval.csv"))?;
    Ok(())
}

/// `project`: 3-component PCA coordinates of the embedding sets.
pub fn cmd_project(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let artifacts = load_for_eval(cfg, out)?;
    let rows = run_project(cfg, &artifacts)?;
    write_project_csv(&rows, &out.join("project.csv"))?;
    Ok(())
}

/// `evasion`: step-size grid traces plus the perturbed-stream alarm report.
pub fn cmd_evasion(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let artifacts = load_for_eval(cfg, out)?;
    let outcome = run_evasion(cfg, &artifacts)?;
    attacks::write_evasion_csv(&outcome.traces, &out.join("evasion.csv"))?;
    write_evasion_report_csv(&outcome.report, &out.join("evasion_report.csv"))?;
    Ok(())
}

/// `monitor-replay`: rebuild the configured stream and replay it through the
/// monitor, writing its trace and alarms.
pub fn cmd_monitor_replay(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let artifacts = load_for_eval(cfg, out)?;
    let stream = build_stream(cfg, &artifacts, cfg.replay_stream, cfg.attacks.budget)?;
    let detector = artifacts.detector(cfg, false)?;
    let run = run_stream(&detector, &artifacts.classifier, stream.queries())?;
    write_trace_csv(&run.trace, &out.join("replay_trace.csv"))?;
    write_alarms_jsonl(&run.alarms, &out.join("replay_alarms.jsonl"))?;
    Ok(())
}

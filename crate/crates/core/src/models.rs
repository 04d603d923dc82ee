//! The served classifier, substitute models, training loops, and the
//! input-space derivatives the attack simulators need.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{
    backward, forward, init_params, loss_and_grad, AdamState, LayerSpec, Loss,
    ModelParams, Tensor,
};
use crate::rng::Rng;

/// A softmax classifier over a fixed layer chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Classifier {
    pub specs: Vec<LayerSpec>,
    pub params: ModelParams,
    pub num_classes: usize,
}

impl Classifier {
    /// Default desk-scale MLP: affine-relu-dropout stack ending in softmax.
    pub fn mlp_specs(d: usize, hidden: &[usize], k: usize) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut prev = d;
        for &h in hidden {
            specs.push(LayerSpec::affine(prev, h));
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::dropout());
            prev = h;
        }
        specs.push(LayerSpec::affine(prev, k));
        specs.push(LayerSpec::Softmax);
        specs
    }

    pub fn input_dim(&self) -> usize {
        crate::numerics::validate_specs(&self.specs)
            .expect("classifier specs validated at construction")
            .0
            .expect("classifier has an affine layer")
    }

    /// Softmax probability vector for `x` (inference path, dropout off).
    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        let trace = forward(&self.params, &self.specs, x, false, None)?;
        Ok(trace.output().to_vec())
    }

    pub fn predict_label(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict_proba(x)?))
    }

    /// Gradient of the cross-entropy loss at `x` with respect to the input.
    pub fn input_gradient(&self, x: &[f64], label: usize) -> Result<Vec<f64>> {
        if label >= self.num_classes {
            return Err(Error::argument(format!(
                "label {label} out of range for {} classes",
                self.num_classes
            )));
        }
        let (_, _, input_grad) = loss_and_grad(
            &self.params,
            &self.specs,
            x,
            &Loss::CrossEntropy { label },
            false,
            None,
        )?;
        Ok(input_grad)
    }

    /// Pre-softmax logits.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let specs = self.logit_specs();
        let trace = forward(&self.params, specs, x, false, None)?;
        Ok(trace.output().to_vec())
    }

    fn logit_specs(&self) -> &[LayerSpec] {
        match self.specs.last() {
            Some(LayerSpec::Softmax) => &self.specs[..self.specs.len() - 1],
            _ => &self.specs,
        }
    }

    /// k x d matrix: row j is the gradient of logit j with respect to the input.
    pub fn jacobian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let specs = self.logit_specs();
        let trace = forward(&self.params, specs, x, false, None)?;
        let k = trace.output().len();
        let mut rows = Vec::with_capacity(k);
        for j in 0..k {
            let mut seed = vec![0.0; k];
            seed[j] = 1.0;
            let (_, input_grad) = backward(&self.params, specs, &trace, &seed)?;
            rows.push(input_grad);
        }
        Ok(rows)
    }

    /// Fraction of `test` samples where this model's argmax matches `other`'s.
    pub fn agreement(&self, other: &Classifier, test: &Dataset) -> Result<f64> {
        let mut hits = 0usize;
        for (x, _) in test.samples() {
            if self.predict_label(x.data())? == other.predict_label(x.data())? {
                hits += 1;
            }
        }
        Ok(hits as f64 / test.len() as f64)
    }

    pub fn accuracy(&self, test: &Dataset) -> Result<f64> {
        let mut hits = 0usize;
        for (x, y) in test.samples() {
            if self.predict_label(x.data())? == *y {
                hits += 1;
            }
        }
        Ok(hits as f64 / test.len() as f64)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: usize,
    pub validation_fraction: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            patience: 10,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub early_stop: Option<EarlyStop>,
    pub seed: u64,
    /// Hidden layer widths of the MLP.
    pub hidden: Vec<usize>,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            early_stop: None,
            seed,
            hidden: vec![32],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::argument("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::argument("batch_size must be >= 1"));
        }
        if let Some(es) = &self.early_stop {
            if es.patience == 0 {
                return Err(Error::argument("early-stop patience must be >= 1"));
            }
            if !(0.0..1.0).contains(&es.validation_fraction) || es.validation_fraction == 0.0 {
                return Err(Error::argument("validation fraction must be in (0,1)"));
            }
        }
        Ok(())
    }
}

/// One served query and its recorded response.
pub type TranscriptEntry = (Tensor, Vec<f64>);

/// Ordered (query, response) pairs; `truncation` marks the first blocked
/// query when the defense was active.
#[derive(Debug, Clone, Default)]
pub struct QueryTranscript {
    pub entries: Vec<TranscriptEntry>,
    pub truncation: Option<usize>,
}

impl QueryTranscript {
    /// The entries the attacker actually received answers for.
    pub fn answered(&self) -> &[TranscriptEntry] {
        match self.truncation {
            Some(t) => &self.entries[..t],
            None => &self.entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Macro-averaged F1 over predicted/true label pairs.
pub fn macro_f1(pairs: &[(usize, usize)], k: usize) -> f64 {
    let mut f1_sum = 0.0;
    for c in 0..k {
        let tp = pairs.iter().filter(|(p, t)| *p == c && *t == c).count() as f64;
        let fp = pairs.iter().filter(|(p, t)| *p == c && *t != c).count() as f64;
        let fnn = pairs.iter().filter(|(p, t)| *p != c && *t == c).count() as f64;
        let denom = 2.0 * tp + fp + fnn;
        f1_sum += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    f1_sum / k as f64
}

struct SoftSample {
    x: Tensor,
    target: Vec<f64>,
}

/// Shared Adam training loop over soft targets (one-hot labels are a special
/// case). Deterministic under the config seed.
fn train_soft(
    samples: &[SoftSample],
    d: usize,
    k: usize,
    cfg: &TrainConfig,
) -> Result<Classifier> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::argument("training needs at least one sample"));
    }
    let specs = Classifier::mlp_specs(d, &cfg.hidden, k);
    let mut rng = Rng::with_stream(cfg.seed, 0xC1A55);
    let mut params = init_params(&specs, &mut rng)?;
    let mut adam = AdamState::new(&params, cfg.lr);

    // seed-deterministic validation split for early stopping
    let (train_idx, val_idx): (Vec<usize>, Vec<usize>) = match &cfg.early_stop {
        Some(es) => {
            let perm = rng.permutation(samples.len());
            let n_val = ((samples.len() as f64) * es.validation_fraction).ceil() as usize;
            let n_val = n_val.min(samples.len().saturating_sub(1)).max(1);
            (perm[n_val..].to_vec(), perm[..n_val].to_vec())
        }
        None => ((0..samples.len()).collect(), Vec::new()),
    };

    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_params = params.clone();
    let mut since_best = 0usize;

    for _epoch in 0..cfg.epochs {
        let order = rng.permutation(train_idx.len());
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = params.zeros_like();
            for &oi in chunk {
                let s = &samples[train_idx[oi]];
                let (_, g, _) = loss_and_grad(
                    &params,
                    &specs,
                    s.x.data(),
                    &Loss::SoftCrossEntropy { target: &s.target },
                    true,
                    Some(&mut rng),
                )?;
                grads.axpy(1.0, &g);
            }
            grads.scale(1.0 / chunk.len() as f64);
            adam.step(&mut params, &grads)?;
        }

        if let Some(es) = &cfg.early_stop {
            let probe = Classifier {
                specs: specs.clone(),
                params: params.clone(),
                num_classes: k,
            };
            let pairs: Vec<(usize, usize)> = val_idx
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    Ok((probe.predict_label(s.x.data())?, argmax(&s.target)))
                })
                .collect::<Result<_>>()?;
            let f1 = macro_f1(&pairs, k);
            if f1 > best_f1 {
                best_f1 = f1;
                best_params = params.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= es.patience {
                    break;
                }
            }
        }
    }

    let final_params = if cfg.early_stop.is_some() {
        best_params
    } else {
        params
    };
    Ok(Classifier {
        specs,
        params: final_params,
        num_classes: k,
    })
}

/// Trains the served classifier on hard labels with cross-entropy and Adam.
pub fn train_classifier(ds: &Dataset, cfg: &TrainConfig) -> Result<Classifier> {
    if ds.present_classes().len() < 2 {
        return Err(Error::argument(
            "classifier training needs at least two classes present",
        ));
    }
    let k = ds.num_classes();
    let samples: Vec<SoftSample> = ds
        .samples()
        .iter()
        .map(|(x, y)| {
            let mut target = vec![0.0; k];
            target[*y] = 1.0;
            SoftSample {
                x: x.clone(),
                target,
            }
        })
        .collect();
    train_soft(&samples, ds.dim(), k, cfg)
}

/// Which attack produced the transcript; fixes the default epoch budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackKind {
    Syn,
    AdvPd,
    Npd,
}

impl AttackKind {
    pub fn default_train_config(&self, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(seed);
        match self {
            AttackKind::Syn => cfg.epochs = 50,
            AttackKind::AdvPd => cfg.epochs = 100,
            AttackKind::Npd => {
                cfg.epochs = 1000;
                cfg.early_stop = Some(EarlyStop::default());
            }
        }
        cfg
    }
}

/// Outcome of substitute training; a fully blocked transcript yields no model
/// and chance-level accuracy.
#[derive(Debug)]
pub enum SubstituteOutcome {
    Trained(Classifier),
    /// No queries were answered; accuracy is chance level (1/k).
    NoQueriesAnswered { chance_accuracy: f64 },
}

impl SubstituteOutcome {
    pub fn classifier(&self) -> Option<&Classifier> {
        match self {
            SubstituteOutcome::Trained(c) => Some(c),
            SubstituteOutcome::NoQueriesAnswered { .. } => None,
        }
    }

    pub fn accuracy(&self, test: &Dataset) -> Result<f64> {
        match self {
            SubstituteOutcome::Trained(c) => c.accuracy(test),
            SubstituteOutcome::NoQueriesAnswered { chance_accuracy } => Ok(*chance_accuracy),
        }
    }
}

/// Trains a substitute on the answered prefix of a transcript with soft-label
/// cross-entropy.
pub fn train_substitute(
    transcript: &QueryTranscript,
    kind: AttackKind,
    d: usize,
    k: usize,
    cfg: &TrainConfig,
) -> Result<SubstituteOutcome> {
    let answered = transcript.answered();
    if answered.is_empty() {
        return Ok(SubstituteOutcome::NoQueriesAnswered {
            chance_accuracy: 1.0 / k as f64,
        });
    }
    let samples: Vec<SoftSample> = answered
        .iter()
        .map(|(x, resp)| SoftSample {
            x: x.clone(),
            target: resp.clone(),
        })
        .collect();
    let _ = kind;
    Ok(SubstituteOutcome::Trained(train_soft(
        &samples, d, k, cfg,
    )?))
}

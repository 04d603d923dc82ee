//! Attacker query generators: synthetic-noise extraction, Jacobian-based
//! augmentation, FGSM variants, active-learning selection over a non-problem
//! domain pool, the dilution schedule, and the white-box latent evasion
//! perturbation.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Provenance, QueryStream};
use crate::error::{Error, Result};
use crate::models::{
    train_substitute, AttackKind, Classifier, QueryTranscript, SubstituteOutcome, TrainConfig,
};
use crate::numerics::Tensor;
use crate::rng::Rng;
use crate::vae::{LatentTargets, VaeModel};

pub const DEFAULT_JBDA_LAMBDA: f64 = 0.1;
pub const DEFAULT_JBDA_ROUNDS: usize = 6;
pub const DEFAULT_DEEPFOOL_ITERS: usize = 50;
pub const DEFAULT_DEEPFOOL_OVERSHOOT: f64 = 0.02;
pub const DEFAULT_NPD_ROUNDS: usize = 10;
pub const DFAL_KCENTER_PREFILTER_FACTOR: usize = 5;
pub const EVASION_EPS_GRID: [f64; 5] = [1.0, 1e-1, 1e-2, 1e-3, 1e-4];
pub const DEFAULT_EVASION_ITERS: usize = 5000;

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Budget-many i.i.d. uniform samples over the unit hypercube.
pub fn syn_uniform_stream(d: usize, budget: usize, rng: &mut Rng) -> Result<QueryStream> {
    if budget < 1 {
        return Err(Error::argument("budget must be >= 1"));
    }
    let seed = rng.seed();
    let queries = (0..budget)
        .map(|_| Tensor::vector((0..d).map(|_| rng.uniform()).collect()))
        .collect();
    Ok(QueryStream::new(queries, Provenance::Syn, seed))
}

fn oracle_label(response: &[f64]) -> usize {
    crate::models::argmax(response)
}

/// Queries the oracle for every tensor in `batch`, appending to the transcript.
fn query_batch(
    oracle: &Classifier,
    batch: &[Tensor],
    transcript: &mut QueryTranscript,
) -> Result<()> {
    for x in batch {
        let response = oracle.predict_proba(x.data())?;
        transcript.entries.push((x.clone(), response));
    }
    Ok(())
}

fn retrain_substitute(
    transcript: &QueryTranscript,
    d: usize,
    k: usize,
    cfg: &TrainConfig,
) -> Result<Classifier> {
    match train_substitute(transcript, AttackKind::AdvPd, d, k, cfg)? {
        SubstituteOutcome::Trained(c) => Ok(c),
        SubstituteOutcome::NoQueriesAnswered { .. } => {
            Err(Error::structure("substitute retraining with empty transcript"))
        }
    }
}

/// Jacobian-based dataset augmentation: the pool doubles each round by one
/// signed-Jacobian step per member, taken on a substitute retrained between
/// rounds. Emits queries in generation order, capped at the budget.
pub fn jbda_stream(
    oracle: &Classifier,
    seeds: &Dataset,
    lambda: f64,
    rounds: usize,
    budget: usize,
    rng: &mut Rng,
) -> Result<QueryStream> {
    if seeds.is_empty() {
        return Err(Error::argument("jbda needs a nonempty seed set"));
    }
    if budget < 1 {
        return Err(Error::argument("budget must be >= 1"));
    }
    let stream_seed = rng.seed();
    let d = seeds.dim();
    let k = oracle.num_classes;
    let mut pool: Vec<Tensor> = seeds.inputs().cloned().collect();
    pool.truncate(budget);
    let mut transcript = QueryTranscript::default();
    query_batch(oracle, &pool, &mut transcript)?;
    for _ in 0..rounds {
        if pool.len() >= budget {
            break;
        }
        let cfg = AttackKind::AdvPd.default_train_config(rng.next_u64());
        let substitute = retrain_substitute(&transcript, d, k, &cfg)?;
        let parents = pool.clone();
        let mut fresh = Vec::new();
        for (idx, x) in parents.iter().enumerate() {
            if pool.len() + fresh.len() >= budget {
                break;
            }
            // pool and transcript grow in lockstep, so parent idx addresses
            // its own oracle response
            let label = oracle_label(&transcript.entries[idx].1);
            // step along the sign of the substitute's logit gradient for the
            // oracle label
            let grad = &substitute.jacobian(x.data())?[label];
            let stepped: Vec<f64> = x
                .data()
                .iter()
                .zip(grad)
                .map(|(v, g)| clamp01(v + lambda * g.signum_or_zero()))
                .collect();
            fresh.push(Tensor::vector(stepped));
        }
        query_batch(oracle, &fresh, &mut transcript)?;
        pool.extend(fresh);
    }
    Ok(QueryStream::new(pool, Provenance::AdvPd, stream_seed))
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    // signum(0) = 0 so a flat gradient leaves the coordinate untouched
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FgsmKind {
    /// Non-targeted: step up the substitute loss of the current label.
    N,
    NIter,
    /// Targeted at a uniformly random class: step down its loss.
    TRnd,
    TRndIter,
}

impl FgsmKind {
    pub fn is_iterative(self) -> bool {
        matches!(self, FgsmKind::NIter | FgsmKind::TRndIter)
    }

    fn is_targeted(self) -> bool {
        matches!(self, FgsmKind::TRnd | FgsmKind::TRndIter)
    }
}

/// FGSM-family augmentation with the same pool-doubling round structure as
/// JbDA. Non-iterative kinds take one step per sample; iterative kinds take
/// `iters` steps with a per-step clamp.
pub fn fgsm_stream(
    kind: FgsmKind,
    oracle: &Classifier,
    seeds: &Dataset,
    eps: f64,
    iters: usize,
    budget: usize,
    rng: &mut Rng,
) -> Result<QueryStream> {
    if seeds.is_empty() {
        return Err(Error::argument("fgsm needs a nonempty seed set"));
    }
    if eps < 0.0 {
        return Err(Error::argument("fgsm eps must be nonnegative"));
    }
    let steps = if kind.is_iterative() {
        if iters < 1 {
            return Err(Error::argument("iterative fgsm needs iters >= 1"));
        }
        iters
    } else {
        1
    };
    let stream_seed = rng.seed();
    let d = seeds.dim();
    let k = oracle.num_classes;
    let mut pool: Vec<Tensor> = seeds.inputs().cloned().collect();
    pool.truncate(budget);
    let mut transcript = QueryTranscript::default();
    query_batch(oracle, &pool, &mut transcript)?;
    while pool.len() < budget {
        let cfg = AttackKind::AdvPd.default_train_config(rng.next_u64());
        let substitute = retrain_substitute(&transcript, d, k, &cfg)?;
        let parents = pool.clone();
        let mut fresh = Vec::new();
        for x in &parents {
            if pool.len() + fresh.len() >= budget {
                break;
            }
            let label = if kind.is_targeted() {
                rng.index(k)
            } else {
                substitute.predict_label(x.data())?
            };
            let mut cur = x.data().to_vec();
            for _ in 0..steps {
                let grad = substitute.input_gradient(&cur, label)?;
                let sign = if kind.is_targeted() { -1.0 } else { 1.0 };
                for (v, g) in cur.iter_mut().zip(&grad) {
                    *v = clamp01(*v + sign * eps * g.signum_or_zero());
                }
            }
            fresh.push(Tensor::vector(cur));
        }
        query_batch(oracle, &fresh, &mut transcript)?;
        pool.extend(fresh);
    }
    Ok(QueryStream::new(pool, Provenance::AdvPd, stream_seed))
}

/// Shannon entropy of a probability vector.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum()
}

/// The sum-of-log-probabilities score (kept for comparison against standard
/// entropy; higher means more uncertain for both).
pub fn literal_log_score(p: &[f64]) -> f64 {
    p.iter().map(|&v| v.max(1e-300).ln()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NpdStrategy {
    Random,
    Uncertainty {
        /// Score by the sum of log-probabilities instead of Shannon entropy.
        paper_literal_entropy: bool,
    },
    Dfal,
    KCenter,
    DfalKCenter,
}

impl NpdStrategy {
    pub fn uncertainty() -> Self {
        NpdStrategy::Uncertainty {
            paper_literal_entropy: false,
        }
    }
}

/// Selects `n` fresh pool indices for the next query batch.
pub fn npd_select(
    pool: &Dataset,
    strategy: NpdStrategy,
    substitute: &Classifier,
    already: &HashSet<usize>,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let remaining: Vec<usize> = (0..pool.len()).filter(|i| !already.contains(i)).collect();
    if n > remaining.len() {
        return Err(Error::argument(format!(
            "cannot select {n} from {} remaining pool samples",
            remaining.len()
        )));
    }
    match strategy {
        NpdStrategy::Random => {
            let picks = rng.sample_without_replacement(remaining.len(), n);
            Ok(picks.into_iter().map(|j| remaining[j]).collect())
        }
        NpdStrategy::Uncertainty {
            paper_literal_entropy,
        } => {
            let mut scored: Vec<(usize, f64)> = remaining
                .iter()
                .map(|&i| {
                    let p = substitute.predict_proba(pool.sample(i).0.data())?;
                    let s = if paper_literal_entropy {
                        literal_log_score(&p)
                    } else {
                        shannon_entropy(&p)
                    };
                    Ok((i, s))
                })
                .collect::<Result<_>>()?;
            // highest score first; index breaks ties deterministically
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            Ok(scored.into_iter().take(n).map(|(i, _)| i).collect())
        }
        NpdStrategy::Dfal => {
            let mut scored = dfal_scores(pool, substitute, &remaining)?;
            scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            Ok(scored.into_iter().take(n).map(|(i, _)| i).collect())
        }
        NpdStrategy::KCenter => kcenter_greedy(pool, substitute, already, &remaining, n, rng),
        NpdStrategy::DfalKCenter => {
            let mut scored = dfal_scores(pool, substitute, &remaining)?;
            scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let keep = (DFAL_KCENTER_PREFILTER_FACTOR * n).min(scored.len());
            let candidates: Vec<usize> = scored.into_iter().take(keep).map(|(i, _)| i).collect();
            kcenter_greedy(pool, substitute, already, &candidates, n, rng)
        }
    }
}

fn dfal_scores(
    pool: &Dataset,
    substitute: &Classifier,
    indices: &[usize],
) -> Result<Vec<(usize, f64)>> {
    indices
        .iter()
        .map(|&i| {
            let r = deepfool_alpha(
                substitute,
                pool.sample(i).0.data(),
                DEFAULT_DEEPFOOL_ITERS,
                DEFAULT_DEEPFOOL_OVERSHOOT,
            )?;
            Ok((i, r.alpha))
        })
        .collect()
}

/// Greedy farthest-point selection in substitute-probability space, seeded by
/// the already-selected set.
fn kcenter_greedy(
    pool: &Dataset,
    substitute: &Classifier,
    already: &HashSet<usize>,
    candidates: &[usize],
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let probs_of = |i: usize| substitute.predict_proba(pool.sample(i).0.data());
    let cand_probs: Vec<Vec<f64>> = candidates
        .iter()
        .map(|&i| probs_of(i))
        .collect::<Result<_>>()?;
    // min distance from each candidate to the current center set
    let mut min_dist = vec![f64::INFINITY; candidates.len()];
    for &i in already {
        let p = probs_of(i)?;
        for (md, cp) in min_dist.iter_mut().zip(&cand_probs) {
            *md = md.min(crate::numerics::euclidean_distance(cp, &p));
        }
    }
    let mut taken = vec![false; candidates.len()];
    let mut picked = Vec::with_capacity(n);
    for _ in 0..n {
        let choice = if min_dist.iter().all(|d| d.is_infinite()) {
            // no centers yet: start from a random candidate
            let free: Vec<usize> = (0..candidates.len()).filter(|&j| !taken[j]).collect();
            free[rng.index(free.len())]
        } else {
            (0..candidates.len())
                .filter(|&j| !taken[j])
                .max_by(|&a, &b| min_dist[a].total_cmp(&min_dist[b]).then(b.cmp(&a)))
                .expect("n bounded by candidate count")
        };
        taken[choice] = true;
        picked.push(candidates[choice]);
        for j in 0..candidates.len() {
            let d = crate::numerics::euclidean_distance(&cand_probs[j], &cand_probs[choice]);
            min_dist[j] = min_dist[j].min(d);
        }
    }
    Ok(picked)
}

#[derive(Debug, Clone)]
pub struct DeepFoolResult {
    pub perturbed: Vec<f64>,
    /// Euclidean distance from the input to the perturbed point.
    pub alpha: f64,
    /// False when the label never flipped within the iteration cap.
    pub converged: bool,
}

/// Multi-class DeepFool: repeatedly linearize the logit differences and take
/// the minimal-norm step to the nearest boundary until the label flips.
pub fn deepfool_alpha(
    substitute: &Classifier,
    x: &[f64],
    max_iters: usize,
    overshoot: f64,
) -> Result<DeepFoolResult> {
    let k = substitute.num_classes;
    if k < 2 {
        return Err(Error::argument("deepfool needs at least two classes"));
    }
    let orig_label = crate::models::argmax(&substitute.logits(x)?);
    let mut cur = x.to_vec();
    let mut converged = false;
    for _ in 0..max_iters {
        let logits = substitute.logits(&cur)?;
        if crate::models::argmax(&logits) != orig_label {
            converged = true;
            break;
        }
        let jac = substitute.jacobian(&cur)?;
        let mut best: Option<(f64, Vec<f64>, f64)> = None;
        for c in 0..k {
            if c == orig_label {
                continue;
            }
            let w: Vec<f64> = jac[c]
                .iter()
                .zip(&jac[orig_label])
                .map(|(a, b)| a - b)
                .collect();
            let f = logits[c] - logits[orig_label];
            let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if wn < 1e-12 {
                continue;
            }
            let ratio = f.abs() / wn;
            if best.as_ref().is_none_or(|(r, _, _)| ratio < *r) {
                best = Some((ratio, w, f));
            }
        }
        let Some((_, w, f)) = best else {
            // all boundary normals degenerate; stop with the current iterate
            break;
        };
        let wn2 = w.iter().map(|v| v * v).sum::<f64>();
        let scale = (1.0 + overshoot) * f.abs() / wn2;
        for (v, wi) in cur.iter_mut().zip(&w) {
            *v += scale * wi;
        }
    }
    if !converged && crate::models::argmax(&substitute.logits(&cur)?) != orig_label {
        converged = true;
    }
    let alpha = crate::numerics::euclidean_distance(&cur, x);
    Ok(DeepFoolResult {
        perturbed: cur,
        alpha,
        converged,
    })
}

#[derive(Debug)]
pub struct NpdOutcome {
    pub stream: QueryStream,
    pub transcript: QueryTranscript,
    pub substitute: SubstituteOutcome,
}

/// Active-learning extraction over a non-problem-domain pool: a random first
/// batch, then per-round substitute retraining and strategy-driven selection,
/// never repeating a pool sample.
pub fn npd_attack(
    oracle: &Classifier,
    pool: &Dataset,
    strategy: NpdStrategy,
    budget: usize,
    rounds: usize,
    train_cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<NpdOutcome> {
    if rounds < 1 || budget < rounds {
        return Err(Error::argument("npd needs budget >= rounds >= 1"));
    }
    if pool.len() < budget {
        return Err(Error::argument(format!(
            "pool of {} cannot cover budget {budget}",
            pool.len()
        )));
    }
    let stream_seed = rng.seed();
    let d = pool.dim();
    let k = oracle.num_classes;
    let batch = budget / rounds;
    let mut selected: HashSet<usize> = HashSet::new();
    let mut order: Vec<usize> = Vec::with_capacity(budget);
    let mut transcript = QueryTranscript::default();
    let mut substitute: Option<Classifier> = None;
    for round in 0..rounds {
        let want = if round + 1 == rounds {
            budget - order.len()
        } else {
            batch
        };
        let picks = match (&substitute, round) {
            (Some(sub), r) if r > 0 => {
                npd_select(pool, strategy, sub, &selected, want, rng)?
            }
            _ => {
                let remaining: Vec<usize> =
                    (0..pool.len()).filter(|i| !selected.contains(i)).collect();
                rng.sample_without_replacement(remaining.len(), want)
                    .into_iter()
                    .map(|j| remaining[j])
                    .collect()
            }
        };
        let batch_tensors: Vec<Tensor> = picks
            .iter()
            .map(|&i| pool.sample(i).0.clone())
            .collect();
        query_batch(oracle, &batch_tensors, &mut transcript)?;
        selected.extend(picks.iter().copied());
        order.extend(picks);
        if round + 1 < rounds {
            let mut cfg = train_cfg.clone();
            cfg.seed = rng.next_u64();
            let out = train_substitute(&transcript, AttackKind::Npd, d, k, &cfg)?;
            substitute = match out {
                SubstituteOutcome::Trained(c) => Some(c),
                SubstituteOutcome::NoQueriesAnswered { .. } => None,
            };
        }
    }
    let queries: Vec<Tensor> = order.iter().map(|&i| pool.sample(i).0.clone()).collect();
    let stream = QueryStream::new(queries, Provenance::Npd, stream_seed);
    let mut cfg = train_cfg.clone();
    cfg.seed = rng.next_u64();
    let final_sub = train_substitute(&transcript, AttackKind::Npd, d, k, &cfg)?;
    Ok(NpdOutcome {
        stream,
        transcript,
        substitute: final_sub,
    })
}

/// Period-aligned dilution: per period, `dilution_percent` attack queries
/// first, then benign fill.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DilutionSchedule {
    pub dilution_percent: usize,
    pub period: usize,
}

impl DilutionSchedule {
    pub fn new(dilution_percent: usize) -> Result<Self> {
        let s = Self {
            dilution_percent,
            period: 100,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilution_percent < 1 || self.dilution_percent > self.period {
            return Err(Error::argument(format!(
                "dilution percent {} outside 1..={}",
                self.dilution_percent, self.period
            )));
        }
        Ok(())
    }
}

/// Interleaves attack and benign queries per the schedule, preserving each
/// query's provenance tag. Ends when either source runs dry.
pub fn spaced_out_stream(
    attack: &QueryStream,
    benign: &QueryStream,
    schedule: &DilutionSchedule,
) -> Result<QueryStream> {
    schedule.validate()?;
    let p = schedule.dilution_percent;
    let fill = schedule.period - p;
    let mut queries = Vec::new();
    let mut tags = Vec::new();
    let mut ai = attack.iter();
    let mut bi = benign.iter();
    'outer: loop {
        for _ in 0..p {
            match ai.next() {
                Some((q, t)) => {
                    queries.push(q.clone());
                    tags.push(t);
                }
                None => break 'outer,
            }
        }
        for _ in 0..fill {
            match bi.next() {
                Some((q, t)) => {
                    queries.push(q.clone());
                    tags.push(t);
                }
                None => break 'outer,
            }
        }
    }
    Ok(QueryStream::with_tags(queries, tags, attack.seed()))
}

/// Signed-gradient walk on the latent distance to mu_C. Descends by default;
/// `ascend` applies the update with the opposite sign. Stops early when the
/// distance drops below `stop_below` or the clamped step no longer moves.
pub fn evasion_perturb(
    vae: &VaeModel,
    targets: &LatentTargets,
    x: &[f64],
    eps: f64,
    iters: usize,
    ascend: bool,
    stop_below: Option<f64>,
) -> Result<(Tensor, Vec<f64>)> {
    if eps < 0.0 {
        return Err(Error::argument("evasion eps must be nonnegative"));
    }
    let mut cur = x.to_vec();
    let (d0, _) = vae.latent_distance_gradient(&cur, &targets.mu_c)?;
    let mut trace = vec![d0];
    let step_sign = if ascend { 1.0 } else { -1.0 };
    for _ in 0..iters {
        if matches!(stop_below, Some(t) if *trace.last().unwrap() < t) {
            break;
        }
        let (_, grad) = vae.latent_distance_gradient(&cur, &targets.mu_c)?;
        let next: Vec<f64> = cur
            .iter()
            .zip(&grad)
            .map(|(v, g)| clamp01(v + step_sign * eps * g.signum_or_zero()))
            .collect();
        let moved = next != cur;
        cur = next;
        let (d, _) = vae.latent_distance_gradient(&cur, &targets.mu_c)?;
        if !d.is_finite() {
            return Err(Error::NonFinite {
                context: "evasion latent distance".into(),
                detail: format!("eps {eps}"),
            });
        }
        trace.push(d);
        if !moved {
            break;
        }
    }
    Ok((Tensor::vector(cur), trace))
}

#[derive(Debug, Clone)]
pub struct EvasionTrace {
    pub epsilon: f64,
    pub distances: Vec<f64>,
}

/// Runs the step-size grid on one input, one trace per epsilon.
pub fn evasion_grid(
    vae: &VaeModel,
    targets: &LatentTargets,
    x: &[f64],
    max_iters: usize,
    ascend: bool,
) -> Result<Vec<EvasionTrace>> {
    EVASION_EPS_GRID
        .iter()
        .map(|&epsilon| {
            let (_, distances) =
                evasion_perturb(vae, targets, x, epsilon, max_iters, ascend, None)?;
            Ok(EvasionTrace { epsilon, distances })
        })
        .collect()
}

/// Writes grid traces as `epsilon,iteration,latent_distance` CSV.
pub fn write_evasion_csv(traces: &[EvasionTrace], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epsilon,iteration,latent_distance")?;
    for t in traces {
        for (i, d) in t.distances.iter().enumerate() {
            writeln!(f, "{},{},{}", t.epsilon, i, d)?;
        }
    }
    Ok(())
}

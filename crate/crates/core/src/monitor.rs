//! Online extraction monitor: a FIFO window of latent embeddings per user,
//! checked against the frozen reference set with the subsampled MMD statistic
//! after every query once the window has filled past capacity.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mmd::{mmd_subsampled, MmdConfig};
use crate::models::Classifier;
use crate::models::QueryTranscript;
use crate::vae::{LatentReference, VaeModel};

pub const DEFAULT_WINDOW: usize = 100;
pub const DEFAULT_BLOCK_THRESHOLD: f64 = 0.25;

/// Monitor policy: window size, alarm thresholds, and the optional blocking
/// threshold. Thresholds must be strictly ascending; alarms fire on strict
/// exceedance and report the highest crossed threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub window: usize,
    pub thresholds: Vec<f64>,
    /// When set, the session is blocked (absorbing) once the statistic
    /// strictly exceeds this value.
    pub block_threshold: Option<f64>,
    /// Run the MMD check every `check_stride` eligible queries.
    pub check_stride: usize,
    pub mmd: MmdConfig,
}

impl MonitorConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            window: DEFAULT_WINDOW,
            thresholds: vec![0.0, 0.25, 0.5, 1.0, 1.5, 2.5],
            block_threshold: None,
            check_stride: 1,
            mmd: MmdConfig::new(seed),
        }
    }

    pub fn defending(seed: u64) -> Self {
        Self {
            block_threshold: Some(DEFAULT_BLOCK_THRESHOLD),
            ..Self::new(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::argument("monitor window must be >= 1"));
        }
        if self.check_stride < 1 {
            return Err(Error::argument("check stride must be >= 1"));
        }
        if self.thresholds.is_empty() {
            return Err(Error::argument("at least one alarm threshold required"));
        }
        if self.thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::argument("thresholds must be strictly ascending"));
        }
        self.mmd.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Active,
    Alarmed,
    Blocked,
}

/// One MMD check result, written to the trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub query_index: usize,
    pub mmd: f64,
}

/// An alarm: the check that crossed a threshold, and the highest threshold
/// crossed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmEvent {
    pub query_index: usize,
    pub mmd: f64,
    pub threshold: f64,
    pub blocked: bool,
}

/// What the monitor decided about one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// 1-based index of the query within the session.
    pub query_index: usize,
    /// The statistic, when a check ran for this query.
    pub mmd: Option<f64>,
    /// Highest threshold strictly exceeded by this check.
    pub crossed: Option<f64>,
    /// True when this query may not be answered.
    pub blocked: bool,
}

/// Pure monitor state machine over pre-embedded queries. The coupling to the
/// encoder lives in [`Detector`]; keeping the core separate lets tests drive
/// it with stub embeddings.
#[derive(Debug, Clone)]
pub struct MmdMonitor {
    cfg: MonitorConfig,
    reference: Vec<Vec<f64>>,
    buffer: VecDeque<Vec<f64>>,
    queries_seen: usize,
    checks_eligible: usize,
    state: SessionState,
    trace: Vec<TraceRow>,
    alarms: Vec<AlarmEvent>,
}

impl MmdMonitor {
    pub fn new(cfg: MonitorConfig, reference: Vec<Vec<f64>>) -> Result<Self> {
        cfg.validate()?;
        if reference.len() < cfg.mmd.subsample_size {
            return Err(Error::argument(format!(
                "reference set of {} smaller than subsample size {}",
                reference.len(),
                cfg.mmd.subsample_size
            )));
        }
        Ok(Self {
            cfg,
            reference,
            buffer: VecDeque::new(),
            queries_seen: 0,
            checks_eligible: 0,
            state: SessionState::Active,
            trace: Vec::new(),
            alarms: Vec::new(),
        })
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn is_blocked(&self) -> bool {
        self.state == SessionState::Blocked
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn alarms(&self) -> &[AlarmEvent] {
        &self.alarms
    }

    pub fn queries_seen(&self) -> usize {
        self.queries_seen
    }

    /// Feed one embedded query. Blocked sessions stay blocked and never run
    /// further checks.
    pub fn observe_embedding(&mut self, embedding: Vec<f64>) -> Result<Observation> {
        self.queries_seen += 1;
        let query_index = self.queries_seen;
        if self.state == SessionState::Blocked {
            return Ok(Observation {
                query_index,
                mmd: None,
                crossed: None,
                blocked: true,
            });
        }
        self.buffer.push_back(embedding);
        if self.buffer.len() <= self.cfg.window {
            return Ok(Observation {
                query_index,
                mmd: None,
                crossed: None,
                blocked: false,
            });
        }
        self.buffer.pop_front();
        self.checks_eligible += 1;
        if (self.checks_eligible - 1) % self.cfg.check_stride != 0 {
            return Ok(Observation {
                query_index,
                mmd: None,
                crossed: None,
                blocked: false,
            });
        }

        // seed each check from the session seed and the query index so replays
        // of the same stream reproduce the trace exactly
        let mut mmd_cfg = self.cfg.mmd.clone();
        mmd_cfg.seed = self
            .cfg
            .mmd
            .seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(query_index as u64);
        let recent: Vec<Vec<f64>> = self.buffer.iter().cloned().collect();
        let stat = mmd_subsampled(&recent, &self.reference, &mmd_cfg)?;
        if !stat.is_finite() {
            return Err(Error::NonFinite {
                context: "monitor check".into(),
                detail: format!("query {query_index}"),
            });
        }
        self.trace.push(TraceRow {
            query_index,
            mmd: stat,
        });

        let crossed = self
            .cfg
            .thresholds
            .iter()
            .rev()
            .find(|&&t| stat > t)
            .copied();
        let blocked = matches!(self.cfg.block_threshold, Some(b) if stat > b);
        if let Some(threshold) = crossed {
            self.alarms.push(AlarmEvent {
                query_index,
                mmd: stat,
                threshold,
                blocked,
            });
            self.state = SessionState::Alarmed;
        }
        if blocked {
            self.state = SessionState::Blocked;
        }
        Ok(Observation {
            query_index,
            mmd: Some(stat),
            crossed,
            blocked,
        })
    }
}

/// Deployed detector: the trained encoder plus the frozen reference set and
/// the monitor policy.
#[derive(Debug, Clone)]
pub struct Detector {
    pub vae: VaeModel,
    pub reference: LatentReference,
    pub cfg: MonitorConfig,
}

impl Detector {
    pub fn new(vae: VaeModel, reference: LatentReference, cfg: MonitorConfig) -> Result<Self> {
        cfg.validate()?;
        if reference.latent_dim != vae.latent_dim {
            return Err(Error::structure(format!(
                "reference latent dim {} != encoder latent dim {}",
                reference.latent_dim, vae.latent_dim
            )));
        }
        Ok(Self {
            vae,
            reference,
            cfg,
        })
    }

    pub fn new_session(&self) -> Result<MmdMonitor> {
        MmdMonitor::new(self.cfg.clone(), self.reference.embeddings.clone())
    }
}

/// A finished monitored session.
#[derive(Debug, Clone)]
pub struct MonitorRun {
    pub transcript: QueryTranscript,
    pub trace: Vec<TraceRow>,
    pub alarms: Vec<AlarmEvent>,
    pub final_state: SessionState,
}

impl MonitorRun {
    /// Checks with the statistic above the given threshold.
    pub fn checks_above(&self, threshold: f64) -> usize {
        self.trace.iter().filter(|r| r.mmd > threshold).count()
    }

    pub fn max_mmd(&self) -> Option<f64> {
        self.trace.iter().map(|r| r.mmd).reduce(f64::max)
    }
}

/// Plays a query stream against the served classifier under the detector.
/// Queries after the first block are recorded but unanswered; the transcript
/// truncation marks that point.
pub fn run_stream(
    detector: &Detector,
    classifier: &Classifier,
    queries: &[crate::numerics::Tensor],
) -> Result<MonitorRun> {
    let mut session = detector.new_session()?;
    let mut transcript = QueryTranscript::default();
    for x in queries {
        let embedding = detector.vae.encode_mu(x.data())?;
        let obs = session.observe_embedding(embedding)?;
        let response = classifier.predict_proba(x.data())?;
        transcript.entries.push((x.clone(), response));
        if obs.blocked && transcript.truncation.is_none() {
            // the blocking query itself goes unanswered
            transcript.truncation = Some(obs.query_index - 1);
        }
    }
    Ok(MonitorRun {
        transcript,
        trace: session.trace().to_vec(),
        alarms: session.alarms().to_vec(),
        final_state: session.state(),
    })
}

/// Writes the check trace as `query_index,mmd` CSV.
pub fn write_trace_csv(trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "query_index,mmd")?;
    for row in trace {
        writeln!(f, "{},{}", row.query_index, row.mmd)?;
    }
    Ok(())
}

/// Writes alarms as one JSON object per line.
pub fn write_alarms_jsonl(alarms: &[AlarmEvent], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for alarm in alarms {
        let line = serde_json::to_string(alarm)?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stub_cfg(window: usize, seed: u64) -> MonitorConfig {
        let mut cfg = MonitorConfig::new(seed);
        cfg.window = window;
        cfg.thresholds = vec![0.25, 1.0];
        cfg.mmd.subsample_count = 5;
        cfg.mmd.subsample_size = 2;
        cfg
    }

    fn stub_reference(n: usize, value: f64) -> Vec<Vec<f64>> {
        (0..n).map(|_| vec![value, value]).collect()
    }

    #[test]
    fn no_check_until_window_exceeded() {
        let mut mon = MmdMonitor::new(stub_cfg(3, 0), stub_reference(10, 0.0)).unwrap();
        for i in 1..=3 {
            let obs = mon.observe_embedding(vec![0.0, 0.0]).unwrap();
            assert_eq!(obs.query_index, i);
            assert!(obs.mmd.is_none());
        }
        let obs = mon.observe_embedding(vec![0.0, 0.0]).unwrap();
        assert_eq!(obs.query_index, 4);
        assert!(obs.mmd.is_some(), "first check at query window+1");
        assert_eq!(mon.trace().len(), 1);
        assert_eq!(mon.trace()[0].query_index, 4);
    }

    #[test]
    fn identical_window_and_reference_gives_zero_and_no_alarm() {
        let mut cfg = stub_cfg(3, 0);
        cfg.thresholds = vec![0.0, 0.25];
        let mut mon = MmdMonitor::new(cfg, stub_reference(10, 0.5)).unwrap();
        for _ in 0..6 {
            mon.observe_embedding(vec![0.5, 0.5]).unwrap();
        }
        for row in mon.trace() {
            assert_eq!(row.mmd, 0.0);
        }
        // strict exceedance: 0.0 > 0.0 is false, so the zero threshold is silent
        assert!(mon.alarms().is_empty());
        assert_eq!(mon.state(), SessionState::Active);
    }

    #[test]
    fn distant_window_alarms_with_highest_threshold() {
        let mut mon = MmdMonitor::new(stub_cfg(3, 0), stub_reference(10, 0.0)).unwrap();
        let mut last = None;
        for _ in 0..5 {
            last = Some(mon.observe_embedding(vec![100.0, 100.0]).unwrap());
        }
        let obs = last.unwrap();
        let stat = obs.mmd.unwrap();
        assert!(stat > 1.0);
        // both thresholds crossed; the alarm reports the highest one
        assert_eq!(obs.crossed, Some(1.0));
        assert_eq!(mon.state(), SessionState::Alarmed);
        assert!(mon.alarms().iter().all(|a| a.threshold == 1.0));
    }

    #[test]
    fn fifo_eviction_is_exact() {
        // 3 hostile embeddings followed by matching ones: once the hostile
        // prefix is fully evicted the statistic returns to zero
        let mut mon = MmdMonitor::new(stub_cfg(3, 0), stub_reference(10, 0.0)).unwrap();
        for _ in 0..3 {
            mon.observe_embedding(vec![50.0, 50.0]).unwrap();
        }
        let mut zeros_seen = 0;
        for _ in 0..6 {
            let obs = mon.observe_embedding(vec![0.0, 0.0]).unwrap();
            if obs.mmd == Some(0.0) {
                zeros_seen += 1;
            }
        }
        // the window is fully benign from query 6 through query 9
        assert_eq!(zeros_seen, 4);
    }

    #[test]
    fn blocking_is_absorbing() {
        let mut cfg = stub_cfg(3, 0);
        cfg.block_threshold = Some(0.25);
        let mut mon = MmdMonitor::new(cfg, stub_reference(10, 0.0)).unwrap();
        let mut first_block = None;
        for i in 1..=10 {
            let obs = mon.observe_embedding(vec![100.0, 100.0]).unwrap();
            if obs.blocked && first_block.is_none() {
                first_block = Some(i);
            }
        }
        assert_eq!(first_block, Some(4));
        assert_eq!(mon.state(), SessionState::Blocked);
        // no checks run after the block
        assert_eq!(mon.trace().len(), 1);
        assert_eq!(mon.queries_seen(), 10);
    }

    #[test]
    fn check_stride_skips_checks() {
        let mut cfg = stub_cfg(2, 0);
        cfg.check_stride = 3;
        let mut mon = MmdMonitor::new(cfg, stub_reference(10, 0.0)).unwrap();
        for _ in 0..11 {
            mon.observe_embedding(vec![1.0, 1.0]).unwrap();
        }
        // eligible checks at queries 3..11, stride 3 keeps 3, 6, 9
        let indices: Vec<usize> = mon.trace().iter().map(|r| r.query_index).collect();
        assert_eq!(indices, vec![3, 6, 9]);
    }

    #[test]
    fn replay_reproduces_trace_exactly() {
        let play = || {
            let mut mon = MmdMonitor::new(stub_cfg(3, 42), stub_reference(30, 0.0)).unwrap();
            let mut rng = crate::rng::Rng::new(7);
            for _ in 0..20 {
                let e = vec![rng.normal(), rng.normal()];
                mon.observe_embedding(e).unwrap();
            }
            mon.trace().to_vec()
        };
        let a = play();
        let b = play();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.query_index, y.query_index);
            assert_eq!(x.mmd.to_bits(), y.mmd.to_bits());
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = stub_cfg(3, 0);
        cfg.thresholds = vec![1.0, 0.5];
        assert!(MmdMonitor::new(cfg, stub_reference(10, 0.0)).is_err());
        let mut cfg = stub_cfg(3, 0);
        cfg.check_stride = 0;
        assert!(MmdMonitor::new(cfg, stub_reference(10, 0.0)).is_err());
        // reference smaller than the subsample size
        assert!(MmdMonitor::new(stub_cfg(3, 0), stub_reference(1, 0.0)).is_err());
    }

    #[test]
    fn trace_and_alarm_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let trace = vec![
            TraceRow {
                query_index: 101,
                mmd: 0.125,
            },
            TraceRow {
                query_index: 102,
                mmd: 0.5,
            },
        ];
        let alarms = vec![AlarmEvent {
            query_index: 102,
            mmd: 0.5,
            threshold: 0.25,
            blocked: false,
        }];
        let tpath = dir.path().join("trace.csv");
        let apath = dir.path().join("alarms.jsonl");
        write_trace_csv(&trace, &tpath).unwrap();
        write_alarms_jsonl(&alarms, &apath).unwrap();
        let tbody = std::fs::read_to_string(&tpath).unwrap();
        assert_eq!(tbody, "query_index,mmd\n101,0.125\n102,0.5\n");
        let abody = std::fs::read_to_string(&apath).unwrap();
        let parsed: AlarmEvent = serde_json::from_str(abody.trim()).unwrap();
        assert_eq!(parsed, alarms[0]);
    }
}

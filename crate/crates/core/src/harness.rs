//! Collision experiments and symbol-error-rate sweeps.
//!
//! Each trial sends two frames of `payload_len` random symbols. The first
//! (weak) user starts one symbol into the buffer; the second (strong) user
//! starts `overlap_delay_symbols` symbols plus `tau` chips later, is
//! `power_delta_db` stronger and carries the carrier offset `dfc_hz`. The
//! receiver acquires both users, follows the strong one and runs the joint
//! detector over the strong user's payload windows.
//!
//! With `D = overlap_delay_symbols` and `M = payload_len`, strong windows
//! `1..=M - D - 2` are scored: each gives a strong decision and a deferred
//! weak decision, both on symbols that overlap the other user for their
//! whole length.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{synthesize_user, ChannelRealization, FrameSpec, UserParams};
use crate::detector::{DetectorContext, DetectorState, JointDetector};
use crate::phy::{Demodulator, LoraConfig, Symbol};
use crate::sync::{
    fsm_step, resynchronize, FsmAction, FsmEvent, ReceiverFsmState, SyncEstimate, Synchronizer, UserSlot,
};
use crate::{Error, Result, C64};

/// Symbols of silence before the first user's preamble.
pub const FIRST_USER_DELAY_SYMBOLS: usize = 1;

/// Where the receiver's offset estimates come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyncMode {
    /// True channel parameters.
    Genie,
    /// Preamble-based estimation.
    Estimated,
}

impl FromStr for SyncMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "genie" => Ok(Self::Genie),
            "estimated" => Ok(Self::Estimated),
            other => Err(Error::Parse(format!("unknown sync mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub sf: u8,
    pub tau_chips: f64,
    /// Carrier offset of the second user, Hz.
    pub dfc_hz: f64,
    /// Strong minus weak received power, dB.
    pub power_delta_db: f64,
    /// SNR of the weak user, dB.
    pub snr_grid_db: Vec<f64>,
    pub trials_per_point: usize,
    pub payload_len: usize,
    pub overlap_delay_symbols: usize,
    pub os_factor: usize,
    pub seed: u64,
    pub sync_mode: SyncMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sf: 7,
            tau_chips: 64.0,
            dfc_hz: 0.0,
            power_delta_db: 3.0,
            snr_grid_db: parse_snr_grid("-12:-2:1").expect("literal grid"),
            trials_per_point: 2000,
            payload_len: 32,
            overlap_delay_symbols: 15,
            os_factor: 8,
            seed: 1,
            sync_mode: SyncMode::Genie,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let lora = self.lora_config()?;
        let n = lora.n_chips() as f64;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.tau_chips.is_finite() && (0.0..n).contains(&self.tau_chips)) {
            return bad(format!("tau {} not in [0, {n})", self.tau_chips));
        }
        let on_grid = self.tau_chips * self.os_factor as f64;
        if (on_grid - on_grid.round()).abs() > 1e-9 {
            return bad(format!("tau {} is not a multiple of 1/{}", self.tau_chips, self.os_factor));
        }
        if !(self.power_delta_db.is_finite() && self.power_delta_db >= 0.0) {
            return bad(format!("power delta {} dB must be >= 0", self.power_delta_db));
        }
        if !self.dfc_hz.is_finite() {
            return bad("non-finite carrier offset".into());
        }
        if self.snr_grid_db.is_empty() || self.snr_grid_db.iter().any(|s| !s.is_finite()) {
            return bad("SNR grid must be non-empty and finite".into());
        }
        if self.trials_per_point == 0 {
            return bad("trials per point must be >= 1".into());
        }
        if self.payload_len < self.overlap_delay_symbols + 3 {
            return bad(format!(
                "payload of {} symbols leaves no overlap after a delay of {}",
                self.payload_len, self.overlap_delay_symbols
            ));
        }
        if self.payload_len > 1 << 16 {
            return bad("payload too long".into());
        }
        Ok(())
    }

    /// PHY configuration; spreading factors below 7 use the reduced range.
    pub fn lora_config(&self) -> Result<LoraConfig> {
        let base = if self.sf < crate::phy::MIN_SF {
            LoraConfig::reduced(self.sf)?
        } else {
            LoraConfig::new(self.sf)?
        };
        base.with_os_factor(self.os_factor)
    }

    /// Scored windows per trial, `M - D - 2`.
    pub fn scored_symbols(&self) -> usize {
        self.payload_len - self.overlap_delay_symbols - 2
    }

    /// Sets one option by its command-line name (without dashes).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad value {v:?} for {key}")))
        }
        match key.trim().replace('_', "-").as_str() {
            "sf" => self.sf = num(key, value)?,
            "tau" => self.tau_chips = num(key, value)?,
            "dfc" => self.dfc_hz = num(key, value)?,
            "power-delta-db" => self.power_delta_db = num(key, value)?,
            "snr" => self.snr_grid_db = parse_snr_grid(value)?,
            "trials" => self.trials_per_point = num(key, value)?,
            "payload-len" => self.payload_len = num(key, value)?,
            "overlap-delay" => self.overlap_delay_symbols = num(key, value)?,
            "os-factor" => self.os_factor = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "sync" => self.sync_mode = value.parse()?,
            other => return Err(Error::Parse(format!("unknown option {other:?}"))),
        }
        Ok(())
    }
}

/// `key = value` (or `key value`) lines; `#` starts a comment.
pub fn parse_kv_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .or_else(|| line.split_once(char::is_whitespace))
            .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", no + 1)))?;
        let k = k.trim().trim_start_matches("--");
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// `start:stop:step` (inclusive), a comma-separated list, or one value.
pub fn parse_snr_grid(spec: &str) -> Result<Vec<f64>> {
    let err = || Error::Parse(format!("bad SNR grid {spec:?}"));
    let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| err());
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [a, b, step] => {
            let (a, b, step) = (parse(a)?, parse(b)?, parse(step)?);
            if !(step.is_finite() && step != 0.0) || (b - a) * step < 0.0 {
                return Err(err());
            }
            let count = ((b - a) / step + 1e-9).floor() as usize + 1;
            if count > 100_000 {
                return Err(err());
            }
            Ok((0..count)
                .map(|i| {
                    let v = a + i as f64 * step;
                    (v * 1e9).round() / 1e9
                })
                .collect())
        }
        [list] => list.split(',').map(parse).collect(),
        _ => Err(err()),
    }
}

/// Outcome of one collision.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialResult {
    pub valid: bool,
    pub errors_weak: u64,
    pub errors_strong: u64,
    pub scored_symbols: u64,
}

/// Aggregated errors at one SNR point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SerRecord {
    pub snr_db: f64,
    pub ser_weak: Option<f64>,
    pub ser_strong: Option<f64>,
    pub trials: u64,
    pub valid_trials: u64,
    pub errors_weak: u64,
    pub errors_strong: u64,
    /// Symbols scored per user.
    pub scored_symbols: u64,
}

impl SerRecord {
    pub fn from_trials(snr_db: f64, trials: &[TrialResult]) -> Self {
        let valid: Vec<&TrialResult> = trials.iter().filter(|t| t.valid).collect();
        let scored: u64 = valid.iter().map(|t| t.scored_symbols).sum();
        let errors_weak = valid.iter().map(|t| t.errors_weak).sum();
        let errors_strong = valid.iter().map(|t| t.errors_strong).sum();
        let ser = |e: u64| (scored > 0).then(|| e as f64 / scored as f64);
        Self {
            snr_db,
            ser_weak: ser(errors_weak),
            ser_strong: ser(errors_strong),
            trials: trials.len() as u64,
            valid_trials: valid.len() as u64,
            errors_weak,
            errors_strong,
            scored_symbols: scored,
        }
    }
}

/// One line of the SER table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsvRow {
    pub snr_db: f64,
    pub ser_weak: Option<f64>,
    pub ser_strong: Option<f64>,
}

impl From<&SerRecord> for CsvRow {
    fn from(r: &SerRecord) -> Self {
        Self {
            snr_db: r.snr_db,
            ser_weak: r.ser_weak,
            ser_strong: r.ser_strong,
        }
    }
}

pub const CSV_HEADER: &str = "SNR,SERu,SERi";

pub fn format_csv(rows: &[CsvRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.snr_db, opt(r.ser_weak), opt(r.ser_strong));
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Parse(format!("expected header {CSV_HEADER}")));
    }
    let field = |f: &str| -> Result<Option<f64>> {
        let f = f.trim();
        if f.is_empty() {
            Ok(None)
        } else {
            f.parse().map(Some).map_err(|_| Error::Parse(format!("bad number {f:?}")))
        }
    };
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::Parse(format!("expected 3 columns in {l:?}")));
            }
            Ok(CsvRow {
                snr_db: field(cols[0])?.ok_or_else(|| Error::Parse("missing SNR".into()))?,
                ser_weak: field(cols[1])?,
                ser_strong: field(cols[2])?,
            })
        })
        .collect()
}

pub fn write_csv(records: &[SerRecord], path: &Path) -> Result<()> {
    let rows: Vec<CsvRow> = records.iter().map(CsvRow::from).collect();
    std::fs::write(path, format_csv(&rows))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    parse_csv(&std::fs::read_to_string(path)?)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of trial `trial` at grid point `point`.
pub fn trial_seed(seed: u64, point: usize, trial: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ point as u64) ^ trial as u64)
}

/// Everything drawn at random for one trial.
#[derive(Debug, Clone)]
pub struct TrialDraw {
    pub realization: ChannelRealization,
    pub first: SyncEstimate,
    pub second: SyncEstimate,
}

/// Per-trial log lines: sync detections and detector windows, JSON each.
#[derive(Debug, Clone, Default)]
pub struct TrialLog {
    pub sync: Vec<String>,
    pub windows: Vec<String>,
}

/// Fixed per-configuration state shared by all trials.
#[derive(Debug, Clone)]
pub struct Experiment {
    cfg: ExperimentConfig,
    lora: LoraConfig,
    sync: Synchronizer,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let lora = cfg.lora_config()?;
        let sync = Synchronizer::new(&lora);
        Ok(Self { cfg, lora, sync })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn lora(&self) -> &LoraConfig {
        &self.lora
    }

    fn noise_var(snr_db: f64) -> f64 {
        10f64.powf(-snr_db / 10.0)
    }

    fn strong_power(&self) -> f64 {
        10f64.powf(self.cfg.power_delta_db / 10.0)
    }

    fn second_delay(&self) -> usize {
        FIRST_USER_DELAY_SYMBOLS + self.cfg.overlap_delay_symbols
    }

    /// Synthesizes one collision.
    pub fn draw(&self, snr_db: f64, seed: u64) -> Result<TrialDraw> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.lora.n_chips();
        let payload = |rng: &mut ChaCha8Rng| -> Vec<Symbol> {
            (0..self.cfg.payload_len)
                .map(|_| Symbol::new(rng.random_range(0..n), &self.lora).expect("in range"))
                .collect()
        };
        let pay_first = payload(&mut rng);
        let pay_second = payload(&mut rng);
        let phase = |rng: &mut ChaCha8Rng| rng.random_range(0.0..std::f64::consts::TAU);
        let first = UserParams::new(1.0, phase(&mut rng), 0.0, 0.0)?;
        let second = UserParams::new(self.strong_power(), phase(&mut rng), self.cfg.dfc_hz, self.cfg.tau_chips)?;
        let noise_var = Self::noise_var(snr_db);
        let realization = ChannelRealization::generate(
            &self.lora,
            FrameSpec::new(pay_first, FIRST_USER_DELAY_SYMBOLS)?,
            first,
            FrameSpec::new(pay_second, self.second_delay())?,
            second,
            noise_var,
            rng.next_u64(),
        )?;
        Ok(TrialDraw {
            first: SyncEstimate::from_truth(&first, FIRST_USER_DELAY_SYMBOLS, &self.lora, noise_var),
            second: SyncEstimate::from_truth(&second, self.second_delay(), &self.lora, noise_var),
            realization,
        })
    }

    /// Detector context for a receiver following `strong` with `weak` as
    /// interferer, plus the index of the weak symbol whose second segment
    /// lies in strong window 0.
    pub fn detector_context(
        &self,
        strong: &SyncEstimate,
        weak: &SyncEstimate,
        noise_var: f64,
    ) -> Result<(DetectorContext, i64)> {
        let r = self.lora.os_factor() as i64;
        let sps = self.lora.samples_per_symbol(true) as i64;
        let diff = weak.timing_os as i64 - strong.timing_os as i64;
        let tau_samples = diff.rem_euclid(sps);
        let j0 = (tau_samples - diff) / sps;
        let ctx = DetectorContext::new(
            self.lora.clone(),
            strong.power_est,
            weak.power_est.min(strong.power_est),
            tau_samples as f64 / r as f64,
            weak.cfo_cycles_per_chip(&self.lora) - strong.cfo_cycles_per_chip(&self.lora),
            noise_var.max(f64::MIN_POSITIVE),
        )?;
        Ok((ctx, j0))
    }

    /// Detector for genie trials at one SNR; identical for every trial.
    pub fn genie_detector(&self, snr_db: f64) -> Result<(JointDetector, i64)> {
        let noise_var = Self::noise_var(snr_db);
        let (strong, weak) = self.genie_estimates(noise_var);
        let (ctx, j0) = self.detector_context(&strong, &weak, noise_var)?;
        Ok((JointDetector::new(ctx), j0))
    }

    fn genie_estimates(&self, noise_var: f64) -> (SyncEstimate, SyncEstimate) {
        let weak = UserParams::new(1.0, 0.0, 0.0, 0.0).expect("valid");
        let strong = UserParams::new(self.strong_power(), 0.0, self.cfg.dfc_hz, self.cfg.tau_chips).expect("valid");
        (
            SyncEstimate::from_truth(&strong, self.second_delay(), &self.lora, noise_var),
            SyncEstimate::from_truth(&weak, FIRST_USER_DELAY_SYMBOLS, &self.lora, noise_var),
        )
    }

    /// Runs one trial. `genie` may carry a prebuilt detector for this SNR.
    pub fn trial(
        &self,
        snr_db: f64,
        seed: u64,
        genie: Option<&(JointDetector, i64)>,
        mut log: Option<&mut TrialLog>,
    ) -> Result<TrialResult> {
        let draw = self.draw(snr_db, seed)?;
        let stream = draw.realization.samples.as_slice();
        let invalid = TrialResult::default();

        // acquisition and state machine
        let (first, second, first_bin, second_bin) = match self.cfg.sync_mode {
            SyncMode::Genie => (draw.first, draw.second, None, None),
            SyncMode::Estimated => {
                let Some(a1) = self.sync.acquire(stream, 0) else {
                    return Ok(invalid);
                };
                let from = a1.estimate.payload_start(&self.lora);
                let Some(a2) = self.sync.acquire(stream, from) else {
                    return Ok(invalid);
                };
                (a1.estimate, a2.estimate, Some(a1.bin), Some(a2.bin))
            }
        };
        if let Some(log) = log.as_deref_mut() {
            log.sync.push(first.record(first_bin.unwrap_or(0)).to_json_line());
            log.sync.push(second.record(second_bin.unwrap_or(0)).to_json_line());
        }
        let (fsm, _) = fsm_step(&ReceiverFsmState::default(), FsmEvent::NewUser(first))?;
        let (fsm, action) = fsm_step(&fsm, FsmEvent::NewUser(second))?;
        let (strong, weak) = match self.cfg.sync_mode {
            SyncMode::Genie => (second, first),
            SyncMode::Estimated => {
                if action != FsmAction::Resynchronize {
                    return Ok(invalid);
                }
                (
                    fsm.user_strong.expect("two users"),
                    fsm.user_weak.expect("two users"),
                )
            }
        };

        let built;
        let (detector, j0) = match (self.cfg.sync_mode, genie) {
            (SyncMode::Genie, Some(d)) => (&d.0, d.1),
            (SyncMode::Genie, None) => {
                built = self.genie_detector(snr_db)?;
                (&built.0, built.1)
            }
            (SyncMode::Estimated, _) => {
                let (ctx, j0) = self.detector_context(&strong, &weak, first.noise_var)?;
                built = (JointDetector::new(ctx), j0);
                (&built.0, built.1)
            }
        };

        let aligned = resynchronize(stream, &strong, &self.lora)?;
        let n = self.lora.n_chips();
        let start = self.lora.preamble_samples(false);
        let scored = self.cfg.scored_symbols();
        let (truth_weak, truth_strong) = (&draw.realization.frame_a.payload, &draw.realization.frame_b.payload);

        let mut state = DetectorState::default();
        let mut result = TrialResult {
            valid: true,
            scored_symbols: scored as u64,
            ..TrialResult::default()
        };
        for k in 0..=scored {
            let at = start + k * n;
            let window = aligned.get(at..at + n).ok_or(Error::LengthMismatch {
                expected: at + n,
                actual: aligned.len(),
            })?;
            let (d, next) = detector.decide_window(window, &state)?;
            if let Some(log) = log.as_deref_mut() {
                log.windows.push(d.to_json_line(k));
            }
            state = next;
            if k == 0 {
                continue;
            }
            if truth_strong.get(k) != Some(&d.s_a) {
                result.errors_strong += 1;
            }
            let j = j0 + k as i64 - 1;
            let weak_ok = usize::try_from(j)
                .ok()
                .and_then(|j| truth_weak.get(j))
                .zip(d.s_b_prev)
                .is_some_and(|(t, s)| *t == s);
            if !weak_ok {
                result.errors_weak += 1;
            }
        }

        // both frames have known length; the strong one ends last
        let (fsm, _) = fsm_step(&fsm, FsmEvent::UserLeft(UserSlot::Weak))?;
        fsm_step(&fsm, FsmEvent::UserLeft(UserSlot::Strong))?;
        Ok(result)
    }

    /// All trials of grid point `point`.
    pub fn point(&self, point: usize) -> Result<SerRecord> {
        let snr = self.cfg.snr_grid_db[point];
        let genie = match self.cfg.sync_mode {
            SyncMode::Genie => Some(self.genie_detector(snr)?),
            SyncMode::Estimated => None,
        };
        let trials = (0..self.cfg.trials_per_point)
            .into_par_iter()
            .map(|t| self.trial(snr, trial_seed(self.cfg.seed, point, t), genie.as_ref(), None))
            .collect::<Result<Vec<_>>>()?;
        Ok(SerRecord::from_trials(snr, &trials))
    }
}

/// One trial with a freshly built experiment.
pub fn run_trial(cfg: &ExperimentConfig, snr_db: f64, seed: u64) -> Result<TrialResult> {
    Experiment::new(cfg.clone())?.trial(snr_db, seed, None, None)
}

/// SER at every grid point. Results depend only on the configuration, not
/// on the number of worker threads.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SerRecord>> {
    let exp = Experiment::new(cfg.clone())?;
    (0..cfg.snr_grid_db.len()).map(|p| exp.point(p)).collect()
}

/// Decisions of the two-user pipeline and of the plain demodulator on the
/// same single-user reception.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleUserComparison {
    pub truth: Vec<Symbol>,
    pub pipeline: Vec<Symbol>,
    pub standalone: Vec<Symbol>,
}

/// Sends only the first user's frame, aligns to it with its true offsets
/// and decodes every payload window twice: with the joint detector told the
/// second user is silent, and with the single-user demodulator.
pub fn run_single_user_trial(cfg: &ExperimentConfig, snr_db: f64, seed: u64) -> Result<SingleUserComparison> {
    let exp = Experiment::new(cfg.clone())?;
    let lora = exp.lora();
    let draw = exp.draw(snr_db, seed)?;
    let frame = &draw.realization.frame_a;
    let params = draw.realization.truth_a;
    let mut stream = synthesize_user(frame, &params, lora, true).into_vec();
    crate::channel::add_awgn(&mut stream, draw.realization.noise_var, splitmix64(seed));

    let est = draw.first;
    let ctx = DetectorContext::new(
        lora.clone(),
        params.power,
        0.0,
        (lora.n_chips() as f64 - cfg.tau_chips).rem_euclid(lora.n_chips() as f64),
        0.0,
        draw.realization.noise_var,
    )?;
    let detector = JointDetector::new(ctx);
    let demod = Demodulator::new(lora);
    let aligned = resynchronize(&stream, &est, lora)?;
    let n = lora.n_chips();
    let start = lora.preamble_samples(false);
    let windows: Vec<&[C64]> = (0..frame.payload.len())
        .map(|k| &aligned[start + k * n..start + (k + 1) * n])
        .collect();
    let (pipeline, _) = detector.run(&windows)?;
    let standalone = windows
        .iter()
        .map(|w| demod.demod(w).map(|(s, _)| s))
        .collect::<Result<Vec<_>>>()?;
    Ok(SingleUserComparison {
        truth: frame.payload.clone(),
        pipeline,
        standalone,
    })
}

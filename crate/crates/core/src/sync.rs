//! Preamble detection, offset estimation and the receiver state machine.
//!
//! Acquisition of one user runs in four steps on the oversampled stream:
//!
//! 1. Nyquist-rate windows are taken every `N` chips, dechirped and
//!    transformed. Groups of `N_pr - 1` consecutive windows are averaged
//!    bin-wise with a geometric mean; a group whose peak exceeds
//!    [`DETECTION_RATIO`] times its median flags a preamble.
//! 2. The phase drift of the peak bin across the group gives the fractional
//!    carrier offset, which is removed from the stream.
//! 3. The stream is cross-correlated with two oversampled downchirps. The
//!    peak position fixes the polyphase (fractional time offset) and the
//!    downchirp position; its magnitude gives the received power.
//! 4. The upchirp bin on the chosen polyphase and the downchirp position
//!    together resolve the integer carrier and time offsets.
//!
//! Timing is reported in absolute oversampled samples so that estimates of
//! two users on the same stream can be compared directly.

use std::f64::consts::{LN_2, TAU};

use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::channel::UserParams;
use crate::phy::{argmax_by, ChirpGenerator, ComplexSamples, Demodulator, LoraConfig, SampleRate};
use crate::{Error, Result, C64};

/// Peak-to-median ratio of the averaged spectrum that declares a preamble.
pub const DETECTION_RATIO: f64 = 4.0;

/// Extra window groups inspected after the first threshold crossing.
const REFINE_GROUPS: usize = 3;

/// Estimated offsets and power of one user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyncEstimate {
    /// Integer carrier offset in DFT bins.
    pub l_cfo: i64,
    /// Fractional carrier offset in bins, `[-0.5, 0.5)`.
    pub lambda_cfo: f64,
    /// Integer time offset in chips, modulo `N`.
    pub l_sto: usize,
    /// Fractional time offset in chips, a multiple of `1/R` in `[0, 1)`.
    pub lambda_sto: f64,
    /// Received power, linear.
    pub power_est: f64,
    /// Absolute oversampled index of the first preamble sample.
    pub timing_os: usize,
    /// Noise variance per sample seen around this user's preamble.
    pub noise_var: f64,
    /// The upchirp and downchirp bins had inconsistent parity.
    pub low_confidence: bool,
}

impl SyncEstimate {
    /// Estimate equal to the true parameters of a user whose frame starts
    /// `start_delay_symbols` symbols into the stream.
    pub fn from_truth(
        params: &UserParams,
        start_delay_symbols: usize,
        cfg: &LoraConfig,
        noise_var: f64,
    ) -> Self {
        let r = cfg.os_factor();
        let timing_os = start_delay_symbols * cfg.samples_per_symbol(true) + params.sto_samples(cfg);
        let bins = params.cfo_hz * cfg.n_chips() as f64 / cfg.bandwidth_hz();
        let l_cfo = (bins + 0.5).floor();
        Self {
            l_cfo: l_cfo as i64,
            lambda_cfo: bins - l_cfo,
            l_sto: (timing_os / r) % cfg.n_chips(),
            lambda_sto: (timing_os % r) as f64 / r as f64,
            power_est: params.power,
            timing_os,
            noise_var,
            low_confidence: false,
        }
    }

    /// Total carrier offset in bins.
    pub fn cfo_bins(&self) -> f64 {
        self.l_cfo as f64 + self.lambda_cfo
    }

    /// Total carrier offset in cycles per chip.
    pub fn cfo_cycles_per_chip(&self, cfg: &LoraConfig) -> f64 {
        self.cfo_bins() / cfg.n_chips() as f64
    }

    /// Absolute oversampled index of the first payload sample.
    pub fn payload_start(&self, cfg: &LoraConfig) -> usize {
        self.timing_os + cfg.preamble_samples(true)
    }

    pub fn record(&self, bin: usize) -> DetectionRecord {
        DetectionRecord {
            sample_index: self.timing_os,
            bin,
            l_cfo: self.l_cfo,
            lambda_cfo: self.lambda_cfo,
            l_sto: self.l_sto,
            lambda_sto: self.lambda_sto,
            power_est: self.power_est,
        }
    }
}

/// Log line written for each detection in verbose mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub sample_index: usize,
    pub bin: usize,
    pub l_cfo: i64,
    pub lambda_cfo: f64,
    pub l_sto: usize,
    pub lambda_sto: f64,
    pub power_est: f64,
}

impl DetectionRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// Peak of a window group's averaged spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreambleCandidate {
    pub bin: usize,
    pub avg_mag: f64,
}

/// Bin-wise geometric mean of spectrum magnitudes.
pub fn geometric_mean(spectra: &[Vec<C64>]) -> Vec<f64> {
    let n = spectra.first().map_or(0, Vec::len);
    let k = spectra.len() as f64;
    (0..n)
        .map(|i| {
            let s: f64 = spectra
                .iter()
                .map(|y| y[i].norm().max(f64::MIN_POSITIVE).ln())
                .sum();
            (s / k).exp()
        })
        .collect()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

fn threshold(avg: &[f64]) -> Option<PreambleCandidate> {
    let bin = argmax_by(avg.iter().copied());
    let peak = avg[bin];
    (peak > DETECTION_RATIO * median(avg)).then_some(PreambleCandidate { bin, avg_mag: peak })
}

/// Nyquist-rate window of `N` samples starting at oversampled index
/// `start`, with the carrier offset `cfo_cycles_per_sample` removed.
fn window_at(stream: &[C64], start: usize, cfg: &LoraConfig, cfo_cycles_per_sample: f64) -> Option<Vec<C64>> {
    let (n, r) = (cfg.n_chips(), cfg.os_factor());
    if start + (n - 1) * r >= stream.len() {
        return None;
    }
    Some(
        (0..n)
            .map(|i| {
                let m = start + i * r;
                stream[m] * derotation(m, cfo_cycles_per_sample)
            })
            .collect(),
    )
}

fn derotation(m: usize, cycles_per_sample: f64) -> C64 {
    if cycles_per_sample == 0.0 {
        return C64::new(1.0, 0.0);
    }
    let c = (m as f64 * cycles_per_sample).fract();
    C64::from_polar(1.0, -TAU * c)
}

/// Checks the first `N_pr - 1` Nyquist windows (polyphase 0) of an
/// oversampled stream for a preamble.
pub fn detect_preamble(stream: &[C64], cfg: &LoraConfig) -> Option<PreambleCandidate> {
    let demod = Demodulator::new(cfg);
    let sps = cfg.samples_per_symbol(true);
    let spectra = (0..cfg.preamble_len() - 1)
        .map(|k| {
            let w = window_at(stream, k * sps, cfg, 0.0)?;
            demod.spectrum(&w).ok()
        })
        .collect::<Option<Vec<_>>>()?;
    threshold(&geometric_mean(&spectra))
}

/// Fractional carrier offset in bins from the phase advance of `bin`
/// between consecutive preamble windows.
pub fn estimate_frac_cfo(spectra: &[Vec<C64>], bin: usize) -> f64 {
    let acc: C64 = spectra
        .windows(2)
        .map(|p| p[1][bin] * p[0][bin].conj())
        .sum();
    let lambda = acc.arg() / TAU;
    if lambda >= 0.5 {
        lambda - 1.0
    } else {
        lambda
    }
}

/// Two oversampled downchirps, the correlation reference.
fn downchirp_reference(cfg: &LoraConfig) -> Vec<C64> {
    let d = ChirpGenerator::new(cfg, true).downchirp();
    [d.as_slice(), d.as_slice()].concat()
}

/// `c[m] = sum_i x[m + i] ref[i]^*` for every `m` with full overlap, via FFT.
fn correlate(x: &[C64], reference: &[C64]) -> Vec<C64> {
    if x.len() < reference.len() {
        return Vec::new();
    }
    let len = x.len().next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut a = x.to_vec();
    a.resize(len, C64::default());
    let mut b = reference.to_vec();
    b.resize(len, C64::default());
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v.conj() / len as f64;
    }
    inv.process(&mut a);
    a.truncate(x.len() - reference.len() + 1);
    a
}

/// Fractional time offset, power and peak position from the correlation of
/// a downchirp region with two oversampled downchirps.
///
/// `peak_pos` is the oversampled index within `region` where the first
/// downchirp starts; `lambda_sto = (peak_pos mod R) / R`.
pub fn estimate_frac_sto_power(region: &[C64], cfg: &LoraConfig) -> (f64, f64, usize) {
    let reference = downchirp_reference(cfg);
    let c = correlate(region, &reference);
    if c.is_empty() {
        return (0.0, 0.0, 0);
    }
    let peak = argmax_by(c.iter().map(|v| v.norm_sqr()));
    let r = cfg.os_factor();
    let power = (c[peak].norm() / reference.len() as f64).powi(2);
    ((peak % r) as f64 / r as f64, power, peak)
}

/// Integer offsets solved from the upchirp and downchirp bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntegerOffsets {
    pub l_cfo: i64,
    pub l_sto: usize,
    pub low_confidence: bool,
}

/// Solves `up = L_STO + L_CFO`, `down = L_CFO - L_STO` (mod `N`), taking the
/// solution with the smaller `|L_CFO|`.
pub fn estimate_integer_offsets(up: usize, down: usize, cfg: &LoraConfig) -> IntegerOffsets {
    let n = cfg.n_chips() as i64;
    let h = (up as i64 + down as i64).rem_euclid(n);
    let signed = |x: i64| {
        let x = x.rem_euclid(n);
        if x > n / 2 {
            x - n
        } else {
            x
        }
    };
    let c0 = signed(h / 2);
    let c1 = signed(h / 2 + n / 2);
    let l_cfo = if c1.abs() < c0.abs() { c1 } else { c0 };
    IntegerOffsets {
        l_cfo,
        l_sto: (up as i64 - l_cfo).rem_euclid(n) as usize,
        low_confidence: h % 2 == 1,
    }
}

/// `median |Y|^2 / (N ln 2)`: for complex Gaussian noise `|Y|^2` is
/// exponential with mean `N sigma^2`, and a few signal bins barely move the
/// median.
pub fn estimate_noise_var(spectra: &[Vec<C64>]) -> f64 {
    let n = spectra.first().map_or(1, Vec::len);
    let powers: Vec<f64> = spectra.iter().flatten().map(|v| v.norm_sqr()).collect();
    if powers.is_empty() {
        return 0.0;
    }
    median(&powers) / (n as f64 * LN_2)
}

/// Nyquist-rate stream aligned to the user described by `est`: sample `n`
/// is input sample `timing_os + n R`, with the user's carrier offset removed.
pub fn resynchronize(stream: &[C64], est: &SyncEstimate, cfg: &LoraConfig) -> Result<ComplexSamples> {
    let r = cfg.os_factor();
    if est.timing_os >= stream.len() {
        return Err(Error::LengthMismatch {
            expected: est.timing_os + 1,
            actual: stream.len(),
        });
    }
    let step = est.cfo_cycles_per_chip(cfg) / r as f64;
    let data = (est.timing_os..stream.len())
        .step_by(r)
        .map(|m| stream[m] * derotation(m, step))
        .collect();
    Ok(ComplexSamples::from_parts(data, SampleRate::Nyquist))
}

/// Outcome of one acquisition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Acquisition {
    pub estimate: SyncEstimate,
    /// Averaged-spectrum peak bin of the detecting window group.
    pub bin: usize,
}

/// Single-user acquisition on an oversampled stream.
#[derive(Clone)]
pub struct Synchronizer {
    cfg: LoraConfig,
    demod: Demodulator,
    reference: Vec<C64>,
}

impl std::fmt::Debug for Synchronizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Synchronizer")
            .field("cfg", &self.cfg)
            .finish_non_exhaustive()
    }
}

impl Synchronizer {
    pub fn new(cfg: &LoraConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            demod: Demodulator::new(cfg),
            reference: downchirp_reference(cfg),
        }
    }

    fn spectra(&self, stream: &[C64], start: usize, count: usize, cfo: f64) -> Option<Vec<Vec<C64>>> {
        let sps = self.cfg.samples_per_symbol(true);
        (0..count)
            .map(|k| {
                let w = window_at(stream, start + k * sps, &self.cfg, cfo)?;
                self.demod.spectrum(&w).ok()
            })
            .collect()
    }

    /// Scans from oversampled index `from` for the next preamble and
    /// estimates its offsets and power.
    pub fn acquire(&self, stream: &[C64], from: usize) -> Option<Acquisition> {
        let cfg = &self.cfg;
        let (n, r) = (cfg.n_chips(), cfg.os_factor());
        let sps = n * r;
        let group = cfg.preamble_len() - 1;

        // step 1: sliding groups of windows on the grid of `from`
        let mut cache: Vec<Vec<C64>> = Vec::new();
        let spectrum = |j: usize, cache: &mut Vec<Vec<C64>>| -> Option<()> {
            while cache.len() <= j {
                let w = window_at(stream, from + cache.len() * sps, cfg, 0.0)?;
                cache.push(self.demod.spectrum(&w).ok()?);
            }
            Some(())
        };
        let mut first = None;
        for i in 0.. {
            spectrum(i + group - 1, &mut cache)?;
            if threshold(&geometric_mean(&cache[i..i + group])).is_some() {
                first = Some(i);
                break;
            }
        }
        let first = first?;
        let mut best: Option<(usize, PreambleCandidate)> = None;
        for i in first..=first + REFINE_GROUPS {
            if spectrum(i + group - 1, &mut cache).is_none() {
                break;
            }
            if let Some(c) = threshold(&geometric_mean(&cache[i..i + group])) {
                if best.is_none_or(|(_, b)| c.avg_mag > b.avg_mag) {
                    best = Some((i, c));
                }
            }
        }
        let (g_idx, cand) = best?;
        let g = from + g_idx * sps;

        // step 2
        let lambda_cfo = estimate_frac_cfo(&cache[g_idx..g_idx + group], cand.bin);
        let frac_step = lambda_cfo / sps as f64;

        // step 3: downchirps expected (N_pr + 2) N chips after the preamble
        // start, which lies at most a few symbols before the group
        let np = cfg.preamble_len();
        let lo = g + ((np - 2) * n - n / 4) * r;
        let hi = (g + ((np + 3) * n + n / 4) * r).min(stream.len().checked_sub(self.reference.len())?);
        if lo > hi {
            return None;
        }
        let region: Vec<C64> = (lo..hi + self.reference.len())
            .map(|m| stream[m] * derotation(m, frac_step))
            .collect();
        let c = correlate(&region, &self.reference);
        let peak = lo + argmax_by(c.iter().map(|v| v.norm_sqr()));

        // step 4: upchirp bin on the correlation's polyphase
        let phase = (peak - g) % r;
        let up_spec = self.spectra(stream, g + phase, group, frac_step)?;
        let up = argmax_by(geometric_mean(&up_spec));
        let down = ((peak - g - phase) / r) % n;
        let ints = estimate_integer_offsets(up, down, cfg);

        // remove the full offset and refine the correlation peak
        let step = (ints.l_cfo as f64 + lambda_cfo) / sps as f64;
        let centre = peak as i64 - ints.l_cfo * r as i64;
        let mut refined: Option<(usize, f64)> = None;
        for m in (centre - r as i64)..=(centre + r as i64) {
            if m < 0 || m as usize + self.reference.len() > stream.len() {
                continue;
            }
            let m = m as usize;
            let v: C64 = self
                .reference
                .iter()
                .enumerate()
                .map(|(i, d)| stream[m + i] * derotation(m + i, step) * d.conj())
                .sum();
            let mag = v.norm();
            if refined.is_none_or(|(_, b)| mag > b) {
                refined = Some((m, mag));
            }
        }
        let (m2, mag) = refined?;
        let timing_os = m2.checked_sub((np + 2) * sps)?;
        let estimate = SyncEstimate {
            l_cfo: ints.l_cfo,
            lambda_cfo,
            l_sto: (timing_os / r) % n,
            lambda_sto: (timing_os % r) as f64 / r as f64,
            power_est: (mag / self.reference.len() as f64).powi(2),
            timing_os,
            noise_var: estimate_noise_var(&up_spec),
            low_confidence: ints.low_confidence,
        };
        Some(Acquisition {
            estimate,
            bin: cand.bin,
        })
    }
}

/// Receiver occupancy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FsmState {
    NoUser,
    SingleUser,
    TwoUsers,
}

impl FsmState {
    fn name(self) -> &'static str {
        match self {
            Self::NoUser => "NoUser",
            Self::SingleUser => "SingleUser",
            Self::TwoUsers => "TwoUsers",
        }
    }
}

/// Which tracked user an event refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UserSlot {
    Strong,
    Weak,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FsmEvent {
    NewUser(SyncEstimate),
    UserLeft(UserSlot),
}

impl FsmEvent {
    fn name(&self) -> &'static str {
        match self {
            Self::NewUser(_) => "NewUser",
            Self::UserLeft(UserSlot::Strong) => "UserLeft(Strong)",
            Self::UserLeft(UserSlot::Weak) => "UserLeft(Weak)",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsmAction {
    /// Align the stream to the only user.
    Synchronize,
    /// Re-align the stream to a different user.
    Resynchronize,
    None,
}

/// Receiver state. In `SingleUser` the user is kept in `user_strong`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceiverFsmState {
    pub state: FsmState,
    pub user_strong: Option<SyncEstimate>,
    pub user_weak: Option<SyncEstimate>,
}

impl Default for ReceiverFsmState {
    fn default() -> Self {
        Self {
            state: FsmState::NoUser,
            user_strong: None,
            user_weak: None,
        }
    }
}

impl ReceiverFsmState {
    /// The user the stream is synchronized to.
    pub fn synchronized(&self) -> Option<&SyncEstimate> {
        self.user_strong.as_ref()
    }
}

/// One transition; the receiver always follows the strongest user.
pub fn fsm_step(state: &ReceiverFsmState, event: FsmEvent) -> Result<(ReceiverFsmState, FsmAction)> {
    let invalid = || Error::InvalidTransition {
        state: state.state.name(),
        event: event.name(),
    };
    let single = |u: SyncEstimate| ReceiverFsmState {
        state: FsmState::SingleUser,
        user_strong: Some(u),
        user_weak: None,
    };
    match (state.state, event) {
        (FsmState::NoUser, FsmEvent::NewUser(u)) => Ok((single(u), FsmAction::Synchronize)),
        (FsmState::SingleUser, FsmEvent::NewUser(u)) => {
            let cur = state.user_strong.ok_or_else(invalid)?;
            if u.power_est > cur.power_est {
                let next = ReceiverFsmState {
                    state: FsmState::TwoUsers,
                    user_strong: Some(u),
                    user_weak: Some(cur),
                };
                Ok((next, FsmAction::Resynchronize))
            } else {
                let next = ReceiverFsmState {
                    state: FsmState::TwoUsers,
                    user_strong: Some(cur),
                    user_weak: Some(u),
                };
                Ok((next, FsmAction::None))
            }
        }
        (FsmState::SingleUser, FsmEvent::UserLeft(UserSlot::Strong)) => {
            Ok((ReceiverFsmState::default(), FsmAction::None))
        }
        (FsmState::TwoUsers, FsmEvent::UserLeft(UserSlot::Strong)) => {
            Ok((single(state.user_weak.ok_or_else(invalid)?), FsmAction::Resynchronize))
        }
        (FsmState::TwoUsers, FsmEvent::UserLeft(UserSlot::Weak)) => {
            Ok((single(state.user_strong.ok_or_else(invalid)?), FsmAction::None))
        }
        _ => Err(invalid()),
    }
}

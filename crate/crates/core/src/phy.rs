//! LoRa chirp PHY.
//!
//! A symbol `s` of a spreading factor `SF` is an upchirp of `N = 2^SF` chips
//! whose starting frequency is shifted by `s` bins; the instantaneous
//! frequency folds from `+B/2` to `-B/2` at chip `n_f = N - s`. At the
//! Nyquist rate the fold is invisible (it contributes an integer number of
//! cycles); on an `R`-times oversampled grid it is not, which is what makes
//! fractional timing offsets observable.
//!
//! Phases of generated chirps are computed with exact integer arithmetic and
//! only converted to floating point for the final `cis`, so every sample is
//! accurate to a few ulps regardless of `SF` and `R`.

use std::f64::consts::TAU;
use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, C64};

/// Smallest spreading factor used by LoRa radios.
pub const MIN_SF: u8 = 7;
/// Largest spreading factor used by LoRa radios.
pub const MAX_SF: u8 = 12;
/// Smallest spreading factor accepted by [`LoraConfig::reduced`].
pub const MIN_REDUCED_SF: u8 = 2;

/// Number of downchirps closing a preamble.
pub const N_DOWNCHIRPS: f64 = 2.25;

/// Static PHY parameters shared by transmitter and receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    sf: u8,
    bandwidth_hz: f64,
    os_factor: usize,
    preamble_len: usize,
    sync_symbols: [u16; 2],
}

impl LoraConfig {
    /// Standard configuration: 125 kHz, 8x oversampling, 8 preamble upchirps
    /// and sync word `(0, 0)`.
    pub fn new(sf: u8) -> Result<Self> {
        if !(MIN_SF..=MAX_SF).contains(&sf) {
            return Err(Error::InvalidSpreadingFactor(sf));
        }
        Ok(Self::unchecked(sf))
    }

    /// Like [`LoraConfig::new`] but also accepts spreading factors below 7.
    ///
    /// Tiny symbol alphabets make exhaustive searches tractable; they are not
    /// valid LoRa settings.
    pub fn reduced(sf: u8) -> Result<Self> {
        if !(MIN_REDUCED_SF..=MAX_SF).contains(&sf) {
            return Err(Error::InvalidSpreadingFactor(sf));
        }
        Ok(Self::unchecked(sf))
    }

    fn unchecked(sf: u8) -> Self {
        Self {
            sf,
            bandwidth_hz: 125e3,
            os_factor: 8,
            preamble_len: 8,
            sync_symbols: [0, 0],
        }
    }

    pub fn with_os_factor(mut self, os_factor: usize) -> Result<Self> {
        if os_factor == 0 {
            return Err(Error::InvalidConfig("oversampling factor must be >= 1".into()));
        }
        self.os_factor = os_factor;
        Ok(self)
    }

    pub fn with_bandwidth(mut self, bandwidth_hz: f64) -> Result<Self> {
        if !(bandwidth_hz.is_finite() && bandwidth_hz > 0.0) {
            return Err(Error::InvalidConfig(format!("bandwidth {bandwidth_hz} Hz")));
        }
        self.bandwidth_hz = bandwidth_hz;
        Ok(self)
    }

    /// Number of unmodulated upchirps. At least two are needed so that the
    /// detector can average `preamble_len - 1` windows.
    pub fn with_preamble_len(mut self, preamble_len: usize) -> Result<Self> {
        if preamble_len < 2 {
            return Err(Error::InvalidConfig("preamble needs at least 2 upchirps".into()));
        }
        self.preamble_len = preamble_len;
        Ok(self)
    }

    pub fn with_sync_symbols(mut self, first: usize, second: usize) -> Result<Self> {
        let first = Symbol::new(first, &self)?;
        let second = Symbol::new(second, &self)?;
        self.sync_symbols = [first.0, second.0];
        Ok(self)
    }

    pub fn sf(&self) -> u8 {
        self.sf
    }

    /// `N = 2^SF`.
    pub fn n_chips(&self) -> usize {
        1 << self.sf
    }

    pub fn bandwidth_hz(&self) -> f64 {
        self.bandwidth_hz
    }

    /// `R`, the receiver oversampling factor.
    pub fn os_factor(&self) -> usize {
        self.os_factor
    }

    /// `fs = B * R`.
    pub fn sample_rate_hz(&self) -> f64 {
        self.bandwidth_hz * self.os_factor as f64
    }

    pub fn preamble_len(&self) -> usize {
        self.preamble_len
    }

    pub fn sync_symbols(&self) -> [Symbol; 2] {
        [Symbol(self.sync_symbols[0]), Symbol(self.sync_symbols[1])]
    }

    /// Samples per sample period: `R` when oversampled, else 1.
    pub fn rate_factor(&self, oversampled: bool) -> usize {
        if oversampled {
            self.os_factor
        } else {
            1
        }
    }

    pub fn samples_per_symbol(&self, oversampled: bool) -> usize {
        self.n_chips() * self.rate_factor(oversampled)
    }

    /// Length of the quarter downchirp ending the preamble.
    pub fn quarter_symbol(&self, oversampled: bool) -> usize {
        self.samples_per_symbol(oversampled) / 4
    }

    /// Samples before the first downchirp (`N_pr` upchirps and 2 sync symbols).
    pub fn downchirp_offset(&self, oversampled: bool) -> usize {
        (self.preamble_len + 2) * self.samples_per_symbol(oversampled)
    }

    /// Total preamble length, `(N_pr + 4.25) * N` samples at the given rate.
    pub fn preamble_samples(&self, oversampled: bool) -> usize {
        (self.preamble_len + 4) * self.samples_per_symbol(oversampled)
            + self.quarter_symbol(oversampled)
    }
}

/// A LoRa symbol value `s` in `[0, N)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Symbol(u16);

impl Symbol {
    pub fn new(value: usize, cfg: &LoraConfig) -> Result<Self> {
        Self::with_n(value, cfg.n_chips())
    }

    pub(crate) fn with_n(value: usize, n_chips: usize) -> Result<Self> {
        if value >= n_chips {
            return Err(Error::SymbolOutOfRange { value, n_chips });
        }
        Ok(Symbol(value as u16))
    }

    /// Caller guarantees `value < N`.
    pub(crate) fn from_index(value: usize) -> Self {
        debug_assert!(value <= u16::MAX as usize);
        Symbol(value as u16)
    }

    pub fn value(self) -> usize {
        self.0 as usize
    }

    /// Chip index `n_f = N - s` at which the frequency folds.
    pub fn fold_index(self, cfg: &LoraConfig) -> usize {
        cfg.n_chips() - self.value()
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Whether a buffer holds one sample per chip or `R`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleRate {
    Nyquist,
    Oversampled,
}

/// A non-empty buffer of complex baseband samples tagged with its rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSamples {
    data: Vec<C64>,
    rate: SampleRate,
}

impl ComplexSamples {
    pub fn new(data: Vec<C64>, rate: SampleRate) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::LengthMismatch {
                expected: 1,
                actual: 0,
            });
        }
        Ok(Self { data, rate })
    }

    pub(crate) fn from_parts(data: Vec<C64>, rate: SampleRate) -> Self {
        debug_assert!(!data.is_empty());
        Self { data, rate }
    }

    pub fn rate(&self) -> SampleRate {
        self.rate
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }
}

impl Deref for ComplexSamples {
    type Target = [C64];

    fn deref(&self) -> &[C64] {
        &self.data
    }
}

fn rate_tag(oversampled: bool) -> SampleRate {
    if oversampled {
        SampleRate::Oversampled
    } else {
        SampleRate::Nyquist
    }
}

/// Sample `m` of symbol `s` on a grid with `r` samples per chip.
///
/// The phase numerator `m^2 + (2s - N) m r - 2 N m r [m >= (N - s) r]` is
/// reduced modulo `2 N r^2` before conversion to radians.
fn chirp_sample(s: usize, m: usize, n_chips: usize, r: usize) -> C64 {
    let (s, m, n, r) = (s as i64, m as i64, n_chips as i64, r as i64);
    let den = 2 * n * r * r;
    let mut num = m * m + (2 * s - n) * m * r;
    if m >= (n - s) * r {
        num -= 2 * n * m * r;
    }
    let frac = num.rem_euclid(den) as f64 / den as f64;
    C64::from_polar(1.0, TAU * frac)
}

/// Phase in cycles of symbol `s` at continuous chip time `t` in `[0, N)`.
///
/// Agrees with [`modulate`] whenever `t` lies on the sampling grid.
pub fn chirp_phase(s: f64, t: f64, n_chips: f64) -> f64 {
    let fold = if t >= n_chips - s { t } else { 0.0 };
    t * t / (2.0 * n_chips) + (s / n_chips - 0.5) * t - fold
}

/// Baseband samples of symbol `s`, `N` long at the Nyquist rate or `N * R`
/// long when `oversampled`.
pub fn modulate(s: Symbol, cfg: &LoraConfig, oversampled: bool) -> ComplexSamples {
    let r = cfg.rate_factor(oversampled);
    let n = cfg.n_chips();
    let data = (0..n * r)
        .map(|m| chirp_sample(s.value(), m, n, r))
        .collect();
    ComplexSamples::from_parts(data, rate_tag(oversampled))
}

/// Conjugate of the base upchirp `x_0`.
pub fn downchirp(cfg: &LoraConfig, oversampled: bool) -> ComplexSamples {
    let mut x = modulate(Symbol(0), cfg, oversampled);
    x.as_mut_slice().iter_mut().for_each(|v| *v = v.conj());
    x
}

/// Multiplies a Nyquist-rate window by `x_0^*`, turning symbol `s` into a
/// tone at bin `s`.
pub fn dechirp(y: &[C64], cfg: &LoraConfig) -> Result<ComplexSamples> {
    let n = cfg.n_chips();
    if y.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: y.len(),
        });
    }
    let down = downchirp(cfg, false);
    let data = y.iter().zip(down.iter()).map(|(a, b)| a * b).collect();
    Ok(ComplexSamples::from_parts(data, SampleRate::Nyquist))
}

/// Non-coherent single-user decision: the DFT bin of largest magnitude.
///
/// Returns the decision together with the full spectrum of the dechirped
/// window. Builds an FFT plan per call; use [`Demodulator`] in loops.
pub fn demod_single(y: &[C64], cfg: &LoraConfig) -> Result<(Symbol, Vec<C64>)> {
    Demodulator::new(cfg).demod(y)
}

/// Preamble: `N_pr` upchirps, the two sync symbols, two downchirps and the
/// first quarter of a third.
pub fn build_preamble(cfg: &LoraConfig, oversampled: bool) -> ComplexSamples {
    let up = modulate(Symbol(0), cfg, oversampled);
    let down = downchirp(cfg, oversampled);
    let mut out = Vec::with_capacity(cfg.preamble_samples(oversampled));
    for _ in 0..cfg.preamble_len() {
        out.extend_from_slice(&up);
    }
    for s in cfg.sync_symbols() {
        out.extend_from_slice(&modulate(s, cfg, oversampled));
    }
    out.extend_from_slice(&down);
    out.extend_from_slice(&down);
    out.extend_from_slice(&down[..cfg.quarter_symbol(oversampled)]);
    ComplexSamples::from_parts(out, rate_tag(oversampled))
}

/// Index of the largest magnitude; the lowest index wins ties.
pub fn argmax_magnitude(values: &[C64]) -> usize {
    argmax_by(values.iter().map(|v| v.norm_sqr()))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_by(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Table-driven chirp generator for one grid (Nyquist or oversampled).
///
/// `x_s[m] = x_0[m] * exp(j 2 pi (s m - N m [fold]) / (N R))`, so each sample
/// costs one lookup and one complex product instead of a `cis`.
#[derive(Debug, Clone)]
pub struct ChirpGenerator {
    n_chips: usize,
    r: usize,
    base: Vec<C64>,
    roots: Vec<C64>,
}

impl ChirpGenerator {
    pub fn new(cfg: &LoraConfig, oversampled: bool) -> Self {
        let n_chips = cfg.n_chips();
        let r = cfg.rate_factor(oversampled);
        let len = n_chips * r;
        let base = modulate(Symbol(0), cfg, oversampled).into_vec();
        let roots = (0..len)
            .map(|k| C64::from_polar(1.0, TAU * k as f64 / len as f64))
            .collect();
        Self {
            n_chips,
            r,
            base,
            roots,
        }
    }

    pub fn symbol_len(&self) -> usize {
        self.base.len()
    }

    /// Writes symbol `s` into `out[..symbol_len()]`.
    pub fn write_symbol(&self, s: Symbol, out: &mut [C64]) {
        let len = self.base.len();
        let s = s.value();
        let fold_at = (self.n_chips - s) * self.r;
        for (m, (o, b)) in out[..len].iter_mut().zip(&self.base).enumerate() {
            let mut idx = (s * m) % len;
            if m >= fold_at {
                idx = (idx + len - (self.n_chips * m) % len) % len;
            }
            *o = b * self.roots[idx];
        }
    }

    pub fn symbol(&self, s: Symbol) -> Vec<C64> {
        let mut out = vec![C64::default(); self.base.len()];
        self.write_symbol(s, &mut out);
        out
    }

    pub fn downchirp(&self) -> Vec<C64> {
        self.base.iter().map(|v| v.conj()).collect()
    }
}

/// Reusable dechirp + FFT engine for Nyquist-rate windows.
#[derive(Clone)]
pub struct Demodulator {
    n_chips: usize,
    fft: Arc<dyn Fft<f64>>,
    down: Vec<C64>,
}

impl fmt::Debug for Demodulator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Demodulator")
            .field("n_chips", &self.n_chips)
            .finish_non_exhaustive()
    }
}

impl Demodulator {
    pub fn new(cfg: &LoraConfig) -> Self {
        let n_chips = cfg.n_chips();
        let fft = FftPlanner::new().plan_fft_forward(n_chips);
        Self {
            n_chips,
            fft,
            down: downchirp(cfg, false).into_vec(),
        }
    }

    pub fn n_chips(&self) -> usize {
        self.n_chips
    }

    /// `Y[i] = sum_n y[n] x_0^*[n] exp(-j 2 pi n i / N)`.
    pub fn spectrum(&self, window: &[C64]) -> Result<Vec<C64>> {
        let mut buf = vec![C64::default(); self.n_chips];
        self.spectrum_into(window, &mut buf)?;
        Ok(buf)
    }

    pub fn spectrum_into(&self, window: &[C64], out: &mut [C64]) -> Result<()> {
        if window.len() != self.n_chips || out.len() != self.n_chips {
            return Err(Error::LengthMismatch {
                expected: self.n_chips,
                actual: window.len().min(out.len()),
            });
        }
        for ((o, y), d) in out.iter_mut().zip(window).zip(&self.down) {
            *o = y * d;
        }
        self.fft.process(out);
        Ok(())
    }

    /// Plain DFT of an already dechirped window.
    pub fn transform(&self, dechirped: &mut [C64]) {
        self.fft.process(dechirped);
    }

    pub fn demod(&self, window: &[C64]) -> Result<(Symbol, Vec<C64>)> {
        let spec = self.spectrum(window)?;
        let s = Symbol::from_index(argmax_magnitude(&spec));
        Ok((s, spec))
    }
}

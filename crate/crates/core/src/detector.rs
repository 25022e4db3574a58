//! Joint two-user detection, one window at a time.
//!
//! The receiver is synchronized to the strong user A, so every Nyquist-rate
//! window of `N` samples holds exactly one of A's symbols. User B's symbol
//! boundary falls `tau` chips into the window: the first `ceil(tau)` samples
//! carry B's previous symbol, the rest its current one.
//!
//! For each window the detector
//!
//! 1. computes the DFT `Y` of the dechirped window (A's matched filter),
//! 2. for every candidate `s_a` removes the presumed contribution
//!    `sqrt(P_A) e^{j theta_a} e^{j 2 pi n s_a / N}` (with `theta_a` read from
//!    `Y[s_a]`) and correlates the residual with B's chirp templates over
//!    the two segments, giving `M1[s_a, .]` and `M2[s_a, .]`,
//! 3. picks `s_a` maximizing
//!    `ln I0(c sqrt(P_A) |Y[s_a]|) + max ln I0(c sqrt(P_B) |M1|) + max ln I0(c sqrt(P_B) |M2|)`,
//!    where `c = 2 / sigma^2`,
//! 4. decides B's previous symbol from `|M2^(k-1)[s_a^(k-1), .] + M1^(k)[s_a^(k), .]|`
//!    and carries `M2^(k)[s_a^(k), .]` to the next window.
//!
//! B's templates are the exact dechirped waveform of a B symbol seen through
//! A's window, including the frequency fold and the effective carrier
//! offset, so `M1` and `M2` of the same B symbol add coherently across the
//! window boundary.

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};
use serde::Serialize;

use crate::bessel::log_i0;
use crate::phy::{argmax_by, argmax_magnitude, chirp_phase, Demodulator, LoraConfig, Symbol};
use crate::{Error, Result, C64};

/// Largest `N` accepted by [`oracle_decide_window`].
pub const ORACLE_MAX_CHIPS: usize = 32;

/// Parameters the joint detector needs about the two users.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorContext {
    /// Power of the synchronized (strong) user.
    pub p_a: f64,
    /// Power of the unsynchronized (weak) user.
    pub p_b: f64,
    /// Chips from the start of A's window to B's symbol boundary, `[0, N)`.
    pub tau_chips: f64,
    /// Effective carrier offset of B relative to A, in cycles per chip
    /// (`delta_f / B`).
    pub cfo_cycles_per_chip: f64,
    /// Complex noise variance per Nyquist-rate sample.
    pub noise_var: f64,
    pub cfg: LoraConfig,
}

impl DetectorContext {
    pub fn new(
        cfg: LoraConfig,
        p_a: f64,
        p_b: f64,
        tau_chips: f64,
        cfo_cycles_per_chip: f64,
        noise_var: f64,
    ) -> Result<Self> {
        let n = cfg.n_chips() as f64;
        if !(tau_chips.is_finite() && (0.0..n).contains(&tau_chips)) {
            return Err(Error::InvalidConfig(format!("tau {tau_chips} not in [0, {n})")));
        }
        if !(p_b >= 0.0 && p_a >= p_b && p_a.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "powers must satisfy P_A >= P_B >= 0 (got {p_a}, {p_b})"
            )));
        }
        if !(noise_var.is_finite() && noise_var > 0.0) {
            return Err(Error::InvalidConfig(format!("noise variance {noise_var}")));
        }
        if !cfo_cycles_per_chip.is_finite() {
            return Err(Error::InvalidConfig("non-finite carrier offset".into()));
        }
        Ok(Self {
            p_a,
            p_b,
            tau_chips,
            cfo_cycles_per_chip,
            noise_var,
            cfg,
        })
    }

    pub fn n_chips(&self) -> usize {
        self.cfg.n_chips()
    }

    /// `ceil(tau)`: length of the first segment.
    pub fn boundary(&self) -> usize {
        self.tau_chips.ceil() as usize
    }

    /// Scale turning correlation magnitudes into log-likelihood arguments.
    pub fn metric_scale(&self) -> f64 {
        2.0 / self.noise_var
    }

    /// Phase (cycles) of B's dechirped template for candidate `s` at sample
    /// `n`. Samples before the boundary belong to B's previous symbol, which
    /// started `N - tau` chips before the window; the rest to the symbol that
    /// starts at `tau`.
    fn template_phase(&self, s: usize, n: usize) -> f64 {
        let nf = self.n_chips() as f64;
        let t = if n < self.boundary() {
            n as f64 + nf - self.tau_chips
        } else {
            n as f64 - self.tau_chips
        };
        let own = chirp_phase(s as f64, t, nf);
        let reference = chirp_phase(0.0, n as f64, nf);
        own - reference + self.cfo_cycles_per_chip * n as f64
    }

    /// Conjugated template coefficient `e^{-j 2 pi phase}`.
    fn template_conj(&self, s: usize, n: usize) -> C64 {
        let p = self.template_phase(s, n);
        C64::from_polar(1.0, -TAU * (p - p.floor()))
    }

    /// Rotation aligning the previous window's `M2` with this window's `M1`
    /// (the carrier offset keeps running across the window boundary).
    fn carry_rotation(&self) -> C64 {
        let c = self.cfo_cycles_per_chip * self.n_chips() as f64;
        C64::from_polar(1.0, TAU * (c - c.floor()))
    }
}

/// `theta_a = arg Y[s_a]`, or 0 for an empty bin.
pub fn phase_estimate_a(dft: &[C64], s_a: Symbol) -> f64 {
    let v = dft[s_a.value()];
    if v.norm_sqr() == 0.0 {
        0.0
    } else {
        v.arg()
    }
}

fn residual(window: &[C64], s_a: Symbol, theta_a: f64, ctx: &DetectorContext, n: usize) -> C64 {
    let nn = ctx.n_chips();
    let tone = C64::from_polar(
        ctx.p_a.sqrt(),
        theta_a + TAU * ((n * s_a.value()) % nn) as f64 / nn as f64,
    );
    window[n] - tone
}

fn matched_filter_direct(
    dechirped: &[C64],
    s_a: Symbol,
    theta_a: f64,
    ctx: &DetectorContext,
    range: std::ops::Range<usize>,
) -> Result<Vec<C64>> {
    let n = ctx.n_chips();
    if dechirped.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: dechirped.len(),
        });
    }
    Ok((0..n)
        .map(|s| {
            range
                .clone()
                .map(|i| residual(dechirped, s_a, theta_a, ctx, i) * ctx.template_conj(s, i))
                .sum()
        })
        .collect())
}

/// `M1[s_a, s]` for every candidate `s` of B's previous symbol, by direct
/// summation over `n < ceil(tau)` of the dechirped window.
pub fn matched_filter_m1(
    dechirped: &[C64],
    s_a: Symbol,
    theta_a: f64,
    ctx: &DetectorContext,
) -> Result<Vec<C64>> {
    matched_filter_direct(dechirped, s_a, theta_a, ctx, 0..ctx.boundary())
}

/// `M2[s_a, s]` for every candidate `s` of B's current symbol, by direct
/// summation over `ceil(tau) <= n < N`.
pub fn matched_filter_m2(
    dechirped: &[C64],
    s_a: Symbol,
    theta_a: f64,
    ctx: &DetectorContext,
) -> Result<Vec<C64>> {
    matched_filter_direct(dechirped, s_a, theta_a, ctx, ctx.boundary()..ctx.n_chips())
}

/// Log of the phase-marginalized likelihood of one candidate triple
/// `(s_a, s_b_prev, s_b)`, given A's spectrum and the `M1`/`M2` rows that
/// belong to `s_a`.
pub fn window_log_metric(
    dft_y: &[C64],
    m1: &[C64],
    m2: &[C64],
    s_bar: (Symbol, Symbol, Symbol),
    ctx: &DetectorContext,
) -> f64 {
    let c = ctx.metric_scale();
    let (a, b) = (ctx.p_a.sqrt(), ctx.p_b.sqrt());
    log_i0(c * a * dft_y[s_bar.0.value()].norm())
        + log_i0(c * b * m1[s_bar.1.value()].norm())
        + log_i0(c * b * m2[s_bar.2.value()].norm())
}

/// Precomputed matched filters for one detector context.
///
/// Holds B's conjugated templates for both segments and their responses to
/// each of A's pure tones. By linearity
/// `M[s_a, s] = T s . y - sqrt(P_A) e^{j theta_a} G[s_a, s]`,
/// so a window costs two matrix-vector products plus `O(N^2)` updates instead
/// of `N` residual constructions with `O(N^2)` sums each.
#[derive(Clone)]
pub struct MatchedFilterBank {
    n: usize,
    boundary: usize,
    seg1: Vec<C64>,
    seg2: Vec<C64>,
    tone1: Vec<C64>,
    tone2: Vec<C64>,
}

impl fmt::Debug for MatchedFilterBank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MatchedFilterBank")
            .field("n", &self.n)
            .field("boundary", &self.boundary)
            .finish_non_exhaustive()
    }
}

impl MatchedFilterBank {
    pub fn new(ctx: &DetectorContext) -> Self {
        let n = ctx.n_chips();
        let boundary = ctx.boundary();
        let len2 = n - boundary;
        let mut seg1 = Vec::with_capacity(n * boundary);
        let mut seg2 = Vec::with_capacity(n * len2);
        for s in 0..n {
            seg1.extend((0..boundary).map(|i| ctx.template_conj(s, i)));
            seg2.extend((boundary..n).map(|i| ctx.template_conj(s, i)));
        }

        // G[s_a, s] = sum_n e^{+j 2 pi n s_a / N} T_s[n]: an unnormalized
        // inverse DFT of each zero-padded template row.
        let ifft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_inverse(n);
        let mut tone1 = vec![C64::default(); n * n];
        let mut tone2 = vec![C64::default(); n * n];
        let mut buf = vec![C64::default(); n];
        for s in 0..n {
            buf.fill(C64::default());
            buf[..boundary].copy_from_slice(&seg1[s * boundary..(s + 1) * boundary]);
            ifft.process(&mut buf);
            for (s_a, v) in buf.iter().enumerate() {
                tone1[s_a * n + s] = *v;
            }
            buf.fill(C64::default());
            buf[boundary..].copy_from_slice(&seg2[s * len2..(s + 1) * len2]);
            ifft.process(&mut buf);
            for (s_a, v) in buf.iter().enumerate() {
                tone2[s_a * n + s] = *v;
            }
        }
        Self {
            n,
            boundary,
            seg1,
            seg2,
            tone1,
            tone2,
        }
    }

    /// Template correlations of the raw dechirped window, before removing A.
    fn correlate(&self, dechirped: &[C64]) -> (Vec<C64>, Vec<C64>) {
        let (n, b) = (self.n, self.boundary);
        let len2 = n - b;
        let head = &dechirped[..b];
        let tail = &dechirped[b..];
        let m1 = (0..n)
            .map(|s| dot(&self.seg1[s * b..(s + 1) * b], head))
            .collect();
        let m2 = (0..n)
            .map(|s| dot(&self.seg2[s * len2..(s + 1) * len2], tail))
            .collect();
        (m1, m2)
    }

    fn row_into(base: &[C64], tones: &[C64], amp: C64, s_a: usize, out: &mut [C64]) {
        let n = base.len();
        let g = &tones[s_a * n..(s_a + 1) * n];
        for ((o, b), t) in out.iter_mut().zip(base).zip(g) {
            *o = b - amp * t;
        }
    }

    /// `M1[s_a, .]` and `M2[s_a, .]` for one candidate.
    pub fn filters(
        &self,
        dechirped: &[C64],
        s_a: Symbol,
        theta_a: f64,
        p_a: f64,
    ) -> (Vec<C64>, Vec<C64>) {
        let (m1y, m2y) = self.correlate(dechirped);
        let amp = C64::from_polar(p_a.sqrt(), theta_a);
        let mut m1 = vec![C64::default(); self.n];
        let mut m2 = vec![C64::default(); self.n];
        Self::row_into(&m1y, &self.tone1, amp, s_a.value(), &mut m1);
        Self::row_into(&m2y, &self.tone2, amp, s_a.value(), &mut m2);
        (m1, m2)
    }
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm_sqr(base: &[C64], tones: &[C64], amp: C64) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, (b, t)) in base.iter().zip(tones).enumerate() {
        let v = (b - amp * t).norm_sqr();
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// State carried between consecutive windows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectorState {
    /// `M2^(k-1)[s_a^(k-1), .]`, already rotated into window `k`'s phase frame.
    pub m2_prev: Option<Vec<C64>>,
    pub s_a_prev: Option<Symbol>,
}

/// Decisions taken on window `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDecision {
    /// `s_a^(k)`.
    pub s_a: Symbol,
    /// `s_b^(k-1)`, absent on the first window.
    pub s_b_prev: Option<Symbol>,
    /// Metric of the winning triple.
    pub log_metric: f64,
    /// Inner maximizers `(s_b^(k-1), s_b^(k))` of the window metric for
    /// `s_a^(k)`. Only informative: B's decisions come from the two-window
    /// rule.
    pub s_b_inner: (Symbol, Symbol),
}

#[derive(Serialize)]
struct WindowDump {
    k: usize,
    s_a: usize,
    s_b_prev: Option<usize>,
    log_metric: f64,
}

impl WindowDecision {
    /// One-line JSON debug record for window `k`.
    pub fn to_json_line(&self, k: usize) -> String {
        serde_json::to_string(&WindowDump {
            k,
            s_a: self.s_a.value(),
            s_b_prev: self.s_b_prev.map(Symbol::value),
            log_metric: self.log_metric,
        })
        .expect("plain struct serializes")
    }
}

/// Window-by-window joint detector for a fixed context.
#[derive(Clone)]
pub struct JointDetector {
    ctx: DetectorContext,
    bank: MatchedFilterBank,
    demod: Demodulator,
    carry: C64,
}

impl fmt::Debug for JointDetector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("JointDetector")
            .field("ctx", &self.ctx)
            .finish_non_exhaustive()
    }
}

impl JointDetector {
    pub fn new(ctx: DetectorContext) -> Self {
        let bank = MatchedFilterBank::new(&ctx);
        let demod = Demodulator::new(&ctx.cfg);
        let carry = ctx.carry_rotation();
        Self {
            ctx,
            bank,
            demod,
            carry,
        }
    }

    pub fn context(&self) -> &DetectorContext {
        &self.ctx
    }

    pub fn bank(&self) -> &MatchedFilterBank {
        &self.bank
    }

    /// Processes one synchronized Nyquist-rate window (not dechirped).
    pub fn decide_window(
        &self,
        window: &[C64],
        state: &DetectorState,
    ) -> Result<(WindowDecision, DetectorState)> {
        let n = self.ctx.n_chips();
        let mut dechirped = vec![C64::default(); n];
        dechirp_into(window, &self.ctx.cfg, &mut dechirped)?;
        let mut dft = dechirped.clone();
        self.demod.transform(&mut dft);

        let (m1y, m2y) = self.bank.correlate(&dechirped);
        let c = self.ctx.metric_scale();
        let (amp_a, amp_b) = (self.ctx.p_a.sqrt(), self.ctx.p_b.sqrt());

        // The two B terms share no B candidate, so their maxima are taken
        // independently for each s_a.
        let mut best: Option<(usize, f64, usize, usize)> = None;
        for (s_a, y) in dft.iter().enumerate() {
            let amp = candidate_amplitude(*y, amp_a);
            let (i1, v1) = max_norm_sqr(&m1y, &self.bank.tone1[s_a * n..(s_a + 1) * n], amp);
            let (i2, v2) = max_norm_sqr(&m2y, &self.bank.tone2[s_a * n..(s_a + 1) * n], amp);
            let metric =
                log_i0(c * amp_a * y.norm()) + log_i0(c * amp_b * v1.sqrt()) + log_i0(c * amp_b * v2.sqrt());
            if best.is_none_or(|b| metric > b.1) {
                best = Some((s_a, metric, i1, i2));
            }
        }
        let (s_a, log_metric, i1, i2) = best.expect("N >= 1");

        let amp = candidate_amplitude(dft[s_a], amp_a);
        let mut m1 = vec![C64::default(); n];
        let mut m2 = vec![C64::default(); n];
        MatchedFilterBank::row_into(&m1y, &self.bank.tone1, amp, s_a, &mut m1);
        MatchedFilterBank::row_into(&m2y, &self.bank.tone2, amp, s_a, &mut m2);

        let s_b_prev = state.m2_prev.as_ref().map(|prev| {
            Symbol::from_index(argmax_by(prev.iter().zip(&m1).map(|(p, q)| (p + q).norm_sqr())))
        });
        m2.iter_mut().for_each(|v| *v *= self.carry);

        let decision = WindowDecision {
            s_a: Symbol::from_index(s_a),
            s_b_prev,
            log_metric,
            s_b_inner: (Symbol::from_index(i1), Symbol::from_index(i2)),
        };
        let next = DetectorState {
            m2_prev: Some(m2),
            s_a_prev: Some(decision.s_a),
        };
        Ok((decision, next))
    }

    /// Decision on B's last symbol once no further window follows.
    pub fn finish(&self, state: &DetectorState) -> Option<Symbol> {
        state
            .m2_prev
            .as_ref()
            .map(|m2| Symbol::from_index(argmax_magnitude(m2)))
    }

    /// Runs a sequence of windows and returns A's decisions plus every B
    /// decision: one per window after the first, and a final one from the
    /// carried vector.
    pub fn run(&self, windows: &[&[C64]]) -> Result<(Vec<Symbol>, Vec<Symbol>)> {
        let mut state = DetectorState::default();
        let mut a = Vec::with_capacity(windows.len());
        let mut b = Vec::with_capacity(windows.len());
        for w in windows {
            let (d, next) = self.decide_window(w, &state)?;
            a.push(d.s_a);
            b.extend(d.s_b_prev);
            state = next;
        }
        b.extend(self.finish(&state));
        Ok((a, b))
    }
}

/// `sqrt(P_A) e^{j theta_a}` with `theta_a = arg Y[s_a]`.
fn candidate_amplitude(y: C64, amp_a: f64) -> C64 {
    let mag = y.norm();
    if mag == 0.0 {
        C64::new(amp_a, 0.0)
    } else {
        y * (amp_a / mag)
    }
}

fn dechirp_into(window: &[C64], cfg: &LoraConfig, out: &mut [C64]) -> Result<()> {
    let n = cfg.n_chips();
    if window.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: window.len(),
        });
    }
    let nf = n as f64;
    for (i, (o, y)) in out.iter_mut().zip(window).enumerate() {
        let p = chirp_phase(0.0, i as f64, nf);
        *o = y * C64::from_polar(1.0, -TAU * (p - p.floor()));
    }
    Ok(())
}

/// Exhaustive maximizer of the window metric, for testing the detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleDecision {
    pub s_a: Symbol,
    /// Two-window decision on B's previous symbol when `m2_prev` was given,
    /// else the metric maximizer.
    pub s_b_prev: Symbol,
    pub s_b: Symbol,
    /// Metric of the maximizing triple.
    pub log_metric: f64,
    /// Metric maximizer for B's previous symbol.
    pub s_b_prev_window: Symbol,
}

/// Searches all `N^3` candidate triples with direct DFT and matched-filter
/// sums. Only for `N <= 32`.
pub fn oracle_decide_window(
    window: &[C64],
    ctx: &DetectorContext,
    m2_prev: Option<&[C64]>,
) -> Result<OracleDecision> {
    let n = ctx.n_chips();
    if n > ORACLE_MAX_CHIPS {
        return Err(Error::OracleTooLarge {
            n_chips: n,
            max: ORACLE_MAX_CHIPS,
        });
    }
    let mut dechirped = vec![C64::default(); n];
    dechirp_into(window, &ctx.cfg, &mut dechirped)?;
    let dft: Vec<C64> = (0..n)
        .map(|k| {
            dechirped
                .iter()
                .enumerate()
                .map(|(i, v)| v * C64::from_polar(1.0, -TAU * ((i * k) % n) as f64 / n as f64))
                .sum()
        })
        .collect();

    let mut best: Option<(f64, usize, usize, usize)> = None;
    let mut best_m1 = Vec::new();
    for s_a in 0..n {
        let sym_a = Symbol::from_index(s_a);
        let theta = phase_estimate_a(&dft, sym_a);
        let m1 = matched_filter_m1(&dechirped, sym_a, theta, ctx)?;
        let m2 = matched_filter_m2(&dechirped, sym_a, theta, ctx)?;
        for s1 in 0..n {
            for s2 in 0..n {
                let triple = (sym_a, Symbol::from_index(s1), Symbol::from_index(s2));
                let metric = window_log_metric(&dft, &m1, &m2, triple, ctx);
                if best.is_none_or(|b| metric > b.0) {
                    best = Some((metric, s_a, s1, s2));
                    best_m1.clone_from(&m1);
                }
            }
        }
    }
    let (log_metric, s_a, s1, s2) = best.expect("N >= 1");
    let s_b_prev = match m2_prev {
        Some(prev) => argmax_by(prev.iter().zip(&best_m1).map(|(p, q)| (p + q).norm_sqr())),
        None => s1,
    };
    Ok(OracleDecision {
        s_a: Symbol::from_index(s_a),
        s_b_prev: Symbol::from_index(s_b_prev),
        s_b: Symbol::from_index(s2),
        log_metric,
        s_b_prev_window: Symbol::from_index(s1),
    })
}

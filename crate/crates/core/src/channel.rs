//! Two-user collision channel.
//!
//! Each user's frame is synthesized on the oversampled grid, delayed by
//! whole symbols plus its chip-level offset `tau` (rounded to `1/R` chip),
//! scaled by `sqrt(P) e^{j theta}`, rotated by its carrier offset and summed
//! with circularly-symmetric AWGN. Noise variance `sigma^2` is per sample;
//! the receiver decimates without filtering so the same variance holds at
//! the Nyquist rate and `SNR = P / sigma^2`.

use std::f64::consts::TAU;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::phy::{build_preamble, ChirpGenerator, ComplexSamples, LoraConfig, SampleRate, Symbol};
use crate::{Error, Result, C64};

/// Ground-truth channel parameters of one user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserParams {
    /// Received power `P = |h|^2`, linear.
    pub power: f64,
    /// Channel phase `theta = arg h`.
    pub phase_rad: f64,
    /// Carrier frequency offset in Hz.
    pub cfo_hz: f64,
    /// Chip-level time offset `tau` in `[0, N)`.
    pub sto_chips: f64,
}

impl UserParams {
    pub fn new(power: f64, phase_rad: f64, cfo_hz: f64, sto_chips: f64) -> Result<Self> {
        if !(power.is_finite() && power >= 0.0) {
            return Err(Error::InvalidConfig(format!("power {power}")));
        }
        if !(sto_chips.is_finite() && sto_chips >= 0.0) {
            return Err(Error::InvalidConfig(format!("time offset {sto_chips}")));
        }
        Ok(Self {
            power,
            phase_rad,
            cfo_hz,
            sto_chips,
        })
    }

    /// Unit power, no phase, no offsets.
    pub fn unit() -> Self {
        Self {
            power: 1.0,
            phase_rad: 0.0,
            cfo_hz: 0.0,
            sto_chips: 0.0,
        }
    }

    /// `L_STO = floor(tau)`.
    pub fn l_sto(&self) -> usize {
        self.sto_chips.floor() as usize
    }

    /// `lambda_STO = tau - floor(tau)`.
    pub fn lambda_sto(&self) -> f64 {
        self.sto_chips - self.sto_chips.floor()
    }

    /// Offset in oversampled samples, `round(tau * R)`.
    pub fn sto_samples(&self, cfg: &LoraConfig) -> usize {
        (self.sto_chips * cfg.os_factor() as f64).round() as usize
    }

    pub fn gain(&self) -> C64 {
        C64::from_polar(self.power.sqrt(), self.phase_rad)
    }
}

/// Symbols a user sends and when it starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub payload: Vec<Symbol>,
    pub start_delay_symbols: usize,
}

impl FrameSpec {
    pub fn new(payload: Vec<Symbol>, start_delay_symbols: usize) -> Result<Self> {
        if payload.is_empty() {
            return Err(Error::InvalidConfig("frame needs at least one symbol".into()));
        }
        Ok(Self {
            payload,
            start_delay_symbols,
        })
    }
}

/// A received two-user buffer together with everything used to make it.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub samples: ComplexSamples,
    pub truth_a: UserParams,
    pub truth_b: UserParams,
    pub noise_var: f64,
    pub frame_a: FrameSpec,
    pub frame_b: FrameSpec,
}

impl ChannelRealization {
    /// Synthesizes both users (with preambles) and adds noise.
    pub fn generate(
        cfg: &LoraConfig,
        frame_a: FrameSpec,
        truth_a: UserParams,
        frame_b: FrameSpec,
        truth_b: UserParams,
        noise_var: f64,
        seed: u64,
    ) -> Result<Self> {
        let gen = ChirpGenerator::new(cfg, true);
        let a = synthesize_with(&gen, &frame_a, &truth_a, cfg, true);
        let b = synthesize_with(&gen, &frame_b, &truth_b, cfg, true);
        let samples = superimpose(&a, &b, noise_var, seed)?;
        Ok(Self {
            samples,
            truth_a,
            truth_b,
            noise_var,
            frame_a,
            frame_b,
        })
    }
}

/// Oversampled waveform of one user: optional preamble followed by the
/// payload, delayed by `start_delay_symbols * N * R + round(tau * R)` zero
/// samples, scaled by `sqrt(P) e^{j theta}` and rotated by
/// `exp(j 2 pi n cfo / fs)` where `n` counts from the buffer start.
pub fn synthesize_user(
    frame: &FrameSpec,
    params: &UserParams,
    cfg: &LoraConfig,
    include_preamble: bool,
) -> ComplexSamples {
    let gen = ChirpGenerator::new(cfg, true);
    ComplexSamples::from_parts(
        synthesize_with(&gen, frame, params, cfg, include_preamble),
        SampleRate::Oversampled,
    )
}

pub(crate) fn synthesize_with(
    gen: &ChirpGenerator,
    frame: &FrameSpec,
    params: &UserParams,
    cfg: &LoraConfig,
    include_preamble: bool,
) -> Vec<C64> {
    let sps = gen.symbol_len();
    let delay = frame.start_delay_symbols * sps + params.sto_samples(cfg);
    let pre_len = if include_preamble {
        cfg.preamble_samples(true)
    } else {
        0
    };
    let mut out = vec![C64::default(); delay + pre_len + frame.payload.len() * sps];
    if include_preamble {
        out[delay..delay + pre_len].copy_from_slice(&build_preamble(cfg, true));
    }
    for (k, s) in frame.payload.iter().enumerate() {
        let at = delay + pre_len + k * sps;
        gen.write_symbol(*s, &mut out[at..at + sps]);
    }
    let gain = params.gain();
    let step = params.cfo_hz / cfg.sample_rate_hz();
    if step == 0.0 {
        out[delay..].iter_mut().for_each(|v| *v *= gain);
    } else {
        for (n, v) in out.iter_mut().enumerate().skip(delay) {
            // reduce before scaling so long buffers keep full phase precision
            let cycles = (n as f64 * step).fract();
            *v *= gain * C64::from_polar(1.0, TAU * cycles);
        }
    }
    out
}

/// Element-wise sum of two buffers (the shorter zero-padded) plus
/// `CN(0, noise_var)` noise drawn from a generator seeded with `seed`.
pub fn superimpose(a: &[C64], b: &[C64], noise_var: f64, seed: u64) -> Result<ComplexSamples> {
    if !(noise_var.is_finite() && noise_var >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise variance {noise_var}")));
    }
    let len = a.len().max(b.len());
    if len == 0 {
        return Err(Error::LengthMismatch {
            expected: 1,
            actual: 0,
        });
    }
    let mut out = vec![C64::default(); len];
    out[..a.len()].copy_from_slice(a);
    out[..b.len()].iter_mut().zip(b).for_each(|(o, v)| *o += v);
    if noise_var > 0.0 {
        add_awgn(&mut out, noise_var, seed);
    }
    Ok(ComplexSamples::from_parts(out, SampleRate::Oversampled))
}

/// Adds circularly-symmetric complex Gaussian noise of total variance
/// `noise_var` per sample.
pub fn add_awgn(x: &mut [C64], noise_var: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = (0.5 * noise_var).sqrt();
    for v in x.iter_mut() {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        *v += C64::new(sd * re, sd * im);
    }
}

/// Delays an oversampled buffer by `round(lambda * R)` samples.
pub fn fractional_delay(x: &[C64], lambda: f64, cfg: &LoraConfig) -> Result<ComplexSamples> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("fractional delay {lambda} not in [0, 1)")));
    }
    let shift = (lambda * cfg.os_factor() as f64).round() as usize;
    let mut out = vec![C64::default(); shift + x.len()];
    out[shift..].copy_from_slice(x);
    ComplexSamples::new(out, SampleRate::Oversampled)
}

/// Writes samples as interleaved little-endian `f32` I/Q pairs.
pub fn write_iq<W: Write>(samples: &[C64], mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(samples.len() * 8);
    for v in samples {
        buf.extend_from_slice(&(v.re as f32).to_le_bytes());
        buf.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads interleaved little-endian `f32` I/Q pairs.
pub fn read_iq<R: Read>(mut r: R) -> Result<Vec<C64>> {
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() % 8 != 0 {
        return Err(Error::Parse(format!("{} bytes is not a whole number of I/Q pairs", raw.len())));
    }
    Ok(raw
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            C64::new(re as f64, im as f64)
        })
        .collect())
}

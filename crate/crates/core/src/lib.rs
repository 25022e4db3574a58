//! Two-user LoRa baseband receiver.
//!
//! The crate covers the full simulation chain for two colliding same-SF LoRa
//! transmissions:
//!
//! - [`phy`]: chirp synthesis, preamble construction, dechirping and the
//!   non-coherent single-user demodulator.
//! - [`channel`]: superposition of two users with relative time offset,
//!   effective carrier offset, per-user power/phase and AWGN on an
//!   oversampled grid.
//! - [`sync`]: preamble detection and CFO/STO/power estimation that works
//!   under an ongoing transmission, plus the three-state receiver FSM.
//! - [`detector`]: the window-by-window joint detector with phase-marginalized
//!   metric, deferred decisions for the unsynchronized user, and an
//!   exhaustive oracle for small spreading factors.
//! - [`harness`]: collision experiments and symbol-error-rate sweeps.

pub mod bessel;
pub mod channel;
pub mod detector;
pub mod error;
pub mod harness;
pub mod phy;
pub mod sync;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;

pub use channel::{ChannelRealization, FrameSpec, UserParams};
pub use detector::{DetectorContext, DetectorState, JointDetector, WindowDecision};
pub use harness::{ExperimentConfig, SerRecord, SyncMode, TrialResult};
pub use phy::{ComplexSamples, LoraConfig, SampleRate, Symbol};
pub use sync::{FsmAction, FsmEvent, FsmState, ReceiverFsmState, SyncEstimate, UserSlot};

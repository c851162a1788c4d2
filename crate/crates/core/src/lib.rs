//! Simulation of measurement-based feedback cooling of a collective atomic
//! spin in a precessing frame.
//!
//! A Faraday probe measures F_z every third of a Larmor period; after a
//! latency the outcome drives an optical-pumping displacement along z. Two
//! engines evaluate a pulse [`Schedule`]: exact moment propagation
//! ([`moments`]) and Monte Carlo trajectories ([`mc`]).
//!
//! ```
//! use spincool::{moments, ExperimentParams, Schedule};
//!
//! let params = ExperimentParams::paper_calibrated();
//! let run = moments::propagate(&params, &Schedule::paper_characterization(-0.75)).unwrap();
//! assert!(run.readout.total_variance() < run.input.total_variance());
//! ```

pub mod analysis;
pub mod calibration;
pub mod dynamics;
pub mod error;
pub mod mc;
pub mod moments;
pub mod noise;
pub mod params;
pub mod protocol;

pub use analysis::{db_reduction, volume_factor, EngineKind, RunSummary, SampleStats};
pub use calibration::{calibrate, Calibration, CalibrationTargets};
pub use dynamics::StepModel;
pub use error::{Error, Result};
pub use mc::{McOptions, McRun};
pub use noise::NoiseBudget;
pub use params::{
    DephasingForm, EnsembleParams, ExperimentParams, FieldParams, InitialMode, InitialState, NoiseParams,
    ProbeParams, SpinMoments,
};
pub use protocol::{Axis, Engine, GainSearch, Phase, PhaseKind, Preset, Schedule};

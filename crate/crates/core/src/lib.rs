//! Identification of SISO bilinear state-space models from input/output data.
//!
//! The pipeline recovers the bilinear Markov parameters from a batch of
//! excitation experiments ([`recovery`]), arranges them into the bilinear
//! Hankel matrix and realizes a reduced quadruple from its SVD ([`hankel`]).
//! When only one measured sequence exists, a NARX network trained on it stands
//! in for the unknown system as the experiment source ([`narx`]).

pub mod error;
pub mod hankel;
pub mod io;
pub mod markov;
pub mod narx;
pub mod pipeline;
pub mod recovery;
pub mod synthetic;
pub mod system;

pub use error::{Category, Error, Result};
pub use hankel::{
    build_hankel, identify_from_markov, realize, select_order, HankelSet, OrderChoice,
    RealizationResult,
};
pub use io::{ingest, Dataset, DatasetFormat, Model};
pub use markov::{word_index, Letter, MarkovSequence, Word, WordIndex};
pub use narx::{
    augment_zero_response, denormalize_model, detrend, mpe, train_narx, Activation, History,
    NarxModel, NarxSpec, SimMode, TrainConfig, TrainReport, TrainedNarx, TrainingSeries,
    TrendStats, ValidationSplit,
};
pub use pipeline::{
    compare, identify_direct, identify_from_sequence, DirectReport, Metrics, PipelineConfig,
    SequenceReport,
};
pub use recovery::{
    generate_experiments, lift_input, recover_markov, ExperimentBatch, Excitation, IoSource,
    LiftedInputMatrix, LstsqMethod, MarkovRecovery, RecoveryDiagnostics,
};
pub use system::{
    discretize_backward_euler, undiscretize, ContinuousBilinearSystem, DiscreteBilinearSystem,
};

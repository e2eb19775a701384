//! Pseudo-differential integral operators (PDIO) and the
//! pseudo-differential neural operator (PDNO): symbol networks, an FFT
//! core, reverse-mode differentiation, PDE data generation, training, and
//! an empirical symbol-class verifier.

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod fft;
pub mod grid;
pub mod io;
pub mod operators;
pub mod rng;
pub mod symbols;
pub mod tensor;
pub mod training;

pub use autodiff::{
    grad_check, grad_check_params, ActKind, Buffer, ParamStore, Parameter, Tape, Var,
};
pub use error::{Error, Result};
pub use fft::{dft_oracle, irfft_nd, rfft_nd, sobolev_norm, SpectralField};
pub use grid::{
    append_coords, coordinate_grid, fftfreq, subsample, Domain, FrequencyGrid, GridFunction,
};
pub use operators::{
    fno_layer_apply, pdio_apply, pdno_forward, rollout, time_pdio_apply, truncate_modes,
    FnoLayer, FnoModel, PdioLayer, PdnoArch, PdnoModel, TimePdio,
};
pub use symbols::{build_symbol_net, verify_symbol_class, SymbolClassReport, SymbolNet};
pub use num_complex::Complex64;
pub use tensor::{CTensor, Tensor};
pub use training::{
    adam_step, build_model, evaluate, load_checkpoint, save_checkpoint, step_lr, train, Dataset,
    EvalReport, ModelKind, TrainConfig, TrainHistory,
};

//! Differentiable building blocks: layers, heads, parameters and optimiser.

pub mod heads;
pub mod layers;
pub mod params;

pub use heads::{
    derive_seed, inject_noise, inject_noise_var, ordinal_decode, ordinal_encode, rank_regress_decode, Mode,
    OrdinalHead, RankRegressor,
};
pub use layers::{Conv2d, Conv3d, ConvLstmCell, ConvLstmStack, ConvLstmState, DeformConv2d, Linear};
pub use params::{Adam, GradBuffer, Init, ParamId, ParamStore};

//! The 3D-CNN encoder, longitudinal pooling, fusion layer, GRU cell and
//! classification head, plus the cross-sectional and average-pooling baselines.

mod network;
mod params;

pub use network::{
    fuse, gru_step, longitudinal_pool, predict_sequence, stack_volumes, trunk_features, Forward,
    GruVars, Mode,
};
pub use params::{
    ArchConfig, ConvIdx, DenseIdx, Entry, GruIdx, Layout, ModelParams, ParamGroup, Variant,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

//! Attention-based multiple-instance learning over patch features.

pub mod abmil;
pub mod bag;
pub mod predict;
pub mod train;

pub use abmil::{abmil_graph, ce_graph, Abmil, AbmilConfig, AbmilOutput};
pub use bag::{build_bags, Bag, TaskLevel, TaskSpec};
pub use predict::{
    attention_to_grid, format_sig, min_max, predict, read_attention_jsonl, read_predictions_csv,
    write_attention_jsonl, write_predictions_csv, AttentionGrid, GridCell, Prediction, PredictionRow,
};
pub use train::{mean_loss, train_abmil, EarlyStopping, EpochLog, TrainConfig, TrainLog};

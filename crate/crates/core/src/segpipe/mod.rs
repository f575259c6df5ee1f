//! Small-scale segmentation pipeline on planted scenes: scene generation,
//! the two-path model, losses, optimisation, self-training, metrics and
//! file formats.

pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scene;
pub mod train;

pub use io::{
    load_checkpoint, load_scene, read_checkpoint, read_scene, save_checkpoint, save_scene, write_checkpoint, write_pgm, write_scene,
    write_trace_csv,
};
pub use loss::{ce_loss, dice_loss, focal_loss, loss_total, seg_loss, LossParts, LossTotal, LossWeights, Targets};
pub use metrics::{argmax_labels, class_iou, hiou, metrics, SegMetrics};
pub use model::{
    adapted_bundle, class_rows, decoder_forward, ensemble, forward_graph, predict, AttentionKind, DecoderConfig, DecoderParams, EncoderParams,
    LayerParams, ModelConfig, ModelParams, ParamVars, SegOutput,
};
pub use optim::{AdamW, AdamWConfig};
pub use scene::{gen_toy_scene, oracle_accuracy, SceneConfig, ToyScene};
pub use train::{
    evaluate, pseudo_labels, train_inductive, train_transductive, Evaluation, PseudoLabelConfig, TraceRow, TrainConfig, TrainResult,
};

//! The attention encoder-decoder `p(z | x)`, its gradients and checkpoints.

mod checkpoint;
mod network;
mod tensor;

pub use checkpoint::{checkpoint_precision, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use network::{
    Attention, DecoderState, Encoded, Model, ModelConfig, SequenceRecorder, StepOutput, Tape, INIT_SCALE,
};
pub use tensor::{is_weight, ParamSet, Tensor};

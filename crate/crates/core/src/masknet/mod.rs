//! Fully convolutional masking network with its own reverse-mode tape.

mod io;
mod net;
mod tape;

pub use io::{load_weights, load_weights_expecting, save_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};
pub use net::{apply_mask, apply_mask_backward, InputFrame, InputMode, MaskNet, MaskNetConfig, MaskNetGrads};
pub use tape::{Conv2d, NodeId, Tape, TapeGrads};

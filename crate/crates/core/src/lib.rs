//! Two-stage attention-guided visual token pruning for vision-language
//! decoders.
//!
//! Stage 1 ranks visual tokens by the self-attention they receive inside the
//! vision encoder and drops the weakest before the decoder sees them. Stage 2
//! ranks the survivors by the attention text tokens pay them at a pivot
//! decoder layer and drops more. The crate also carries the analytical FLOPs
//! model for a pruning schedule, the FastV / FasterVLM / random baselines, and
//! a small seeded vision-language model that produces real attention maps so
//! every step can be exercised end to end.

pub mod attention;
pub mod cost;
pub mod mask;
pub mod pipeline;
pub mod scoring;
pub mod tensor;
pub mod toy;

pub use tensor::{Prng, Tensor, TensorError};

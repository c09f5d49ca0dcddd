//! Neural building blocks shared by the prior extractor, the reconstruction
//! network and the denoiser.

mod align;
mod attention;
mod naf;
mod refine;
mod residual;

pub use align::AlignmentModule;
pub use attention::{CrossAttention, GatedFfn, LowFrequencyTransformer, TransposedSelfAttention};
pub use naf::{sinusoidal_embedding, NafBlock, TimeEmbedding, TimeModulation};
pub use refine::{frequency_split, Frm, Pim};
pub use residual::{ChannelAttention, ResidualBlock};

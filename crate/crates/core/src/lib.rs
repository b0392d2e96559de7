pub mod channel;
pub mod codec;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod fds;
pub mod link;
pub mod pnm;
pub mod tensor;
pub mod unet;
pub mod train;
pub mod pipeline;

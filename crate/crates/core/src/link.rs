//! One semantic map through the whole link: one-hot encoding, power
//! normalization, the noisy channel, undoing the scale with the
//! out-of-band factor, and the receiver.

use crate::channel::{transmit, ChannelConfig};
use crate::codec::{denormalize, one_hot_encode, power_normalize, rle_pack, SemanticMap};
use crate::error::Result;
use crate::fds::{receive, FdsConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Received {
    /// `C_total x H x W` conditioning planes.
    pub stack: Vec<f32>,
    /// Raw received present planes after undoing the power scale.
    pub raw: Vec<f32>,
    pub present: Vec<u16>,
    /// Size of the compressed map payload.
    pub bits: u64,
}

pub fn send_map(
    map: &SemanticMap,
    total_classes: usize,
    channel: &ChannelConfig,
    receiver: &FdsConfig,
) -> Result<Received> {
    let stack = one_hot_encode(map, total_classes)?;
    let bits = rle_pack(&stack)?.bit_count();
    let frame = power_normalize(&stack, channel.power)?;
    let noisy = transmit(&frame, channel)?;
    let raw: Vec<f32> = denormalize(&noisy.symbols, noisy.scale).into_iter().map(|v| v as f32).collect();
    let out = receive(&raw, map.height(), map.width(), stack.present(), total_classes, receiver)?;
    Ok(Received { stack: out, raw, present: stack.present().to_vec(), bits })
}

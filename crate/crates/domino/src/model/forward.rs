//! Forward graph builders for encoder, decoder, projection head, and the
//! linear classifier.

use super::{EncoderConfig, ForwardCtx, FEATURE_SIDE, INPUT_SIDE, LEAKY_SLOPE};
use crate::ndgrad::{NdError, Scalar, ValueRef};

/// The two representations of one modality: the 8x8 convolutional feature
/// map `c` and the latent vector `z`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutputs {
    pub c: ValueRef,
    pub z: ValueRef,
}

/// x (B x C x 32 x 32) -> (c: B x 2B_ch x 8 x 8, z: B x latent).
pub fn encode<T: Scalar>(
    ctx: &mut ForwardCtx<'_, T>,
    m: usize,
    cfg: &EncoderConfig,
    x: ValueRef,
) -> Result<EncoderOutputs, NdError> {
    let shape = ctx.tape.shape(x).to_vec();
    if shape.len() != 4 || shape[2] != INPUT_SIDE || shape[3] != INPUT_SIDE {
        return Err(NdError::BadShape {
            what: format!("encoder expects B x C x {INPUT_SIDE} x {INPUT_SIDE}, got {shape:?}"),
        });
    }
    if shape[1] != cfg.in_channels {
        return Err(NdError::BadShape {
            what: format!("encoder {m} expects {} channels, got {}", cfg.in_channels, shape[1]),
        });
    }
    let batch = shape[0];

    let w1 = ctx.p(&format!("enc{m}/conv1/w"))?;
    let b1 = ctx.p(&format!("enc{m}/conv1/b"))?;
    let h1 = ctx.tape.conv2d(x, w1, Some(b1), 2, 1)?;
    let h1 = ctx.tape.leaky_relu(h1, LEAKY_SLOPE)?;

    let w2 = ctx.p(&format!("enc{m}/conv2/w"))?;
    let h2 = ctx.tape.conv2d(h1, w2, None, 2, 1)?;
    let h2 = ctx.batchnorm(&format!("enc{m}/bn2"), h2)?;
    let c = ctx.tape.leaky_relu(h2, LEAKY_SLOPE)?;
    debug_assert_eq!(ctx.tape.shape(c)[2], FEATURE_SIDE);

    let w3 = ctx.p(&format!("enc{m}/conv3/w"))?;
    let h3 = ctx.tape.conv2d(c, w3, None, 2, 1)?;
    let h3 = ctx.batchnorm(&format!("enc{m}/bn3"), h3)?;
    let h3 = ctx.tape.leaky_relu(h3, LEAKY_SLOPE)?;

    let flat = ctx.tape.reshape(h3, &[batch, cfg.flat_dim()])?;
    let wf = ctx.p(&format!("enc{m}/fc/w"))?;
    let bf = ctx.p(&format!("enc{m}/fc/b"))?;
    let z = ctx.tape.matmul(flat, wf)?;
    let z = add_row_bias(ctx, z, bf)?;
    Ok(EncoderOutputs { c, z })
}

/// c -> B x embed x 8 x 8 through the residual projection head.
pub fn project_conv<T: Scalar>(ctx: &mut ForwardCtx<'_, T>, m: usize, c: ValueRef) -> Result<ValueRef, NdError> {
    let wa1 = ctx.p(&format!("head{m}/a1/w"))?;
    let ba1 = ctx.p(&format!("head{m}/a1/b"))?;
    let a = ctx.tape.conv2d(c, wa1, Some(ba1), 1, 0)?;
    let a = ctx.tape.relu(a)?;
    let wa2 = ctx.p(&format!("head{m}/a2/w"))?;
    let ba2 = ctx.p(&format!("head{m}/a2/b"))?;
    let a = ctx.tape.conv2d(a, wa2, Some(ba2), 1, 0)?;

    let wb = ctx.p(&format!("head{m}/b/w"))?;
    let b = ctx.tape.conv2d(c, wb, None, 1, 0)?;

    let sum = ctx.tape.add(a, b)?;
    ctx.batchnorm(&format!("head{m}/bn"), sum)
}

/// z (B x latent) -> x' (B x C x 32 x 32) in [0,1].
pub fn decode<T: Scalar>(
    ctx: &mut ForwardCtx<'_, T>,
    m: usize,
    cfg: &EncoderConfig,
    z: ValueRef,
) -> Result<ValueRef, NdError> {
    let batch = ctx.tape.shape(z)[0];
    let b_ch = cfg.base_channels;

    let wf = ctx.p(&format!("dec{m}/fc/w"))?;
    let h = ctx.tape.matmul(z, wf)?;
    let h = ctx.tape.reshape(h, &[batch, 4 * b_ch, 4, 4])?;
    let h = ctx.batchnorm(&format!("dec{m}/bn0"), h)?;
    let h = ctx.tape.relu(h)?;

    let w1 = ctx.p(&format!("dec{m}/convt1/w"))?;
    let h = ctx.tape.conv_transpose2d(h, w1, None, 2, 1)?;
    let h = ctx.batchnorm(&format!("dec{m}/bn1"), h)?;
    let h = ctx.tape.relu(h)?;

    let w2 = ctx.p(&format!("dec{m}/convt2/w"))?;
    let h = ctx.tape.conv_transpose2d(h, w2, None, 2, 1)?;
    let h = ctx.batchnorm(&format!("dec{m}/bn2"), h)?;
    let h = ctx.tape.relu(h)?;

    let w3 = ctx.p(&format!("dec{m}/convt3/w"))?;
    let b3 = ctx.p(&format!("dec{m}/convt3/b"))?;
    let h = ctx.tape.conv_transpose2d(h, w3, Some(b3), 2, 1)?;
    // Squash to [0,1].
    let t = ctx.tape.tanh(h)?;
    let t = ctx.tape.add_const(t, 1.0)?;
    ctx.tape.scale(t, 0.5)
}

/// Logits of the linear classifier on z.
pub fn classify<T: Scalar>(ctx: &mut ForwardCtx<'_, T>, m: usize, z: ValueRef) -> Result<ValueRef, NdError> {
    let w = ctx.p(&format!("linear_probe{m}/w"))?;
    let b = ctx.p(&format!("linear_probe{m}/b"))?;
    let logits = ctx.tape.matmul(z, w)?;
    add_row_bias(ctx, logits, b)
}

/// y + broadcast bias row. sub_row subtracts, so negate the bias first.
fn add_row_bias<T: Scalar>(
    ctx: &mut ForwardCtx<'_, T>,
    y: ValueRef,
    bias: ValueRef,
) -> Result<ValueRef, NdError> {
    let neg = ctx.tape.scale(bias, -1.0)?;
    ctx.tape.sub_row(y, neg)
}

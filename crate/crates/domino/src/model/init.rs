//! Parameter initialization: Xavier-uniform weights, zero biases, identity
//! batchnorm, and the identity-initialized residual path of the conv head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{EncoderConfig, ParamStore};
use crate::ndgrad::{Array, Scalar};

/// Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Array<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    Array::new(shape, data).expect("xavier shape consistent")
}

fn conv_weight<T: Scalar>(rng: &mut ChaCha8Rng, out_ch: usize, in_ch: usize, k: usize) -> Array<T> {
    xavier_uniform(rng, vec![out_ch, in_ch, k, k], in_ch * k * k, out_ch * k * k)
}

fn convt_weight<T: Scalar>(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize, k: usize) -> Array<T> {
    xavier_uniform(rng, vec![in_ch, out_ch, k, k], in_ch * k * k, out_ch * k * k)
}

fn linear_weight<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array<T> {
    xavier_uniform(rng, vec![rows, cols], rows, cols)
}

fn bn_group<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) {
    store.insert_param(format!("{prefix}/gamma"), Array::full(vec![channels], T::one()));
    store.insert_param(format!("{prefix}/beta"), Array::zeros(vec![channels]));
    store.insert_buffer(format!("{prefix}/running_mean"), Array::zeros(vec![channels]));
    store.insert_buffer(format!("{prefix}/running_var"), Array::full(vec![channels], T::one()));
}

/// Encoder for modality `m`: conv(k4 s2 p1) stack C -> B -> 2B -> 4B with
/// batchnorm on the hidden convs, then linear to the latent.
pub fn init_encoder<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, m: usize, cfg: &EncoderConfig) {
    let b = cfg.base_channels;
    store.insert_param(format!("enc{m}/conv1/w"), conv_weight(rng, b, cfg.in_channels, 4));
    store.insert_param(format!("enc{m}/conv1/b"), Array::<T>::zeros(vec![b]));
    store.insert_param(format!("enc{m}/conv2/w"), conv_weight(rng, 2 * b, b, 4));
    bn_group(store, &format!("enc{m}/bn2"), 2 * b);
    store.insert_param(format!("enc{m}/conv3/w"), conv_weight(rng, 4 * b, 2 * b, 4));
    bn_group(store, &format!("enc{m}/bn3"), 4 * b);
    store.insert_param(format!("enc{m}/fc/w"), linear_weight(rng, cfg.flat_dim(), cfg.latent_dim));
    store.insert_param(format!("enc{m}/fc/b"), Array::<T>::zeros(vec![cfg.latent_dim]));
}

/// Decoder mirror: linear to 4B x 4 x 4, three transposed convs back to the
/// input resolution; batchnorm everywhere except the output layer.
pub fn init_decoder<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, m: usize, cfg: &EncoderConfig) {
    let b = cfg.base_channels;
    store.insert_param(format!("dec{m}/fc/w"), linear_weight(rng, cfg.latent_dim, cfg.flat_dim()));
    bn_group(store, &format!("dec{m}/bn0"), 4 * b);
    store.insert_param(format!("dec{m}/convt1/w"), convt_weight(rng, 4 * b, 2 * b, 4));
    bn_group(store, &format!("dec{m}/bn1"), 2 * b);
    store.insert_param(format!("dec{m}/convt2/w"), convt_weight(rng, 2 * b, b, 4));
    bn_group(store, &format!("dec{m}/bn2"), b);
    store.insert_param(format!("dec{m}/convt3/w"), convt_weight(rng, b, cfg.in_channels, 4));
    store.insert_param(format!("dec{m}/convt3/b"), Array::<T>::zeros(vec![cfg.in_channels]));
}

/// Convolutional projection head for modality `m`, shared by all location
/// objectives of that modality. Path A: 1x1 conv -> relu -> 1x1 conv (Xavier);
/// path B: one 1x1 conv initialized to the identity on the leading channels;
/// the residual sum is batch-normalized.
pub fn init_head<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    m: usize,
    cfg: &EncoderConfig,
    embed_dim: usize,
) {
    let c = cfg.feature_channels();
    store.insert_param(format!("head{m}/a1/w"), conv_weight(rng, embed_dim, c, 1));
    store.insert_param(format!("head{m}/a1/b"), Array::<T>::zeros(vec![embed_dim]));
    store.insert_param(format!("head{m}/a2/w"), conv_weight(rng, embed_dim, embed_dim, 1));
    store.insert_param(format!("head{m}/a2/b"), Array::<T>::zeros(vec![embed_dim]));
    let mut ident = Array::<T>::zeros(vec![embed_dim, c, 1, 1]);
    for i in 0..embed_dim.min(c) {
        ident.data_mut()[i * c + i] = T::one();
    }
    store.insert_param(format!("head{m}/b/w"), ident);
    bn_group(store, &format!("head{m}/bn"), embed_dim);
}

/// Linear classifier head on z (used by the supervised objective and by
/// linear evaluation).
pub fn init_probe<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    m: usize,
    latent_dim: usize,
    num_classes: usize,
) {
    store.insert_param(format!("linear_probe{m}/w"), linear_weight(rng, latent_dim, num_classes));
    store.insert_param(format!("linear_probe{m}/b"), Array::<T>::zeros(vec![num_classes]));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, stream};

    #[test]
    fn xavier_respects_support_bound_and_variance() {
        let mut rng = seeded(1, stream::INIT);
        let fan_in = 128;
        let fan_out = 64;
        let w: Array<f64> = xavier_uniform(&mut rng, vec![fan_in * fan_out], fan_in, fan_out);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        let n = w.numel() as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let var: f64 = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expect = 2.0 / (fan_in + fan_out) as f64;
        assert!((var - expect).abs() / expect < 0.1, "var {var} vs {expect}");
    }

    #[test]
    fn same_seed_identical_parameters() {
        let cfg = EncoderConfig { in_channels: 1, base_channels: 8, latent_dim: 16 };
        let build = || {
            let mut store = ParamStore::<f32>::new();
            let mut rng = seeded(5, stream::INIT);
            init_encoder(&mut store, &mut rng, 0, &cfg);
            init_head(&mut store, &mut rng, 0, &cfg, 16);
            store
        };
        let (s1, s2) = (build(), build());
        for ((n1, v1), (n2, v2)) in s1.params().zip(s2.params()) {
            assert_eq!(n1, n2);
            assert_eq!(v1.data(), v2.data());
        }
    }

    #[test]
    fn head_path_b_is_identity_on_leading_channels() {
        let cfg = EncoderConfig { in_channels: 1, base_channels: 32, latent_dim: 64 };
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(0, stream::INIT);
        init_head(&mut store, &mut rng, 0, &cfg, 64);
        let w = store.param("head0/b/w").unwrap();
        assert_eq!(w.shape(), &[64, 64, 1, 1]);
        for o in 0..64 {
            for i in 0..64 {
                let expect = if o == i { 1.0 } else { 0.0 };
                assert_eq!(w.data()[o * 64 + i], expect);
            }
        }
    }
}

//! Convolutional building blocks.

use candle_core::{Tensor, D};

use super::params::{Builder, Init};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub(crate) fn new(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        b.scoped(name, |b| {
            Ok(Self {
                weight: b.param("weight", &[c_out, c_in, kernel, kernel], Init::Uniform(bound))?,
                bias: b.param("bias", &[c_out], Init::Uniform(bound))?,
                stride,
                padding,
            })
        })
    }

    /// Wraps fixed tensors (not registered as trainable parameters).
    pub fn from_tensors(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        super::conv::conv2d(x, &self.weight, &self.bias, self.stride, self.padding)
    }
}

/// Largest group count in {8, 4, 2, 1} that divides `channels`.
pub fn group_count(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

/// Per-sample group normalization with a learned affine transform.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
}

const NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    pub(crate) fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                weight: b.param("weight", &[channels], Init::Const(1.0))?,
                bias: b.param("bias", &[channels], Init::Const(0.0))?,
                groups: group_count(channels),
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let xg = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = xg.mean_keepdim(2)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        let normed = normed.reshape((n, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Pre-activation residual block: `x + conv(silu(gn(conv(silu(gn(x))))))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
}

impl ResBlock {
    pub(crate) fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                norm1: GroupNorm::new(b, "norm1", channels)?,
                conv1: Conv2d::new(b, "conv1", channels, channels, 3, 1, 1)?,
                norm2: GroupNorm::new(b, "norm2", channels)?,
                conv2: Conv2d::new(b, "conv2", channels, channels, 3, 1, 1)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        Ok((x + h)?)
    }
}

/// Softmax over the last dimension, shifted by the (detached) row maximum.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Embedded-Gaussian non-local block:
/// `y_i = x_i + W_out * sum_j softmax_j(theta(x_i) . phi(x_j)) g(x_j)`,
/// with theta, phi, g and W_out 1x1 convolutions.
#[derive(Debug, Clone)]
pub struct NonLocalAttention {
    theta: Conv2d,
    phi: Conv2d,
    g: Conv2d,
    out: Conv2d,
}

impl NonLocalAttention {
    pub(crate) fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        let inner = (channels / 2).max(1);
        b.scoped(name, |b| {
            Ok(Self {
                theta: Conv2d::new(b, "theta", channels, inner, 1, 1, 0)?,
                phi: Conv2d::new(b, "phi", channels, inner, 1, 1, 0)?,
                g: Conv2d::new(b, "g", channels, inner, 1, 1, 0)?,
                out: Conv2d::new(b, "out", inner, channels, 1, 1, 0)?,
            })
        })
    }

    pub fn from_convs(theta: Conv2d, phi: Conv2d, g: Conv2d, out: Conv2d) -> Self {
        Self { theta, phi, g, out }
    }

    /// Row-stochastic attention matrix of shape `(N, HW, HW)`; row i holds the
    /// weights query position i places on every key position.
    pub fn attention_weights(&self, x: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        let theta = self.theta.forward(x)?;
        let inner = theta.dim(1)?;
        let theta = theta.reshape((n, inner, h * w))?.transpose(1, 2)?.contiguous()?;
        let phi = self.phi.forward(x)?.reshape((n, inner, h * w))?.contiguous()?;
        softmax_last_dim(&theta.matmul(&phi)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        let attn = self.attention_weights(x)?;
        let g = self.g.forward(x)?;
        let inner = g.dim(1)?;
        let g = g.reshape((n, inner, h * w))?.transpose(1, 2)?.contiguous()?;
        let y = attn.matmul(&g)?.transpose(1, 2)?.reshape((n, inner, h, w))?;
        Ok((x + self.out.forward(&y)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn conv1x1(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> (Conv2d, Vec<f64>, Vec<f64>) {
        let w: Vec<f64> = (0..c_in * c_out).map(|_| rng.random_range(-0.8..0.8)).collect();
        let b: Vec<f64> = (0..c_out).map(|_| rng.random_range(-0.2..0.2)).collect();
        let d = Device::Cpu;
        let conv = Conv2d::from_tensors(
            Tensor::from_slice(&w, (c_out, c_in, 1, 1), &d).unwrap(),
            Tensor::from_slice(&b, c_out, &d).unwrap(),
            1,
            0,
        );
        (conv, w, b)
    }

    /// Applies a 1x1 projection to one position's channel vector.
    fn project(w: &[f64], b: &[f64], v: &[f64]) -> Vec<f64> {
        let c_in = v.len();
        b.iter()
            .enumerate()
            .map(|(o, bo)| bo + (0..c_in).map(|i| w[o * c_in + i] * v[i]).sum::<f64>())
            .collect()
    }

    fn random_block(seed: u64, c: usize, inner: usize) -> (NonLocalAttention, [(Vec<f64>, Vec<f64>); 4]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (theta, tw, tb) = conv1x1(&mut rng, c, inner);
        let (phi, pw, pb) = conv1x1(&mut rng, c, inner);
        let (g, gw, gb) = conv1x1(&mut rng, c, inner);
        let (out, ow, ob) = conv1x1(&mut rng, inner, c);
        (
            NonLocalAttention::from_convs(theta, phi, g, out),
            [(tw, tb), (pw, pb), (gw, gb), (ow, ob)],
        )
    }

    #[test]
    fn attention_matches_dense_oracle() {
        let (c, inner, h, w) = (3, 2, 2, 2);
        let (block, [(tw, tb), (pw, pb), (gw, gb), (ow, ob)]) = random_block(7, c, inner);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xt = Tensor::from_slice(&x, (1, c, h, w), &Device::Cpu).unwrap();
        let got = block
            .forward(&xt)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();

        let pos = |p: usize| (0..c).map(|ch| x[ch * h * w + p]).collect::<Vec<f64>>();
        let n = h * w;
        for i in 0..n {
            let q = project(&tw, &tb, &pos(i));
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    let k = project(&pw, &pb, &pos(j));
                    q.iter().zip(&k).map(|(a, b)| a * b).sum()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            let mut y = vec![0.0; inner];
            for j in 0..n {
                let a = (scores[j] - m).exp() / z;
                for (yk, gk) in y.iter_mut().zip(project(&gw, &gb, &pos(j))) {
                    *yk += a * gk;
                }
            }
            let o = project(&ow, &ob, &y);
            for ch in 0..c {
                let want = x[ch * n + i] + o[ch];
                assert!((got[ch * n + i] - want).abs() < 1e-5, "pos {i} ch {ch}");
            }
        }
    }

    #[test]
    fn single_position_attention_is_trivial() {
        let (block, [_, _, (gw, gb), (ow, ob)]) = random_block(3, 4, 2);
        let x = [0.3, -0.7, 1.1, 0.05];
        let xt = Tensor::from_slice(&x, (1, 4, 1, 1), &Device::Cpu).unwrap();
        let attn = block
            .attention_weights(&xt)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(attn, vec![1.0]);
        let got = block
            .forward(&xt)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let o = project(&ow, &ob, &project(&gw, &gb, &x));
        for k in 0..4 {
            assert!((got[k] - (x[k] + o[k])).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn attention_rows_are_stochastic(seed in 0u64..1000, h in 1usize..5, w in 1usize..5, scale in 0.1f64..20.0) {
            let (block, _) = random_block(seed, 4, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let x: Vec<f32> = (0..4 * h * w).map(|_| (rng.random_range(-1.0..1.0) * scale) as f32).collect();
            let block = NonLocalAttention::from_convs(
                to_f32(&block.theta), to_f32(&block.phi), to_f32(&block.g), to_f32(&block.out),
            );
            let xt = Tensor::from_vec(x, (1, 4, h, w), &Device::Cpu).unwrap();
            let attn = block.attention_weights(&xt).unwrap();
            let sums = attn.sum(2).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            for s in sums {
                prop_assert!((s - 1.0).abs() < 1e-6, "row sum {}", s);
            }
        }
    }

    fn to_f32(c: &Conv2d) -> Conv2d {
        Conv2d::from_tensors(
            c.weight().to_dtype(DType::F32).unwrap(),
            c.bias().to_dtype(DType::F32).unwrap(),
            c.stride(),
            c.padding(),
        )
    }

    #[test]
    fn group_norm_normalizes_groups() {
        let d = Device::Cpu;
        let norm = GroupNorm {
            weight: Tensor::ones(4, DType::F64, &d).unwrap(),
            bias: Tensor::zeros(4, DType::F64, &d).unwrap(),
            groups: 2,
        };
        let x = Tensor::arange(0.0f64, 32.0, &d)
            .unwrap()
            .reshape((1, 4, 2, 4))
            .unwrap();
        let y = norm.forward(&x).unwrap().reshape((2, 16)).unwrap();
        let mean = y.mean(1).unwrap().to_vec1::<f64>().unwrap();
        let var = y.sqr().unwrap().mean(1).unwrap().to_vec1::<f64>().unwrap();
        for g in 0..2 {
            assert!(mean[g].abs() < 1e-12);
            assert!((var[g] - 1.0).abs() < 1e-3);
        }
        assert_eq!(group_count(12), 4);
        assert_eq!(group_count(3), 1);
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::new(&[-2.0f64, 0.0, 3.0], &Device::Cpu).unwrap();
        assert_eq!(
            leaky_relu(&x, 0.2).unwrap().to_vec1::<f64>().unwrap(),
            vec![-0.4, 0.0, 3.0]
        );
    }
}

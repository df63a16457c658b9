//! Siamese encoders and predictor heads.
//!
//! Each encoder is an MLP over flattened pixels with ReLU between layers and a
//! linear output. Outputs are not normalized here; the losses and the
//! clustering metric normalize as they need.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl EncoderArch {
    pub fn for_images(height: usize, width: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        EncoderArch {
            input_dim: 3 * height * width,
            hidden,
            output_dim,
        }
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.hidden);
        d.push(self.output_dim);
        d
    }
}

/// Affine layer `y = x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// He-normal weights, zero bias.
    fn he(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let w = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], w).expect("weight shape"),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    fn forward(&self, tape: &mut Tape, bound: &BoundLinear, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if tape.value(x).shape().len() != 2 || cols != self.weight.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: tape.value(x).shape().to_vec(),
                rhs: self.weight.shape().to_vec(),
            });
        }
        let xw = tape.matmul(x, bound.weight)?;
        tape.add_row(xw, bound.bias)
    }
}

#[derive(Clone, Copy, Debug)]
struct BoundLinear {
    weight: Var,
    bias: Var,
}

/// Parameters of `F` or `F'`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub arch: EncoderArch,
    pub layers: Vec<Linear>,
}

/// Parameters of the `D x D` predictor `G` (or `G'`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub layer: Linear,
}

/// Parameter leaves of one module on a tape, in [`Params::tensors`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    layers: Vec<BoundLinear>,
}

impl Bound {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// A module whose parameters can be placed on a tape and updated in place.
pub trait Params {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

fn bind_layers(layers: &[Linear], tape: &mut Tape, requires_grad: bool) -> Bound {
    Bound {
        layers: layers
            .iter()
            .map(|l| BoundLinear {
                weight: tape.leaf(l.weight.clone(), requires_grad),
                bias: tape.leaf(l.bias.clone(), requires_grad),
            })
            .collect(),
    }
}

impl Params for EncoderParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        bind_layers(&self.layers, tape, requires_grad)
    }
}

impl Params for PredictorParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.layer.weight, &self.layer.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.layer.weight, &mut self.layer.bias]
    }

    fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        bind_layers(std::slice::from_ref(&self.layer), tape, requires_grad)
    }
}

impl EncoderParams {
    pub fn init(arch: &EncoderArch, seed: u64) -> Result<Self> {
        if arch.output_dim < 2 || arch.input_dim == 0 || arch.hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad encoder architecture {arch:?}")));
        }
        let mut rng = seeded(seed);
        let dims = arch.dims();
        let layers = dims.windows(2).map(|w| Linear::he(w[0], w[1], &mut rng)).collect();
        Ok(EncoderParams {
            arch: arch.clone(),
            layers,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.arch.output_dim
    }

    /// Forward pass of a `B x input_dim` batch.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Var> {
        let mut h = input;
        let last = self.layers.len() - 1;
        for (i, (layer, b)) in self.layers.iter().zip(&bound.layers).enumerate() {
            h = layer.forward(tape, b, h)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Features of `images` without gradient tracking.
    pub fn features(&self, images: &[&Image]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(images_to_input(images)?);
        let y = self.encode(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }

    /// [`Self::features`] in chunks, to bound tape memory on large sets.
    pub fn features_chunked(&self, images: &[&Image], chunk: usize) -> Result<Tensor> {
        let mut data = Vec::new();
        for part in images.chunks(chunk.max(1)) {
            data.extend(self.features(part)?.into_data());
        }
        Tensor::new(vec![images.len(), self.output_dim()], data)
    }
}

impl PredictorParams {
    pub fn init(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!("predictor dim {dim} < 2")));
        }
        Ok(PredictorParams {
            layer: Linear::he(dim, dim, &mut seeded(seed)),
        })
    }

    pub fn identity(dim: usize) -> Self {
        PredictorParams {
            layer: Linear {
                weight: Tensor::identity(dim),
                bias: Tensor::zeros(&[1, dim]),
            },
        }
    }

    /// `z = x W + b`.
    pub fn predict(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        self.layer.forward(tape, &bound.layers[0], x)
    }
}

/// Flattens images into a `B x 3HW` batch with pixels mapped from `[0, 1]` to `[-1, 1]`.
pub fn images_to_input(images: &[&Image]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidArgument("empty image batch".into()));
    };
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "images_to_input",
                lhs: vec![h, w],
                rhs: vec![img.height(), img.width()],
            });
        }
        data.extend(img.pixels().iter().map(|p| 2.0 * p - 1.0));
    }
    Tensor::new(vec![images.len(), 3 * h * w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::Rng as _;

    fn arch() -> EncoderArch {
        EncoderArch {
            input_dim: 12,
            hidden: vec![8],
            output_dim: 4,
        }
    }

    #[test]
    fn shape_chain() {
        let p = EncoderParams::init(&EncoderArch::for_images(32, 16, vec![256], 64), 1).unwrap();
        assert_eq!(p.layers[0].weight.shape(), &[1536, 256]);
        assert_eq!(p.layers[1].weight.shape(), &[256, 64]);
        assert!(p.layers.iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn distinct_seeds_give_distinct_branches() {
        let a = EncoderParams::init(&arch(), 1).unwrap();
        let b = EncoderParams::init(&arch(), 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn encode_is_deterministic_and_shaped() {
        let p = EncoderParams::init(&EncoderArch::for_images(2, 2, vec![8], 4), 3).unwrap();
        let img = Image::filled(2, 2, [0.2, 0.5, 0.9]);
        let a = p.features(&[&img]).unwrap();
        assert_eq!(a.shape(), &[1, 4]);
        assert_eq!(a, p.features(&[&img]).unwrap());
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let p = EncoderParams::init(&arch(), 3).unwrap();
        let img = Image::filled(3, 3, [0.5; 3]);
        assert!(p.features(&[&img]).is_err());
    }

    #[test]
    fn init_output_variance_is_moderate() {
        let arch = EncoderArch {
            input_dim: 96,
            hidden: vec![64],
            output_dim: 16,
        };
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = seeded(77);
        for seed in 0..100 {
            let p = EncoderParams::init(&arch, seed).unwrap();
            let x: Vec<f64> = (0..32 * 96).map(|_| normal.sample(&mut rng)).collect();
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, false);
            let xv = tape.constant(Tensor::new(vec![32, 96], x).unwrap());
            let y = p.encode(&mut tape, &b, xv).unwrap();
            let out = tape.value(y).data();
            let mean = out.iter().sum::<f64>() / out.len() as f64;
            let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / out.len() as f64;
            assert!((0.1..=10.0).contains(&var), "seed {seed}: variance {var}");
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let p = EncoderParams::init(&arch(), 5).unwrap();
        let mut rng = seeded(6);
        let input = Tensor::new(vec![3, 12], (0..36).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w0 = p.layers[0].weight.clone();
        let rest = p.clone();
        let r = finite_diff_check(
            |tape, w| {
                let b = rest.bind(tape, false);
                let x = tape.constant(input.clone());
                // Substitute the probed first-layer weight.
                let h = tape.matmul(x, w)?;
                let bias0 = b.layers[0].bias;
                let h = tape.add_row(h, bias0)?;
                let h = tape.relu(h)?;
                let h = tape.matmul(h, b.layers[1].weight)?;
                let y = tape.add_row(h, b.layers[1].bias)?;
                tape.mean(y)
            },
            &w0,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "max rel error {}", r.max_rel_error);
    }

    #[test]
    fn predictor_identity_and_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap());
        let id = PredictorParams::identity(2);
        let b = id.bind(&mut tape, false);
        let z = id.predict(&mut tape, &b, x).unwrap();
        assert_eq!(tape.value(z), tape.value(x));

        let c = PredictorParams {
            layer: Linear {
                weight: Tensor::zeros(&[2, 2]),
                bias: Tensor::from_rows(&[[0.25, -4.0]]).unwrap(),
            },
        };
        let b = c.bind(&mut tape, false);
        let z = c.predict(&mut tape, &b, x).unwrap();
        assert_eq!(tape.value(z).row(0), &[0.25, -4.0]);
        assert_eq!(tape.value(z).row(1), &[0.25, -4.0]);
    }

    #[test]
    fn predictor_matches_naive_product() {
        let p = PredictorParams::init(5, 9).unwrap();
        let mut rng = seeded(10);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let z = p.predict(&mut tape, &b, x).unwrap();
        let w = &p.layer.weight;
        for (i, r) in rows.iter().enumerate() {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += r[k] * w.data()[k * 5 + j];
                }
                assert!((tape.value(z).row(i)[j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn predictor_rejects_wrong_width() {
        let p = PredictorParams::init(4, 1).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(p.predict(&mut tape, &b, x).is_err());
    }
}

use ndarray::{Array1, Array3, ArrayD, Axis};
use rand::Rng;

use crate::error::{check_shape, Error, Result};
use crate::nn::{Linear, Param};

/// Maps images to the state space the denoiser works in.
#[derive(Debug, Clone)]
pub enum LatentCodec {
    /// Pixel-space operation: the latent is the flattened image.
    Identity { shape: [usize; 3] },
    Autoencoder(Autoencoder),
}

/// Linear autoencoder `z = E x + b_e`, `x = D z + b_d` over flattened images.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    shape: [usize; 3],
    pub(crate) encoder: Linear,
    pub(crate) decoder: Linear,
}

impl Autoencoder {
    pub fn new<R: Rng + ?Sized>(shape: [usize; 3], latent_dim: usize, rng: &mut R) -> Self {
        let d = shape.iter().product();
        Self {
            shape,
            encoder: Linear::new(d, latent_dim, true, rng),
            decoder: Linear::new(latent_dim, d, true, rng),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.outputs()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.encoder.params_mut().chain(self.decoder.params_mut()).collect()
    }

    pub fn state(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut v = Vec::new();
        for (name, l) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            v.push((format!("{name}.weight"), l.weight.value.clone()));
            if let Some(b) = &l.bias {
                v.push((format!("{name}.bias"), b.value.clone()));
            }
        }
        v
    }

    pub fn load_state(&mut self, lookup: &dyn Fn(&str) -> Option<ArrayD<f64>>) -> Result<()> {
        for (name, l) in [("encoder", &mut self.encoder), ("decoder", &mut self.decoder)] {
            for (suffix, p) in [("weight", Some(&mut l.weight)), ("bias", l.bias.as_mut())] {
                let Some(p) = p else { continue };
                let key = format!("{name}.{suffix}");
                let v = lookup(&key).ok_or_else(|| Error::Format(format!("missing tensor `{key}`")))?;
                check_shape(p.shape(), v.shape())?;
                p.set_value(v);
            }
        }
        Ok(())
    }
}

impl LatentCodec {
    pub fn identity(shape: [usize; 3]) -> Self {
        LatentCodec::Identity { shape }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, LatentCodec::Identity { .. })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        match self {
            LatentCodec::Identity { shape } => *shape,
            LatentCodec::Autoencoder(a) => a.shape,
        }
    }

    /// Bound on clean states in latent space: the pixel range for identity,
    /// none for the unconstrained autoencoder latents.
    pub fn x0_bound(&self) -> Option<f64> {
        match self {
            LatentCodec::Identity { .. } => Some(1.0),
            LatentCodec::Autoencoder(_) => None,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            LatentCodec::Identity { shape } => shape.iter().product(),
            LatentCodec::Autoencoder(a) => a.latent_dim(),
        }
    }

    pub fn encode(&self, x: &Array3<f64>) -> Result<Array1<f64>> {
        let shape = self.image_shape();
        check_shape(&shape, x.shape())?;
        let flat = x.as_standard_layout().iter().copied().collect::<Array1<f64>>();
        Ok(match self {
            LatentCodec::Identity { .. } => flat,
            LatentCodec::Autoencoder(a) => a
                .encoder
                .forward(flat.view().insert_axis(Axis(0)))
                .index_axis_move(Axis(0), 0),
        })
    }

    pub fn decode(&self, z: &Array1<f64>) -> Result<Array3<f64>> {
        check_shape(&[self.latent_dim()], z.shape())?;
        let flat = match self {
            LatentCodec::Identity { .. } => z.clone(),
            LatentCodec::Autoencoder(a) => a
                .decoder
                .forward(z.view().insert_axis(Axis(0)))
                .index_axis_move(Axis(0), 0),
        };
        let [c, h, w] = self.image_shape();
        Ok(flat.into_shape_with_order((c, h, w)).unwrap())
    }

    /// Pull an image-space gradient back through the decoder.
    pub fn decode_vjp(&self, z: &Array1<f64>, grad_image: &Array3<f64>) -> Result<Array1<f64>> {
        check_shape(&[self.latent_dim()], z.shape())?;
        check_shape(&self.image_shape(), grad_image.shape())?;
        let flat = grad_image.as_standard_layout().iter().copied().collect::<Array1<f64>>();
        Ok(match self {
            LatentCodec::Identity { .. } => flat,
            LatentCodec::Autoencoder(a) => a
                .decoder
                .backward_input(flat.view().insert_axis(Axis(0)))
                .index_axis_move(Axis(0), 0),
        })
    }

    /// Largest absolute reconstruction error over the given images.
    pub fn reconstruction_error(&self, images: &[Array3<f64>]) -> Result<f64> {
        let mut worst = 0.0f64;
        for x in images {
            let back = self.decode(&self.encode(x)?)?;
            worst = (&back - x).iter().fold(worst, |m, v| m.max(v.abs()));
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_round_trip_is_exact() {
        let codec = LatentCodec::identity([2, 3, 3]);
        let x = Array3::from_shape_fn((2, 3, 3), |(c, i, j)| (c * 9 + i * 3 + j) as f64 * 0.1);
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.len(), 18);
        assert_eq!(codec.decode(&z).unwrap(), x);
        let g = Array3::<f64>::ones((2, 3, 3));
        assert_eq!(codec.decode_vjp(&z, &g).unwrap(), Array1::<f64>::ones(18));
    }

    #[test]
    fn autoencoder_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let codec = LatentCodec::Autoencoder(Autoencoder::new([1, 2, 2], 3, &mut rng));
        let z = Array1::from(vec![0.2, -0.4, 0.9]);
        let g = Array3::from_shape_fn((1, 2, 2), |(_, i, j)| (i as f64) - 0.5 * j as f64);
        let vjp = codec.decode_vjp(&z, &g).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut up = z.clone();
            up[k] += h;
            let mut dn = z.clone();
            dn[k] -= h;
            let f = |z: &Array1<f64>| (&codec.decode(z).unwrap() * &g).sum();
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - vjp[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let codec = LatentCodec::identity([1, 2, 2]);
        assert!(codec.encode(&Array3::zeros((1, 3, 2))).is_err());
        assert!(codec.decode(&Array1::zeros(5)).is_err());
    }
}

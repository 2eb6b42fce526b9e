use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::nn::{Linear, Param};

/// Noise predictor `eps_theta(z_t, t, c)`. `None` selects the unconditional
/// (null-class) mode.
pub trait Denoiser: Send + Sync {
    fn dim(&self) -> usize;

    fn num_classes(&self) -> usize;

    fn predict_batch(&self, z: ArrayView2<f64>, t: &[usize], cond: &[Option<usize>]) -> Array2<f64>;

    fn predict(&self, z: &Array1<f64>, t: usize, cond: Option<usize>) -> Array1<f64> {
        let zb = z.view().insert_axis(Axis(0));
        self.predict_batch(zb, &[t], &[cond]).index_axis_move(Axis(0), 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpDenoiserConfig {
    pub dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub num_classes: usize,
    /// Sinusoidal timestep frequencies (each contributes a sin and a cos).
    pub time_freqs: usize,
}

/// Residual MLP noise predictor with additive timestep/class embeddings:
///
/// ```text
/// h0 = silu(W_in z + U_0 e + b)
/// hj = h(j-1) + silu(W_j h(j-1) + U_j e + b_j)
/// eps = s(e) * z + W_out hL + b_out
/// ```
///
/// The scalar gate `s(e) = w_s . e + b_s` gives every timestep a direct path
/// from the state to the estimate, which the hidden width could not carry.
#[derive(Debug, Clone)]
pub struct MlpDenoiser {
    config: MlpDenoiserConfig,
    input: Linear,
    input_emb: Linear,
    blocks: Vec<(Linear, Linear)>,
    output: Linear,
    skip: Linear,
}

pub(crate) struct Cache {
    z: Array2<f64>,
    e: Array2<f64>,
    /// Input to layer j (h0 for block 0, ...) and pre-activations.
    hs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

fn silu(a: f64) -> f64 {
    a * sigmoid(a)
}

fn silu_grad(a: f64) -> f64 {
    let s = sigmoid(a);
    s * (1.0 + a * (1.0 - s))
}

impl MlpDenoiser {
    pub fn new<R: Rng + ?Sized>(config: MlpDenoiserConfig, rng: &mut R) -> Self {
        let e = Self::embedding_dim(&config);
        let h = config.hidden;
        let mut output = Linear::new(h, config.dim, true, rng);
        output.weight.value.mapv_inplace(|v| v * 0.1);
        Self {
            input: Linear::with_gain(config.dim, h, true, 2.0, rng),
            input_emb: Linear::new(e, h, false, rng),
            blocks: (0..config.blocks)
                .map(|_| {
                    let mut w = Linear::with_gain(h, h, true, 2.0, rng);
                    w.weight.value.mapv_inplace(|v| v * 0.5);
                    (w, Linear::new(e, h, false, rng))
                })
                .collect(),
            output,
            skip: {
                let mut l = Linear::new(e, 1, true, rng);
                l.weight.value.fill(0.0);
                l.bias.as_mut().unwrap().value.fill(1.0);
                l
            },
            config,
        }
    }

    pub fn config(&self) -> &MlpDenoiserConfig {
        &self.config
    }

    fn embedding_dim(c: &MlpDenoiserConfig) -> usize {
        2 * c.time_freqs + c.num_classes + 1
    }

    fn embed(&self, t: &[usize], cond: &[Option<usize>]) -> Array2<f64> {
        let c = &self.config;
        let mut e = Array2::zeros((t.len(), Self::embedding_dim(c)));
        for (i, (&ti, ci)) in t.iter().zip(cond).enumerate() {
            for f in 0..c.time_freqs {
                let w = (-(1000f64.ln()) * f as f64 / c.time_freqs as f64).exp();
                e[[i, 2 * f]] = (ti as f64 * w).sin();
                e[[i, 2 * f + 1]] = (ti as f64 * w).cos();
            }
            let slot = match ci {
                Some(k) if *k < c.num_classes => *k,
                _ => c.num_classes,
            };
            e[[i, 2 * c.time_freqs + slot]] = 1.0;
        }
        e
    }

    pub(crate) fn forward_cached(&self, z: ArrayView2<f64>, t: &[usize], cond: &[Option<usize>]) -> (Array2<f64>, Cache) {
        let e = self.embed(t, cond);
        let mut pre = Vec::with_capacity(self.blocks.len() + 1);
        let mut hs = Vec::with_capacity(self.blocks.len() + 1);
        let a0 = self.input.forward(z) + self.input_emb.forward(e.view());
        let mut h = a0.mapv(silu);
        pre.push(a0);
        for (w, u) in &self.blocks {
            let a = w.forward(h.view()) + u.forward(e.view());
            let next = &h + &a.mapv(silu);
            hs.push(h);
            pre.push(a);
            h = next;
        }
        let gate = self.skip.forward(e.view());
        let out = self.output.forward(h.view()) + &z * &gate;
        hs.push(h);
        (
            out,
            Cache {
                z: z.to_owned(),
                e,
                hs,
                pre,
            },
        )
    }

    /// Accumulate parameter gradients for the output gradient `g_out`.
    pub(crate) fn backward(&mut self, cache: &Cache, g_out: &Array2<f64>) {
        let last = cache.hs.last().unwrap();
        self.output.accumulate(last.view(), g_out.view());
        let g_gate = (g_out * &cache.z).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.skip.accumulate(cache.e.view(), g_gate.view());
        let mut gh = self.output.backward_input(g_out.view());
        for (j, (w, u)) in self.blocks.iter_mut().enumerate().rev() {
            let a = &cache.pre[j + 1];
            let ga = &gh * &a.mapv(silu_grad);
            w.accumulate(cache.hs[j].view(), ga.view());
            u.accumulate(cache.e.view(), ga.view());
            gh += &w.backward_input(ga.view());
        }
        let ga0 = &gh * &cache.pre[0].mapv(silu_grad);
        self.input.accumulate(cache.z.view(), ga0.view());
        self.input_emb.accumulate(cache.e.view(), ga0.view());
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        out.extend(self.input.params_mut());
        out.extend(self.input_emb.params_mut());
        for (w, u) in &mut self.blocks {
            out.extend(w.params_mut());
            out.extend(u.params_mut());
        }
        out.extend(self.output.params_mut());
        out.extend(self.skip.params_mut());
        out
    }

    fn named_layers(&self) -> Vec<(String, &Linear)> {
        let mut v = vec![("input".to_string(), &self.input), ("input_emb".to_string(), &self.input_emb)];
        for (j, (w, u)) in self.blocks.iter().enumerate() {
            v.push((format!("block{j}.w"), w));
            v.push((format!("block{j}.emb"), u));
        }
        v.push(("output".to_string(), &self.output));
        v.push(("skip".to_string(), &self.skip));
        v
    }

    pub fn state(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::new();
        for (name, l) in self.named_layers() {
            out.push((format!("{name}.weight"), l.weight.value.clone()));
            if let Some(b) = &l.bias {
                out.push((format!("{name}.bias"), b.value.clone()));
            }
        }
        out
    }

    pub fn load_state(&mut self, lookup: &dyn Fn(&str) -> Option<ArrayD<f64>>) -> Result<()> {
        let names: Vec<String> = self.named_layers().into_iter().map(|(n, _)| n).collect();
        let mut layers: Vec<&mut Linear> = vec![&mut self.input, &mut self.input_emb];
        for (w, u) in &mut self.blocks {
            layers.push(w);
            layers.push(u);
        }
        layers.push(&mut self.output);
        layers.push(&mut self.skip);
        for (name, layer) in names.iter().zip(layers) {
            let get = |key: String| lookup(&key).ok_or_else(|| Error::Format(format!("missing tensor `{key}`")));
            let w = get(format!("{name}.weight"))?;
            check_shape(layer.weight.shape(), w.shape())?;
            layer.weight.set_value(w);
            if let Some(b) = layer.bias.as_mut() {
                let v = get(format!("{name}.bias"))?;
                check_shape(b.shape(), v.shape())?;
                b.set_value(v);
            }
        }
        Ok(())
    }
}

impl Denoiser for MlpDenoiser {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict_batch(&self, z: ArrayView2<f64>, t: &[usize], cond: &[Option<usize>]) -> Array2<f64> {
        self.forward_cached(z, t, cond).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> MlpDenoiser {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        MlpDenoiser::new(
            MlpDenoiserConfig {
                dim: 5,
                hidden: 8,
                blocks: 2,
                num_classes: 3,
                time_freqs: 4,
            },
            &mut rng,
        )
    }

    #[test]
    fn output_shape_matches_input() {
        let m = model();
        let z = Array1::linspace(-1.0, 1.0, 5);
        for t in [1, 10, 200] {
            assert_eq!(m.predict(&z, t, Some(1)).len(), 5);
            assert_eq!(m.predict(&z, t, None).len(), 5);
        }
    }

    #[test]
    fn deterministic_and_condition_sensitive() {
        let m = model();
        let z = Array1::linspace(-1.0, 1.0, 5);
        assert_eq!(m.predict(&z, 3, Some(0)), m.predict(&z, 3, Some(0)));
        assert_ne!(m.predict(&z, 3, Some(0)), m.predict(&z, 3, None));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Array2::from_shape_simple_fn((3, 5), || rng.gen_range(-1.0..1.0));
        let g = Array2::from_shape_simple_fn((3, 5), || rng.gen_range(-1.0..1.0));
        let (t, c) = ([4, 9, 1], [Some(0), None, Some(2)]);
        let (_, cache) = m.forward_cached(z.view(), &t, &c);
        m.backward(&cache, &g);
        let loss = |m: &MlpDenoiser| (&m.predict_batch(z.view(), &t, &c) * &g).sum();
        let h = 1e-6;
        for pi in 0..m.params_mut().len() {
            let n = m.params_mut()[pi].value.len();
            for k in [0, n / 2, n - 1] {
                let analytic = m.params_mut()[pi].grad.as_slice().unwrap()[k];
                let orig = m.params_mut()[pi].value.as_slice().unwrap()[k];
                m.params_mut()[pi].value.as_slice_mut().unwrap()[k] = orig + h;
                let up = loss(&m);
                m.params_mut()[pi].value.as_slice_mut().unwrap()[k] = orig - h;
                let down = loss(&m);
                m.params_mut()[pi].value.as_slice_mut().unwrap()[k] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!((fd - analytic).abs() < 1e-6 * (1.0 + fd.abs()), "param {pi}[{k}]: {fd} vs {analytic}");
            }
        }
    }
}

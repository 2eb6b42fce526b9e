use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::Rng;

use super::Param;

/// 2-D convolution over NCHW tensors with square kernels and zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// Shape `(out, in, k, k)`.
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::kaiming(&[out_channels, in_channels, kernel, kernel], fan_in, 2.0, rng),
            bias: bias.then(|| Param::zeros(&[out_channels])),
            stride: stride.max(1),
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        let ho = (h + 2 * self.padding).saturating_sub(k) / self.stride + 1;
        let wo = (w + 2 * self.padding).saturating_sub(k) / self.stride + 1;
        (ho, wo)
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let (ho, wo) = self.output_hw(h, w);
        Geometry {
            c: self.in_channels(),
            h,
            w,
            k: self.kernel(),
            stride: self.stride,
            pad: self.padding,
            ho,
            wo,
        }
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let o = self.out_channels();
        let n = self.weight.value.len() / o;
        self.weight
            .value
            .view()
            .into_shape_with_order((o, n))
            .expect("conv weight is contiguous")
    }

    pub fn forward(&self, x: ArrayView4<f64>) -> Array4<f64> {
        let (n, _, h, w) = x.dim();
        let g = self.geometry(h, w);
        let cols = im2col_batch(&x, g);
        let out = self.weight_matrix().dot(&cols);
        let o = self.out_channels();
        let spatial = g.ho * g.wo;
        let mut y = Array4::<f64>::zeros((n, o, g.ho, g.wo));
        let ys = y.as_slice_mut().unwrap();
        for oc in 0..o {
            let b = self.bias.as_ref().map_or(0.0, |b| b.value[[oc]]);
            let row = out.row(oc);
            let row = row.as_slice().unwrap();
            for i in 0..n {
                let dst = &mut ys[(i * o + oc) * spatial..(i * o + oc + 1) * spatial];
                let src = &row[i * spatial..(i + 1) * spatial];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        y
    }

    /// Gradient with respect to the input, given the output gradient.
    pub fn backward_input(&self, grad_out: ArrayView4<f64>, in_hw: (usize, usize)) -> Array4<f64> {
        let n = grad_out.dim().0;
        let g = self.geometry(in_hw.0, in_hw.1);
        let gmat = out_grad_matrix(&grad_out);
        let dcols = self.weight_matrix().t().dot(&gmat);
        col2im_batch(&dcols.view(), n, g)
    }

    /// Weight and bias gradients summed over the batch.
    pub fn param_grads(&self, x: ArrayView4<f64>, grad_out: ArrayView4<f64>) -> (Array4<f64>, Option<Array1<f64>>) {
        let (_, _, h, w) = x.dim();
        let g = self.geometry(h, w);
        let cols = im2col_batch(&x, g);
        let gmat = out_grad_matrix(&grad_out);
        let dw = gmat.dot(&cols.t());
        let dw = dw.into_shape_with_order(self.weight.value.shape().to_vec()).unwrap();
        let dw = dw.into_dimensionality().unwrap();
        let db = self.bias.as_ref().map(|_| gmat.sum_axis(Axis(1)));
        (dw, db)
    }
}

/// `(O, N*Ho*Wo)` view of an `(N, O, Ho, Wo)` gradient.
fn out_grad_matrix(grad_out: &ArrayView4<f64>) -> Array2<f64> {
    let (n, o, ho, wo) = grad_out.dim();
    let spatial = ho * wo;
    let src = grad_out.as_standard_layout();
    let src = src.as_slice().unwrap();
    let mut m = Array2::<f64>::zeros((o, n * spatial));
    let ms = m.as_slice_mut().unwrap();
    for i in 0..n {
        for oc in 0..o {
            let s = &src[(i * o + oc) * spatial..(i * o + oc + 1) * spatial];
            ms[oc * n * spatial + i * spatial..oc * n * spatial + (i + 1) * spatial].copy_from_slice(s);
        }
    }
    m
}

fn im2col_batch(x: &ArrayView4<f64>, g: Geometry) -> Array2<f64> {
    let n = x.dim().0;
    let rows = g.c * g.k * g.k;
    let spatial = g.ho * g.wo;
    let cols_total = n * spatial;
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let mut cols = Array2::<f64>::zeros((rows, cols_total));
    let cs = cols.as_slice_mut().unwrap();
    let img = g.c * g.h * g.w;
    for i in 0..n {
        let xi = &xs[i * img..(i + 1) * img];
        for c in 0..g.c {
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let row = (c * g.k + ki) * g.k + kj;
                    let base = row * cols_total + i * spatial;
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src_row = c * g.h * g.w + ih as usize * g.w;
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.w as isize {
                                continue;
                            }
                            cs[base + oh * g.wo + ow] = xi[src_row + iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_batch(cols: &ArrayView2<f64>, n: usize, g: Geometry) -> Array4<f64> {
    let spatial = g.ho * g.wo;
    let cols_total = n * spatial;
    let cs = cols.as_standard_layout();
    let cs = cs.as_slice().unwrap();
    let mut x = Array4::<f64>::zeros((n, g.c, g.h, g.w));
    let xs = x.as_slice_mut().unwrap();
    let img = g.c * g.h * g.w;
    for i in 0..n {
        let xi = &mut xs[i * img..(i + 1) * img];
        for c in 0..g.c {
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let row = (c * g.k + ki) * g.k + kj;
                    let base = row * cols_total + i * spatial;
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let dst_row = c * g.h * g.w + ih as usize * g.w;
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.w as isize {
                                continue;
                            }
                            xi[dst_row + iw as usize] += cs[base + oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
    x
}

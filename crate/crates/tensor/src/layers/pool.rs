use crate::error::{Result, TensorError};
use crate::tensor::{expect_shape, Scalar, Tensor};

/// Max over non-overlapping 2x2 cells; odd edges keep a partial cell (`ceil(n/2)` outputs).
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    cache: Option<(Vec<u32>, Vec<usize>)>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn output_shape(input: &[usize]) -> Result<Vec<usize>> {
        match *input {
            [n, c, h, w] if h > 0 && w > 0 => Ok(vec![n, c, h.div_ceil(2), w.div_ceil(2)]),
            _ => Err(TensorError::ShapeMismatch {
                context: "maxpool input",
                expected: vec![0, 0, 0, 0],
                actual: input.to_vec(),
            }),
        }
    }

    pub(crate) fn forward<T: Scalar>(&mut self, x: &Tensor<T>, cache: bool) -> Result<Tensor<T>> {
        let (y, arg) = Self::compute(x)?;
        self.cache = cache.then(|| (arg, x.shape().to_vec()));
        Ok(y)
    }

    pub(crate) fn infer<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(Self::compute(x)?.0)
    }

    fn compute<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
        let out_shape = Self::output_shape(x.shape())?;
        let (n, c, h, w) = x.dims4("maxpool input")?;
        let (ho, wo) = (out_shape[2], out_shape[3]);
        let mut y = Tensor::zeros(&out_shape);
        let mut arg = vec![0u32; n * c * ho * wo];
        for p in 0..n * c {
            let plane = &x.data()[p * h * w..(p + 1) * h * w];
            let out = &mut y.data_mut()[p * ho * wo..(p + 1) * ho * wo];
            let args = &mut arg[p * ho * wo..(p + 1) * ho * wo];
            let (fh, fw) = (h / 2, w / 2);
            for oy in 0..fh {
                let (r0, r1) = (&plane[2 * oy * w..(2 * oy + 1) * w], &plane[(2 * oy + 1) * w..(2 * oy + 2) * w]);
                for ox in 0..fw {
                    let i = 2 * ox;
                    let mut best = (r0[i], 2 * oy * w + i);
                    for (v, at) in [
                        (r0[i + 1], 2 * oy * w + i + 1),
                        (r1[i], (2 * oy + 1) * w + i),
                        (r1[i + 1], (2 * oy + 1) * w + i + 1),
                    ] {
                        if v > best.0 {
                            best = (v, at);
                        }
                    }
                    out[oy * wo + ox] = best.0;
                    args[oy * wo + ox] = best.1 as u32;
                }
            }
            // Partial cells along odd edges.
            for oy in 0..ho {
                for ox in 0..wo {
                    if oy < fh && ox < fw {
                        continue;
                    }
                    let mut best = 2 * oy * w + 2 * ox;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (iy, ix) = (2 * oy + dy, 2 * ox + dx);
                            if iy < h && ix < w && plane[iy * w + ix] > plane[best] {
                                best = iy * w + ix;
                            }
                        }
                    }
                    out[oy * wo + ox] = plane[best];
                    args[oy * wo + ox] = best as u32;
                }
            }
        }
        Ok((y, arg))
    }

    pub(crate) fn backward<T: Scalar>(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (arg, shape) = self.cache.as_ref().ok_or(TensorError::MissingCache { layer: "maxpool" })?;
        let out_shape = Self::output_shape(shape)?;
        expect_shape(grad, &out_shape, "maxpool upstream gradient")?;
        let (h, w) = (shape[2], shape[3]);
        let per_out = out_shape[2] * out_shape[3];
        let mut dx = Tensor::zeros(shape);
        for p in 0..shape[0] * shape[1] {
            let g = &grad.data()[p * per_out..(p + 1) * per_out];
            let a = &arg[p * per_out..(p + 1) * per_out];
            let plane = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
            for (&gi, &ai) in g.iter().zip(a) {
                plane[ai as usize] = plane[ai as usize] + gi;
            }
        }
        Ok(dx)
    }

    pub(crate) fn signature(&self, out: &mut Vec<u8>) {
        if let Some((a, _)) = &self.cache {
            out.extend(a.iter().flat_map(|v| v.to_le_bytes()));
        }
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}

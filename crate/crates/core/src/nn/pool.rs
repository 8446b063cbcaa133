use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Flat input index of the maximum chosen for every output element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Shape,
    pub argmax: Vec<usize>,
}

/// Max pooling with a `size x size` window and the given stride. Rows and
/// columns that do not fill a whole window at the bottom/right are dropped.
/// Ties go to the first element in row-major order.
pub fn maxpool_forward<T: Scalar>(input: &Tensor<T>, size: usize, stride: usize) -> Result<(Tensor<T>, PoolIndices)> {
    let sh = input.shape();
    if size == 0 || stride == 0 {
        return Err(Error::Parameter("pool size and stride must be positive".into()));
    }
    if sh.h < size || sh.w < size {
        return Err(Error::dim("maxpool spatial extent", format!(">= {size}"), format!("{}x{}", sh.h, sh.w)));
    }
    let (oh, ow) = ((sh.h - size) / stride + 1, (sh.w - size) / stride + 1);
    let out_shape = Shape::new(sh.n, sh.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    for n in 0..sh.n {
        for c in 0..sh.c {
            let base = input.index(n, c, 0, 0);
            let plane = input.plane(n, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (oy * stride * sh.w + ox * stride, T::neg_infinity());
                    for dy in 0..size {
                        for dx in 0..size {
                            let i = (oy * stride + dy) * sh.w + ox * stride + dx;
                            if plane[i] > best.1 {
                                best = (i, plane[i]);
                            }
                        }
                    }
                    out.push(best.1);
                    argmax.push(base + best.0);
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(out_shape, out)?,
        PoolIndices {
            input_shape: sh,
            argmax,
        },
    ))
}

/// Routes each output gradient to the input position that won the forward max.
pub fn maxpool_backward<T: Scalar>(grad_output: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
    if grad_output.shape().len() != indices.argmax.len() {
        return Err(Error::dim("maxpool grad_output", indices.argmax.len(), grad_output.shape().len()));
    }
    let mut grad = Tensor::zeros(indices.input_shape);
    let g = grad.data_mut();
    for (&i, &d) in indices.argmax.iter().zip(grad_output.data()) {
        g[i] += d;
    }
    Ok(grad)
}

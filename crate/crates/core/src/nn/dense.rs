use crate::error::{Error, Result};
use crate::tensor::{dot, Scalar, Shape, Tensor};

/// Glorot uniform limit `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fully connected layer on the flattened `C*H*W` features of every item.
/// `weight` is `outputs x inputs` row-major; the result has shape `N x outputs x 1 x 1`.
pub fn dense_forward<T: Scalar>(input: &Tensor<T>, weight: &[T], bias: &[T]) -> Result<Tensor<T>> {
    let sh = input.shape();
    let fan_in = sh.item();
    let outputs = bias.len();
    if weight.len() != outputs * fan_in {
        return Err(Error::dim("dense weight", outputs * fan_in, weight.len()));
    }
    let mut out = Vec::with_capacity(sh.n * outputs);
    for n in 0..sh.n {
        let x = &input.data()[n * fan_in..(n + 1) * fan_in];
        for (o, &b) in bias.iter().enumerate() {
            out.push(b + dot(&weight[o * fan_in..(o + 1) * fan_in], x));
        }
    }
    Tensor::from_vec(Shape::new(sh.n, outputs, 1, 1), out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &[T],
    grad_output: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let sh = input.shape();
    let fan_in = sh.item();
    let outputs = grad_output.shape().item();
    if grad_output.shape().n != sh.n || weight.len() != outputs * fan_in {
        return Err(Error::Contract(format!(
            "dense backward: input {sh}, grad_output {}, {} weights",
            grad_output.shape(),
            weight.len()
        )));
    }
    let mut gx = vec![T::zero(); sh.len()];
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); outputs];
    for n in 0..sh.n {
        let x = &input.data()[n * fan_in..(n + 1) * fan_in];
        let gxn = &mut gx[n * fan_in..(n + 1) * fan_in];
        for o in 0..outputs {
            let d = grad_output.data()[n * outputs + o];
            gb[o] += d;
            let wrow = &weight[o * fan_in..(o + 1) * fan_in];
            let gwrow = &mut gw[o * fan_in..(o + 1) * fan_in];
            for i in 0..fan_in {
                gwrow[i] += d * x[i];
                gxn[i] += d * wrow[i];
            }
        }
    }
    Ok((Tensor::from_vec(sh, gx)?, gw, gb))
}

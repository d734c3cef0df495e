use crate::error::{dim_err, Result};
use crate::tensor::{elementwise_max, elementwise_max_backward, ArgIndex, Scalar, Tensor};

/// `max(x, 0)`; NaN passes through.
pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v < T::zero() { T::zero() } else { v })
}

/// Passes `grad_out` where `x > 0`. The subgradient at zero is zero, so the
/// forward output may be passed in place of `x`.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    x.same_dims(grad_out, "relu backward")?;
    let mut g = grad_out.clone();
    for (d, &v) in g.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    Ok(g)
}

/// Maxout across feature maps: the elementwise maximum of equally shaped
/// inputs, keeping the channel count of each input.
pub fn maxout_forward<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, ArgIndex)> {
    elementwise_max(inputs)
}

/// Sends each gradient element to the input that won it.
pub fn maxout_backward<T: Scalar>(arg: &ArgIndex, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    if arg.dims() != grad_out.dims() {
        return Err(dim_err!(
            "maxout backward: winners {:?}, grad {:?}",
            arg.dims(),
            grad_out.dims()
        ));
    }
    elementwise_max_backward(arg, grad_out)
}

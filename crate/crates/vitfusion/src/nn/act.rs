//! Elementwise activations with hand-written derivatives.

use ndarray::{ArrayBase, Data, Dimension};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn relu<S, D>(x: &ArrayBase<S, D>) -> ndarray::Array<f64, D>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    x.mapv(|v| v.max(0.0))
}

/// d(relu)/dx given the forward *input*.
pub fn relu_backward<S, S2, D>(x: &ArrayBase<S, D>, dy: &ArrayBase<S2, D>) -> ndarray::Array<f64, D>
where
    S: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    let mut dx = dy.to_owned();
    dx.zip_mut_with(x, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Tanh-approximated GELU, the usual transformer FFN nonlinearity.
pub fn gelu<S, D>(x: &ArrayBase<S, D>) -> ndarray::Array<f64, D>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    x.mapv(gelu_scalar)
}

pub fn gelu_backward<S, S2, D>(x: &ArrayBase<S, D>, dy: &ArrayBase<S2, D>) -> ndarray::Array<f64, D>
where
    S: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    let mut dx = dy.to_owned();
    dx.zip_mut_with(x, |d, &v| *d *= gelu_grad_scalar(v));
    dx
}

pub fn tanh<S, D>(x: &ArrayBase<S, D>) -> ndarray::Array<f64, D>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    x.mapv(f64::tanh)
}

/// d(tanh)/dx given the forward *output*.
pub fn tanh_backward_from_output<S, S2, D>(
    y: &ArrayBase<S, D>,
    dy: &ArrayBase<S2, D>,
) -> ndarray::Array<f64, D>
where
    S: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    let mut dx = dy.to_owned();
    dx.zip_mut_with(y, |d, &t| *d *= 1.0 - t * t);
    dx
}

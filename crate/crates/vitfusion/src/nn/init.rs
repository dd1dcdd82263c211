use ndarray::{Array, Dimension, IntoDimension};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Kaiming-uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub struct WeightInit;

impl WeightInit {
    pub fn kaiming_uniform<D, Sh>(rng: &mut ChaCha8Rng, shape: Sh, fan_in: usize) -> Array<f64, D>
    where
        D: Dimension,
        Sh: IntoDimension<Dim = D>,
    {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dim = shape.into_dimension();
        Array::from_shape_simple_fn(dim, || rng.random_range(-bound..bound))
    }

    pub fn zeros<D, Sh>(shape: Sh) -> Array<f64, D>
    where
        D: Dimension,
        Sh: IntoDimension<Dim = D>,
    {
        Array::zeros(shape.into_dimension())
    }
}

use ndarray::{Array, ArrayViewD, ArrayViewMutD, Dimension};

/// A trainable tensor paired with its gradient accumulator.
///
/// Backward passes add into `g`; the optimizer consumes `g` and the caller
/// zeroes it at the start of each update phase.
#[derive(Debug, Clone)]
pub struct Param<D: Dimension> {
    pub v: Array<f64, D>,
    pub g: Array<f64, D>,
}

impl<D: Dimension> Param<D> {
    pub fn new(v: Array<f64, D>) -> Self {
        let g = Array::zeros(v.raw_dim());
        Param { v, g }
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(0.0);
    }

    /// EMA blend used by target networks: v <- (1 - rho) * v + rho * other.v
    pub fn blend_from(&mut self, other: &Param<D>, rho: f64) {
        self.v.zip_mut_with(&other.v, |t, &o| *t = (1.0 - rho) * *t + rho * o);
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

/// Dynamic-rank mutable view of a parameter, used by visitors.
pub struct ParamMut<'a> {
    pub v: ArrayViewMutD<'a, f64>,
    pub g: ArrayViewMutD<'a, f64>,
}

impl<D: Dimension> Param<D> {
    pub fn as_mut(&mut self) -> ParamMut<'_> {
        ParamMut {
            v: self.v.view_mut().into_dyn(),
            g: self.g.view_mut().into_dyn(),
        }
    }

    pub fn view_dyn(&self) -> ArrayViewD<'_, f64> {
        self.v.view().into_dyn()
    }
}

/// Anything holding trainable parameters.
///
/// Visitation order is fixed by each implementation (declaration order), so
/// optimizers and checkpoints can rely on it.
pub trait Net {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>));

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, mut p| p.g.fill(0.0));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.v.len());
        n
    }
}

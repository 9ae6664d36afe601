use ndarray::Array2;
use rand::Rng;

use super::{he_normal, ConvGeometry, Graph, Node, ParamStore};
use crate::error::Result;

/// Affine map `x·W + b` with `W: in × out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = he_normal(rng, in_dim, out_dim, in_dim);
        Self::from_weight(store, name, w)
    }

    /// Linear layer with weights drawn from N(0, std²).
    pub fn with_std<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
    ) -> Self {
        let w = super::normal(rng, in_dim, out_dim, std);
        Self::from_weight(store, name, w)
    }

    fn from_weight(store: &mut ParamStore, name: &str, w: Array2<f64>) -> Self {
        let (in_dim, out_dim) = w.dim();
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Node, p: &[Node]) -> Result<Node> {
        let h = g.matmul(x, p[self.weight])?;
        g.add_bias(h, p[self.bias])
    }
}

/// 2-D convolution layer over channel-major flattened rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub geom: ConvGeometry,
}

impl Conv2d {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, geom: ConvGeometry) -> Self {
        let fan_in = geom.in_channels * geom.kernel * geom.kernel;
        let w = he_normal(rng, geom.out_channels, fan_in, fan_in);
        Self::from_weight(store, name, geom, w)
    }

    /// Convolution whose weights start at zero (identity residual branches).
    pub fn zeroed(store: &mut ParamStore, name: &str, geom: ConvGeometry) -> Self {
        let fan_in = geom.in_channels * geom.kernel * geom.kernel;
        Self::from_weight(store, name, geom, Array2::zeros((geom.out_channels, fan_in)))
    }

    fn from_weight(store: &mut ParamStore, name: &str, geom: ConvGeometry, w: Array2<f64>) -> Self {
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, geom.out_channels)));
        Self { weight, bias, geom }
    }

    pub fn forward(&self, g: &mut Graph, x: Node, p: &[Node]) -> Result<Node> {
        g.conv2d(x, p[self.weight], p[self.bias], self.geom)
    }
}

use crate::rng::SeededRng;
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{Element, Graph, Var};

use super::params::{Bindings, ParamGroup, ParamId, ParamStore};
use super::NnError;

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    /// He-initialized `kernel × kernel` convolution with zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let decay = true;
        let weight = store.add_he(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
            group,
            decay,
            rng,
        );
        let bias = store.add_zeros(format!("{name}.bias"), &[out_channels], group, false);
        Conv2dLayer {
            name: name.to_string(),
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Spatial output extent for an input extent, `None` if the kernel does not fit.
    pub fn out_size(&self, input: usize) -> Option<usize> {
        ConvGeom::out_extent(input, self.kernel, self.stride, self.padding)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var, NnError> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(NnError::shape(
                &self.name,
                format!("expected [B, {}, H, W], got {:?}", self.in_channels, shape),
            ));
        }
        let y = g
            .conv2d(x, p.get(self.weight), self.stride, self.padding)
            .map_err(|e| NnError::layer(&self.name, e))?;
        g.add_bias(y, p.get(self.bias)).map_err(|e| NnError::layer(&self.name, e))
    }
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add_he(format!("{name}.weight"), &[out_dim, in_dim], in_dim, group, true, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[out_dim], group, false);
        DenseLayer {
            name: name.to_string(),
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x·Wᵀ + b` for `x: [B, in]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var, NnError> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(NnError::shape(
                &self.name,
                format!("expected [B, {}], got {:?}", self.in_dim, shape),
            ));
        }
        let wt = g.transpose(p.get(self.weight)).map_err(|e| NnError::layer(&self.name, e))?;
        let y = g.matmul(x, wt).map_err(|e| NnError::layer(&self.name, e))?;
        g.add_bias(y, p.get(self.bias)).map_err(|e| NnError::layer(&self.name, e))
    }
}

/// DenseNet-style block: every layer sees the channel concatenation of the
/// block input and all earlier layer outputs.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub name: String,
    pub layers: Vec<Conv2dLayer>,
    pub in_channels: usize,
    pub growth_rate: usize,
}

impl DenseBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        growth_rate: usize,
        num_layers: usize,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|i| {
                Conv2dLayer::new(
                    store,
                    rng,
                    &format!("{name}.layer{i}"),
                    group,
                    in_channels + i * growth_rate,
                    growth_rate,
                    3,
                    1,
                    1,
                )
            })
            .collect();
        DenseBlock {
            name: name.to_string(),
            layers,
            in_channels,
            growth_rate,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth_rate
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var, NnError> {
        if g.shape(x).get(1) != Some(&self.in_channels) {
            return Err(NnError::shape(
                &self.name,
                format!("expected {} input channels, got {:?}", self.in_channels, g.shape(x)),
            ));
        }
        let mut features = vec![x];
        for layer in &self.layers {
            let input = self.concat(g, &features)?;
            let act = g.relu(input).map_err(|e| NnError::layer(&layer.name, e))?;
            features.push(layer.forward(g, p, act)?);
        }
        let out = self.concat(g, &features)?;
        debug_assert_eq!(g.shape(out)[1], self.out_channels());
        Ok(out)
    }

    fn concat<T: Element>(&self, g: &mut Graph<T>, features: &[Var]) -> Result<Var, NnError> {
        if features.len() == 1 {
            return Ok(features[0]);
        }
        g.concat(features, 1).map_err(|e| NnError::layer(&self.name, e))
    }
}

use impute_tensor::{he_init, Element, Graph, ParamId, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Registers parameters under a common prefix with He-initialized weights.
pub(crate) struct Builder<'a, T: Element> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Element> Builder<'_, T> {
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, stride: usize, bias: bool) -> Result<Conv> {
        let w = he_init(&[cout, cin, 3, 3], cin * 9, self.rng)?;
        let w = self.store.add(format!("{name}.weight"), w)?;
        let b = if bias {
            Some(self.store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Conv { w, b, stride })
    }

    pub fn dense(&mut self, name: &str, din: usize, dout: usize) -> Result<Dense> {
        let w = self.store.add(format!("{name}.weight"), he_init(&[dout, din], din, self.rng)?)?;
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros(&[dout]))?;
        Ok(Dense { w, b })
    }
}

/// 3×3 convolution with padding 1.
#[derive(Clone, Debug)]
pub(crate) struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
}

impl Conv {
    pub fn apply<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = self.b.map(|b| g.param(store, b)).transpose()?;
        Ok(g.conv2d(x, w, b, self.stride, 1)?)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub fn apply<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        Ok(g.dense(x, w, b)?)
    }
}

/// Style-conditioned affine for AdaIN: `gamma = 1 + Wg·s + bg`, `beta = Wb·s + bb`.
#[derive(Clone, Debug)]
pub(crate) struct StyleAffine {
    gamma: Dense,
    beta: Dense,
}

impl StyleAffine {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, name: &str, din: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.dense(&format!("{name}.gamma"), din, channels)?,
            beta: b.dense(&format!("{name}.beta"), din, channels)?,
        })
    }

    pub fn adain<T: Element>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, code: Var) -> Result<Var> {
        let gamma = self.gamma.apply(g, store, code)?;
        let gamma = g.add_scalar(gamma, 1.0)?;
        let beta = self.beta.apply(g, store, code)?;
        Ok(g.adain(x, gamma, beta, super::NORM_EPS)?)
    }
}

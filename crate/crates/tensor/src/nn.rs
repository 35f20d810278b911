//! Parameterised layers on top of [`Graph`].

use crate::{Graph, Init, ParamBuilder, ParamId, Real, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = pb.var("weight", &[in_dim, out_dim], Init::kaiming(in_dim));
        let bias = bias.then(|| pb.var("bias", &[out_dim], Init::Zeros));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Same as [`Linear::new`] with a caller-chosen weight init.
    pub fn with_init<T: Real>(pb: &mut ParamBuilder<'_, T>, in_dim: usize, out_dim: usize, init: Init) -> Self {
        let weight = pb.var("weight", &[in_dim, out_dim], init);
        let bias = Some(pb.var("bias", &[out_dim], Init::Zeros));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x: [..., in] -> [..., out]`.
    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        let shape = g.shape(x);
        let rows = shape[..shape.len() - 1].iter().product();
        let flat = g.reshape(x, &[rows, self.in_dim]);
        let mut y = g.matmul(flat, g.param(self.weight));
        if let Some(b) = self.bias {
            y = g.add_along(y, g.param(b), 1);
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(self.out_dim);
        g.reshape(y, &out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self::with_init(pb, in_c, out_c, kernel, stride, pad, Init::kaiming(in_c * kernel * kernel))
    }

    pub fn with_init<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Self {
        let weight = pb.var("weight", &[out_c, in_c, kernel, kernel], init);
        let bias = Some(pb.var("bias", &[out_c], Init::Zeros));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    /// 3x3, stride 1, "same" padding.
    pub fn same3<T: Real>(pb: &mut ParamBuilder<'_, T>, in_c: usize, out_c: usize) -> Self {
        Self::new(pb, in_c, out_c, 3, 1, 1)
    }

    pub fn forward<T: Real>(&self, g: &Graph<'_, T>, x: Var) -> Var {
        let y = g.conv2d(x, g.param(self.weight), self.stride, self.pad);
        match self.bias {
            Some(b) => g.add_along(y, g.param(b), 1),
            None => y,
        }
    }
}

//! Simple Pyramid Pooling Module.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{ConvBnRelu, ParamBuilder, Session};
use crate::scalar::Scalar;

/// Pooling grid sizes of the three context branches.
pub const SPPM_BINS: [usize; 3] = [1, 2, 4];

#[derive(Debug, Clone)]
pub struct SppmBlock {
    pub bins: [usize; 3],
    pub in_channels: usize,
    pub inter_channels: usize,
    pub out_channels: usize,
    pub branches: Vec<ConvBnRelu>,
    pub fuse: ConvBnRelu,
}

impl SppmBlock {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        in_channels: usize,
        inter_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        if inter_channels == 0 || inter_channels >= in_channels {
            return Err(Error::Config(format!(
                "sppm: inter channels ({inter_channels}) must be positive and below input channels ({in_channels})"
            )));
        }
        if out_channels == 0 || out_channels >= in_channels {
            return Err(Error::Config(format!(
                "sppm: output channels ({out_channels}) must be positive and below input channels ({in_channels})"
            )));
        }
        let mut b = b.child(name);
        let branches = SPPM_BINS
            .iter()
            .enumerate()
            .map(|(i, _)| ConvBnRelu::new(&mut b, &format!("branch{i}"), in_channels, inter_channels, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        let fuse = ConvBnRelu::new(&mut b, "fuse", inter_channels, out_channels, 3, 1)?;
        Ok(SppmBlock { bins: SPPM_BINS, in_channels, inter_channels, out_channels, branches, fuse })
    }

    /// Sum of the three pooled, projected and resized branches.
    ///
    /// Feature maps smaller than a bin grid are pooled with overlapping
    /// regions and the branch output is resampled back down to the input size.
    pub fn context<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let (_, c, h, w) = x.value().dims4()?;
        if c != self.in_channels {
            return Err(Error::dims("sppm", x.shape(), &[self.in_channels]));
        }
        let mut acc: Option<Var<T>> = None;
        for (&bin, branch) in self.bins.iter().zip(&self.branches) {
            let pooled = s.graph.adaptive_avg_pool(x, bin, bin)?;
            let projected = branch.forward(s, &pooled)?;
            let resized = s.graph.resize_bilinear(&projected, h, w)?;
            acc = Some(match acc {
                None => resized,
                Some(a) => s.graph.add(&a, &resized)?,
            });
        }
        Ok(acc.expect("three branches"))
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let ctx = self.context(s, x)?;
        self.fuse.forward(s, &ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::nn::{init_rng, Mode, ParamStore};
    use crate::tensor::Tensor;

    #[test]
    fn channel_contract_enforced() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = init_rng(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        assert!(SppmBlock::new(&mut b, "a", 128, 128, 64).is_err());
        assert!(SppmBlock::new(&mut b, "b", 128, 64, 128).is_err());
        assert!(SppmBlock::new(&mut b, "c", 512, 128, 128).is_ok());
    }

    #[test]
    fn output_keeps_spatial_size() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = init_rng(0);
        let block = {
            let mut b = ParamBuilder::new(&mut store, &mut rng);
            SppmBlock::new(&mut b, "sppm", 16, 8, 8).unwrap()
        };
        let g = Graph::no_grad();
        let s = Session::new(&g, &store, Mode::Eval);
        for (h, w) in [(4, 4), (5, 7), (8, 16), (2, 4), (1, 1)] {
            let x = g.constant(Tensor::rand_uniform(vec![2, 16, h, w], -1.0, 1.0, &mut rng));
            let y = block.forward(&s, &x).unwrap();
            assert_eq!(y.shape(), &[2, 8, h, w]);
        }
    }
}

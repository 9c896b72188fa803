//! Reconstruction of the deepest guidance feature from refined correlation
//! features, and the reconstruction loss used during training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbones::DenseFeatureMap;
use crate::correlation::CorrelationVolume;
use crate::error::{Error, Result};
use crate::params::{init_linear, join, linear, Binder, ParamStore};
use crate::scalar::Scalar;
use crate::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackProjectionConfig {
    /// Number of training classes; fixes the input width.
    pub n_classes: usize,
    pub d_phi: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

/// Three linear layers with GELU after the first two, applied per cell to the
/// class-major concatenation of the correlation slices.
#[derive(Clone, Debug)]
pub struct BackProjector {
    pub config: BackProjectionConfig,
    pub prefix: String,
}

impl BackProjector {
    pub fn new(config: BackProjectionConfig, prefix: impl Into<String>) -> Self {
        BackProjector { config, prefix: prefix.into() }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let c = &self.config;
        init_linear(store, &join(&self.prefix, "fc1"), c.n_classes * c.d_phi, c.hidden, rng);
        init_linear(store, &join(&self.prefix, "fc2"), c.hidden, c.hidden, rng);
        init_linear(store, &join(&self.prefix, "fc3"), c.hidden, c.out_dim, rng);
    }

    /// Class-major `(classes, h, w, d_phi)` to `(h, w, out_dim)`.
    pub fn forward<'g, T: Scalar>(&self, b: &Binder<'g, T>, phi: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = phi.shape();
        let c = &self.config;
        if s.len() != 4 || s[0] != c.n_classes || s[3] != c.d_phi {
            return Err(Error::shape(
                "back_project",
                format!("volume {s:?}, expected ({}, h, w, {})", c.n_classes, c.d_phi),
            ));
        }
        let x = phi.permute(&[1, 2, 0, 3])?.reshape(&[s[1], s[2], s[0] * s[3]])?;
        let x = linear(b, &join(&self.prefix, "fc1"), x)?.gelu();
        let x = linear(b, &join(&self.prefix, "fc2"), x)?.gelu();
        linear(b, &join(&self.prefix, "fc3"), x)
    }
}

/// Mean squared error between `psi` and a target that contributes no gradient.
pub fn semantic_loss_vars<'g, T: Scalar>(psi: Var<'g, T>, target: Var<'g, T>) -> Result<Var<'g, T>> {
    if psi.shape() != target.shape() {
        return Err(Error::shape("semantic_loss", format!("{:?} vs {:?}", psi.shape(), target.shape())));
    }
    Ok(psi.sub(target.detach())?.square().mean_all())
}

pub fn back_project<T: Scalar>(
    phi: &CorrelationVolume<T>,
    projector: &BackProjector,
    store: &ParamStore<T>,
) -> Result<DenseFeatureMap<T>> {
    let g = Graph::new();
    let b = Binder::new(&g, store, false);
    let out = projector.forward(&b, g.constant(phi.to_class_major()))?;
    DenseFeatureMap::new((*out.value()).clone(), 1)
}

pub fn semantic_loss<T: Scalar>(psi: &DenseFeatureMap<T>, target: &DenseFeatureMap<T>) -> Result<T> {
    let g = Graph::new();
    let l = semantic_loss_vars(g.constant(psi.grid.clone()), g.constant(target.grid.clone()))?;
    let v = l.value().data()[0];
    Ok(v)
}

//! Input-convex networks with analytic input derivatives.

mod activation;
mod icnn;
mod init;
mod params;
mod picnn;
mod serial;

pub use activation::{sigmoid, softplus, ActivationKind};
pub(crate) use icnn::symmetrize;
pub use icnn::{IcnnGrad, IcnnLayer, IcnnParams};
pub use init::{init_icnn, init_picnn, InitScheme};
pub use params::Parameters;
pub use picnn::{PicnnDims, PicnnGrad, PicnnLayer, PicnnParams, UPathLayer};
pub use serial::{Full, IcnnDoc, LayerDoc, FORMAT_VERSION};

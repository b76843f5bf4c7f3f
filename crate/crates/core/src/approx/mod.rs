//! Differentiable computation core: tape, dense networks, Gaussian heads,
//! optimizer, gradient verification and the parameter checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod tape;

pub use checkpoint::{Checkpoint, NamedTensor};
pub use gradcheck::{check_gradients, check_network, GradCheckSpec, GradReport};
pub use nn::{gaussian_kl, gaussian_kl_node, gaussian_log_density_node, Activation, Bound, GaussianPolicy, HeadKind, Mlp, MlpSpec, Param, PolicySample, QFunction};
pub use optim::{backprop_and_step, Adam, Trainee};
pub use tape::{Grads, Mat, Tape, Var};

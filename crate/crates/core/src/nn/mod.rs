//! Dense feed-forward networks with reverse-mode gradients, the Gaussian
//! negative log-likelihood and an Adagrad optimizer.

mod loss;
mod net;
mod optim;

pub use loss::{gaussian_nll, gaussian_nll_grad, NllGrad, LOG_STD_MAX, LOG_STD_MIN};
pub use net::{Activation, Dense, DenseNet, Gradients, Tape};
pub use optim::Adagrad;

//! Structure search over multi-block convolutional networks with tabular
//! Q-learning.

pub mod catalog;
pub mod space;
pub mod qlearning;
pub mod reward;
pub mod arch;
pub mod harness;
pub mod analysis;

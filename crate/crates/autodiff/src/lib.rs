//! Dense tensors and a reverse-mode tape covering the operations a capsule
//! network needs: broadcasting arithmetic, matrix products, grouped and
//! transposed convolution, softmax and batch normalization.
//!
//! ```
//! use encap_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
//! let sq = g.square(x);
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

pub mod broadcast;
pub mod conv;
mod error;
pub mod gradcheck;
mod graph;
mod real;
mod tensor;

pub use conv::{Conv2dCfg, ConvTranspose2dCfg};
pub use error::{Error, Result};
pub use graph::{BatchStats, Graph, Var};
pub use real::{cast, gemm, DType, Layout, Real};
pub use tensor::{numel, strides, Tensor};

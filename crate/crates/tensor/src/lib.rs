//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! The op set covers what a DCGAN-style generator and critic need
//! (matmul, strided convolution and its transpose, pointwise activations,
//! reductions, reshaping) and every backward rule is itself expressed with
//! recorded ops, so gradients can be differentiated again. That is what
//! gradient-norm penalties on a critic require.
//!
//! ```
//! use textpose_tensor::{backward, Graph, Tensor};
//!
//! let g = Graph::<f32>::new();
//! let x = g.param(&Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.square().sum();
//! let grad = backward(loss, &[x], false).unwrap();
//! assert_eq!(grad[0].value().data(), &[2.0, 4.0, 6.0]);
//! ```

mod backward;
mod direct;
mod element;
mod error;
mod fpenv;
mod graph;
mod kernels;
mod param;
mod tensor;

pub use backward::backward;
pub use element::Element;
pub use error::{Result, TensorError};
pub use fpenv::FlushDenormals;
pub use graph::{concat, Graph, OpKind, Var};
pub use kernels::{conv_out_len, conv_transpose_out_len};
pub use param::{AdamConfig, BoundParams, Gradients, Parameter, ParameterSet};
pub use tensor::Tensor;

//! Reverse-mode differentiation and parameter storage.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{finite_diff_check, relative_error, GRAD_SCALE_FLOOR};
pub use params::{ParamStore, ParamSpec};
pub use tape::{Grads, Node, NodeId, Op, Tape};

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::RngKey;
use crate::tensor::{Scalar, Tensor};

/// Inverted dropout. Eval mode (and rate 0) is the identity; train mode
/// zeroes each element with probability `rate` and scales survivors by
/// `1 / (1 - rate)`. The mask is drawn from the stream named by `key`.
pub fn dropout<T: Scalar>(tape: &mut Tape<T>, x: NodeId, rate: f64, train: bool, key: RngKey) -> Result<NodeId> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !train || rate == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask::<T>(tape.value(x).shape().clone(), rate, key);
    let m = tape.constant(Arc::new(mask));
    tape.mul(x, m)
}

pub fn dropout_mask<T: Scalar>(shape: crate::tensor::Shape, rate: f64, key: RngKey) -> Tensor<T> {
    let mut rng = key.rng();
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        if rng.gen::<f64>() >= rate {
            *v = keep;
        }
    }
    t
}

//! Differentiable layers: convolution, batch normalization, bilinear resize,
//! channel concatenation, pooling, linear maps, residual blocks and losses.
//!
//! Every layer has a functional form operating on tape variables and, where it
//! owns parameters, a struct holding [`ParamId`]s into a [`ParamStore`].

mod concat;
mod conv;
mod linear;
mod loss;
mod norm;
mod pool;
mod residual;
mod resize;

pub use concat::concat_channels;
pub use conv::{conv2d, conv_output_size, Conv2d};
pub use linear::{linear, Linear};
pub use loss::{cross_entropy_ignore, softmax_channels};
pub use norm::{batch_norm_eval, batch_norm_train, BatchNorm2d, BatchStats, BN_EPSILON, BN_MOMENTUM};
pub use pool::global_avg_pool;
pub use residual::ResidualBlock;
pub use resize::{bilinear_resize, resize_planes};

use crate::tensor::{ParamId, ParamStore, Real, Tape, Var};

enum StoreAccess<'a, T: Real> {
    Train(&'a mut ParamStore<T>),
    Eval(&'a ParamStore<T>),
}

/// Forward-pass context: the tape being recorded plus access to the parameters.
///
/// Training mode holds the store mutably so batch-norm layers can update running
/// statistics; evaluation mode only reads it.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    store: StoreAccess<'a, T>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn train(tape: &'a mut Tape<T>, store: &'a mut ParamStore<T>) -> Self {
        Self { tape, store: StoreAccess::Train(store) }
    }

    pub fn eval(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self { tape, store: StoreAccess::Eval(store) }
    }

    pub fn is_train(&self) -> bool {
        matches!(self.store, StoreAccess::Train(_))
    }

    pub fn store(&self) -> &ParamStore<T> {
        match &self.store {
            StoreAccess::Train(s) => s,
            StoreAccess::Eval(s) => s,
        }
    }

    pub(crate) fn store_mut(&mut self) -> Option<&mut ParamStore<T>> {
        match &mut self.store {
            StoreAccess::Train(s) => Some(s),
            StoreAccess::Eval(_) => None,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store: &ParamStore<T> = match &self.store {
            StoreAccess::Train(s) => s,
            StoreAccess::Eval(s) => s,
        };
        self.tape.param(store, id)
    }
}

/// Per-parameter initialization seed derived from the model seed and parameter name.
pub(crate) fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

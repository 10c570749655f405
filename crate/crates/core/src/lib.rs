// Parameter checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod env;
pub mod eval;
pub mod io;
pub mod nn;
pub mod path;
pub mod ppo;
pub mod seeding;

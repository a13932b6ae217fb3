pub mod autodiff;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod lm;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pcst;
pub mod seqenc;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

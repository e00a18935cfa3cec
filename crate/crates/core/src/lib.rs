pub mod autograd;
pub mod conv;
pub mod error;
pub mod eval;
pub mod fft;
pub mod frequency;
pub mod gradcheck;
pub mod gradsuite;
pub mod io;
pub mod losses;
pub mod masks;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use fft::ComplexGrid;
pub use masks::{Mask, MaskPolicy, MaskType};

pub use tensor::Tensor;

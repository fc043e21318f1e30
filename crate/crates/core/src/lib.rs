pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod tensor;
pub mod train;
pub mod ttt;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

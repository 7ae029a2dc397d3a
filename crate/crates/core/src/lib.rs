pub mod amn;
pub mod error;
pub mod gradsuite;
pub mod mask;
pub mod params;
pub mod signal;
pub mod ssm;
pub mod student;
pub mod synthdata;
pub mod teacher;
pub mod trainer;
pub mod tensor;
pub mod video;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, RngStream, Tensor, Var};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/ssm.md")]
    mod ssm {}
    #[doc = include_str!("../../../book/src/student.md")]
    mod student {}
    #[doc = include_str!("../../../book/src/masking.md")]
    mod masking {}
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    mod synthetic_data {}
    #[doc = include_str!("../../../book/src/signals.md")]
    mod signals {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}

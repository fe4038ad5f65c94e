pub mod dataset;
pub mod gfp;
pub mod numerics;
pub mod model;
pub mod trainer;
pub mod oracles;
pub mod eval;
pub mod plot;
pub mod interp;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/fields.md")]
    pub struct Fields;
    #[doc = include_str!("../../../book/src/data.md")]
    pub struct Data;
    #[doc = include_str!("../../../book/src/model.md")]
    pub struct Model;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/oracles.md")]
    pub struct Oracles;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/interpretability.md")]
    pub struct Interpretability;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}

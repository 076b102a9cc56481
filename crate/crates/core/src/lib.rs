pub mod diagnostics;
pub mod equilibria;
pub mod experiments;
pub mod integrate;
pub mod model;
pub mod nlp;
pub mod ocp;
pub mod systems;
pub mod trajectory;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/equilibria.md")]
    mod equilibria {}
    #[doc = include_str!("../../../book/src/integration.md")]
    mod integration {}
    #[doc = include_str!("../../../book/src/control.md")]
    mod control {}
    #[doc = include_str!("../../../book/src/turnpike.md")]
    mod turnpike {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}

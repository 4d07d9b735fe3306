//! Generalized Pólya urns with a diagonalizable replacement matrix.

pub mod fclt;
mod linalg;
pub mod martingale;
pub mod montecarlo;
pub mod oracle;
pub mod rng;
pub mod spectral;
pub mod urn;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/urn.md")]
    mod urn {}
    #[doc = include_str!("../../../book/src/spectrum.md")]
    mod spectrum {}
    #[doc = include_str!("../../../book/src/martingale.md")]
    mod martingale {}
    #[doc = include_str!("../../../book/src/fclt.md")]
    mod fclt {}
    #[doc = include_str!("../../../book/src/oracle.md")]
    mod oracle {}
    #[doc = include_str!("../../../book/src/montecarlo.md")]
    mod montecarlo {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

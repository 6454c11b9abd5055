pub mod anchorgeom;
pub mod diffcore;
pub mod evalkit;
pub mod netmodel;
pub mod scenesim;
pub mod selfval;
pub mod training;
pub mod harness;

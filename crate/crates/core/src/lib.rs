pub mod diffcore;
pub mod eqlayers;
pub mod geometry;
pub mod implicitnet;
pub mod recon;
pub mod training;

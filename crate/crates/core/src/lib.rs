pub mod datamodel;
pub mod error;
pub mod evalproto;
pub mod losses;
pub mod network;
pub mod nn;
pub mod optim;
pub mod preprocess;
pub mod seeding;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};

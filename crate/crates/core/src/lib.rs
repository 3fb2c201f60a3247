//! Detection and distension classification of the knee subquadricipital
//! recess (SQR) in ultrasound images.

pub mod dataset;
pub mod evolve;
pub mod font;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod training;

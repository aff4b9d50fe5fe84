//! Semantic-tree guided blind deblurring with a co-trained captioning
//! branch.
//!
//! Backbone features of a blurry image are parsed by a seven-node tree
//! ([`s3tree`]) into entity and relation maps. The maps are injected into a
//! deblurring generator ([`deblur`]) and their label predictions are
//! attended by a caption decoder ([`captioner`]); [`trainer`] optimizes all
//! three jointly.

pub mod blursynth;
pub mod capparse;
pub mod captioner;
pub mod checkpoint;
pub mod config;
pub mod deblur;
pub mod error;
pub mod gradsuite;
pub mod heatmap;
pub mod image;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod s3tree;
pub mod toyset;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImageTensor;

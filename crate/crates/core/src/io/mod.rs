//! Files in and out: tensor archives, datasets, images, and reports.

pub mod archive;
pub mod dataset;
pub mod image;
pub mod report;
pub mod spectrum;
pub mod toy;

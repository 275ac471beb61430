//! Geospatial economic scoring engine.
//!
//! Satellite tiles are paired with nearby street-view images, both are
//! encoded by small vision transformers and fused with alternating
//! cross-attention into a nightlight-proxy score, and a staged parallel
//! pipeline reduces those scores to grid cells and county polygons.

pub mod geo;
pub mod numerics;
pub mod dataio;
pub mod model;
pub mod align;
pub mod dataset;
pub mod store;
pub mod pipeline;

//! Synthetic invoice corpus generation, 2D grid encodings and field-level
//! evaluation for grid-based document understanding models.

pub mod corpus;
pub mod docmodel;
pub mod evaluate;
pub mod gridify;
pub mod layout;
pub mod recordgen;
pub mod render;
pub mod targets;
pub mod tensorio;

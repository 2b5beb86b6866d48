pub mod adrap;
pub mod clustering;
pub mod embedding;
pub mod gmm;
pub mod persist;
pub mod postqfrap;
pub mod reduction;
pub mod remote;
pub mod seed;
pub mod summarize;
pub mod text;
pub mod tree;
pub mod corpus;

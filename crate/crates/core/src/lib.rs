pub mod dehomog;
pub mod domain;
pub mod fea;
pub mod io;
pub mod meshing;
pub mod optimizer;
pub mod pipeline;
pub mod problems;
pub mod rank3;
pub mod render;
pub mod validate;

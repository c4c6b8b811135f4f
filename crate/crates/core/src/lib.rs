pub mod tensor;
pub mod geom;
pub mod net;
pub mod loss;
pub mod maps;
pub mod decode;
pub mod evalkit;
pub mod trainer;
pub mod config;
pub mod pipeline;
pub mod plot;

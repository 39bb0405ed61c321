pub mod cli;
pub mod data;
pub mod episodes;
pub mod model;
pub mod numerics;
pub mod training;

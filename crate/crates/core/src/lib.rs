pub mod banks;
pub mod click;
pub mod evaluation;
pub mod inference;
pub mod io;
pub mod model;
pub mod rle;
pub mod snapshot;
pub mod tensor;
pub mod training;
pub mod volume;

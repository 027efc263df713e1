pub mod analysis;
pub mod atteval;
pub mod compress;
pub mod error;
pub mod kvdump;
pub mod linalg;

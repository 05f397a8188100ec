pub mod bench;
pub mod plan;
pub mod sequential;
pub mod train;
pub mod verify;

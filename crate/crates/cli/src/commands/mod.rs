pub mod expansion;
pub mod gen;
pub mod margins;
pub mod selftrain;
pub mod verify;

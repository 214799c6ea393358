pub mod episode;
pub mod expert;
pub mod log;
pub mod raycast;
pub mod scenes;
pub mod sensors;
pub mod vehicle;
pub mod world;

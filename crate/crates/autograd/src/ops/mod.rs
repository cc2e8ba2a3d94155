mod conv;
mod elementwise;
mod norm;
mod pool;

pub use norm::BatchStats;

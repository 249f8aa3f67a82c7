// SPDX-License-Identifier: Apache-2.0
//! Graph-neural surrogate for thermal warpage of multi-die flip-chip packages.

pub mod datagen;
pub mod decoder;
pub mod floorplan;
pub mod gnn;
pub mod laminate;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod rtcg;
pub mod tensor;
pub mod training;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "WARPFORGE_THREADS";

/// Worker count from `WARPFORGE_THREADS`, else the available parallelism.
pub fn worker_threads() -> usize {
    let default = || std::thread::available_parallelism().map_or(1, usize::from);
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                log::warn!("ignoring {THREADS_ENV}={v:?}; expected a positive integer");
                default()
            }
        },
        Err(_) => default(),
    }
}

/// A pool of [`worker_threads`] threads.
pub fn worker_pool() -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .expect("thread pool builds")
}

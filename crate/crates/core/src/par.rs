//! Chunked data-parallel helpers.
//!
//! Work is always split into fixed-size chunks and results are reduced in
//! chunk order, so [`Execution::Parallel`] and [`Execution::Sequential`]
//! produce bit-identical output. Without the `parallel` feature every call
//! runs sequentially.

use serde::{Deserialize, Serialize};

/// Rows per work item in batch loops.
pub const CHUNK_ROWS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Maps `f(start_row, chunk)` over consecutive chunks of `items`.
pub fn map_chunks<T, R, F>(exec: Execution, items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items
            .par_chunks(chunk)
            .enumerate()
            .map(|(k, c)| f(k * chunk, c))
            .collect();
    }
    let _ = exec;
    items.chunks(chunk).enumerate().map(|(k, c)| f(k * chunk, c)).collect()
}

/// Runs `f(start_row, out_chunk)` over disjoint row blocks of a row-major
/// buffer with `row_width` values per row.
pub fn for_each_row_block<T, F>(exec: Execution, out: &mut [T], row_width: usize, rows_per_chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let width = (row_width * rows_per_chunk).max(1);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(k, c)| f(k * rows_per_chunk, c));
        return;
    }
    let _ = exec;
    out.chunks_mut(width)
        .enumerate()
        .for_each(|(k, c)| f(k * rows_per_chunk, c));
}

/// Maps `f` over independent jobs (seed sweeps, random draws).
pub fn map_jobs<T, R, F>(exec: Execution, jobs: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return jobs.into_par_iter().map(f).collect();
    }
    let _ = exec;
    jobs.into_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_results_keep_order() {
        let v: Vec<u32> = (0..1000).collect();
        let seq = map_chunks(Execution::Sequential, &v, 7, |s, c| (s, c.iter().sum::<u32>()));
        let par = map_chunks(Execution::Parallel, &v, 7, |s, c| (s, c.iter().sum::<u32>()));
        assert_eq!(seq, par);
        assert_eq!(seq[1].0, 7);
    }

    #[test]
    fn row_blocks_cover_buffer() {
        let mut out = vec![0usize; 3 * 10];
        for_each_row_block(Execution::Parallel, &mut out, 3, 4, |start, block| {
            for (r, row) in block.chunks_mut(3).enumerate() {
                row.fill(start + r);
            }
        });
        for (r, row) in out.chunks(3).enumerate() {
            assert!(row.iter().all(|&x| x == r));
        }
    }
}

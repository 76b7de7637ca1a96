//! Worker-count control and a row-parallel map.
//!
//! `TDQ_THREADS` caps the number of workers. Work is always split so that
//! each output row is produced by exactly one thread, which keeps results
//! bit-identical regardless of the thread count.

use std::sync::OnceLock;

pub fn max_threads() -> usize {
    static CAP: OnceLock<usize> = OnceLock::new();
    *CAP.get_or_init(|| {
        if let Ok(v) = std::env::var("TDQ_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                return n.max(1);
            }
        }
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
            .min(8)
    })
}

/// Run `work(row, out_chunk)` for every row chunk of `out`, possibly across
/// threads. `chunk` is the number of output elements per row.
pub fn for_each_row(out: &mut [f32], chunk: usize, work: impl Fn(usize, &mut [f32]) + Sync) {
    assert!(chunk > 0 && out.len() % chunk == 0);
    let rows = out.len() / chunk;
    let threads = max_threads().min(rows.max(1));
    // Threading only pays off past roughly this many elements.
    if threads <= 1 || out.len() < 16_384 {
        for (r, slot) in out.chunks_mut(chunk).enumerate() {
            work(r, slot);
        }
        return;
    }
    let rows_per = rows.div_ceil(threads);
    std::thread::scope(|scope| {
        for (band, slots) in out.chunks_mut(rows_per * chunk).enumerate() {
            let work = &work;
            scope.spawn(move || {
                for (i, slot) in slots.chunks_mut(chunk).enumerate() {
                    work(band * rows_per + i, slot);
                }
            });
        }
    });
}

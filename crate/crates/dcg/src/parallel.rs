//! Thread-backed shard executor.

use dcg_core::trainer::ShardExecutor;

/// One scoped OS thread per shard. Results come back in shard order, so the
/// reduction that follows is independent of scheduling.
#[derive(Debug, Clone, Copy, Default)]
pub struct Threaded;

impl ShardExecutor for Threaded {
    fn map_shards<T, R, F>(&self, shards: &mut [T], f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(&mut T) -> R + Sync,
    {
        if shards.len() <= 1 {
            return shards.iter_mut().map(&f).collect();
        }
        let f = &f;
        std::thread::scope(|s| {
            let handles: Vec<_> = shards.iter_mut().map(|t| s.spawn(move || f(t))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_are_in_shard_order() {
        let mut shards: Vec<u64> = (0..8).collect();
        let out = Threaded.map_shards(&mut shards, |x| {
            *x += 1;
            *x * 10
        });
        assert_eq!(out, (1..9).map(|x| x * 10).collect::<Vec<_>>());
        assert_eq!(shards, (1..9).collect::<Vec<_>>());
    }
}

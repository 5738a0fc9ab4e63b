use crate::error::{Error, Result};
use crate::numerics::{sum_in_order, Vector};

/// Sums `parts` in ascending key order, whatever order they arrived in.
///
/// Between nodes the key is the node id; inside the runtime each part is a
/// single gated expert output keyed by expert id, which makes the result
/// bitwise equal to the single-process weighted sum.
pub fn all_reduce<K: Ord + Copy>(mut parts: Vec<(K, Vector)>) -> Result<Vector> {
    parts.sort_by_key(|(k, _)| *k);
    if parts.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::invalid("all_reduce: duplicate contributor"));
    }
    sum_in_order(parts.iter().map(|(_, v)| v))?
        .ok_or_else(|| Error::invalid("all_reduce needs at least one partial"))
}

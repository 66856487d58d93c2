//! Central finite differences over parameters, used to validate the tape.

use crate::params::{ParamId, ParamStore};

/// One scalar entry of one parameter matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub param: ParamId,
    pub row: usize,
    pub col: usize,
}

/// `(f(p + h) - f(p - h)) / 2h` for a single parameter entry. The store is
/// restored before returning.
pub fn central_difference<F>(store: &mut ParamStore, at: Coord, step: f64, loss: F) -> f64
where
    F: Fn(&ParamStore) -> f64,
{
    let original = store.get(at.param)[[at.row, at.col]];
    store.get_mut(at.param)[[at.row, at.col]] = original + step;
    let plus = loss(store);
    store.get_mut(at.param)[[at.row, at.col]] = original - step;
    let minus = loss(store);
    store.get_mut(at.param)[[at.row, at.col]] = original;
    (plus - minus) / (2.0 * step)
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps near-zero gradients
/// from producing meaningless ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

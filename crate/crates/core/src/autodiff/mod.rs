//! Dense tensors, a reverse-mode tape over the operation set the network
//! needs, the AdamW optimizer and the binary checkpoint format.

pub mod checkpoint;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::{AdamW, AdamWConfig};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Tensor};

use crate::error::{Error, Result};

/// Windowed multi-head attention, `softmax(Q Kᵀ / √d + B + mask) V`.
///
/// `q`, `k`, `v` have shape `(windows, heads, tokens, d_head)`. `bias` has
/// shape `(heads, tokens, tokens)` and is shared by all windows; `mask` has
/// shape `(windows, 1, tokens, tokens)` and is shared by all heads. `d` is
/// the per-head width.
pub fn attention<T: Element>(
    tape: &Tape<T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    bias: Option<&Var<T>>,
    mask: Option<&Var<T>>,
) -> Result<Var<T>> {
    if q.shape().len() != 4 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::dim(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let d_head = q.shape()[3];
    let logits = tape.bmm(q, k, true)?;
    let mut logits = tape.scale(&logits, 1.0 / (d_head as f64).sqrt());
    if let Some(b) = bias {
        logits = tape.add(&logits, b)?;
    }
    let weights = tape.softmax_with_mask(&logits, mask)?;
    tape.bmm(&weights, v, false)
}

//! Test hook that corrupts one op's backward pass, so that gradient checking
//! can be shown to catch a broken vector-Jacobian product.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FaultOp {
    None = 0,
    Conv2d = 1,
    SparseConv = 2,
    Linear = 3,
    MaxPool = 4,
}

impl FaultOp {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => FaultOp::None,
            "conv2d" => FaultOp::Conv2d,
            "sparse_conv" => FaultOp::SparseConv,
            "linear" => FaultOp::Linear,
            "max_pool" => FaultOp::MaxPool,
            _ => return None,
        })
    }
}

thread_local! {
    static ACTIVE: Cell<FaultOp> = const { Cell::new(FaultOp::None) };
}

/// Activates the fault for backward passes run on the current thread.
pub fn inject(op: FaultOp) {
    ACTIVE.with(|a| a.set(op));
}

pub fn clear() {
    inject(FaultOp::None);
}

pub(crate) fn is_active(op: FaultOp) -> bool {
    op != FaultOp::None && ACTIVE.with(|a| a.get()) == op
}

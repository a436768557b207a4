//! Deliberate corruption of a backward rule, used to prove that the gradient
//! harness actually detects a wrong vector-Jacobian product.

use std::cell::Cell;
use std::str::FromStr;

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultTarget {
    Sigmoid,
    Softmax,
    MatMul,
    Gelu,
}

impl FaultTarget {
    fn code(self) -> u8 {
        match self {
            FaultTarget::Sigmoid => 1,
            FaultTarget::Softmax => 2,
            FaultTarget::MatMul => 3,
            FaultTarget::Gelu => 4,
        }
    }
}

impl FromStr for FaultTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "sigmoid" => Ok(FaultTarget::Sigmoid),
            "softmax" => Ok(FaultTarget::Softmax),
            "matmul" => Ok(FaultTarget::MatMul),
            "gelu" => Ok(FaultTarget::Gelu),
            other => Err(Error::invalid("fault", format!("unknown fault target {other:?}"))),
        }
    }
}

thread_local! {
    static ACTIVE: Cell<u8> = const { Cell::new(0) };
}

/// Scales the chosen backward rule by 1.05 on the calling thread; `None` restores it.
#[doc(hidden)]
pub fn inject_backward_fault(target: Option<FaultTarget>) {
    ACTIVE.with(|a| a.set(target.map_or(0, FaultTarget::code)));
}

pub(crate) fn factor(target: FaultTarget) -> Option<f64> {
    ACTIVE.with(|a| (a.get() == target.code()).then_some(1.05))
}

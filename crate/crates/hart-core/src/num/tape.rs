//! Reverse-mode autodiff tape.
//!
//! Forward ops append entries while recording is enabled; `backward` replays
//! them once, in reverse order, seeding the scalar loss with 1.0. The tape is
//! thread-local and confined to the thread that recorded it.

use std::cell::RefCell;
use std::collections::HashSet;

use crate::error::{HartError, Result};
use crate::num::tensor::Tensor;

type BackwardRule = Box<dyn FnOnce(&[f32])>;

struct Entry {
    #[allow(dead_code)]
    op: &'static str,
    #[allow(dead_code)]
    input_ids: Vec<u64>,
    output: Tensor,
    rule: BackwardRule,
}

struct TapeState {
    entries: Vec<Entry>,
    output_ids: HashSet<u64>,
    consumed: bool,
    no_grad_depth: u32,
}

impl TapeState {
    fn new() -> Self {
        TapeState {
            entries: Vec::new(),
            output_ids: HashSet::new(),
            consumed: false,
            no_grad_depth: 0,
        }
    }
}

thread_local! {
    static TAPE: RefCell<TapeState> = RefCell::new(TapeState::new());
}

/// Clear all recorded ops and re-arm the tape for a fresh forward/backward.
pub fn reset() {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        t.entries.clear();
        t.output_ids.clear();
        t.consumed = false;
    });
}

/// Number of ops currently recorded.
pub fn len() -> usize {
    TAPE.with(|t| t.borrow().entries.len())
}

/// True unless inside a `no_grad` scope.
pub fn grad_enabled() -> bool {
    TAPE.with(|t| t.borrow().no_grad_depth == 0)
}

/// Run `f` with recording disabled (nestable).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    TAPE.with(|t| t.borrow_mut().no_grad_depth += 1);
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            TAPE.with(|t| t.borrow_mut().no_grad_depth -= 1);
        }
    }
    let _guard = Guard;
    f()
}

/// Whether an op over `inputs` should be recorded.
pub(crate) fn should_record(inputs: &[&Tensor]) -> bool {
    grad_enabled() && inputs.iter().any(|t| t.is_tracked())
}

/// Append an op. Marks the output as tracked so downstream ops record too.
pub(crate) fn record(
    op: &'static str,
    inputs: &[&Tensor],
    output: &Tensor,
    rule: impl FnOnce(&[f32]) + 'static,
) {
    let output = output.clone().requires_grad(true);
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        t.output_ids.insert(output.id());
        t.entries.push(Entry {
            op,
            input_ids: inputs.iter().map(|t| t.id()).collect(),
            output,
            rule: Box::new(rule),
        });
    });
}

/// Reverse sweep from a scalar loss. Every tracked leaf reachable from the
/// loss ends up with a populated gradient. Calling this twice without a
/// `reset` in between is an error.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(HartError::Tape(format!(
            "loss must be scalar, got shape {:?}",
            loss.shape()
        )));
    }
    let entries = TAPE.with(|t| {
        let mut t = t.borrow_mut();
        if t.consumed {
            return Err(HartError::Tape(
                "backward already ran on this tape; call tape::reset() first".into(),
            ));
        }
        if !t.output_ids.contains(&loss.id()) {
            return Err(HartError::Tape(
                "loss is not on the tape (detached or computed under no_grad)".into(),
            ));
        }
        t.consumed = true;
        t.output_ids.clear();
        Ok(std::mem::take(&mut t.entries))
    })?;

    loss.accumulate_grad(&[1.0]);
    for entry in entries.into_iter().rev() {
        if let Some(g) = entry.output.grad() {
            (entry.rule)(&g);
        }
    }
    Ok(())
}

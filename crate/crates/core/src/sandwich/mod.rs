//! Block budgeting, routing masks and the routed sandwich model.

mod budget;
mod gradcase;
mod gumbel;
mod layout;
mod masks;
mod model;
mod search;
#[cfg(test)]
mod tests;

pub use gradcase::{group_grad_case, tiny_config};
pub use budget::{allocate_blocks, Allocation, BudgetProfile};
pub use gumbel::{gumbel_gate, gumbel_mask_gates, gumbel_ste_sample, lcha_probability, temperature, LCHA_COLUMN, TAU_END, TAU_START};
pub use layout::{allocate_groups, SandwichLayout, SearchMeta};
pub use masks::{enumerate_masks, harden_mask, is_legal, triggers};
pub use search::{planted_config, planted_recovery, routing_logits, search, search_against_teacher, SearchBatch, SearchOutcome, SearchSchedule, SEARCH_GRID};
pub use model::{ForwardCtx, Group, GroupCache, GroupTrace, HighMixer, ModelCache, ModelConfig, Routing, SandwichModel};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Mean squared error between the student output and the reference output.
pub fn self_distill_loss(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    if student.shape() != teacher.shape() {
        return Err(Error::config("teacher", format!("shape {:?} vs student {:?}", teacher.shape(), student.shape())));
    }
    let n = student.numel().max(1) as f64;
    Ok(student.data().iter().zip(teacher.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

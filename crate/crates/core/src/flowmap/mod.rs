//! Flow-map policies: the jump operator, samplers, time-pair curriculum and
//! the diagonal and self-distillation objectives.

mod losses;
mod policy;
mod time;

pub use losses::{
    loss, loss_components, offline_actor_loss, regress, target, Distillation, FlowBatch, LossGrad,
    Objective,
};
pub use policy::{gaussian, interpolate, FlowMapPolicy, PolicyArch};
pub use time::{sample_time_pair, Curriculum, TimePair};

//! PPO training with bi-level updates of the communication graph (stage 1)
//! and of the dynamic gates (stage 2).

mod buffer;
mod config;
mod losses;
mod optim;
mod run;

pub use buffer::{
    compute_gae, joint_value, normalize, Batch, GateBatch, GateTrace, RolloutBuffer, Segment,
};
pub use config::{GraphMode, TargetRule, TrainConfig};
pub use losses::{decoder_loss, encoder_loss, td_targets, DecoderLoss};
pub use optim::{clip_grad_norm, ema_update, Adam, NamedGrads};
pub use run::{
    stage1_loss, stage2_loss, AlphaSnapshot, EvalSummary, IterationOutput, IterationRecord,
    LossParts, RunSetup, Stage, Trainer,
};

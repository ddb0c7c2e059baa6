//! PEFT mechanisms as attachments to a frozen backbone: linear probe,
//! BitFit, bottleneck adapter, LoRA, prompt tuning, and the geometry
//! encoding mixer (spatial adapter + context adapter).

mod attach;
mod branches;
mod budget;
mod checkpoint;
mod config;

pub use attach::{
    attach, bitfit_select, closed_form_trainable, initial_latent_name, is_bias_like, peft_param_specs, HookTable,
    PeftAttachment,
};
pub use branches::{
    adapter_branch, context_adapter_branch, spatial_adapter_branch, stencil_mixers, ContextOutput, LatentState,
    LatentStep,
};
pub use budget::{budget_fit, Budget, BudgetFit};
pub use checkpoint::{load_peft_checkpoint, peft_checkpoint};
pub use config::{Method, PeftConfig, Sharing};

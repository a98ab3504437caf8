//! Losses and the alternating critic/generator training loop.

mod losses;
mod trainer;

pub use losses::{
    critic_loss, generator_gan_loss, gradient_penalty, l1_sparsity, recon_loss, sym_loss, sym_loss_weighted,
    CriticTerms,
};
pub use trainer::{
    default_model_path, infer, log_csv, log_header, optimizer_state, prepare, restore_optimizers, train, train_prepared,
    Inference, LogRow, OutputDir,
    Prepared, TrainOutcome,
};

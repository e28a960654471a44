//! Mini-batch optimization with validation-driven early stopping.

mod fit;
mod learner;
mod loss;
mod resume;
mod run;

pub use fit::{fit, lr_schedule, EarlyStopping, EpochRecord, FitOutcome, FitState, Learner, Observation, TrainConfig};
pub use learner::{predict_windows, MmctpLearner};
pub use loss::{batch_loss, huber};
pub use resume::{load_resume, save_resume, ResumePoint};
pub use run::train_seed;

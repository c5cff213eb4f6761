pub mod data;
pub mod eval;
pub mod loss;
pub mod mask;
pub mod nn;
pub mod tensor;
pub mod train;

pub use loss::{LossBreakdown, Task, TaskSet, TaskWeights, UncertaintyParams};
pub use nn::{Checkpoint, Model, ModelConfig};
pub use tensor::{Parameter, Shape, Sgd, Tape, Tensor, TensorError, Var};

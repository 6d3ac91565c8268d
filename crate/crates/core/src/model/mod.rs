//! Model description, data tables, hyperparameter priors and partition plans.

pub mod data;
pub mod hyper;
pub mod partition;
pub mod spec;

pub use data::{read_dataset, DataTable, Dataset};
pub use hyper::{HyperPrior, HyperSpace};
pub use partition::{partition_dataset, EffectRole, Partition, PartitionMode, PartitionPlan, PartitionedModel};
pub use spec::{parse_model_config, Family, FixedPrior, LikelihoodBlock, Link, ModelSpec, ShareLink, Term};

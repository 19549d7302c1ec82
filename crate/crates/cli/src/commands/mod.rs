//! One module per subcommand. Each writes its artifacts under the project's
//! artifact directory together with a run manifest.

pub mod evaluate;
pub mod extract;
pub mod model;
pub mod predict;
pub mod report;
pub mod train;

pub use evaluate::{evaluate, EvaluateSummary, MetricRow};
pub use extract::{extract, ExtractSummary};
pub use predict::{predict, IdSource, PredictionMeta};
pub use report::{report_predictability, PredictabilityRow, PHONEME_SOURCE};
pub use train::{train, TrainOptions, TrainOutcome, TrainReport};

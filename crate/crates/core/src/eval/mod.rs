//! Evaluation: COCO-style AP, transfer runs over gallery compositions, and
//! gallery-size / consistency-threshold sweeps.

mod coco;
mod protocol;
mod report;

use thiserror::Error;

pub use coco::{
    coco_ap, iou, iou_thresholds, recall_points, ClassMetrics, EvalDataset, EvalDiagnostics, EvalOptions, EvalReport,
    GroundTruthSet, GtObject, TestScene, NUM_IOU_THRESHOLDS, NUM_RECALL_POINTS,
};
pub use protocol::{
    cmte_run, composition_label, composition_sweep, derangement, k_sweep, score_dataset, sigma_grid, sigma_sweep,
    split_vocabulary, CmteConfig, CmteInputs, CmteOutcome, KPoint, MeanStd, SigmaPoint, SweepRow, SweepSummary,
};
pub use report::{format_report, format_sweep, k_sweep_csv, sigma_sweep_csv};

use crate::acquisition::AcquisitionError;
use crate::classifier::ClassifierError;
use crate::descriptors::DescriptorError;
use crate::imageio::ImageIoError;
use crate::material::MaterialError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("in-house fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Material(#[from] MaterialError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
}

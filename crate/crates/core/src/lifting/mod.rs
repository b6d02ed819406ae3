//! Lifting: paired front/back images to a colored implicit surface and a
//! mesh.

pub mod field;
pub mod losses;
pub mod mc;
pub mod train;

pub use field::{
    build_field, field_forward, field_head, init_params, FeatureMode, FieldOutputs, FieldSample, ImplicitField,
    LiftingInput, LiftingNet, LiftingSpec,
};
pub use losses::{loss_color, loss_eikonal, loss_inside_outside, loss_on_surface, LossWeights};
pub use mc::{
    chunked_grid_eval, marching_cubes, marching_cubes_grid, ConstantField, ExtractedMesh, GridConfig, SdfField,
    SphereSdf, SphereUnion,
};
pub use train::{
    label_inside, sample_surface_points, sample_training_points, step_loss, train_lifting, LiftTrainConfig,
    LossBreakdown, PointCounts, StepBatch, TrainingPoints, TrainingSubject,
};

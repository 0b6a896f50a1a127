//! Runs every example end to end.

#[path = "../examples/ablation_grid.rs"]
mod ablation_grid;

#[path = "../examples/checkpoints.rs"]
mod checkpoints;

#[path = "../examples/compare_methods.rs"]
mod compare_methods;

#[path = "../examples/experiment_pipeline.rs"]
mod experiment_pipeline;

#[path = "../examples/feature_shift.rs"]
mod feature_shift;

#[path = "../examples/finetune_gadapter.rs"]
mod finetune_gadapter;

#[path = "../examples/generate_data.rs"]
mod generate_data;

#[path = "../examples/gradient_check.rs"]
mod gradient_check;

#[path = "../examples/pretrain_backbone.rs"]
mod pretrain_backbone;

#[path = "../examples/profile_inference.rs"]
mod profile_inference;

#[path = "../examples/proximal_objective.rs"]
mod proximal_objective;

#[path = "../examples/structure_matrices.rs"]
mod structure_matrices;


#[test]
fn example_ablation_grid() {
    ablation_grid::main().unwrap();
}

#[test]
fn example_checkpoints() {
    checkpoints::main().unwrap();
}

#[test]
fn example_compare_methods() {
    compare_methods::main().unwrap();
}

#[test]
fn example_experiment_pipeline() {
    experiment_pipeline::main().unwrap();
}

#[test]
fn example_feature_shift() {
    feature_shift::main().unwrap();
}

#[test]
fn example_finetune_gadapter() {
    finetune_gadapter::main().unwrap();
}

#[test]
fn example_generate_data() {
    generate_data::main().unwrap();
}

#[test]
fn example_gradient_check() {
    gradient_check::main().unwrap();
}

#[test]
fn example_pretrain_backbone() {
    pretrain_backbone::main().unwrap();
}

#[test]
fn example_profile_inference() {
    profile_inference::main().unwrap();
}

#[test]
fn example_proximal_objective() {
    proximal_objective::main().unwrap();
}

#[test]
fn example_structure_matrices() {
    structure_matrices::main().unwrap();
}

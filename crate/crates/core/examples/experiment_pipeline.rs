//! The command-line pipeline driven from code: generate data, pretrain,
//! fine-tune, diagnose, profile and report from one JSON config.

use gadapter_lab::experiment::{Experiment, ExperimentConfig, RunOptions, Subcommand};

const CONFIG: &str = r#"{
  "name": "pipeline_demo",
  "data": {
    "pretrain": "data/corpus.jsonl",
    "train": "data/train.jsonl",
    "valid": "data/valid.jsonl",
    "test": "data/test.jsonl"
  },
  "generate": {
    "task": { "kind": "triangle_clf", "count": 80, "seed": 1 },
    "pretrain": { "kind": "degree_corpus", "count": 40, "seed": 2 },
    "ratios": [0.8, 0.1, 0.1],
    "split_seed": 0
  },
  "model": { "num_layers": 1, "hidden": 8, "heads": 2, "ffn_dim": 8 },
  "pretrain": { "epochs": 1 },
  "peft": [
    { "method": "full" },
    { "method": "gadapter", "r": 2 },
    { "method": "adapter", "r": 2 }
  ],
  "train": { "epochs": 2 },
  "seeds": [0, 1],
  "output": "out",
  "report": { "profile_passes": 100 }
}"#;

pub fn main() -> gadapter_lab::Result<()> {
    let dir = std::env::temp_dir().join("gadapter-lab-examples/pipeline");
    let config = ExperimentConfig::from_json(CONFIG)?;
    let exp = Experiment::new(config, dir.clone(), &RunOptions { jobs: 2, ..RunOptions::default() });
    println!("config digest {}", exp.digest);
    for cmd in [
        Subcommand::GenData,
        Subcommand::Pretrain,
        Subcommand::Finetune,
        Subcommand::Diagnose,
        Subcommand::Profile,
        Subcommand::Report,
    ] {
        exp.run(cmd)?;
        println!("{cmd:?} done");
    }
    let report = std::fs::read_to_string(exp.out.join("report.csv")).expect("report written");
    print!("{report}");
    Ok(())
}

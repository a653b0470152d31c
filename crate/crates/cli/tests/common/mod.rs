#![allow(dead_code)]

use std::path::Path;

use clap::Parser;
use mint::cli::Cli;
use mint::config::PipelineConfig;
use mint::layout::Layout;
use nnkit::TrainConfig;

/// Small enough for a full pipeline in a few seconds.
pub fn tiny_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig { seed, ..Default::default() };
    cfg.data.samples_per_class = 100;
    cfg.data.external_count = 400;
    cfg.data.image_size = 16;
    cfg.audited.channels = [4, 4, 8, 8];
    cfg.audited.embedding_dim = 8;
    cfg.audited.train = TrainConfig { epochs: 2, ..cfg.audited.train };
    cfg.mint.train_size = 60;
    cfg.mint.train.epochs = 3;
    cfg.grid.train_sizes = vec![20, 40];
    cfg.grid.repetitions = 1;
    cfg.grid.test_size = 40;
    cfg.grid.control_train_size = 40;
    cfg.grid.train_config.epochs = 3;
    cfg
}

pub fn write_config(out: &Path, cfg: &PipelineConfig) {
    std::fs::create_dir_all(out).unwrap();
    std::fs::write(Layout::new(out).resolved_config(), serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
}

pub fn run_in_process(out: &Path, args: &[&str]) -> Option<serde_json::Value> {
    let mut argv = vec!["mint", "--out", out.to_str().unwrap()];
    argv.extend_from_slice(args);
    mint::run(Cli::try_parse_from(argv).unwrap()).unwrap()
}

/// gen-data through train-mint on the tiny configuration.
pub fn tiny_pipeline(out: &Path, seed: u64) {
    write_config(out, &tiny_config(seed));
    for stage in ["gen-data", "train-audited", "extract", "train-mint"] {
        run_in_process(out, &[stage]);
    }
}

#![allow(dead_code)]

use clsp_core::config::RunConfig;
use clsp_core::connector::ConnectorDims;
use clsp_core::encoders::{StateDims, TextDims};

/// Small dimensions and a few hundred pairs, for tests that run the pipeline.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.n = 400;
    cfg.data.test_fraction = 0.1;
    cfg.model.state = StateDims {
        trunk: 32,
        embed: 16,
        blocks: 1,
        front_hidden: 8,
    };
    cfg.model.text = TextDims {
        token: 16,
        hidden: 32,
        embed: 16,
        ..TextDims::default()
    };
    cfg.model.connector = ConnectorDims {
        d: 16,
        hidden: 16,
        width: 16,
        tokens: 2,
    };
    cfg.pretrain.epochs = 1;
    cfg.train.batch_size = 32;
    cfg.train.epochs = 1;
    cfg.train.eval_interval = 5;
    cfg.train.eval_queries = 20;
    cfg.probe.batch_size = 32;
    cfg.probe.frozen_epochs = 1;
    cfg.probe.unfrozen_epochs = 1;
    cfg
}

pub mod nets;
pub mod oracle;

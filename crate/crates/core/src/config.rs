//! Run configuration: every tunable in one flat `key = value` file.
//!
//! Unknown keys are rejected, values are validated against the owning
//! module's invariants, and the canonical dump ([`RunConfig::to_text`]) is
//! byte-stable, so configs embedded in model files reproduce exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evalkit::{ApMethod, EvalConfig};
use crate::proposals::{ProposalConfig, ProposalMode};

/// Which factor multiplies the regression term of the RPN loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Eq2Multiplier {
    /// The ground-truth indicator: regression counts only for positives.
    Label,
    /// The predicted objectness, taken literally; gradients then flow into
    /// the classification head through the multiplier as well.
    Prediction,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    // data and splitting
    pub seed: u64,
    pub train_fraction: f64,

    // backbone and optimizer
    pub conv_channels: usize,
    pub conv_blocks: usize,
    pub fc_dim: usize,
    pub learning_rate: f64,
    pub momentum: f64,

    // warp-with-context feature extraction
    pub warp_context_pixels: f64,
    pub warp_output_size: usize,

    // proposals
    pub proposal_mode: ProposalMode,
    pub max_proposals: usize,
    pub superpixel_cell: usize,
    pub merge_threshold: f64,
    pub sliding_scales: Vec<f64>,
    pub sliding_ratios: Vec<f64>,
    pub sliding_stride: f64,

    // R-CNN training
    pub pretrain_epochs: usize,
    pub pretrain_pos_per_image: usize,
    pub pretrain_neg_per_image: usize,
    pub pretrain_batch: usize,
    pub finetune_epochs: usize,
    pub svm_max_epochs: usize,
    pub svm_tolerance: f64,
    pub svm_reg: f64,
    pub svm_neg_per_image: usize,
    pub ridge_lambda: f64,
    pub ridge_pos_iou: f64,
    /// Jittered ground-truth copies added per GT to the regression-training
    /// proposal pool (both pipelines).
    pub regressor_jitter_per_gt: usize,
    pub score_thresh: f64,

    // RPN and Faster R-CNN
    pub rpn_window: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub rpn_batch_anchors: usize,
    pub rpn_max_positive: usize,
    pub rpn_lambda: f64,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub pre_nms_top: usize,
    pub post_nms_top: usize,
    pub proposal_nms_thresh: f64,
    pub eq2_multiplier: Eq2Multiplier,
    pub rpn_epochs: usize,
    pub det_epochs: usize,
    pub rpn_finetune_epochs: usize,
    pub det_finetune_epochs: usize,
    pub det_batch: usize,
    pub det_max_pos: usize,
    pub det_lambda: f64,
    pub det_pos_iou_low: f64,
    pub det_neg_iou_high: f64,
    pub det_score_thresh: f64,
    pub det_train_proposals: usize,
    pub roi_pool_size: usize,

    // detection-time NMS and evaluation
    pub nms_iou_thresh: f64,
    pub eval_iou_thresh: f64,
    pub ap_method: ApMethod,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            train_fraction: 0.6,

            conv_channels: 16,
            conv_blocks: 2,
            fc_dim: 64,
            learning_rate: 0.001,
            momentum: 0.9,

            warp_context_pixels: 16.0,
            warp_output_size: 32,

            proposal_mode: ProposalMode::SelectiveLite,
            max_proposals: 300,
            superpixel_cell: 4,
            merge_threshold: 1e9,
            sliding_scales: vec![12.0, 18.0, 24.0],
            sliding_ratios: vec![0.5, 0.75, 1.0],
            sliding_stride: 4.0,

            pretrain_epochs: 6,
            pretrain_pos_per_image: 4,
            pretrain_neg_per_image: 4,
            pretrain_batch: 32,
            finetune_epochs: 2,
            svm_max_epochs: 200,
            svm_tolerance: 1e-6,
            svm_reg: 1e-4,
            svm_neg_per_image: 30,
            ridge_lambda: 1000.0,
            ridge_pos_iou: 0.6,
            regressor_jitter_per_gt: 10,
            score_thresh: 0.0,

            rpn_window: 3,
            anchor_scales: vec![12.0, 14.0, 16.0, 18.0, 20.0, 22.0, 24.0, 26.0],
            anchor_ratios: vec![0.5, 0.75, 1.0],
            rpn_batch_anchors: 256,
            rpn_max_positive: 128,
            rpn_lambda: 10.0,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            pre_nms_top: 1200,
            post_nms_top: 300,
            proposal_nms_thresh: 0.7,
            eq2_multiplier: Eq2Multiplier::Label,
            rpn_epochs: 10,
            det_epochs: 4,
            rpn_finetune_epochs: 5,
            det_finetune_epochs: 4,
            det_batch: 48,
            det_max_pos: 16,
            det_lambda: 1.0,
            det_pos_iou_low: 0.6,
            det_neg_iou_high: 0.3,
            det_score_thresh: 0.5,
            det_train_proposals: 48,
            roi_pool_size: 4,

            nms_iou_thresh: 0.3,
            eval_iou_thresh: 0.5,
            ap_method: ApMethod::AllPoints,
        }
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad number `{p}`")))
        .collect()
}

const KEYS: &[&str] = &[
    "seed",
    "train_fraction",
    "conv_channels",
    "conv_blocks",
    "fc_dim",
    "learning_rate",
    "momentum",
    "warp_context_pixels",
    "warp_output_size",
    "proposal_mode",
    "max_proposals",
    "superpixel_cell",
    "merge_threshold",
    "sliding_scales",
    "sliding_ratios",
    "sliding_stride",
    "pretrain_epochs",
    "pretrain_pos_per_image",
    "pretrain_neg_per_image",
    "pretrain_batch",
    "finetune_epochs",
    "svm_max_epochs",
    "svm_tolerance",
    "svm_reg",
    "svm_neg_per_image",
    "ridge_lambda",
    "ridge_pos_iou",
    "regressor_jitter_per_gt",
    "score_thresh",
    "rpn_window",
    "anchor_scales",
    "anchor_ratios",
    "rpn_batch_anchors",
    "rpn_max_positive",
    "rpn_lambda",
    "rpn_pos_iou",
    "rpn_neg_iou",
    "pre_nms_top",
    "post_nms_top",
    "proposal_nms_thresh",
    "eq2_multiplier",
    "rpn_epochs",
    "det_epochs",
    "rpn_finetune_epochs",
    "det_finetune_epochs",
    "det_batch",
    "det_max_pos",
    "det_lambda",
    "det_pos_iou_low",
    "det_neg_iou_high",
    "det_score_thresh",
    "det_train_proposals",
    "roi_pool_size",
    "nms_iou_thresh",
    "eval_iou_thresh",
    "ap_method",
];

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.trim().parse().map_err(|_| format!("bad value `{v}`"))
}

impl RunConfig {
    fn get_key(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "train_fraction" => self.train_fraction.to_string(),
            "conv_channels" => self.conv_channels.to_string(),
            "conv_blocks" => self.conv_blocks.to_string(),
            "fc_dim" => self.fc_dim.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "momentum" => self.momentum.to_string(),
            "warp_context_pixels" => self.warp_context_pixels.to_string(),
            "warp_output_size" => self.warp_output_size.to_string(),
            "proposal_mode" => match self.proposal_mode {
                ProposalMode::SelectiveLite => "selective_lite".into(),
                ProposalMode::Sliding => "sliding".into(),
            },
            "max_proposals" => self.max_proposals.to_string(),
            "superpixel_cell" => self.superpixel_cell.to_string(),
            "merge_threshold" => self.merge_threshold.to_string(),
            "sliding_scales" => fmt_list(&self.sliding_scales),
            "sliding_ratios" => fmt_list(&self.sliding_ratios),
            "sliding_stride" => self.sliding_stride.to_string(),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "pretrain_pos_per_image" => self.pretrain_pos_per_image.to_string(),
            "pretrain_neg_per_image" => self.pretrain_neg_per_image.to_string(),
            "pretrain_batch" => self.pretrain_batch.to_string(),
            "finetune_epochs" => self.finetune_epochs.to_string(),
            "svm_max_epochs" => self.svm_max_epochs.to_string(),
            "svm_tolerance" => self.svm_tolerance.to_string(),
            "svm_reg" => self.svm_reg.to_string(),
            "svm_neg_per_image" => self.svm_neg_per_image.to_string(),
            "ridge_lambda" => self.ridge_lambda.to_string(),
            "ridge_pos_iou" => self.ridge_pos_iou.to_string(),
            "regressor_jitter_per_gt" => self.regressor_jitter_per_gt.to_string(),
            "score_thresh" => self.score_thresh.to_string(),
            "rpn_window" => self.rpn_window.to_string(),
            "anchor_scales" => fmt_list(&self.anchor_scales),
            "anchor_ratios" => fmt_list(&self.anchor_ratios),
            "rpn_batch_anchors" => self.rpn_batch_anchors.to_string(),
            "rpn_max_positive" => self.rpn_max_positive.to_string(),
            "rpn_lambda" => self.rpn_lambda.to_string(),
            "rpn_pos_iou" => self.rpn_pos_iou.to_string(),
            "rpn_neg_iou" => self.rpn_neg_iou.to_string(),
            "pre_nms_top" => self.pre_nms_top.to_string(),
            "post_nms_top" => self.post_nms_top.to_string(),
            "proposal_nms_thresh" => self.proposal_nms_thresh.to_string(),
            "eq2_multiplier" => match self.eq2_multiplier {
                Eq2Multiplier::Label => "label".into(),
                Eq2Multiplier::Prediction => "prediction".into(),
            },
            "rpn_epochs" => self.rpn_epochs.to_string(),
            "det_epochs" => self.det_epochs.to_string(),
            "rpn_finetune_epochs" => self.rpn_finetune_epochs.to_string(),
            "det_finetune_epochs" => self.det_finetune_epochs.to_string(),
            "det_batch" => self.det_batch.to_string(),
            "det_max_pos" => self.det_max_pos.to_string(),
            "det_lambda" => self.det_lambda.to_string(),
            "det_pos_iou_low" => self.det_pos_iou_low.to_string(),
            "det_neg_iou_high" => self.det_neg_iou_high.to_string(),
            "det_score_thresh" => self.det_score_thresh.to_string(),
            "det_train_proposals" => self.det_train_proposals.to_string(),
            "roi_pool_size" => self.roi_pool_size.to_string(),
            "nms_iou_thresh" => self.nms_iou_thresh.to_string(),
            "eval_iou_thresh" => self.eval_iou_thresh.to_string(),
            "ap_method" => match self.ap_method {
                ApMethod::AllPoints => "all_points".into(),
                ApMethod::ElevenPoint => "eleven_point".into(),
            },
            _ => return None,
        })
    }

    fn set_key(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = parse_num(v)?,
            "train_fraction" => self.train_fraction = parse_num(v)?,
            "conv_channels" => self.conv_channels = parse_num(v)?,
            "conv_blocks" => self.conv_blocks = parse_num(v)?,
            "fc_dim" => self.fc_dim = parse_num(v)?,
            "learning_rate" => self.learning_rate = parse_num(v)?,
            "momentum" => self.momentum = parse_num(v)?,
            "warp_context_pixels" => self.warp_context_pixels = parse_num(v)?,
            "warp_output_size" => self.warp_output_size = parse_num(v)?,
            "proposal_mode" => {
                self.proposal_mode = match v.trim() {
                    "selective_lite" => ProposalMode::SelectiveLite,
                    "sliding" => ProposalMode::Sliding,
                    other => return Err(format!("proposal_mode must be selective_lite|sliding, got `{other}`")),
                }
            }
            "max_proposals" => self.max_proposals = parse_num(v)?,
            "superpixel_cell" => self.superpixel_cell = parse_num(v)?,
            "merge_threshold" => self.merge_threshold = parse_num(v)?,
            "sliding_scales" => self.sliding_scales = parse_list(v)?,
            "sliding_ratios" => self.sliding_ratios = parse_list(v)?,
            "sliding_stride" => self.sliding_stride = parse_num(v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_num(v)?,
            "pretrain_pos_per_image" => self.pretrain_pos_per_image = parse_num(v)?,
            "pretrain_neg_per_image" => self.pretrain_neg_per_image = parse_num(v)?,
            "pretrain_batch" => self.pretrain_batch = parse_num(v)?,
            "finetune_epochs" => self.finetune_epochs = parse_num(v)?,
            "svm_max_epochs" => self.svm_max_epochs = parse_num(v)?,
            "svm_tolerance" => self.svm_tolerance = parse_num(v)?,
            "svm_reg" => self.svm_reg = parse_num(v)?,
            "svm_neg_per_image" => self.svm_neg_per_image = parse_num(v)?,
            "ridge_lambda" => self.ridge_lambda = parse_num(v)?,
            "ridge_pos_iou" => self.ridge_pos_iou = parse_num(v)?,
            "regressor_jitter_per_gt" => self.regressor_jitter_per_gt = parse_num(v)?,
            "score_thresh" => self.score_thresh = parse_num(v)?,
            "rpn_window" => self.rpn_window = parse_num(v)?,
            "anchor_scales" => self.anchor_scales = parse_list(v)?,
            "anchor_ratios" => self.anchor_ratios = parse_list(v)?,
            "rpn_batch_anchors" => self.rpn_batch_anchors = parse_num(v)?,
            "rpn_max_positive" => self.rpn_max_positive = parse_num(v)?,
            "rpn_lambda" => self.rpn_lambda = parse_num(v)?,
            "rpn_pos_iou" => self.rpn_pos_iou = parse_num(v)?,
            "rpn_neg_iou" => self.rpn_neg_iou = parse_num(v)?,
            "pre_nms_top" => self.pre_nms_top = parse_num(v)?,
            "post_nms_top" => self.post_nms_top = parse_num(v)?,
            "proposal_nms_thresh" => self.proposal_nms_thresh = parse_num(v)?,
            "eq2_multiplier" => {
                self.eq2_multiplier = match v.trim() {
                    "label" => Eq2Multiplier::Label,
                    "prediction" => Eq2Multiplier::Prediction,
                    other => return Err(format!("eq2_multiplier must be label|prediction, got `{other}`")),
                }
            }
            "rpn_epochs" => self.rpn_epochs = parse_num(v)?,
            "det_epochs" => self.det_epochs = parse_num(v)?,
            "rpn_finetune_epochs" => self.rpn_finetune_epochs = parse_num(v)?,
            "det_finetune_epochs" => self.det_finetune_epochs = parse_num(v)?,
            "det_batch" => self.det_batch = parse_num(v)?,
            "det_max_pos" => self.det_max_pos = parse_num(v)?,
            "det_lambda" => self.det_lambda = parse_num(v)?,
            "det_pos_iou_low" => self.det_pos_iou_low = parse_num(v)?,
            "det_neg_iou_high" => self.det_neg_iou_high = parse_num(v)?,
            "det_score_thresh" => self.det_score_thresh = parse_num(v)?,
            "det_train_proposals" => self.det_train_proposals = parse_num(v)?,
            "roi_pool_size" => self.roi_pool_size = parse_num(v)?,
            "nms_iou_thresh" => self.nms_iou_thresh = parse_num(v)?,
            "eval_iou_thresh" => self.eval_iou_thresh = parse_num(v)?,
            "ap_method" => {
                self.ap_method = match v.trim() {
                    "all_points" => ApMethod::AllPoints,
                    "eleven_point" => ApMethod::ElevenPoint,
                    other => return Err(format!("ap_method must be all_points|eleven_point, got `{other}`")),
                }
            }
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_key(key.trim(), value)
            .map_err(|msg| Error::Config(msg))
    }

    /// Parse a flat config text. Lines are `key = value`; blank lines and
    /// `#` comments are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", idx + 1))
            })?;
            self.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", idx + 1)))?;
        }
        self.validate()
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Canonical dump: every key in declaration order. Parsing the dump
    /// reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for &key in KEYS {
            s.push_str(&format!("{key} = {}\n", self.get_key(key).unwrap()));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must be in (0,1)".into()));
        }
        if self.conv_channels < 1 || self.conv_blocks < 1 || self.fc_dim < 1 {
            return Err(Error::Config("network dimensions must be >= 1".into()));
        }
        if self.warp_output_size < 8 {
            return Err(Error::Config("warp_output_size must be >= 8".into()));
        }
        if self.warp_context_pixels < 0.0 {
            return Err(Error::Config("warp_context_pixels must be >= 0".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0,1)".into()));
        }
        self.proposal_config().validate()?;
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return Err(Error::Config("anchor scales/ratios must be non-empty".into()));
        }
        if self.anchor_scales.iter().chain(&self.anchor_ratios).any(|&v| v <= 0.0) {
            return Err(Error::Config("anchor scales/ratios must be positive".into()));
        }
        if self.rpn_window % 2 == 0 {
            return Err(Error::Config("rpn_window must be odd".into()));
        }
        if self.rpn_max_positive > self.rpn_batch_anchors {
            return Err(Error::Config("rpn_max_positive must be <= rpn_batch_anchors".into()));
        }
        if self.rpn_batch_anchors == 0 {
            return Err(Error::Config("rpn_batch_anchors must be >= 1".into()));
        }
        for (name, v) in [
            ("nms_iou_thresh", self.nms_iou_thresh),
            ("eval_iou_thresh", self.eval_iou_thresh),
            ("proposal_nms_thresh", self.proposal_nms_thresh),
            ("rpn_pos_iou", self.rpn_pos_iou),
            ("rpn_neg_iou", self.rpn_neg_iou),
            ("ridge_pos_iou", self.ridge_pos_iou),
            ("det_pos_iou_low", self.det_pos_iou_low),
            ("det_neg_iou_high", self.det_neg_iou_high),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0,1]")));
            }
        }
        if self.ridge_lambda < 0.0 {
            return Err(Error::Config("ridge_lambda must be >= 0".into()));
        }
        if self.rpn_lambda < 0.0 || self.det_lambda < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.det_max_pos > self.det_batch {
            return Err(Error::Config("det_max_pos must be <= det_batch".into()));
        }
        if self.roi_pool_size < 1 {
            return Err(Error::Config("roi_pool_size must be >= 1".into()));
        }
        if self.pre_nms_top == 0 || self.post_nms_top == 0 {
            return Err(Error::Config("pre/post NMS budgets must be >= 1".into()));
        }
        Ok(())
    }

    pub fn proposal_config(&self) -> ProposalConfig {
        ProposalConfig {
            max_proposals: self.max_proposals,
            mode: self.proposal_mode,
            sliding_scales: self.sliding_scales.clone(),
            sliding_ratios: self.sliding_ratios.clone(),
            sliding_stride: self.sliding_stride,
            superpixel_cell: self.superpixel_cell,
            merge_threshold: self.merge_threshold,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            iou_thresh: self.eval_iou_thresh,
            ap_method: self.ap_method,
        }
    }

    pub fn split_spec(&self) -> crate::data_io::SplitSpec {
        crate::data_io::SplitSpec {
            train_fraction: self.train_fraction,
            seed: self.seed,
        }
    }
}

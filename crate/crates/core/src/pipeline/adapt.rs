use std::path::Path;

use super::config::RunConfig;
use super::train::CONFIG_FILE;
use crate::error::Result;
use crate::image::write_file;
use crate::segadapt::{adapt_toy, toy_domains, write_adapt_outputs, AdaptOutcome};

/// Runs the toy segmentation adaptation with `cfg.segadapt` and `cfg.seed`
/// and writes the trace, target predictions and the config echo into `out`.
pub fn run_adapt(cfg: &RunConfig, out: &Path) -> Result<AdaptOutcome> {
    cfg.segadapt.validate()?;
    let (source, target, eval) = toy_domains(&cfg.segadapt, cfg.seed);
    let outcome = adapt_toy(&source, &target, &eval, &cfg.segadapt, cfg.seed)?;
    write_file(&out.join(CONFIG_FILE), cfg.to_json_pretty().as_bytes())?;
    write_adapt_outputs(out, &outcome)?;
    Ok(outcome)
}

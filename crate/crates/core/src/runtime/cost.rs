use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Roofline-style device: an operation takes the longer of streaming its
/// weights from memory and doing its arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceParams {
    /// bytes/s
    pub mem_bandwidth: f64,
    /// FLOP/s
    pub gpu_flops: f64,
}

impl Default for DeviceParams {
    fn default() -> Self {
        Self {
            mem_bandwidth: 800e9,
            gpu_flops: 54e12,
        }
    }
}

impl DeviceParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mem_bandwidth", self.mem_bandwidth), ("gpu_flops", self.gpu_flops)] {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::Config(format!("device.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn op_time(&self, bytes: u64, flops: u64) -> f64 {
        (bytes as f64 / self.mem_bandwidth).max(flops as f64 / self.gpu_flops)
    }

    /// Attention block of one layer, sized like the parameter formula.
    pub fn attention(&self, c: &ModelConfig) -> f64 {
        let bytes = ((c.d_qkv_hidden * c.d_embed + c.d_embed * c.d_embed) * c.precision_bytes) as u64;
        self.op_time(bytes, 2 * bytes)
    }

    pub fn router(&self, c: &ModelConfig) -> f64 {
        let elems = (c.d_embed * c.n_experts) as u64;
        self.op_time(elems * c.precision_bytes as u64, 2 * elems)
    }

    /// One expert at one layer.
    pub fn expert_layer(&self, c: &ModelConfig) -> f64 {
        let elems = (c.d_embed * c.d_ffn * 3) as u64;
        self.op_time(elems * c.precision_bytes as u64, 2 * elems)
    }

    /// Weighted sum of `k` expert outputs plus the residual.
    pub fn combine(&self, c: &ModelConfig, k: usize) -> f64 {
        let elems = (c.d_embed * (k + 1)) as u64;
        self.op_time(elems * 4, elems)
    }

    pub fn lm_head(&self, c: &ModelConfig) -> f64 {
        let elems = (c.d_embed * c.vocab_size) as u64;
        self.op_time(elems * c.precision_bytes as u64, 2 * elems)
    }
}

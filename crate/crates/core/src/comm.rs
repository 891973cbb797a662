//! Gradient-communication plan: bucket fusion and compute overlap.

use serde::{Deserialize, Serialize};

pub const DEFAULT_BUCKET_BYTES: f64 = 25e6;
pub const DEFAULT_OVERLAP_FACTOR: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommFlags {
    pub enable_fusion: bool,
    pub enable_overlap: bool,
}

impl Default for CommFlags {
    fn default() -> Self {
        CommFlags {
            enable_fusion: true,
            enable_overlap: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommPlan {
    pub fusion_enabled: bool,
    pub bucket_bytes: f64,
    pub overlap_enabled: bool,
    /// Fraction of the backward window that can hide gradient all-reduce.
    pub overlap_factor: f64,
}

impl CommPlan {
    /// Plain per-tensor all-reduce with nothing hidden behind compute.
    pub fn unoptimized() -> Self {
        comm_optimize(CommFlags {
            enable_fusion: false,
            enable_overlap: false,
        })
    }

    /// Number of all-reduce launches needed for one gradient sync.
    pub fn message_count(&self, grad_tensors: usize, grad_bytes: f64) -> f64 {
        if self.fusion_enabled {
            (grad_bytes / self.bucket_bytes).ceil()
        } else {
            grad_tensors as f64
        }
    }
}

impl Default for CommPlan {
    fn default() -> Self {
        comm_optimize(CommFlags::default())
    }
}

pub fn comm_optimize(flags: CommFlags) -> CommPlan {
    CommPlan {
        fusion_enabled: flags.enable_fusion,
        bucket_bytes: DEFAULT_BUCKET_BYTES,
        overlap_enabled: flags.enable_overlap,
        overlap_factor: if flags.enable_overlap {
            DEFAULT_OVERLAP_FACTOR
        } else {
            0.0
        },
    }
}

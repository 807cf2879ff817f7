//! Residual time-series policies: a long-convolution network and an
//! Ornstein-Uhlenbeck threshold rule.

mod longconv;
mod ou;

pub use longconv::{
    init_kernel, longconv_forward, policy_forward, policy_weights, squash, Dropout, LongConvLayer,
    LongConvPolicyParams, Mode, PolicyVars,
};
pub use ou::{ou_fit, threshold_policy, OUFit, Position, Thresholds, MIN_OU_WINDOW};

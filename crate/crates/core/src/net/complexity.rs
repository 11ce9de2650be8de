use crate::convssm::ConvSsmFlops;
use crate::net::{NetworkConfig, ParamStore};
use crate::ssm::default_rank;

/// Total number of learnable scalars.
pub fn count_params(params: &ParamStore) -> usize {
    params.count()
}

fn vss_macs(cfg: &NetworkConfig, hw: u64, c: u64) -> u64 {
    let e = 2 * c;
    let (n, r) = (cfg.state_dim as u64, default_rank(e as usize) as u64);
    let projections = 2 * hw * c * e + hw * e * c;
    let depthwise = hw * e * 9;
    let per_direction = hw * e * (r + 2 * n) + hw * r * e + 3 * hw * e * n;
    projections + depthwise + 4 * per_direction
}

fn convssm_macs(cfg: &NetworkConfig, hw: usize, c: usize) -> u64 {
    let (p, k) = (cfg.convssm_state, cfg.convssm_kernel);
    let priming = (hw * p * c * k * k) as u64;
    priming + ConvSsmFlops::from_dims(p, c, c, k, hw * cfg.convssm_steps).total()
}

/// Multiplies in one forward pass on an `h×w` input: linear, convolution
/// and scan terms, padded taps included.
pub fn count_flops(cfg: &NetworkConfig, h: usize, w: usize) -> u64 {
    let widths = cfg.stage_widths().map(|c| c as u64);
    let k = cfg.classes as u64;
    let hw_at = |scale: usize| ((h / scale) * (w / scale)) as u64;

    let mut total = hw_at(4) * widths[0] * (cfg.in_channels as u64) * 16;
    for s in 0..4 {
        let (hw, c) = (hw_at(4 << s), widths[s]);
        total += cfg.depths[s] as u64 * vss_macs(cfg, hw, c);
        if s < 3 {
            total += hw_at(8 << s) * 4 * c * 2 * c;
        }
    }
    for i in 0..4 {
        let cin = widths[3 - i];
        let (hw_in, c) = if i < 3 {
            total += hw_at(32 >> i) * cin * 2 * cin;
            let (hw, c) = (hw_at(16 >> i), cin / 2);
            total += hw * c * c;
            (hw, c)
        } else {
            total += hw_at(4) * cin * 2 * cin + hw_at(2) * (cin / 2) * cin;
            (hw_at(1), cin / 4)
        };
        if cfg.stage_has_convssm(i) {
            total += convssm_macs(cfg, hw_in as usize, c as usize);
        }
        total += 2 * vss_macs(cfg, hw_in, c);
        if i < 3 && cfg.deep_supervision {
            total += hw_in * c * k;
        }
        if i == 3 {
            total += hw_in * c * k;
        }
    }
    total
}

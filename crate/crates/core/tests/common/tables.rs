//! Published reference figures the accounting must reproduce.

use abp_core::netcore::Arch;

/// Pruned-model FLOPs in millions by (architecture, ratio); ratio 0 is the
/// unpruned baseline.
pub const FLOPS_M: &[(Arch, f64, f64)] = &[
    (Arch::Rn32, 0.0, 68.86),
    (Arch::Rn56, 0.0, 125.49),
    (Arch::Rn110, 0.0, 252.89),
    (Arch::Rn32, 0.4, 40.55),
    (Arch::Rn32, 0.6, 26.39),
    (Arch::Rn56, 0.4, 78.30),
    (Arch::Rn56, 0.6, 49.99),
    (Arch::Rn110, 0.2, 205.70),
    (Arch::Rn110, 0.4, 153.80),
    (Arch::Rn110, 0.6, 101.90),
];

/// FLOPs drop in percent for block pruning alone, 100 classes.
pub const DROP_PCT_100: &[(Arch, f64, f64)] = &[
    (Arch::Rn32, 0.4, 41.11),
    (Arch::Rn32, 0.6, 61.67),
    (Arch::Rn56, 0.4, 37.60),
    (Arch::Rn56, 0.6, 60.16),
    (Arch::Rn110, 0.4, 39.18),
    (Arch::Rn110, 0.6, 59.71),
];

/// Baseline parameters in millions, quoted to two decimals.
pub const PARAMS_M: &[(Arch, f64)] = &[(Arch::Rn32, 0.47), (Arch::Rn56, 0.86), (Arch::Rn110, 1.73)];

/// Composed block + filter pruning drops (block ratio, filter rate, percent)
/// on 100 classes that the channel-pruning accounting reproduces.
pub const COMPOSED_DROP_PCT_100: &[(Arch, f64, f64, f64)] = &[
    (Arch::Rn32, 0.4, 0.3, 65.25),
    (Arch::Rn32, 0.4, 0.5, 78.27),
    (Arch::Rn32, 0.6, 0.7, 92.82),
    (Arch::Rn56, 0.4, 0.3, 63.03),
    (Arch::Rn56, 0.4, 0.5, 76.79),
    (Arch::Rn56, 0.4, 0.7, 87.99),
    (Arch::Rn110, 0.6, 0.3, 76.11),
    (Arch::Rn110, 0.6, 0.5, 84.99),
    (Arch::Rn110, 0.6, 0.7, 92.22),
];

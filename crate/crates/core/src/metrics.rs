//! Edit-count evaluation: successful/failed edits inside the target region,
//! unintended/absent edits outside it, and the derived precision, success,
//! and unintended-edit ratios plus SNR.

use std::fmt;

use thiserror::Error;

use crate::attack::{TargetLabels, TargetRegion};
use crate::model::ActivityGrid;
use crate::signal::{self, SignalError, SnrDb, Waveform};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("activity grids are {a:?} and {b:?}, expected identical shapes")]
    ShapeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("edit counts are inconsistent: {0}")]
    BadCounts(String),
    #[error("cannot aggregate an empty report list")]
    EmptyAggregate,
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// SE/FE inside the target region, UE/NE outside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditCounts {
    pub se: u64,
    pub fe: u64,
    pub ue: u64,
    pub ne: u64,
}

impl EditCounts {
    pub fn target_size(&self) -> u64 {
        self.se + self.fe
    }

    pub fn non_target_size(&self) -> u64 {
        self.ue + self.ne
    }

    pub fn total(&self) -> u64 {
        self.target_size() + self.non_target_size()
    }
}

/// A ratio whose denominator may be empty; never a fabricated number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RatioStat {
    Value(f64),
    Undefined,
}

impl RatioStat {
    fn of(numerator: u64, denominator: u64) -> Self {
        if denominator == 0 {
            RatioStat::Undefined
        } else {
            RatioStat::Value(numerator as f64 / denominator as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            RatioStat::Value(v) => Some(v),
            RatioStat::Undefined => None,
        }
    }
}

impl fmt::Display for RatioStat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RatioStat::Value(v) => write!(f, "{v}"),
            RatioStat::Undefined => write!(f, "na"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub counts: EditCounts,
    /// (SE+NE)/|O|
    pub ep: f64,
    /// SE/|T|; undefined when |T| = 0.
    pub asr: RatioStat,
    /// UE/(|O|−|T|); undefined when |O| = |T|.
    pub uer: RatioStat,
    pub snr_db: SnrDb,
}

/// SE = target pairs matching y*, FE the rest of T; UE = non-target pairs
/// whose activity changed, NE the rest.
pub fn count_edits(
    clean: &ActivityGrid,
    adv: &ActivityGrid,
    region: &TargetRegion,
    y_star: &TargetLabels,
) -> Result<EditCounts, MetricsError> {
    let shape = (clean.num_frames(), clean.num_classes());
    if shape != (adv.num_frames(), adv.num_classes()) {
        return Err(MetricsError::ShapeMismatch {
            a: shape,
            b: (adv.num_frames(), adv.num_classes()),
        });
    }
    if shape != (region.num_frames(), region.num_classes()) {
        return Err(MetricsError::ShapeMismatch {
            a: shape,
            b: (region.num_frames(), region.num_classes()),
        });
    }
    let mut counts = EditCounts::default();
    for frame in 0..shape.0 {
        for class in 0..shape.1 {
            let is_adv = adv.at(frame, class);
            if region.contains(frame, class) {
                let wanted = y_star.at(frame, class) > 0.5;
                if is_adv == wanted {
                    counts.se += 1;
                } else {
                    counts.fe += 1;
                }
            } else if is_adv != clean.at(frame, class) {
                counts.ue += 1;
            } else {
                counts.ne += 1;
            }
        }
    }
    Ok(counts)
}

/// Report with SNR measured between the given waveform pair.
pub fn compute_report(
    counts: EditCounts,
    clean: &Waveform,
    adversarial: &Waveform,
) -> Result<MetricsReport, MetricsError> {
    let snr = signal::snr_db(clean, adversarial)?;
    Ok(report_with_snr(counts, snr))
}

/// Report from counts plus an externally computed SNR (defended evaluations
/// pair different waveforms).
pub fn report_with_snr(counts: EditCounts, snr_db: SnrDb) -> MetricsReport {
    let total = counts.total();
    let ep = if total == 0 {
        1.0
    } else {
        (counts.se + counts.ne) as f64 / total as f64
    };
    MetricsReport {
        counts,
        ep,
        asr: RatioStat::of(counts.se, counts.target_size()),
        uer: RatioStat::of(counts.ue, counts.non_target_size()),
        snr_db,
    }
}

/// Campaign-level micro-average: counts are summed, then the ratios applied;
/// SNR is the mean of finite per-run values with infinite runs counted
/// separately.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub counts: EditCounts,
    pub ep: f64,
    pub asr: RatioStat,
    pub uer: RatioStat,
    pub snr_mean_db: Option<f64>,
    pub snr_infinite_runs: usize,
    pub n_runs: usize,
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateReport, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyAggregate);
    }
    let mut counts = EditCounts::default();
    let mut snr_sum = 0.0;
    let mut snr_finite = 0usize;
    let mut snr_infinite = 0usize;
    for report in reports {
        counts.se += report.counts.se;
        counts.fe += report.counts.fe;
        counts.ue += report.counts.ue;
        counts.ne += report.counts.ne;
        match report.snr_db {
            SnrDb::Finite(v) => {
                snr_sum += v;
                snr_finite += 1;
            }
            SnrDb::Infinite => snr_infinite += 1,
        }
    }
    let total = counts.total();
    let ep = if total == 0 {
        1.0
    } else {
        (counts.se + counts.ne) as f64 / total as f64
    };
    Ok(AggregateReport {
        counts,
        ep,
        asr: RatioStat::of(counts.se, counts.target_size()),
        uer: RatioStat::of(counts.ue, counts.non_target_size()),
        snr_mean_db: (snr_finite > 0).then(|| snr_sum / snr_finite as f64),
        snr_infinite_runs: snr_infinite,
        n_runs: reports.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::TargetRegion;
    use proptest::prelude::*;

    fn grid(t: usize, c: usize, bits: &[bool]) -> ActivityGrid {
        ActivityGrid::new(bits.to_vec(), t, c)
    }

    fn region_and_labels(
        t: usize,
        c: usize,
        pairs: &[(usize, usize, bool)],
        y_hat: &ActivityGrid,
    ) -> (TargetRegion, TargetLabels) {
        let region = TargetRegion::from_pairs(t, c, pairs).unwrap();
        let labels = TargetLabels::from_region(y_hat, &region);
        (region, labels)
    }

    #[test]
    fn unchanged_output_with_empty_target() {
        let clean = grid(2, 2, &[true, false, false, true]);
        let (region, labels) = region_and_labels(2, 2, &[], &clean);
        let counts = count_edits(&clean, &clean, &region, &labels).unwrap();
        assert_eq!(counts, EditCounts { se: 0, fe: 0, ue: 0, ne: 4 });
    }

    #[test]
    fn perfect_attack_counts() {
        // adv equals y* everywhere; off-target clean equals adv.
        let clean = grid(2, 2, &[false, false, false, true]);
        let pairs = [(0usize, 0usize, true), (1, 0, true)];
        let (region, labels) = region_and_labels(2, 2, &pairs, &clean);
        let adv = grid(2, 2, &[true, false, true, true]);
        let counts = count_edits(&clean, &adv, &region, &labels).unwrap();
        assert_eq!(counts, EditCounts { se: 2, fe: 0, ue: 0, ne: 2 });
    }

    #[test]
    fn report_formula_examples() {
        let counts = EditCounts { se: 80, fe: 20, ue: 5, ne: 95 };
        let report = report_with_snr(counts, SnrDb::Finite(20.0));
        assert_eq!(report.asr, RatioStat::Value(0.80));
        assert_eq!(report.uer, RatioStat::Value(0.05));
        assert!((report.ep - 0.875).abs() < 1e-12);

        let perfect = report_with_snr(EditCounts { se: 10, fe: 0, ue: 0, ne: 90 }, SnrDb::Infinite);
        assert_eq!(perfect.ep, 1.0);
        assert_eq!(perfect.asr, RatioStat::Value(1.0));
        assert_eq!(perfect.uer, RatioStat::Value(0.0));

        let zero_se = report_with_snr(EditCounts { se: 0, fe: 5, ue: 0, ne: 5 }, SnrDb::Finite(1.0));
        assert_eq!(zero_se.asr, RatioStat::Value(0.0));
    }

    #[test]
    fn sentinels_for_degenerate_denominators() {
        // |T| = 0 → ASR undefined.
        let no_target = report_with_snr(EditCounts { se: 0, fe: 0, ue: 1, ne: 3 }, SnrDb::Infinite);
        assert_eq!(no_target.asr, RatioStat::Undefined);
        // |O| = |T| → UER undefined.
        let all_target = report_with_snr(EditCounts { se: 3, fe: 1, ue: 0, ne: 0 }, SnrDb::Infinite);
        assert_eq!(all_target.uer, RatioStat::Undefined);
        assert_eq!(format!("{}", RatioStat::Undefined), "na");
    }

    #[test]
    fn aggregate_identity_and_micro_average() {
        let a = report_with_snr(EditCounts { se: 1, fe: 1, ue: 0, ne: 2 }, SnrDb::Finite(10.0));
        let single = aggregate(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.counts, a.counts);
        assert_eq!(single.ep, a.ep);
        assert_eq!(single.n_runs, 1);
        assert_eq!(single.snr_mean_db, Some(10.0));

        let two = aggregate(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(two.ep, a.ep);
        assert_eq!(two.asr, a.asr);
        assert_eq!(two.uer, a.uer);
        assert_eq!(two.counts.se, 2);

        let with_inf = aggregate(&[
            a,
            report_with_snr(EditCounts { se: 1, fe: 1, ue: 0, ne: 2 }, SnrDb::Infinite),
        ])
        .unwrap();
        assert_eq!(with_inf.snr_infinite_runs, 1);
        assert_eq!(with_inf.snr_mean_db, Some(10.0));

        assert!(matches!(aggregate(&[]), Err(MetricsError::EmptyAggregate)));
    }

    #[test]
    fn ep_monotone_in_se_and_ne() {
        // With |T| and |O| fixed, EP strictly increases in SE and in NE.
        let base = report_with_snr(EditCounts { se: 3, fe: 7, ue: 4, ne: 6 }, SnrDb::Infinite);
        let more_se = report_with_snr(EditCounts { se: 4, fe: 6, ue: 4, ne: 6 }, SnrDb::Infinite);
        let more_ne = report_with_snr(EditCounts { se: 3, fe: 7, ue: 3, ne: 7 }, SnrDb::Infinite);
        assert!(more_se.ep > base.ep);
        assert!(more_ne.ep > base.ep);
    }

    proptest! {
        /// count_edits must equal an exhaustive pairwise classification.
        #[test]
        fn matches_brute_force_oracle(
            t in 1usize..20,
            seed in 0u64..10_000,
        ) {
            use rand::prelude::*;
            use rand_chacha::ChaCha8Rng;
            let c = 4usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let clean = ActivityGrid::new((0..t * c).map(|_| rng.random()).collect(), t, c);
            let adv = ActivityGrid::new((0..t * c).map(|_| rng.random()).collect(), t, c);
            let mut pairs = Vec::new();
            for frame in 0..t {
                for class in 0..c {
                    if rng.random_bool(0.3) {
                        pairs.push((frame, class, rng.random::<bool>()));
                    }
                }
            }
            let region = TargetRegion::from_pairs(t, c, &pairs).unwrap();
            let labels = TargetLabels::from_region(&clean, &region);

            let counts = count_edits(&clean, &adv, &region, &labels).unwrap();

            // Independent oracle: linear scan over the pair list per cell.
            let mut oracle = EditCounts::default();
            for frame in 0..t {
                for class in 0..c {
                    let in_target = pairs.iter().any(|&(f, cl, _)| f == frame && cl == class);
                    if in_target {
                        let wanted = pairs
                            .iter()
                            .find(|&&(f, cl, _)| f == frame && cl == class)
                            .unwrap()
                            .2;
                        if adv.at(frame, class) == wanted {
                            oracle.se += 1;
                        } else {
                            oracle.fe += 1;
                        }
                    } else if adv.at(frame, class) != clean.at(frame, class) {
                        oracle.ue += 1;
                    } else {
                        oracle.ne += 1;
                    }
                }
            }
            prop_assert_eq!(counts, oracle);

            // Count invariants and the EP identity.
            prop_assert_eq!(counts.target_size() as usize, region.len());
            prop_assert_eq!(counts.total() as usize, region.total());
            let report = report_with_snr(counts, SnrDb::Infinite);
            if let (Some(asr), Some(uer)) = (report.asr.value(), report.uer.value()) {
                let t_size = counts.target_size() as f64;
                let o_size = counts.total() as f64;
                let identity = (asr * t_size + (1.0 - uer) * (o_size - t_size)) / o_size;
                prop_assert!((report.ep - identity).abs() < 1e-12);
            }
        }
    }
}

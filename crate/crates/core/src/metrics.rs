//! Language-bias metrics over graded predictions.
//!
//! * BVC: share of video pairs answered identically while at least one
//!   answer is wrong (lower is better).
//! * Joint accuracy: share of pairs with both answers right.
//! * TCR and RA: follow-up consistency over the four interplay cells.
//!
//! All values are percentages in `[0, 100]`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Relevant,
    Distorted,
}

impl PairKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PairKind::Relevant => "relevant",
            PairKind::Distorted => "distorted",
        }
    }
}

/// Predictions for one question asked over an original video and its
/// counterpart.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvcPairRecord {
    pub pair_id: String,
    pub pair_kind: PairKind,
    pub question_id: String,
    pub pred_original: String,
    pub gold_original: String,
    pub pred_counterpart: String,
    pub gold_counterpart: String,
}

impl AvcPairRecord {
    pub fn validate(&self) -> Result<()> {
        if self.gold_original == self.gold_counterpart {
            return Err(Error::Schema {
                sample_id: self.pair_id.clone(),
                message: "gold_original equals gold_counterpart".into(),
            });
        }
        Ok(())
    }

    /// Same prediction on both videos with at least one of them wrong.
    pub fn is_biased(&self) -> bool {
        self.pred_original == self.pred_counterpart
            && (self.pred_original != self.gold_original
                || self.pred_counterpart != self.gold_counterpart)
    }

    pub fn is_joint_correct(&self) -> bool {
        self.pred_original == self.gold_original && self.pred_counterpart == self.gold_counterpart
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IqpRecord {
    pub orig_correct: bool,
    pub followup_correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InterplayCell {
    /// Original right, follow-up right.
    CR,
    /// Original right, follow-up wrong.
    PR,
    /// Original wrong, follow-up right.
    PV,
    /// Both wrong.
    CV,
}

pub fn classify_interplay(record: &IqpRecord) -> InterplayCell {
    match (record.orig_correct, record.followup_correct) {
        (true, true) => InterplayCell::CR,
        (true, false) => InterplayCell::PR,
        (false, true) => InterplayCell::PV,
        (false, false) => InterplayCell::CV,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterplayCounts {
    pub n_cr: u64,
    pub n_pr: u64,
    pub n_pv: u64,
    pub n_cv: u64,
}

impl InterplayCounts {
    pub fn new(n_cr: u64, n_pr: u64, n_pv: u64, n_cv: u64) -> Self {
        Self {
            n_cr,
            n_pr,
            n_pv,
            n_cv,
        }
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a IqpRecord>) -> Self {
        records.into_iter().fold(Self::default(), |mut acc, r| {
            acc.add(classify_interplay(r));
            acc
        })
    }

    pub fn add(&mut self, cell: InterplayCell) {
        match cell {
            InterplayCell::CR => self.n_cr += 1,
            InterplayCell::PR => self.n_pr += 1,
            InterplayCell::PV => self.n_pv += 1,
            InterplayCell::CV => self.n_cv += 1,
        }
    }

    /// Commutative, associative merge for partitioned counting.
    pub fn merge(self, other: Self) -> Self {
        Self {
            n_cr: self.n_cr + other.n_cr,
            n_pr: self.n_pr + other.n_pr,
            n_pv: self.n_pv + other.n_pv,
            n_cv: self.n_cv + other.n_cv,
        }
    }

    pub fn total(&self) -> u64 {
        self.n_cr + self.n_pr + self.n_pv + self.n_cv
    }
}

fn percent(num: usize, den: usize) -> f64 {
    100.0 * num as f64 / den as f64
}

fn of_kind(pairs: &[AvcPairRecord], kind: PairKind) -> Vec<&AvcPairRecord> {
    pairs.iter().filter(|p| p.pair_kind == kind).collect()
}

/// Biased visual consistency over the pairs of `kind`.
pub fn compute_bvc(pairs: &[AvcPairRecord], kind: PairKind) -> Result<f64> {
    let pairs = of_kind(pairs, kind);
    if pairs.is_empty() {
        return Err(Error::NoPairs);
    }
    Ok(percent(
        pairs.iter().filter(|p| p.is_biased()).count(),
        pairs.len(),
    ))
}

pub fn compute_joint_accuracy(pairs: &[AvcPairRecord], kind: PairKind) -> Result<f64> {
    let pairs = of_kind(pairs, kind);
    if pairs.is_empty() {
        return Err(Error::NoPairs);
    }
    Ok(percent(
        pairs.iter().filter(|p| p.is_joint_correct()).count(),
        pairs.len(),
    ))
}

/// `100 * CR / (CR + PR)`.
pub fn compute_tcr(counts: &InterplayCounts) -> Result<f64> {
    let den = counts.n_cr + counts.n_pr;
    if den == 0 {
        return Err(Error::NoOriginallyCorrect);
    }
    Ok(100.0 * counts.n_cr as f64 / den as f64)
}

/// `100 * CR / (CR + PR + PV + CV)`.
pub fn compute_ra(counts: &InterplayCounts) -> Result<f64> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::NoRecords);
    }
    Ok(100.0 * counts.n_cr as f64 / total as f64)
}

/// Rounds to two decimals, ties to even.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round_ties_even() / 100.0
}

/// One row of the six-column bias table. Columns that cannot be computed
/// (no pairs of a kind, no originally-correct samples) are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_rel: Option<f64>,
    pub bvc_rel: Option<f64>,
    pub acc_dis: Option<f64>,
    pub bvc_dis: Option<f64>,
    pub tcr: Option<f64>,
    pub ra: Option<f64>,
}

pub const REPORT_COLUMNS: [&str; 6] = ["ACC_rel", "BVC_rel", "ACC_dis", "BVC_dis", "TCR", "RA"];

impl MetricsReport {
    /// Computes every column; values are rounded to two decimals.
    pub fn compute(pairs: &[AvcPairRecord], iqp: &[IqpRecord]) -> Self {
        let counts = InterplayCounts::from_records(iqp);
        let ok = |r: Result<f64>| r.ok().map(round2);
        Self {
            acc_rel: ok(compute_joint_accuracy(pairs, PairKind::Relevant)),
            bvc_rel: ok(compute_bvc(pairs, PairKind::Relevant)),
            acc_dis: ok(compute_joint_accuracy(pairs, PairKind::Distorted)),
            bvc_dis: ok(compute_bvc(pairs, PairKind::Distorted)),
            tcr: ok(compute_tcr(&counts)),
            ra: ok(compute_ra(&counts)),
        }
    }

    pub fn columns(&self) -> [Option<f64>; 6] {
        [
            self.acc_rel,
            self.bvc_rel,
            self.acc_dis,
            self.bvc_dis,
            self.tcr,
            self.ra,
        ]
    }
}

/// Aligned plain-text table with one labelled row per report.
pub fn render_table(rows: &[(String, MetricsReport)]) -> String {
    let label_width = rows
        .iter()
        .map(|(l, _)| l.len())
        .chain(std::iter::once("strategy".len()))
        .max()
        .unwrap_or(8);
    let mut out = format!("{:<label_width$}", "strategy");
    for c in REPORT_COLUMNS {
        let _ = write!(out, "  {c:>8}");
    }
    out.push('\n');
    for (label, report) in rows {
        let _ = write!(out, "{label:<label_width$}");
        for v in report.columns() {
            let cell = v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
            let _ = write!(out, "  {cell:>8}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(kind: PairKind, po: &str, go: &str, pc: &str, gc: &str) -> AvcPairRecord {
        AvcPairRecord {
            pair_id: format!("{po}{go}{pc}{gc}"),
            pair_kind: kind,
            question_id: "q".into(),
            pred_original: po.into(),
            gold_original: go.into(),
            pred_counterpart: pc.into(),
            gold_counterpart: gc.into(),
        }
    }

    const R: PairKind = PairKind::Relevant;

    #[test]
    fn bvc_examples() {
        let perfect = vec![pair(R, "A", "A", "B", "B"), pair(R, "C", "C", "D", "D")];
        assert_eq!(compute_bvc(&perfect, R).unwrap(), 0.0);
        let mixed = vec![
            pair(R, "A", "A", "A", "B"),
            pair(R, "C", "C", "C", "D"),
            pair(R, "A", "A", "B", "B"),
        ];
        assert!((compute_bvc(&mixed, R).unwrap() - 66.67).abs() < 0.01);
        assert_eq!(round2(compute_bvc(&mixed, R).unwrap()), 66.67);
        let constant = vec![pair(R, "A", "A", "A", "B"), pair(R, "A", "C", "A", "B")];
        assert_eq!(compute_bvc(&constant, R).unwrap(), 100.0);
        assert_eq!(compute_bvc(&[], R).unwrap_err().to_string(), "no pairs");
        // pairs of the other kind do not count
        assert!(compute_bvc(&perfect, PairKind::Distorted).is_err());
    }

    #[test]
    fn joint_accuracy_examples() {
        let perfect = vec![pair(R, "A", "A", "B", "B")];
        assert_eq!(compute_joint_accuracy(&perfect, R).unwrap(), 100.0);
        let same = vec![pair(R, "A", "A", "A", "B"), pair(R, "B", "A", "B", "B")];
        assert_eq!(compute_joint_accuracy(&same, R).unwrap(), 0.0);
        let four = vec![
            pair(R, "A", "A", "B", "B"),
            pair(R, "A", "A", "C", "B"),
            pair(R, "C", "A", "B", "B"),
            pair(R, "D", "A", "B", "B"),
        ];
        assert_eq!(compute_joint_accuracy(&four, R).unwrap(), 25.0);
        assert!(compute_joint_accuracy(&[], R).is_err());
    }

    #[test]
    fn interplay_cells() {
        let rec = |o, f| IqpRecord {
            orig_correct: o,
            followup_correct: f,
        };
        assert_eq!(classify_interplay(&rec(true, true)), InterplayCell::CR);
        assert_eq!(classify_interplay(&rec(true, false)), InterplayCell::PR);
        assert_eq!(classify_interplay(&rec(false, true)), InterplayCell::PV);
        assert_eq!(classify_interplay(&rec(false, false)), InterplayCell::CV);
    }

    #[test]
    fn tcr_ra_examples() {
        let c = InterplayCounts::new(3, 2, 1, 4);
        assert_eq!(compute_tcr(&c).unwrap(), 60.0);
        assert_eq!(compute_ra(&c).unwrap(), 30.0);
        assert_eq!(
            compute_tcr(&InterplayCounts::new(5, 0, 2, 2)).unwrap(),
            100.0
        );
        assert_eq!(compute_tcr(&InterplayCounts::new(0, 3, 2, 2)).unwrap(), 0.0);
        assert_eq!(
            compute_ra(&InterplayCounts::new(4, 0, 0, 0)).unwrap(),
            100.0
        );
        assert_eq!(compute_ra(&InterplayCounts::new(0, 1, 1, 1)).unwrap(), 0.0);
        assert_eq!(
            compute_tcr(&InterplayCounts::new(0, 0, 1, 1))
                .unwrap_err()
                .to_string(),
            "no originally-correct samples"
        );
        assert!(compute_ra(&InterplayCounts::default()).is_err());
    }

    #[test]
    fn rounding_is_half_even() {
        assert_eq!(round2(0.125), 0.12);
        assert_eq!(round2(0.375), 0.38);
        assert_eq!(round2(200.0 / 3.0), 66.67);
    }

    #[test]
    fn gold_collision_rejected() {
        assert!(pair(R, "A", "A", "A", "A").validate().is_err());
        assert!(pair(R, "A", "A", "A", "B").validate().is_ok());
    }

    #[test]
    fn perfect_report_row() {
        let pairs = vec![
            pair(R, "A", "A", "B", "B"),
            pair(PairKind::Distorted, "C", "C", "A", "A"),
        ];
        let iqp = vec![
            IqpRecord {
                orig_correct: true,
                followup_correct: true,
            };
            3
        ];
        let report = MetricsReport::compute(&pairs, &iqp);
        assert_eq!(
            report.columns(),
            [
                Some(100.0),
                Some(0.0),
                Some(100.0),
                Some(0.0),
                Some(100.0),
                Some(100.0)
            ]
        );
        let table = render_table(&[("greedy".into(), report)]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(
            lines[0].split_whitespace().collect::<Vec<_>>(),
            ["strategy", "ACC_rel", "BVC_rel", "ACC_dis", "BVC_dis", "TCR", "RA"]
        );
        assert_eq!(
            lines[1].split_whitespace().collect::<Vec<_>>(),
            ["greedy", "100.00", "0.00", "100.00", "0.00", "100.00", "100.00"]
        );
    }

    fn arb_pair() -> impl Strategy<Value = AvcPairRecord> {
        let letter = prop::sample::select(vec!["A", "B", "C"]);
        (
            prop::bool::ANY,
            letter.clone(),
            letter.clone(),
            letter.clone(),
            letter,
        )
            .prop_map(|(rel, po, go, pc, gc)| {
                let kind = if rel {
                    PairKind::Relevant
                } else {
                    PairKind::Distorted
                };
                pair(kind, po, go, pc, gc)
            })
    }

    fn arb_iqp() -> impl Strategy<Value = IqpRecord> {
        (prop::bool::ANY, prop::bool::ANY).prop_map(|(orig_correct, followup_correct)| IqpRecord {
            orig_correct,
            followup_correct,
        })
    }

    proptest! {
        #[test]
        fn rates_are_bounded_and_disjoint(pairs in prop::collection::vec(arb_pair(), 1..40)) {
            for kind in [PairKind::Relevant, PairKind::Distorted] {
                let (Ok(bvc), Ok(acc)) = (compute_bvc(&pairs, kind), compute_joint_accuracy(&pairs, kind)) else {
                    continue;
                };
                prop_assert!((0.0..=100.0).contains(&bvc));
                prop_assert!((0.0..=100.0).contains(&acc));
                prop_assert!(bvc + acc <= 100.0 + 1e-9);
            }
        }

        #[test]
        fn ra_never_exceeds_tcr(records in prop::collection::vec(arb_iqp(), 1..60)) {
            let counts = InterplayCounts::from_records(&records);
            prop_assert_eq!(counts.total(), records.len() as u64);
            let ra = compute_ra(&counts).unwrap();
            prop_assert!((0.0..=100.0).contains(&ra));
            if let Ok(tcr) = compute_tcr(&counts) {
                prop_assert!((0.0..=100.0).contains(&tcr));
                prop_assert!(ra <= tcr);
            }
        }

        #[test]
        fn counting_is_partition_independent(
            records in prop::collection::vec(arb_iqp(), 0..60),
            cut in 0usize..60,
        ) {
            let cut = cut.min(records.len());
            let (left, right) = records.split_at(cut);
            let merged = InterplayCounts::from_records(right).merge(InterplayCounts::from_records(left));
            prop_assert_eq!(merged, InterplayCounts::from_records(&records));
        }

        #[test]
        fn round2_is_idempotent(x in -1e6f64..1e6) {
            let r = round2(x);
            prop_assert_eq!(round2(r), r);
            prop_assert!((r - x).abs() <= 0.005 + 1e-9);
        }
    }
}

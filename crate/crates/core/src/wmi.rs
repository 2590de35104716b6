//! Exact mutual information (MI), weighted mutual information (WMI) and
//! pointwise MI on small discrete joints `p(a, z)`.
//!
//! WMI weights each `(a, z)` term by the numeric outcome value `z`:
//! `Σ p(a,z) · z · log(p(a,z) / (p(a) p(z)))`. Natural log throughout.

use rand::Rng;

use crate::error::{Error, Result};

const NORMALIZATION_TOL: f64 = 1e-9;

/// A joint distribution over actions (rows) and numeric outcomes (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    actions: Vec<String>,
    outcomes: Vec<f64>,
    /// Row-major `actions.len() x outcomes.len()`.
    p: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(actions: Vec<String>, outcomes: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if p.len() != actions.len() * outcomes.len() {
            return Err(Error::Shape {
                expected: actions.len() * outcomes.len(),
                got: p.len(),
            });
        }
        if let Some(bad) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Distribution(format!("negative or non-finite entry {bad}")));
        }
        if let Some(bad) = outcomes.iter().find(|v| !v.is_finite()) {
            return Err(Error::Distribution(format!("non-finite outcome {bad}")));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Distribution(format!("joint sums to {total}, not 1")));
        }
        Ok(DiscreteJoint { actions, outcomes, p })
    }

    /// Build `p(a, z) = p(a) p(z | a)`.
    pub fn from_conditionals(p_action: &[f64], p_outcome_given_action: &[Vec<f64>], outcomes: Vec<f64>) -> Result<Self> {
        if p_action.len() != p_outcome_given_action.len() {
            return Err(Error::Shape {
                expected: p_action.len(),
                got: p_outcome_given_action.len(),
            });
        }
        let mut p = Vec::with_capacity(p_action.len() * outcomes.len());
        for (pa, row) in p_action.iter().zip(p_outcome_given_action) {
            if row.len() != outcomes.len() {
                return Err(Error::Shape {
                    expected: outcomes.len(),
                    got: row.len(),
                });
            }
            p.extend(row.iter().map(|pz| pa * pz));
        }
        let actions = (1..=p_action.len()).map(|i| format!("a{i}")).collect();
        Self::new(actions, outcomes, p)
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn num_outcomes(&self) -> usize {
        self.outcomes.len()
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn p(&self, a: usize, z: usize) -> f64 {
        self.p[a * self.outcomes.len() + z]
    }

    pub fn action_marginal(&self) -> Vec<f64> {
        (0..self.num_actions())
            .map(|a| (0..self.num_outcomes()).map(|z| self.p(a, z)).sum())
            .collect()
    }

    pub fn outcome_marginal(&self) -> Vec<f64> {
        (0..self.num_outcomes())
            .map(|z| (0..self.num_actions()).map(|a| self.p(a, z)).sum())
            .collect()
    }

    /// `p(a | z)` for every action.
    pub fn action_posterior(&self, z: usize) -> Vec<f64> {
        let pz = self.outcome_marginal()[z];
        (0..self.num_actions()).map(|a| self.p(a, z) / pz).collect()
    }

    /// Same joint with every outcome value multiplied by `c`.
    pub fn scale_outcomes(&self, c: f64) -> Self {
        DiscreteJoint {
            outcomes: self.outcomes.iter().map(|z| z * c).collect(),
            ..self.clone()
        }
    }

    /// Draw an `(action, outcome)` index pair.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (k, &p) in self.p.iter().enumerate() {
            if p > 0.0 {
                last = k;
            }
            acc += p;
            if u < acc {
                return (k / self.num_outcomes(), k % self.num_outcomes());
            }
        }
        (last / self.num_outcomes(), last % self.num_outcomes())
    }

    fn weighted_sum(&self, weight: impl Fn(usize) -> f64) -> f64 {
        let pa = self.action_marginal();
        let pz = self.outcome_marginal();
        let mut total = 0.0;
        for a in 0..self.num_actions() {
            for z in 0..self.num_outcomes() {
                let pj = self.p(a, z);
                if pj > 0.0 {
                    total += pj * weight(z) * (pj / (pa[a] * pz[z])).ln();
                }
            }
        }
        total
    }
}

pub fn mutual_information(joint: &DiscreteJoint) -> f64 {
    joint.weighted_sum(|_| 1.0)
}

/// MI with each term weighted by its outcome value.
pub fn weighted_mutual_information(joint: &DiscreteJoint) -> f64 {
    joint.weighted_sum(|z| joint.outcomes[z])
}

/// `log(p(a, z) / (p(a) p(z)))`. Zero marginals are an error; a zero joint
/// entry with positive marginals gives `-inf`.
pub fn pointwise_mi(joint: &DiscreteJoint, a: usize, z: usize) -> Result<f64> {
    if a >= joint.num_actions() || z >= joint.num_outcomes() {
        return Err(Error::Shape {
            expected: joint.num_actions() * joint.num_outcomes(),
            got: a * joint.num_outcomes() + z,
        });
    }
    let pa = joint.action_marginal()[a];
    let pz = joint.outcome_marginal()[z];
    if pa <= 0.0 || pz <= 0.0 {
        return Err(Error::Distribution(format!(
            "pointwise MI undefined with p(a)={pa}, p(z)={pz}"
        )));
    }
    Ok((joint.p(a, z) / (pa * pz)).ln())
}

/// Sample mean of `z * pmi(a, z)` over `draws` draws from the joint; an
/// unbiased estimate of the WMI.
pub fn monte_carlo_wmi<R: Rng + ?Sized>(joint: &DiscreteJoint, draws: usize, rng: &mut R) -> Result<f64> {
    if draws == 0 {
        return Err(Error::Usage("monte_carlo_wmi needs at least one draw".into()));
    }
    let pa = joint.action_marginal();
    let pz = joint.outcome_marginal();
    let mut total = 0.0;
    for _ in 0..draws {
        let (a, z) = joint.sample(rng);
        total += joint.outcomes[z] * (joint.p(a, z) / (pa[a] * pz[z])).ln();
    }
    Ok(total / draws as f64)
}

/// Outcome values of the two illustrative states: rewards 1, 5 and 9.
pub const ILLUSTRATIVE_OUTCOMES: [f64; 3] = [1.0, 5.0, 9.0];

/// `p(r | a)` rows for the two illustrative states. Both states give `a1`
/// the same distribution; they differ in whether `a2` mostly leads to the
/// lowest or the highest reward.
pub fn illustrative_conditionals(state: usize) -> Result<[[f64; 3]; 2]> {
    match state {
        1 => Ok([[0.1, 0.8, 0.1], [0.8, 0.1, 0.1]]),
        2 => Ok([[0.1, 0.8, 0.1], [0.1, 0.1, 0.8]]),
        other => Err(Error::Usage(format!("illustrative state must be 1 or 2, got {other}"))),
    }
}

pub fn illustrative_joint(state: usize, p_a1: f64) -> Result<DiscreteJoint> {
    if !(0.0..=1.0).contains(&p_a1) {
        return Err(Error::Distribution(format!("p(a1) = {p_a1} outside [0, 1]")));
    }
    let rows = illustrative_conditionals(state)?;
    DiscreteJoint::from_conditionals(
        &[p_a1, 1.0 - p_a1],
        &[rows[0].to_vec(), rows[1].to_vec()],
        ILLUSTRATIVE_OUTCOMES.to_vec(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub p_a1: f64,
    pub mi_s1: f64,
    pub mi_s2: f64,
    pub wmi_s1: f64,
    pub wmi_s2: f64,
}

/// MI and WMI of both illustrative states at every `p(a1)` in `grid`.
pub fn illustrative_sweep(grid: &[f64]) -> Result<Vec<SweepRow>> {
    grid.iter()
        .map(|&p_a1| {
            if !(p_a1 > 0.0 && p_a1 < 1.0) {
                return Err(Error::Distribution(format!("sweep point {p_a1} outside (0, 1)")));
            }
            let s1 = illustrative_joint(1, p_a1)?;
            let s2 = illustrative_joint(2, p_a1)?;
            Ok(SweepRow {
                p_a1,
                mi_s1: mutual_information(&s1),
                mi_s2: mutual_information(&s2),
                wmi_s1: weighted_mutual_information(&s1),
                wmi_s2: weighted_mutual_information(&s2),
            })
        })
        .collect()
}

/// Evenly spaced interior grid `step, 2*step, ...` strictly below 1.
pub fn interior_grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round() as usize;
    (1..n).map(|k| k as f64 * step).collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("p_a1,mi_s1,mi_s2,wmi_s1,wmi_s2\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.p_a1, r.mi_s1, r.mi_s2, r.wmi_s1, r.wmi_s2
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn independent() -> DiscreteJoint {
        DiscreteJoint::from_conditionals(
            &[0.3, 0.7],
            &[vec![0.2, 0.5, 0.3], vec![0.2, 0.5, 0.3]],
            vec![1.0, 4.0, 9.0],
        )
        .unwrap()
    }

    #[test]
    fn independent_joint_is_uninformative() {
        let j = independent();
        assert!(mutual_information(&j).abs() < 1e-15);
        assert!(weighted_mutual_information(&j).abs() < 1e-15);
        for a in 0..2 {
            for z in 0..3 {
                assert!(pointwise_mi(&j, a, z).unwrap().abs() < 1e-15);
            }
        }
    }

    #[test]
    fn deterministic_pair_carries_one_bit() {
        let j = DiscreteJoint::new(
            vec!["a1".into(), "a2".into()],
            vec![1.0, 2.0],
            vec![0.5, 0.0, 0.0, 0.5],
        )
        .unwrap();
        assert!((mutual_information(&j) - 2f64.ln()).abs() < 1e-15);
        assert!(pointwise_mi(&j, 0, 0).unwrap() > 0.0);
    }

    #[test]
    fn non_normalized_joint_rejected() {
        let err = DiscreteJoint::new(vec!["a".into()], vec![1.0, 2.0], vec![0.5, 0.4]);
        assert!(matches!(err, Err(Error::Distribution(_))));
        let err = DiscreteJoint::new(vec!["a".into()], vec![1.0, 2.0], vec![1.5, -0.5]);
        assert!(matches!(err, Err(Error::Distribution(_))));
    }

    #[test]
    fn zero_marginal_pointwise_is_an_error() {
        let j = DiscreteJoint::new(
            vec!["a1".into(), "a2".into()],
            vec![1.0, 2.0],
            vec![1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        assert!(pointwise_mi(&j, 1, 0).is_err());
        assert!(pointwise_mi(&j, 0, 1).is_err());
    }

    #[test]
    fn illustrative_blocks() {
        assert_eq!(illustrative_conditionals(1).unwrap(), [[0.1, 0.8, 0.1], [0.8, 0.1, 0.1]]);
        assert_eq!(illustrative_conditionals(2).unwrap()[1], [0.1, 0.1, 0.8]);
        assert!(illustrative_conditionals(3).is_err());
    }

    // Values from exact enumeration at p(a1) = 0.5 (2 actions x 3 outcomes),
    // computed independently at 50-digit precision.
    const MI_HALF: f64 = 0.309_883_576_245_222_08;
    const WMI_S1_HALF: f64 = 0.929_650_728_735_666_2;
    const WMI_S2_HALF: f64 = 2.169_185_033_716_554_5;

    #[test]
    fn illustrative_regression_at_half() {
        let s1 = illustrative_joint(1, 0.5).unwrap();
        let s2 = illustrative_joint(2, 0.5).unwrap();
        assert!((mutual_information(&s1) - MI_HALF).abs() < 1e-14);
        assert!((mutual_information(&s2) - MI_HALF).abs() < 1e-14);
        assert!((weighted_mutual_information(&s1) - WMI_S1_HALF).abs() < 1e-13);
        assert!((weighted_mutual_information(&s2) - WMI_S2_HALF).abs() < 1e-13);
    }

    #[test]
    fn sweep_contains_midpoint_and_orders_states() {
        let rows = illustrative_sweep(&interior_grid(0.1)).unwrap();
        assert_eq!(rows.len(), 9);
        assert!(rows.iter().any(|r| (r.p_a1 - 0.5).abs() < 1e-12));
        for r in &rows {
            assert!((r.mi_s1 - r.mi_s2).abs() < 1e-12);
            assert!(r.wmi_s2 > r.wmi_s1);
        }
        assert!(illustrative_sweep(&[0.0]).is_err());
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("p_a1,mi_s1,mi_s2,wmi_s1,wmi_s2\n"));
        assert_eq!(csv.lines().count(), 10);
    }

    fn arb_joint() -> impl Strategy<Value = DiscreteJoint> {
        (1usize..5, 1usize..6).prop_flat_map(|(na, nz)| {
            (
                prop::collection::vec(0.0f64..1.0, na * nz),
                prop::collection::vec(0.01f64..20.0, nz),
            )
                .prop_filter_map("zero mass", move |(w, z)| {
                    let total: f64 = w.iter().sum();
                    (total > 1e-6).then(|| {
                        let p = w.iter().map(|v| v / total).collect();
                        let actions = (0..na).map(|i| format!("a{i}")).collect();
                        DiscreteJoint::new(actions, z, p).unwrap()
                    })
                })
        })
    }

    proptest! {
        #[test]
        fn mi_is_non_negative(j in arb_joint()) {
            prop_assert!(mutual_information(&j) >= -1e-12);
        }

        #[test]
        fn outcome_scaling(j in arb_joint(), c in 0.01f64..100.0) {
            let scaled = j.scale_outcomes(c);
            let mi = mutual_information(&j);
            prop_assert!((mutual_information(&scaled) - mi).abs() <= 1e-12 * (1.0 + mi.abs()));
            let wmi = weighted_mutual_information(&j);
            let wmi_c = weighted_mutual_information(&scaled);
            prop_assert!((wmi_c - c * wmi).abs() <= 1e-9 * (1.0 + (c * wmi).abs()));
        }

        #[test]
        fn pointwise_terms_sum_to_wmi(j in arb_joint()) {
            let mut total = 0.0;
            for a in 0..j.num_actions() {
                for z in 0..j.num_outcomes() {
                    let p = j.p(a, z);
                    if p > 0.0 {
                        total += p * j.outcomes()[z] * pointwise_mi(&j, a, z).unwrap();
                    }
                }
            }
            let wmi = weighted_mutual_information(&j);
            prop_assert!((total - wmi).abs() <= 1e-10 * (1.0 + wmi.abs()));
        }
    }

    #[test]
    fn sampling_matches_probabilities() {
        let j = illustrative_joint(2, 0.3).unwrap();
        let mut r = rng::stream(1, &[]);
        let mut counts = [[0usize; 3]; 2];
        let n = 200_000;
        for _ in 0..n {
            let (a, z) = j.sample(&mut r);
            counts[a][z] += 1;
        }
        for a in 0..2 {
            for z in 0..3 {
                let freq = counts[a][z] as f64 / n as f64;
                assert!((freq - j.p(a, z)).abs() < 0.005);
            }
        }
    }
}

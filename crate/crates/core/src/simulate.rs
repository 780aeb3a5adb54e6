//! Synthetic panels drawn from the MMNL and context-aware MMNL generative
//! processes, with the ground truth needed by recovery experiments.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    validate_correlation, ChoiceDataset, ChoiceOccasion, ContextKind, ContextVector, Individual,
};
use crate::priors::mvn_from_standard;

/// Distribution of one attribute column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum AttributeDist {
    Normal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
    /// Indicator of one alternative (by position).
    Asc { alternative: usize },
}

impl Default for AttributeDist {
    fn default() -> Self {
        AttributeDist::Normal { mean: 0.0, sd: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    #[serde(default)]
    pub dist: AttributeDist,
}

/// Distribution of one context dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum ContextDist {
    Bernoulli { p: f64 },
    /// Zero with probability `1 - p_positive`, otherwise exponential.
    Exponential { rate: f64, p_positive: f64 },
    Uniform { low: f64, high: f64 },
    Constant { value: f64 },
}

impl ContextDist {
    pub fn kind(&self) -> ContextKind {
        match self {
            ContextDist::Bernoulli { .. } => ContextKind::Binary,
            _ => ContextKind::Continuous,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            ContextDist::Bernoulli { p } => f64::from(u8::from(rng.random::<f64>() < p)),
            ContextDist::Exponential { rate, p_positive } => {
                let u: f64 = rng.random();
                let x = Exp::new(rate).expect("validated rate").sample(rng);
                if u < p_positive {
                    x
                } else {
                    0.0
                }
            }
            ContextDist::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            ContextDist::Constant { value } => value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub name: String,
    pub dist: ContextDist,
}

/// Planted map from a context vector to a shift of the full taste vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftSpec {
    #[default]
    None,
    /// `M c` with `M` given as `L+K` rows of `C` entries.
    Linear { matrix: Vec<Vec<f64>> },
    /// `shift` when both binary dimensions are 1, zero otherwise.
    InteractionCell { dims: [usize; 2], shift: Vec<f64> },
    /// `effect * rain * (1 - mitigation * commute)`.
    RainCommute {
        rain: usize,
        commute: usize,
        effect: Vec<f64>,
        mitigation: f64,
    },
    /// `amplitude * (1 - exp(-rate * c[dim]))`.
    Saturating { dim: usize, amplitude: Vec<f64>, rate: f64 },
}

impl ShiftSpec {
    pub fn is_none(&self) -> bool {
        matches!(self, ShiftSpec::None)
    }

    fn check(&self, p: usize, c: usize) -> Result<()> {
        let vec_len = |v: &Vec<f64>| {
            if v.len() == p {
                Ok(())
            } else {
                Err(Error::dims("shift vector", p, v.len()))
            }
        };
        let dim = |d: usize| {
            if d < c {
                Ok(())
            } else {
                Err(Error::invalid(format!("shift refers to context dimension {d} of {c}")))
            }
        };
        match self {
            ShiftSpec::None => Ok(()),
            ShiftSpec::Linear { matrix } => {
                if matrix.len() != p {
                    return Err(Error::dims("shift matrix rows", p, matrix.len()));
                }
                match matrix.iter().find(|r| r.len() != c) {
                    Some(r) => Err(Error::dims("shift matrix columns", c, r.len())),
                    None => Ok(()),
                }
            }
            ShiftSpec::InteractionCell { dims, shift } => {
                dim(dims[0])?;
                dim(dims[1])?;
                vec_len(shift)
            }
            ShiftSpec::RainCommute { rain, commute, effect, .. } => {
                dim(*rain)?;
                dim(*commute)?;
                vec_len(effect)
            }
            ShiftSpec::Saturating { dim: d, amplitude, rate } => {
                dim(*d)?;
                if !(*rate > 0.0) {
                    return Err(Error::invalid("saturating rate must be positive"));
                }
                vec_len(amplitude)
            }
        }
    }

    /// Shift at context `c` for a taste vector of length `p`.
    pub fn eval(&self, c: &[f64], p: usize) -> Vec<f64> {
        match self {
            ShiftSpec::None => vec![0.0; p],
            ShiftSpec::Linear { matrix } => matrix
                .iter()
                .map(|row| row.iter().zip(c).map(|(m, x)| m * x).sum())
                .collect(),
            ShiftSpec::InteractionCell { dims, shift } => {
                let on = c[dims[0]] == 1.0 && c[dims[1]] == 1.0;
                shift.iter().map(|s| if on { *s } else { 0.0 }).collect()
            }
            ShiftSpec::RainCommute { rain, commute, effect, mitigation } => {
                let f = c[*rain] * (1.0 - mitigation * c[*commute]);
                effect.iter().map(|e| e * f).collect()
            }
            ShiftSpec::Saturating { dim, amplitude, rate } => {
                let f = 1.0 - (-rate * c[*dim]).exp();
                amplitude.iter().map(|a| a * f).collect()
            }
        }
    }
}

/// Full description of a synthetic panel. The first `true_alpha.len()`
/// attributes carry fixed coefficients, the rest random ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub n_individuals: usize,
    pub occasions_per_individual: usize,
    pub n_alternatives: usize,
    pub attributes: Vec<AttributeSpec>,
    pub true_alpha: Vec<f64>,
    #[serde(default)]
    pub true_zeta: Vec<f64>,
    #[serde(default)]
    pub true_tau: Vec<f64>,
    /// Row-major `K x K` correlation; identity when empty.
    #[serde(default)]
    pub true_psi: Vec<f64>,
    #[serde(default)]
    pub context: Vec<ContextSpec>,
    #[serde(default)]
    pub shift: ShiftSpec,
    /// Variance of the occasion shift around the planted function.
    #[serde(default)]
    pub sigma_c: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SimSpec {
    pub fn n_fixed(&self) -> usize {
        self.true_alpha.len()
    }

    pub fn n_random(&self) -> usize {
        self.true_zeta.len()
    }

    pub fn n_params(&self) -> usize {
        self.n_fixed() + self.n_random()
    }

    pub fn psi(&self) -> DMatrix<f64> {
        let k = self.n_random();
        if self.true_psi.is_empty() {
            DMatrix::identity(k, k)
        } else {
            DMatrix::from_row_slice(k, k, &self.true_psi)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_individuals == 0 || self.occasions_per_individual == 0 {
            return Err(Error::invalid("need at least one individual and one occasion"));
        }
        if self.n_alternatives < 2 {
            return Err(Error::invalid("need at least two alternatives"));
        }
        let p = self.n_params();
        if self.attributes.len() != p {
            return Err(Error::dims("attribute specs", p, self.attributes.len()));
        }
        if self.true_tau.len() != self.n_random() {
            return Err(Error::dims("true_tau", self.n_random(), self.true_tau.len()));
        }
        if self.true_tau.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::invalid("true_tau must be non-negative"));
        }
        let k = self.n_random();
        if !self.true_psi.is_empty() && self.true_psi.len() != k * k {
            return Err(Error::dims("true_psi entries", k * k, self.true_psi.len()));
        }
        if k > 0 {
            validate_correlation(&self.psi())?;
        }
        for a in &self.attributes {
            match a.dist {
                AttributeDist::Normal { sd, .. } if !(sd >= 0.0) => {
                    return Err(Error::invalid(format!("attribute '{}': negative sd", a.name)))
                }
                AttributeDist::Uniform { low, high } if !(high >= low) => {
                    return Err(Error::invalid(format!("attribute '{}': empty range", a.name)))
                }
                AttributeDist::Asc { alternative } if alternative >= self.n_alternatives => {
                    return Err(Error::invalid(format!("attribute '{}': no such alternative", a.name)))
                }
                _ => {}
            }
        }
        for c in &self.context {
            let ok = match c.dist {
                ContextDist::Bernoulli { p } => (0.0..=1.0).contains(&p),
                ContextDist::Exponential { rate, p_positive } => {
                    rate > 0.0 && (0.0..=1.0).contains(&p_positive)
                }
                ContextDist::Uniform { low, high } => high >= low,
                ContextDist::Constant { value } => value.is_finite(),
            };
            if !ok {
                return Err(Error::invalid(format!("context '{}': invalid distribution", c.name)));
            }
        }
        self.shift.check(p, self.context.len())?;
        if !(self.sigma_c >= 0.0) {
            return Err(Error::invalid("sigma_c must be non-negative"));
        }
        Ok(())
    }
}

/// Every latent draw behind a synthetic panel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub alpha: Vec<f64>,
    pub zeta: Vec<f64>,
    pub tau: Vec<f64>,
    pub psi: Vec<f64>,
    /// Per individual.
    pub betas: Vec<Vec<f64>>,
    /// Per occasion, in dataset order.
    pub shifts: Vec<Vec<f64>>,
    pub shift: ShiftSpec,
    pub sigma_c: f64,
    /// Log-likelihood of the generated choices under the drawn latents.
    pub log_likelihood: f64,
}

impl GroundTruth {
    /// Planted shift function (without occasion noise).
    pub fn planted_shift(&self, c: &[f64]) -> Vec<f64> {
        self.shift.eval(c, self.alpha.len() + self.zeta.len())
    }
}

fn individual_rng(seed: u64, n: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n as u64 + 1);
    rng
}

fn generate(spec: &SimSpec) -> Result<(ChoiceDataset, GroundTruth)> {
    spec.validate()?;
    let (l, k, p, j) = (spec.n_fixed(), spec.n_random(), spec.n_params(), spec.n_alternatives);
    // chol(Omega) = diag(tau) chol(Psi); also valid when some tau is zero.
    let chol = if k > 0 {
        let psi_chol = spec
            .psi()
            .cholesky()
            .ok_or_else(|| Error::invalid("true_psi is not positive definite"))?
            .l();
        DMatrix::from_fn(k, k, |r, c| spec.true_tau[r] * psi_chol[(r, c)])
    } else {
        DMatrix::zeros(0, 0)
    };
    let alt_ids: Vec<String> = (1..=j).map(|a| format!("alt{a}")).collect();
    let mut individuals = Vec::with_capacity(spec.n_individuals);
    let mut betas = Vec::with_capacity(spec.n_individuals);
    let mut shifts = Vec::new();
    let mut log_lik = 0.0;
    let mut occasion_id = 0u64;

    for n in 0..spec.n_individuals {
        let mut rng = individual_rng(spec.seed, n);
        let beta = if k > 0 {
            let eps: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            mvn_from_standard(&spec.true_zeta, &chol, &eps)?
        } else {
            Vec::new()
        };
        let mut occasions = Vec::with_capacity(spec.occasions_per_individual);
        for _ in 0..spec.occasions_per_individual {
            occasion_id += 1;
            let context: Vec<f64> = spec.context.iter().map(|c| c.dist.sample(&mut rng)).collect();
            let mut attributes = DMatrix::zeros(j, p);
            for (col, a) in spec.attributes.iter().enumerate() {
                for alt in 0..j {
                    attributes[(alt, col)] = match a.dist {
                        AttributeDist::Normal { mean, sd } => {
                            mean + sd * rng.sample::<f64, _>(StandardNormal)
                        }
                        AttributeDist::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
                        AttributeDist::Asc { alternative } => f64::from(u8::from(alt == alternative)),
                    };
                }
            }
            let mut mu = spec.shift.eval(&context, p);
            if spec.sigma_c > 0.0 && !spec.shift.is_none() {
                let sd = spec.sigma_c.sqrt();
                for m in &mut mu {
                    *m += sd * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let eta: Vec<f64> = spec
                .true_alpha
                .iter()
                .chain(&beta)
                .zip(&mu)
                .map(|(e, m)| e + m)
                .collect();
            let v: Vec<f64> = (0..j)
                .map(|alt| (0..p).map(|c| attributes[(alt, c)] * eta[c]).sum())
                .collect();
            let vmax = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = v.iter().map(|x| (x - vmax).exp()).collect();
            let total: f64 = weights.iter().sum();
            let u: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = j - 1;
            for (alt, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    chosen = alt;
                    break;
                }
            }
            log_lik += v[chosen] - vmax - total.ln();
            if !spec.shift.is_none() {
                shifts.push(mu);
            }
            occasions.push(ChoiceOccasion {
                occasion_id,
                alt_ids: alt_ids.clone(),
                attributes,
                availability: vec![true; j],
                log_path_size: None,
                context: ContextVector(context),
                chosen,
            });
        }
        individuals.push(Individual { id: format!("{}", n + 1), occasions });
        betas.push(beta);
    }
    let data = ChoiceDataset {
        individuals,
        column_names: spec.attributes.iter().map(|a| a.name.clone()).collect(),
        n_fixed: l,
        context_names: spec.context.iter().map(|c| c.name.clone()).collect(),
        context_kinds: spec.context.iter().map(|c| c.dist.kind()).collect(),
        variable_choice_set: false,
    };
    data.validate()?;
    let truth = GroundTruth {
        alpha: spec.true_alpha.clone(),
        zeta: spec.true_zeta.clone(),
        tau: spec.true_tau.clone(),
        psi: spec.psi().transpose().as_slice().to_vec(),
        betas,
        shifts,
        shift: spec.shift.clone(),
        sigma_c: spec.sigma_c,
        log_likelihood: log_lik,
    };
    Ok((data, truth))
}

/// Panel from the mixed logit process; context columns, if any, are drawn
/// but have no effect on choices.
pub fn generate_mmnl(spec: &SimSpec) -> Result<(ChoiceDataset, GroundTruth)> {
    if !spec.shift.is_none() {
        return Err(Error::invalid("generate_mmnl needs shift = none"));
    }
    generate(spec)
}

/// Panel from the context-aware process: each occasion's tastes move by the
/// planted shift plus Gaussian noise of variance `sigma_c`.
pub fn generate_cmmnl(spec: &SimSpec) -> Result<(ChoiceDataset, GroundTruth)> {
    if spec.shift.is_none() {
        return Err(Error::invalid("generate_cmmnl needs a planted shift"));
    }
    if spec.context.is_empty() {
        return Err(Error::invalid("generate_cmmnl needs at least one context dimension"));
    }
    generate(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal(name: &str) -> AttributeSpec {
        AttributeSpec { name: name.into(), dist: AttributeDist::default() }
    }

    fn base_spec() -> SimSpec {
        SimSpec {
            n_individuals: 20,
            occasions_per_individual: 3,
            n_alternatives: 3,
            attributes: vec![normal("a"), normal("b")],
            true_alpha: vec![0.5],
            true_zeta: vec![-1.0],
            true_tau: vec![0.5],
            true_psi: vec![],
            context: vec![ContextSpec { name: "rain".into(), dist: ContextDist::Bernoulli { p: 0.5 } }],
            shift: ShiftSpec::None,
            sigma_c: 0.0,
            seed: 3,
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let (a, ta) = generate_mmnl(&base_spec()).unwrap();
        let (b, tb) = generate_mmnl(&base_spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let other = SimSpec { seed: 4, ..base_spec() };
        assert_ne!(generate_mmnl(&other).unwrap().0, a);
    }

    #[test]
    fn linear_shift_without_noise_is_exact() {
        let spec = SimSpec {
            shift: ShiftSpec::Linear { matrix: vec![vec![0.3], vec![-0.7]] },
            ..base_spec()
        };
        let (data, truth) = generate_cmmnl(&spec).unwrap();
        for (occ, mu) in data.occasions().zip(&truth.shifts) {
            let c = occ.context.0[0];
            assert_eq!(mu, &vec![0.3 * c, -0.7 * c]);
        }
    }

    #[test]
    fn vanishing_shift_at_zero_context_matches_mmnl() {
        let zero_ctx = vec![ContextSpec { name: "rain".into(), dist: ContextDist::Constant { value: 0.0 } }];
        let mmnl = SimSpec { context: zero_ctx.clone(), ..base_spec() };
        let cmmnl = SimSpec {
            context: zero_ctx,
            shift: ShiftSpec::Saturating { dim: 0, amplitude: vec![1.0, 2.0], rate: 1.0 },
            ..base_spec()
        };
        assert_eq!(generate_mmnl(&mmnl).unwrap().0, generate_cmmnl(&cmmnl).unwrap().0);
    }

    #[test]
    fn planted_shapes() {
        let cell = ShiftSpec::InteractionCell { dims: [0, 1], shift: vec![0.5] };
        assert_eq!(cell.eval(&[1.0, 1.0], 1), vec![0.5]);
        assert_eq!(cell.eval(&[1.0, 0.0], 1), vec![0.0]);
        let rc = ShiftSpec::RainCommute { rain: 0, commute: 1, effect: vec![-0.4], mitigation: 0.5 };
        assert!((rc.eval(&[2.0, 1.0], 1)[0] + 0.4).abs() < 1e-15);
        assert!((rc.eval(&[2.0, 0.0], 1)[0] + 0.8).abs() < 1e-15);
        let sat = ShiftSpec::Saturating { dim: 0, amplitude: vec![1.0], rate: 2.0 };
        assert_eq!(sat.eval(&[0.0], 1), vec![0.0]);
        assert!((sat.eval(&[50.0], 1)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_inconsistent_specs() {
        let bad = SimSpec { true_tau: vec![], ..base_spec() };
        assert!(bad.validate().is_err());
        let bad = SimSpec { true_psi: vec![1.0, 0.0, 0.0, 1.0], ..base_spec() };
        assert!(bad.validate().is_err());
        assert!(generate_cmmnl(&base_spec()).is_err());
        let shifted = SimSpec { shift: ShiftSpec::InteractionCell { dims: [0, 1], shift: vec![0.5, 0.5] }, ..base_spec() };
        assert!(shifted.validate().is_err());
    }
}

//! Central-difference verification of the tape's analytic gradients.
//!
//! Both the analytic gradients and the finite-difference reference are
//! computed in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::encoder::{encoder_forward, init_params, seeded_normal, EncoderConfig};
use super::tape::Tape;
use super::tensor::{Gradients, ParamStore, Tensor};
use super::NnError;
use crate::deptree::{DepTree, SubwordAlignment};
use crate::posenc::{PositionAnnotation, PositionConfig};

pub const MIN_SAMPLES_PER_GROUP: usize = 50;

/// Denominator floor of the relative error. Entries whose gradient is far
/// below the loss scale are compared in absolute terms (|a - n| < 1e-6 at the
/// 1e-4 tolerance), because the O(eps^2) truncation term of the central
/// difference does not shrink with the gradient itself.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-2;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub sampled: usize,
    pub max_rel_error: f64,
    /// Entry index, analytic and numeric gradient at the worst entry.
    pub worst: (usize, f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn worst_group(&self) -> Option<&GroupCheck> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares `grads` against central differences of `loss` on up to
/// `per_group` sampled entries of every parameter.
pub fn compare_with_finite_differences<R: Rng>(
    params: &ParamStore<f64>,
    grads: &Gradients<f64>,
    loss: impl Fn(&ParamStore<f64>) -> f64,
    epsilon: f64,
    per_group: usize,
    rng: &mut R,
) -> Result<GradCheckReport, NnError> {
    if !(epsilon > 0.0) {
        return Err(NnError::PrecisionLoss(epsilon));
    }
    let mut work = params.clone();
    let mut groups = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let id = params.id(name)?;
        let n = tensor.numel();
        let picks: Vec<usize> = if n <= per_group {
            (0..n).collect()
        } else {
            let mut v = sample(rng, n, per_group).into_vec();
            v.sort_unstable();
            v
        };
        let mut group = GroupCheck {
            name: name.to_string(),
            sampled: picks.len(),
            max_rel_error: 0.0,
            worst: (0, 0.0, 0.0),
        };
        for k in picks {
            let original = tensor.data()[k];
            work.by_id_mut(id).data_mut()[k] = original + epsilon;
            let up = loss(&work);
            work.by_id_mut(id).data_mut()[k] = original - epsilon;
            let down = loss(&work);
            work.by_id_mut(id).data_mut()[k] = original;
            let numeric = (up - down) / (2.0 * epsilon);
            let analytic = grads.get(id).map_or(0.0, |g| g[k]);
            let err = relative_error(analytic, numeric);
            if err > group.max_rel_error || group.worst == (0, 0.0, 0.0) {
                group.max_rel_error = group.max_rel_error.max(err);
                group.worst = (k, analytic, numeric);
            }
        }
        groups.push(group);
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        groups,
    })
}

/// Gradient check of a whole encoder configuration on a random sentence.
///
/// Parameters start from the regular initialisation with every constant
/// (layer-norm gains, biases) jittered, so that no entry sits at a symmetric
/// point. The loss is a fixed random projection of the encoder output.
pub fn grad_check(
    config: &EncoderConfig,
    seed: u64,
    epsilon: f64,
) -> Result<GradCheckReport, NnError> {
    if !(epsilon > 0.0) {
        return Err(NnError::PrecisionLoss(epsilon));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = 6;
    let tree = DepTree::random(len, &mut rng, true);
    let pos_cfg = PositionConfig {
        d_model: config.d_model,
        r_clip: config.r_clip,
        fusion_mode: config.fusion_mode,
        ..PositionConfig::default()
    };
    let ann =
        PositionAnnotation::annotate(&tree, &SubwordAlignment::identity(len, false), &pos_cfg)?;
    let tokens: Vec<usize> = (0..len)
        .map(|_| rng.gen_range(0..config.vocab_size))
        .collect();

    let mut params: ParamStore<f64> = init_params(config, seed);
    for (name, t) in params.iter_mut() {
        let jitter: Tensor<f64> = seeded_normal(seed ^ 0x5eed, name, t.shape(), 0.1);
        t.data_mut()
            .iter_mut()
            .zip(jitter.data())
            .for_each(|(v, j)| *v += j);
    }
    let weights: Vec<f64> = (0..len * config.d_model)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();

    let loss_of = |p: &ParamStore<f64>| -> f64 {
        let mut tape = Tape::new(p);
        let trace = encoder_forward(&mut tape, config, &tokens, &ann).expect("validated inputs");
        let l = tape.weighted_sum(trace.output, weights.clone());
        tape.value(l).data()[0]
    };
    let grads = {
        let mut tape = Tape::new(&params);
        let trace = encoder_forward(&mut tape, config, &tokens, &ann)?;
        let l = tape.weighted_sum(trace.output, weights.clone());
        tape.backward(l)?
    };
    compare_with_finite_differences(
        &params,
        &grads,
        loss_of,
        epsilon,
        MIN_SAMPLES_PER_GROUP,
        &mut rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AblationRow;

    fn tiny(row: u8) -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ffn: 12,
            r_clip: 2,
            vocab_size: 11,
            ..EncoderConfig::default()
        }
        .with_row(AblationRow::new(row).unwrap())
    }

    #[test]
    fn zero_epsilon_is_rejected() {
        assert!(matches!(
            grad_check(&tiny(9), 7, 0.0),
            Err(NnError::PrecisionLoss(_))
        ));
    }

    fn default_row(row: u8) -> EncoderConfig {
        EncoderConfig::default().with_row(AblationRow::new(row).unwrap())
    }

    #[test]
    fn rows_one_and_nine_pass() {
        for row in [1, 9] {
            let report = grad_check(&default_row(row), 7, 1e-3).unwrap();
            let worst = report.worst_group().unwrap();
            assert!(report.max_rel_error < 1e-4, "row {row}: {worst:?}");
            assert!(report
                .groups
                .iter()
                .all(|g| g.sampled >= MIN_SAMPLES_PER_GROUP.min(g.sampled)));
        }
    }

    #[test]
    fn truncation_error_shrinks_with_epsilon() {
        // A small model is strongly curved, so at eps 1e-3 the reference is
        // limited by truncation; a finer step must tighten it quadratically.
        for row in [5, 7, 9] {
            let coarse = grad_check(&tiny(row), 7, 1e-3).unwrap().max_rel_error;
            let fine = grad_check(&tiny(row), 7, 1e-4).unwrap().max_rel_error;
            assert!(fine < 2e-5, "row {row}: {fine}");
            assert!(fine < coarse / 10.0, "row {row}: {coarse} -> {fine}");
        }
    }

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 1e-7).abs() < 1e-20);
    }
}

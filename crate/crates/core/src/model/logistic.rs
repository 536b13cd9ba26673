use super::{Dataset, LossReport, ModelError, ModelShape, ParameterVector, Sample};

/// All-zeros parameters of length `feature_dim * class_count`.
pub fn init_model(feature_dim: usize, class_count: usize) -> Result<ParameterVector, ModelError> {
    let shape = ModelShape::new(feature_dim, class_count)?;
    Ok(ParameterVector::zeros(shape.param_len()))
}

fn infer_shape(params: &ParameterVector, samples: &[Sample]) -> Result<ModelShape, ModelError> {
    let feature_dim = samples[0].features.len();
    if feature_dim == 0 || !params.len().is_multiple_of(feature_dim) {
        return Err(ModelError::ShapeMismatch {
            params: params.len(),
            feature_dim,
        });
    }
    let shape = ModelShape::new(feature_dim, params.len() / feature_dim)?;
    for s in samples {
        if s.features.len() != feature_dim {
            return Err(ModelError::FeatureDim {
                expected: feature_dim,
                found: s.features.len(),
            });
        }
        if s.label >= shape.class_count {
            return Err(ModelError::LabelOutOfRange {
                label: s.label,
                class_count: shape.class_count,
            });
        }
    }
    Ok(shape)
}

fn logits_into(params: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (c, z) in out.iter_mut().enumerate() {
        *z = params[c * d..(c + 1) * d]
            .iter()
            .zip(x)
            .map(|(w, xi)| w * xi)
            .sum();
    }
}

/// Overwrites `z` with softmax probabilities and returns log-sum-exp.
fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// Mean cross-entropy gradient over `batch`.
pub fn compute_gradient(
    params: &ParameterVector,
    batch: &Dataset,
) -> Result<ParameterVector, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let shape = infer_shape(params, &batch.samples)?;
    Ok(gradient_unchecked(params, &batch.samples, shape))
}

fn gradient_unchecked(params: &[f64], samples: &[Sample], shape: ModelShape) -> ParameterVector {
    let d = shape.feature_dim;
    let mut grad = vec![0.0; params.len()];
    let mut probs = vec![0.0; shape.class_count];
    for s in samples {
        logits_into(params, &s.features, &mut probs);
        softmax_in_place(&mut probs);
        probs[s.label] -= 1.0;
        for (c, &err) in probs.iter().enumerate() {
            for (g, &x) in grad[c * d..(c + 1) * d].iter_mut().zip(&s.features) {
                *g += err * x;
            }
        }
    }
    let n = samples.len() as f64;
    for g in &mut grad {
        *g /= n;
    }
    ParameterVector::from_vec(grad)
}

/// Result of a local training pass. A device without data is `passive`: it
/// returns its parameters untouched and contributes no aggregation weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub params: ParameterVector,
    pub passive: bool,
}

/// `steps` full-batch gradient-descent steps with fixed step size `lr`.
pub fn local_update(
    params: &ParameterVector,
    data: &Dataset,
    steps: usize,
    lr: f64,
) -> Result<LocalUpdate, ModelError> {
    if data.is_empty() {
        return Ok(LocalUpdate {
            params: params.clone(),
            passive: true,
        });
    }
    if !lr.is_finite() || lr <= 0.0 {
        return Err(ModelError::InvalidConfig(format!(
            "learning rate {lr} must be positive"
        )));
    }
    let shape = infer_shape(params, &data.samples)?;
    let mut w = params.clone();
    for _ in 0..steps {
        let grad = gradient_unchecked(&w, &data.samples, shape);
        for (wi, gi) in w.iter_mut().zip(grad.iter()) {
            *wi -= lr * gi;
        }
    }
    Ok(LocalUpdate {
        params: w,
        passive: false,
    })
}

/// Mean cross-entropy (nats) and argmax accuracy. Argmax ties go to the
/// lowest class index.
pub fn evaluate(params: &ParameterVector, data: &Dataset) -> Result<LossReport, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let shape = infer_shape(params, &data.samples)?;
    let mut z = vec![0.0; shape.class_count];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in &data.samples {
        logits_into(params, &s.features, &mut z);
        let mut best = 0;
        for c in 1..z.len() {
            if z[c] > z[best] {
                best = c;
            }
        }
        if best == s.label {
            correct += 1;
        }
        let true_logit = z[s.label];
        let lse = softmax_in_place(&mut z);
        loss += lse - true_logit;
    }
    let n = data.len();
    Ok(LossReport {
        loss: (loss / n as f64).max(0.0),
        accuracy: correct as f64 / n as f64,
        sample_count: n,
    })
}

/// Full-batch descent on pooled data for `rounds * steps` steps, starting from
/// the zero model.
pub fn centralized_train(
    all_data: &Dataset,
    shape: ModelShape,
    rounds: usize,
    steps: usize,
    lr: f64,
) -> Result<ParameterVector, ModelError> {
    if all_data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let init = ParameterVector::zeros(shape.param_len());
    Ok(local_update(&init, all_data, rounds * steps, lr)?.params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(samples: Vec<(Vec<f64>, usize)>) -> Dataset {
        Dataset::new(
            None,
            samples
                .into_iter()
                .map(|(x, y)| Sample::new(x, y))
                .collect(),
        )
    }

    fn separable() -> Dataset {
        ds(vec![
            (vec![1.0, 2.0], 1),
            (vec![2.0, 1.5], 1),
            (vec![1.5, 1.0], 1),
            (vec![-1.0, -2.0], 0),
            (vec![-2.0, -0.5], 0),
            (vec![-0.5, -1.5], 0),
        ])
    }

    #[test]
    fn init_model_lengths() {
        assert_eq!(init_model(2, 2).unwrap(), ParameterVector::zeros(4));
        assert_eq!(init_model(3, 4).unwrap(), ParameterVector::zeros(12));
        assert!(matches!(
            init_model(3, 1),
            Err(ModelError::InvalidConfig(_))
        ));
    }

    #[test]
    fn zero_model_loss_is_ln_c() {
        let data = ds(vec![
            (vec![0.3, -1.0], 0),
            (vec![2.0, 0.5], 2),
            (vec![1.0, 1.0], 1),
        ]);
        let report = evaluate(&init_model(2, 3).unwrap(), &data).unwrap();
        assert!((report.loss - 3f64.ln()).abs() < 1e-12);
        assert!((report.loss - 1.0986).abs() < 1e-4);
        // all logits tie, so every prediction is class 0
        assert!((report.accuracy - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_at_zero_binary() {
        let data = ds(vec![(vec![1.0, 2.0], 1)]);
        let g = compute_gradient(&init_model(2, 2).unwrap(), &data).unwrap();
        assert_eq!(g.as_slice(), &[0.5, 1.0, -0.5, -1.0]);
    }

    #[test]
    fn gradient_errors() {
        let empty = Dataset::default();
        assert_eq!(
            compute_gradient(&ParameterVector::zeros(4), &empty),
            Err(ModelError::EmptyBatch)
        );
        let data = ds(vec![(vec![1.0, 2.0, 3.0], 0)]);
        assert!(matches!(
            compute_gradient(&ParameterVector::zeros(4), &data),
            Err(ModelError::ShapeMismatch { .. })
        ));
        let data = ds(vec![(vec![1.0, 2.0], 5)]);
        assert!(matches!(
            compute_gradient(&ParameterVector::zeros(4), &data),
            Err(ModelError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn local_update_identity_and_composition() {
        let data = separable();
        let w0 = init_model(2, 2).unwrap();
        assert_eq!(local_update(&w0, &data, 0, 0.1).unwrap().params, w0);
        let twice = local_update(&w0, &data, 2, 0.1).unwrap().params;
        let once = local_update(&w0, &data, 1, 0.1).unwrap().params;
        let again = local_update(&once, &data, 1, 0.1).unwrap().params;
        assert_eq!(twice, again);
    }

    #[test]
    fn update_rule_on_quadratic_surrogate() {
        // same step w <- w - lr * grad with grad of 0.5 (w-1)^2
        let (w, lr) = (0.0f64, 0.1);
        let grad = w - 1.0;
        assert!((w - lr * grad - 0.1).abs() < 1e-15);
    }

    #[test]
    fn empty_dataset_marks_passive() {
        let w = ParameterVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let out = local_update(&w, &Dataset::default(), 5, 0.1).unwrap();
        assert!(out.passive);
        assert_eq!(out.params, w);
        assert_eq!(
            evaluate(&w, &Dataset::default()),
            Err(ModelError::EmptyDataset)
        );
    }

    #[test]
    fn trained_separable_model_is_accurate_and_stationary() {
        let data = separable();
        let w = local_update(&init_model(2, 2).unwrap(), &data, 20_000, 0.5)
            .unwrap()
            .params;
        let report = evaluate(&w, &data).unwrap();
        assert_eq!(report.accuracy, 1.0);
        // separable data has no finite minimizer; the gradient vanishes along
        // the descent path instead
        assert!(compute_gradient(&w, &data).unwrap().norm() < 1e-3);
    }

    #[test]
    fn gradient_vanishes_at_finite_minimizer() {
        // non-separable set: a finite minimizer exists
        let data = ds(vec![
            (vec![1.0, 0.5], 1),
            (vec![0.8, -0.2], 0),
            (vec![-1.0, 0.3], 0),
            (vec![-0.7, -0.9], 1),
            (vec![0.2, 1.1], 1),
            (vec![0.1, -1.2], 0),
        ]);
        let w = local_update(&init_model(2, 2).unwrap(), &data, 50_000, 0.5)
            .unwrap()
            .params;
        assert!(compute_gradient(&w, &data).unwrap().norm() < 1e-8);
    }

    #[test]
    fn centralized_matches_single_holder_update() {
        let data = separable();
        let shape = ModelShape::new(2, 2).unwrap();
        let a = centralized_train(&data, shape, 7, 3, 0.05).unwrap();
        let b = local_update(&init_model(2, 2).unwrap(), &data, 21, 0.05)
            .unwrap()
            .params;
        assert_eq!(a, b);
    }
}

use crate::data::LabeledDataset;
use crate::distill::EnsembleSpec;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, forward, Batch, NetworkSpec, ParameterVector};

/// A single model or a logit-averaged ensemble.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a ParameterVector),
    Ensemble(&'a EnsembleSpec),
}

impl<'a> From<&'a ParameterVector> for Predictor<'a> {
    fn from(w: &'a ParameterVector) -> Self {
        Predictor::Model(w)
    }
}

impl<'a> From<&'a EnsembleSpec> for Predictor<'a> {
    fn from(e: &'a EnsembleSpec) -> Self {
        Predictor::Ensemble(e)
    }
}

/// Predicted classes; ties go to the lowest class index. Softmax is monotone,
/// so the argmax of averaged logits equals that of the teacher probabilities.
pub fn predict<'a>(spec: &NetworkSpec, model: impl Into<Predictor<'a>>, data: &LabeledDataset) -> Result<Vec<usize>> {
    let logits = match model.into() {
        Predictor::Model(w) => forward(spec, w, &Batch::unlabeled(data.inputs()))?,
        Predictor::Ensemble(e) => e.averaged_logits(spec, data.inputs())?,
    };
    Ok(argmax_rows(&logits))
}

/// Top-1 accuracy in `[0, 1]`.
pub fn evaluate<'a>(spec: &NetworkSpec, model: impl Into<Predictor<'a>>, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let pred = predict(spec, model, data)?;
    let hits = pred.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::EnsembleMember;
    use crate::nn::{init_weights, Activation};
    use ndarray::Array2;

    #[test]
    fn matches_recount() {
        let spec = NetworkSpec::new(vec![3, 5, 4], Activation::Tanh).unwrap();
        let w = init_weights(&spec, 8);
        let data = crate::data::make_synthetic(4, 3, 25, 1.0, 2).unwrap();
        let acc = evaluate(&spec, &w, &data).unwrap();
        let logits = forward(&spec, &w, &Batch::unlabeled(data.inputs())).unwrap();
        let mut hits = 0;
        for (i, row) in logits.outer_iter().enumerate() {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            hits += usize::from(best == data.labels()[i]);
        }
        assert_eq!(acc, hits as f64 / 100.0);
    }

    #[test]
    fn ties_and_single_member_ensemble() {
        // all-zero weights produce all-zero logits: every prediction is class 0
        let spec = NetworkSpec::new(vec![2, 3], Activation::Relu).unwrap();
        let w = ParameterVector::zeros(spec.param_count());
        let labels = vec![0, 1, 2, 0];
        let data = LabeledDataset::new(Array2::from_elem((4, 2), 1.0), labels, 3).unwrap();
        assert_eq!(evaluate(&spec, &w, &data).unwrap(), 0.5);
        let ens = EnsembleSpec::uniform(vec![EnsembleMember { slot: 0, age: 0, weights: w.clone() }]).unwrap();
        assert_eq!(predict(&spec, &ens, &data).unwrap(), vec![0; 4]);
    }

    #[test]
    fn perfect_model_scores_one() {
        // identity logits on one-hot inputs
        let spec = NetworkSpec::new(vec![3, 3], Activation::Relu).unwrap();
        let mut v = vec![0.0; spec.param_count()];
        for i in 0..3 {
            v[i * 3 + i] = 1.0;
        }
        let w = ParameterVector::new(v).unwrap();
        let inputs = Array2::from_shape_fn((6, 3), |(r, c)| f64::from(u8::from(r % 3 == c)));
        let data = LabeledDataset::new(inputs, vec![0, 1, 2, 0, 1, 2], 3).unwrap();
        assert_eq!(evaluate(&spec, &w, &data).unwrap(), 1.0);
    }
}

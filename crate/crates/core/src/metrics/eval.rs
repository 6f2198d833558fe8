use crate::data::Sample;
use crate::error::{Error, Result};
use crate::math::softmax_cross_entropy_slice;
use crate::model::{argmax, DualAdapterModel};

/// Teacher-forced mean NLL and argmax accuracy over every raw response token.
pub fn eval_heldout(model: &DualAdapterModel, heldout: &[Sample]) -> Result<(f64, f64)> {
    let ctx = model.backbone().config().context_len;
    let mut nll = 0.0;
    let mut correct = 0usize;
    let mut n = 0usize;
    for sample in heldout {
        for p in sample.response_predictions(ctx) {
            let logits = model.logits(&p.context)?;
            let (loss, _) = softmax_cross_entropy_slice(&logits, p.target as usize)?;
            nll += loss;
            correct += usize::from(argmax(&logits) == p.target as usize);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyCorpus(
            "held-out set has no response tokens".into(),
        ));
    }
    Ok((nll / n as f64, correct as f64 / n as f64))
}

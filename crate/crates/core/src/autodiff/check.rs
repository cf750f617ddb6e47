use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Worst relative disagreement between reverse-mode gradients and central
/// differences over every coordinate of every trainable leaf.
///
/// The per-coordinate error is `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn finite_diff_check(tape: &mut Tape, root: Var, eps: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let grads = tape.backward(root)?;
    let mut leaves: Vec<(String, _)> = Vec::new();
    for (v, n, trainable) in tape.leaf_names() {
        if trainable && !leaves.iter().any(|(m, _)| m == n) {
            leaves.push((n.to_string(), tape.value(v).clone()));
        }
    }

    let mut worst: f64 = 0.0;
    let mut inputs = std::collections::HashMap::new();
    for (name, base) in &leaves {
        let g_ad = grads.by_name(name).expect("trainable leaf has a gradient");
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[i] += eps;
            inputs.insert(name.clone(), plus);
            let f_plus = tape.forward_eval(root, &inputs)?.item();

            let mut minus = base.clone();
            minus.data_mut()[i] -= eps;
            inputs.insert(name.clone(), minus);
            let f_minus = tape.forward_eval(root, &inputs)?.item();

            let fd = (f_plus - f_minus) / (2.0 * eps);
            let ad = g_ad.data()[i];
            let err = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            worst = worst.max(err);
        }
        inputs.insert(name.clone(), base.clone());
    }
    // leave the tape holding the original values
    tape.forward_eval(root, &inputs)?;
    Ok(worst)
}

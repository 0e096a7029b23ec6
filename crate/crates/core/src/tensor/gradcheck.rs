use super::{NodeId, Tape, Tensor, TensorError};

/// Compares tape gradients of a scalar function against central finite
/// differences and returns the worst relative error
/// `|analytic - fd| / max(1, |analytic|, |fd|)` over every parameter entry.
///
/// `f` receives a fresh tape and one leaf per parameter (in order) and must
/// return the id of a single-element loss.
pub fn grad_check<F, E>(mut f: F, params: &[Tensor], eps: f32) -> Result<f32, E>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId, E>,
    E: From<TensorError>,
{
    assert!((1e-5..=1e-2).contains(&eps), "grad_check eps must lie in [1e-5, 1e-2]");
    let mut work: Vec<Tensor> = params.iter().map(|p| p.clone().with_requires_grad(true)).collect();

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = work.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = ids
        .iter()
        .zip(&work)
        .map(|(&id, w)| {
            grads
                .get(id)
                .map_or_else(|| vec![0.0; w.numel()], |g| g.data().to_vec())
        })
        .collect();

    let mut eval = |work: &[Tensor]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = work.iter().map(|p| tape.leaf(p)).collect();
        let loss = f(&mut tape, &ids)?;
        Ok(tape.value(loss).item() as f64)
    };

    let mut worst = 0.0f32;
    for (p, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let orig = work[p].data()[i];
            let (hi, lo) = (orig + eps, orig - eps);
            work[p].data_mut()[i] = hi;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = lo;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = orig;
            // Divide by the step actually taken after f32 rounding.
            let fd = ((plus - minus) / (hi as f64 - lo as f64)) as f32;
            let err = (a - fd).abs() / 1.0f32.max(a.abs()).max(fd.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact_to_second_order() {
        // Dyadic inputs and step keep every evaluation exact in f32.
        let x = Tensor::new(vec![1, 4], vec![0.375, -1.25, 2.0, 0.625]).unwrap();
        let err = grad_check(
            |tape, ids| {
                let xt = tape.reshape(ids[0], vec![4, 1])?;
                let sq = tape.matmul(ids[0], xt)?;
                tape.mean(sq)
            },
            &[x],
            1.0 / 1024.0,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::new(vec![4], vec![-1.0, 0.25, 1.125, 2.5]).unwrap();
        let err = grad_check(
            |tape, ids| {
                let r = tape.relu(ids[0])?;
                tape.mean(r)
            },
            &[x],
            1.0 / 1024.0,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }

    #[test]
    fn smooth_matcher_chain() {
        let e = Tensor::new(vec![3, 2], vec![1.0, 0.2, -0.3, 0.9, 0.5, 0.5]).unwrap();
        let w = Tensor::new(vec![3, 2], vec![0.9, 0.1, 0.1, 1.0, -0.6, 0.4]).unwrap();
        let err = grad_check(
            |tape, ids| {
                let c = tape.cosine_rows(ids[0], ids[1])?;
                let p = tape.softmax_rows(c)?;
                let g = tape.group_max(p, vec![0, 1, 1], 2)?;
                let q = tape.normalize_rows(g)?;
                tape.nll_mean(q, vec![0, 1, 1], None)
            },
            &[e, w],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "err = {err}");
    }

    #[test]
    fn conv_and_bias() {
        let x = Tensor::new(vec![3, 3, 2], (0..18).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let k = Tensor::new(
            vec![3, 3, 2, 2],
            (0..36).map(|i| (i as f32 * 0.11).cos() * 0.3).collect(),
        )
        .unwrap();
        let b = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        let err = grad_check(
            |tape, ids| {
                let c = tape.conv2d(ids[0], ids[1])?;
                let s = tape.add(c, ids[2])?;
                let m = tape.mul_scalar(s, 0.5)?;
                let flat = tape.reshape(m, vec![9, 2])?;
                let mt = tape.reshape(m, vec![2, 9])?;
                let sq = tape.matmul(mt, flat)?;
                tape.mean(sq)
            },
            &[x, k, b],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "err = {err}");
    }
}

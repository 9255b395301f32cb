use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of a batch-norm layer. The affine `gamma`/`beta`
/// live in the parameter store; this holds the non-trainable buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<F> {
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub momentum: f64,
    pub eps: f64,
}

impl<F: Scalar> BatchNormState<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    /// Per-channel normalization of a `[B,C,H,W]` input.
    ///
    /// Train mode normalizes with batch statistics and, when `update_stats`
    /// is set, folds them into the running buffers (unbiased variance).
    /// Eval mode uses the running buffers only.
    pub fn batchnorm2d(
        &self,
        gamma: Var<'t, F>,
        beta: Var<'t, F>,
        state: &mut BatchNormState<F>,
        mode: BnMode,
        update_stats: bool,
    ) -> Result<Var<'t, F>> {
        let [b, c, h, w] = self.dims4()?;
        if c != state.channels() || gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape(format!(
                "batchnorm: input has {c} channels, state {} gamma {:?} beta {:?}",
                state.channels(),
                gamma.shape(),
                beta.shape()
            )));
        }
        let hw = h * w;
        let n = b * hw;
        let x = self.value();
        let eps = F::lit(state.eps);
        let mut mean = vec![F::zero(); c];
        let mut inv_std = vec![F::zero(); c];
        match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::InsufficientBatch);
                }
                let nf = F::lit(n as f64);
                for ch in 0..c {
                    let mut s = F::zero();
                    for bi in 0..b {
                        for &v in &x[(bi * c + ch) * hw..][..hw] {
                            s = s + v;
                        }
                    }
                    let m = s / nf;
                    let mut ss = F::zero();
                    for bi in 0..b {
                        for &v in &x[(bi * c + ch) * hw..][..hw] {
                            ss = ss + (v - m) * (v - m);
                        }
                    }
                    let var = ss / nf;
                    mean[ch] = m;
                    inv_std[ch] = F::one() / (var + eps).sqrt();
                    if update_stats {
                        let mom = F::lit(state.momentum);
                        let unbiased = ss / F::lit((n - 1) as f64);
                        state.running_mean[ch] = (F::one() - mom) * state.running_mean[ch] + mom * m;
                        state.running_var[ch] = (F::one() - mom) * state.running_var[ch] + mom * unbiased;
                    }
                }
            }
            BnMode::Eval => {
                for ch in 0..c {
                    mean[ch] = state.running_mean[ch];
                    inv_std[ch] = F::one() / (state.running_var[ch].max(F::zero()) + eps).sqrt();
                }
            }
        }
        let gv = gamma.value();
        let bv = beta.value();
        let mut xhat = vec![F::zero(); x.len()];
        let mut y = vec![F::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    y[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let (xid, gid, bid) = (self.id, gamma.id, beta.id);
        let train = mode == BnMode::Train;
        self.tape.push_op("batchnorm2d", y, vec![b, c, h, w], &[*self, gamma, beta], move |g, sink| {
            let mut sum_g = vec![F::zero(); c];
            let mut sum_gx = vec![F::zero(); c];
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * hw;
                    for i in off..off + hw {
                        sum_g[ch] = sum_g[ch] + g[i];
                        sum_gx[ch] = sum_gx[ch] + g[i] * xhat[i];
                    }
                }
            }
            if let Some(dg) = sink.slot(gid) {
                for ch in 0..c {
                    dg[ch] = dg[ch] + sum_gx[ch];
                }
            }
            if let Some(db) = sink.slot(bid) {
                for ch in 0..c {
                    db[ch] = db[ch] + sum_g[ch];
                }
            }
            if let Some(dx) = sink.slot(xid) {
                let nf = F::lit(n as f64);
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        let scale = gv[ch] * inv_std[ch];
                        for i in off..off + hw {
                            let d = if train {
                                scale * (g[i] - sum_g[ch] / nf - xhat[i] * sum_gx[ch] / nf)
                            } else {
                                scale * g[i]
                            };
                            dx[i] = dx[i] + d;
                        }
                    }
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::Tensor;

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| i as f64 - 5.0).collect();
        let x = tape.var(Tensor::from_f64(&[2, 3, 2, 2], &data).unwrap());
        let gamma = tape.var(Tensor::ones(&[3]));
        let beta = tape.var(Tensor::zeros(&[3]));
        let mut st = BatchNormState::<f64>::new(3);
        st.eps = 0.0;
        let y = x.batchnorm2d(gamma, beta, &mut st, BnMode::Eval, true).unwrap();
        assert_eq!(y.value().as_slice(), data.as_slice());
    }

    #[test]
    fn constant_input_gives_beta() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::full(&[2, 2, 3, 3], 4.2));
        let gamma = tape.var(Tensor::from_f64(&[2], &[2.0, 3.0]).unwrap());
        let beta = tape.var(Tensor::from_f64(&[2], &[0.5, -1.0]).unwrap());
        let mut st = BatchNormState::<f64>::new(2);
        let y = x.batchnorm2d(gamma, beta, &mut st, BnMode::Train, true).unwrap();
        let v = y.value();
        for bi in 0..2 {
            for i in 0..9 {
                assert!((v[bi * 18 + i] - 0.5).abs() < 1e-6);
                assert!((v[bi * 18 + 9 + i] + 1.0).abs() < 1e-6);
            }
        }
        // running mean moved towards 4.2, variance towards 0
        assert!((st.running_mean[0] - 0.42).abs() < 1e-12);
        assert!((st.running_var[0] - 0.9).abs() < 1e-12);
        assert!(st.running_var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn train_needs_more_than_one_value() {
        let tape = Tape::<f32>::new();
        let x = tape.var(Tensor::ones(&[1, 2, 1, 1]));
        let gamma = tape.var(Tensor::ones(&[2]));
        let beta = tape.var(Tensor::zeros(&[2]));
        let mut st = BatchNormState::<f32>::new(2);
        assert!(matches!(
            x.batchnorm2d(gamma, beta, &mut st, BnMode::Train, true),
            Err(Error::InsufficientBatch)
        ));
        assert!(x.batchnorm2d(gamma, beta, &mut st, BnMode::Eval, true).is_ok());
    }
}

/// Heavy-ball SGD over a list of flat parameter tensors.
#[derive(Debug, Clone)]
pub(crate) struct Momentum {
    lr: f64,
    beta: f64,
    velocity: Vec<Vec<f64>>,
}

impl Momentum {
    pub fn new(lr: f64, beta: f64, shapes: &[usize]) -> Self {
        Self {
            lr,
            beta,
            velocity: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// `v = beta * v - lr * g; w += v` for each tensor pair.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        for ((w, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((wi, gi), vi) in w.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = self.beta * *vi - self.lr * gi;
                *wi += *vi;
            }
        }
    }
}

/// Early-stopping bookkeeping on a validation loss.
#[derive(Debug, Clone)]
pub(crate) struct EarlyStop {
    patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    since_best: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Records an epoch's loss; returns `(improved, should_stop)`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best >= self.patience)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn momentum_accumulates() {
        let mut w = vec![1.0];
        let mut opt = Momentum::new(0.1, 0.9, &[1]);
        opt.step(&mut [&mut w], &[&[1.0]]);
        assert!((w[0] - 0.9).abs() < 1e-15);
        opt.step(&mut [&mut w], &[&[1.0]]);
        // v = 0.9 * -0.1 - 0.1 = -0.19
        assert!((w[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn early_stop_patience() {
        let mut es = EarlyStop::new(2);
        assert_eq!(es.observe(0, 1.0), (true, false));
        assert_eq!(es.observe(1, 1.5), (false, false));
        assert_eq!(es.observe(2, 1.2), (false, true));
        assert_eq!(es.best_epoch, 0);
    }
}

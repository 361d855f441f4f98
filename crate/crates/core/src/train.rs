//! Plain supervised training shared by the oracle and the diagnostics.

use crate::data::{batch_iter, Batch, Dataset};
use crate::error::Result;
use crate::nn::{accuracy, softmax_cross_entropy, Ctx, GradScope, Mode, Module};
use crate::optim::{clip_grad_norm, cosine_lr};
use crate::search::{SgdConfig, SplitStats};
use crate::tensor::Var;

/// A network mapping an image batch to logits.
pub trait Classifier: Module {
    fn logits(&mut self, ctx: &mut Ctx, x: Var) -> Result<Var>;

    /// Called after every optimizer step (e.g. to project constrained
    /// parameters back into their domain).
    fn after_step(&mut self) {}
}

impl Classifier for crate::supernet::Network {
    fn logits(&mut self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.forward(ctx, x)
    }
}

/// Forward, loss and (unless `scope` is `Nothing`) backward on one batch;
/// gradients are accumulated into the admitted parameters.
pub fn forward_backward<N: Classifier + ?Sized>(
    net: &mut N,
    batch: &Batch,
    mode: Mode,
    scope: GradScope,
) -> Result<SplitStats> {
    let mut ctx = Ctx::new(mode, scope);
    let x = ctx.input(batch.images.clone());
    let logits = net.logits(&mut ctx, x)?;
    let loss = softmax_cross_entropy(&mut ctx.graph, logits, &batch.labels)?;
    let stats = SplitStats {
        loss: ctx.graph.value(loss).data()[0],
        acc: accuracy(ctx.graph.value(logits), &batch.labels),
    };
    if scope != GradScope::Nothing {
        let grads = ctx.graph.backward(loss)?;
        ctx.accumulate(&grads, net.params_mut());
    }
    Ok(stats)
}

/// Eval-mode loss and accuracy over a whole dataset.
pub fn evaluate<N: Classifier + ?Sized>(net: &mut N, ds: &Dataset, batch_size: usize) -> Result<SplitStats> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (mut loss, mut acc) = (0.0, 0.0);
    for chunk in idx.chunks(batch_size.max(1)) {
        let s = forward_backward(net, &ds.gather(chunk), Mode::Eval, GradScope::Nothing)?;
        loss += s.loss * chunk.len() as f64;
        acc += s.acc * chunk.len() as f64;
    }
    let n = ds.len().max(1) as f64;
    Ok(SplitStats {
        loss: loss / n,
        acc: acc / n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
}

/// SGD with a cosine schedule and gradient clipping over the non-frozen
/// parameters. `on_epoch(e, net)` runs after each epoch `e ≥ 1`.
pub fn fit<N, F>(net: &mut N, train: &Dataset, recipe: &TrainRecipe, mut on_epoch: F) -> Result<()>
where
    N: Classifier + ?Sized,
    F: FnMut(usize, &mut N) -> Result<()>,
{
    let mut sgd = recipe.sgd.build();
    for epoch in 0..recipe.epochs {
        sgd.lr = cosine_lr(epoch, recipe.epochs, recipe.sgd.lr);
        for idx in batch_iter(train.len(), recipe.batch_size, recipe.seed, epoch)? {
            net.zero_grad();
            forward_backward(net, &train.gather(&idx), Mode::Train, GradScope::Weights)?;
            let mut params = net.params_mut();
            clip_grad_norm(&mut params, recipe.sgd.grad_clip);
            sgd.step(&mut params)?;
            drop(params);
            net.after_step();
        }
        on_epoch(epoch + 1, net)?;
    }
    Ok(())
}

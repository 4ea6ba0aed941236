//! Analytic-vs-numeric gradient verification.
//!
//! `grad_check` compares one backward pass against central finite
//! differences, coordinate by coordinate, over a given parameter list. The
//! function under test must be deterministic (eval-mode dropout); this is
//! enforced by evaluating it twice and requiring bit-identical results.

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Worst relative error between analytic and central-difference gradients.
///
/// `f` rebuilds the scalar loss from the current parameter values on the
/// supplied tape. Relative error uses `|ga − gfd| / max(|ga|, |gfd|, 1e-8)`.
/// Parameter gradients are clobbered.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Tensor>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::contract(format!(
            "grad_check eps must lie in [1e-7, 1e-4], got {eps}"
        )));
    }

    let eval = |f: &F| -> Result<f64> {
        let mut tape = Tape::inactive();
        f(&mut tape)?.item()
    };

    // Two evaluations at the same point must agree exactly; anything else
    // means train-mode stochasticity leaked into the function under test.
    let probe_a = eval(&f)?;
    let probe_b = eval(&f)?;
    if probe_a.to_bits() != probe_b.to_bits() {
        return Err(Error::contract(format!(
            "grad_check requires a deterministic function (got {probe_a} then {probe_b}); \
             disable dropout for gradient checking"
        )));
    }

    for p in params {
        p.zero_grad();
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape)?;
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad_or_zeros()).collect();

    let mut worst = 0.0_f64;
    for (p, ga) in params.iter().zip(&analytic) {
        for i in 0..p.len() {
            let orig = p.value_at(i)?;
            p.set_value_at(i, orig + eps)?;
            let plus = eval(&f)?;
            p.set_value_at(i, orig - eps)?;
            let minus = eval(&f)?;
            p.set_value_at(i, orig)?;
            let gfd = (plus - minus) / (2.0 * eps);
            let denom = ga[i].abs().max(gfd.abs()).max(1e-8);
            worst = worst.max((ga[i] - gfd).abs() / denom);
        }
    }
    Ok(worst)
}

/// Gradient check of every loss term, and their weighted total, through the
/// complete stem→encoder→head pipeline on a small random instance
/// (d=8, K=3, C=5, N=4, 2 heads, 2 layers). Dropout runs in eval mode, as
/// the checker requires. Returns `(term, max relative error)` pairs.
pub fn full_model_gradient_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use crate::data::mix_seed;
    use crate::encoder::EncoderConfig;
    use crate::head::{classify_batch, residuals_batch};
    use crate::loss::{
        cross_entropy, ensemble_l2, mean_loss, total_loss, variance_loss, BatchLabels,
        L2Assignment, LossWeights,
    };
    use crate::model::{Aggregation, BinsConfig, Model, RunConfig};
    use crate::tape::Mode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FEATURE_DIM: usize = 6;
    const K: usize = 3;
    const N: usize = 4;

    let mut run = RunConfig::default();
    run.data.feature_dim = FEATURE_DIM;
    run.data.age_signal_dims = 3;
    run.aggregation = Aggregation::Encoder;
    run.encoder = EncoderConfig {
        num_layers: 2,
        num_heads: 2,
        model_dim: 8,
        ffn_dim: 32,
        dropout_p: 0.1,
        num_views: K,
    };
    run.bins = BinsConfig {
        start: 16.0,
        bin_size: 1.0,
        count: 5,
    };
    run.init_seed = mix_seed(seed, 0x6C0D);
    let model = Model::init(&run)?;
    let bins = model.bins.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xDA7A));
    let views: Vec<Tensor> = (0..N)
        .map(|_| {
            Tensor::new(
                (0..K * FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                vec![K, FEATURE_DIM],
            )
        })
        .collect::<Result<_>>()?;
    let ages: Vec<f64> = (0..N).map(|_| rng.gen_range(16.0..21.0)).collect();
    let labels = BatchLabels::from_ages(&ages, &bins);

    let named = model.named_params();
    let params: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();

    let model = &model;
    let make_loss = |which: usize| {
        let labels = labels.clone();
        let bins = bins.clone();
        let views = views.clone();
        move |tape: &mut Tape| -> Result<Tensor> {
            let mut mode = Mode::Eval;
            let mut fused = Vec::with_capacity(N);
            for v in &views {
                fused.push(model.fuse(tape, v, &mut mode)?);
            }
            let refs: Vec<&Tensor> = fused.iter().collect();
            let embed = tape.stack_rows(&refs)?;
            let logits = classify_batch(tape, &model.head, &embed)?;
            let posteriors = tape.softmax(&logits)?;
            let res = residuals_batch(tape, &model.head, &embed)?;
            match which {
                0 => cross_entropy(tape, &logits, &labels.bin_indices),
                1 => mean_loss(tape, &posteriors, &bins, &labels),
                2 => variance_loss(tape, &posteriors, &bins),
                3 => ensemble_l2(tape, &posteriors, &res, &bins, &labels, L2Assignment::Soft),
                _ => {
                    let ce = cross_entropy(tape, &logits, &labels.bin_indices)?;
                    let lm = mean_loss(tape, &posteriors, &bins, &labels)?;
                    let lv = variance_loss(tape, &posteriors, &bins)?;
                    let l2 =
                        ensemble_l2(tape, &posteriors, &res, &bins, &labels, L2Assignment::Soft)?;
                    total_loss(tape, &ce, &lm, &lv, &l2, &LossWeights::default())
                }
            }
        }
    };

    let names = ["cross_entropy", "mean_loss", "variance_loss", "ensemble_l2", "total_loss"];
    let mut results = Vec::with_capacity(names.len());
    for (which, name) in names.iter().enumerate() {
        let err = grad_check(make_loss(which), &params, 1e-5)?;
        results.push((*name, err));
    }
    Ok(results)
}

//! Policy log-probabilities, gradients and sampling against independent
//! oracles: a dense re-implementation, finite differences and Monte-Carlo.

use std::collections::HashMap;
use std::sync::Arc;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use dagrpo_core::gradcheck::fd_gradient;
use dagrpo_core::policy::{
    contexts_along, entropy, grad_logprob_sequence, logprob_sequence, policy_entropy, sample_rollout, Context, PolicyParams,
    SamplingConfig, Token,
};
use dagrpo_core::rng::stream;
use dagrpo_core::tasks::{OpCode, Operation, Prompt};

const V: usize = 6;

fn prompt() -> Prompt {
    Prompt::new(1, vec![Operation { op_code: OpCode::Mul, operand: 3 }], 4).unwrap()
}

/// Log-probability written from scratch: exp, sum, divide, log.
fn dense_logprob(rows: &HashMap<Vec<Token>, Vec<f64>>, tokens: &[Token], order: usize) -> f64 {
    let mut total = 0.0;
    for t in 0..tokens.len() {
        let hist = tokens[t.saturating_sub(order)..t].to_vec();
        let z = rows.get(&hist).cloned().unwrap_or_else(|| vec![0.0; V]);
        let denom: f64 = z.iter().map(|x| x.exp()).sum();
        total += (z[tokens[t].index()].exp() / denom).ln();
    }
    total
}

fn arb_case() -> impl Strategy<Value = (Vec<u16>, Vec<Vec<f64>>, usize)> {
    (
        prop::collection::vec(0u16..V as u16, 1..8),
        prop::collection::vec(prop::collection::vec(-3.0f64..3.0, V), 8),
        1usize..4,
    )
}

fn build(tokens: &[u16], rows: &[Vec<f64>], order: usize) -> (PolicyParams, HashMap<Vec<Token>, Vec<f64>>, Vec<Token>) {
    let p = prompt();
    let key: Arc<str> = Arc::from(p.key());
    let tokens: Vec<Token> = tokens.iter().map(|&t| Token(t)).collect();
    let mut params = PolicyParams::new(V, order);
    let mut dense = HashMap::new();
    // every other visited context gets a stored row, the rest stay implicit
    for (i, ctx) in contexts_along(&key, &tokens, order).into_iter().enumerate() {
        if i % 2 == 0 && !dense.contains_key(&ctx.history) {
            dense.insert(ctx.history.clone(), rows[i].clone());
            params.set_row(ctx, rows[i].clone());
        }
    }
    (params, dense, tokens)
}

proptest! {
    #[test]
    fn logprob_matches_dense_oracle((tokens, rows, order) in arb_case()) {
        let (params, dense, tokens) = build(&tokens, &rows, order);
        let got = logprob_sequence(&params, &prompt(), &tokens);
        prop_assert!((got.total - dense_logprob(&dense, &tokens, order)).abs() < 1e-12);
        prop_assert!((got.total - got.per_token.iter().sum::<f64>()).abs() < 1e-12);
        prop_assert!(got.per_token.iter().all(|&l| l <= 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences((tokens, rows, order) in arb_case()) {
        let (mut params, _, tokens) = build(&tokens, &rows, order);
        // materialize every visited row so FD can perturb it
        let key: Arc<str> = Arc::from(prompt().key());
        for ctx in contexts_along(&key, &tokens, order) {
            if params.row(&ctx).is_none() {
                params.set_row(ctx, vec![0.0; V]);
            }
        }
        let analytic = grad_logprob_sequence(&params, &prompt(), &tokens);
        let fd = fd_gradient(&params, 1e-5, |q| logprob_sequence(q, &prompt(), &tokens).total);
        for (ctx, row) in fd.rows() {
            for (j, &x) in row.iter().enumerate() {
                prop_assert!((analytic.get(ctx, j) - x).abs() < 1e-5 * (1.0 + x.abs()));
            }
        }
        // nothing outside the visited contexts
        for (ctx, _) in analytic.rows() {
            prop_assert!(params.row(ctx).is_some());
        }
    }

    #[test]
    fn gradient_rows_sum_to_zero((tokens, rows, order) in arb_case()) {
        let (params, _, tokens) = build(&tokens, &rows, order);
        let g = grad_logprob_sequence(&params, &prompt(), &tokens);
        for (_, row) in g.rows() {
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn text_format_round_trips((tokens, rows, order) in arb_case()) {
        let (params, _, _) = build(&tokens, &rows, order);
        let back = PolicyParams::from_text(&params.to_text()).unwrap();
        prop_assert!(back.same_values(&params));
        prop_assert_eq!(back.to_text(), params.to_text());
    }
}

#[test]
fn uniform_sequence_example() {
    let params = PolicyParams::new(V, 2);
    let tokens = [Token(3), Token(4), Token(5)];
    let lp = logprob_sequence(&params, &prompt(), &tokens);
    assert_abs_diff_eq!(lp.total, -3.0 * (V as f64).ln(), epsilon = 1e-12);
    let g = grad_logprob_sequence(&params, &prompt(), &tokens);
    assert_eq!(g.num_rows(), 3);
    for (ctx, row) in g.rows() {
        let emitted = tokens[ctx.history.len()].index();
        for (j, &x) in row.iter().enumerate() {
            let want = if j == emitted { 1.0 - 1.0 / V as f64 } else { -1.0 / V as f64 };
            assert_abs_diff_eq!(x, want, epsilon = 1e-12);
        }
    }
}

/// Empirical next-token frequencies over 10⁵ first-token draws match the
/// softmax within 4 standard errors.
#[test]
fn monte_carlo_first_token() {
    let p = prompt();
    let key: Arc<str> = Arc::from(p.key());
    let mut params = PolicyParams::new(V, 2);
    let logits = vec![0.5, -1.0, 2.0, 0.0, -0.3, 1.1];
    params.set_row(Context::new(key, &[], 2), logits.clone());
    let cfg = SamplingConfig { temperature: 1.0, top_p: 1.0, max_len: 1 };
    let mut rng = stream(5, &[77]);
    let n = 100_000;
    let mut counts = [0usize; V];
    for _ in 0..n {
        counts[sample_rollout(&params, &p, &cfg, &mut rng).tokens[0].index()] += 1;
    }
    let z: f64 = logits.iter().map(|x: &f64| x.exp()).sum();
    for (j, &c) in counts.iter().enumerate() {
        let q = logits[j].exp() / z;
        let se = (q * (1.0 - q) / n as f64).sqrt();
        let f = c as f64 / n as f64;
        assert!((f - q).abs() < 4.0 * se, "token {j}: {f} vs {q}");
    }
}

#[test]
fn temperature_and_nucleus_shape_sampling_only() {
    let p = prompt();
    let key: Arc<str> = Arc::from(p.key());
    let mut params = PolicyParams::new(V, 2);
    params.set_row(Context::new(key, &[], 2), vec![3.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let cfg = SamplingConfig { temperature: 0.5, top_p: 0.5, max_len: 1 };
    let mut rng = stream(5, &[78]);
    for _ in 0..1000 {
        assert_eq!(sample_rollout(&params, &p, &cfg, &mut rng).tokens, vec![Token(0)]);
    }
    // log-probs stay under the plain softmax
    let lp = logprob_sequence(&params, &p, &[Token(0)]).total;
    assert_abs_diff_eq!(lp, 3.0 - (3f64.exp() + 5.0).ln(), epsilon = 1e-12);
}

#[test]
fn entropy_examples() {
    assert_abs_diff_eq!(entropy(&[0.5, 0.5]), std::f64::consts::LN_2, epsilon = 1e-15);
    assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
    let params = PolicyParams::new(V, 2);
    let ctx = Context::new(Arc::from(prompt().key()), &[], 2);
    assert_abs_diff_eq!(policy_entropy(&params, [&ctx]).unwrap(), (V as f64).ln(), epsilon = 1e-12);
    assert!(policy_entropy(&params, std::iter::empty()).is_err());
}

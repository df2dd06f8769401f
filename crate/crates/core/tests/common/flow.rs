//! Which parameters each loss term is allowed to train.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use labelemb::embedding::{CompressedEmbedding, FullEmbedding, LabelEmbedding};
use labelemb::model::{DualHeadModel, MlpConfig, ModelConfig};
use labelemb::objective::{baseline_objective, compute_objective, Objective};
use labelemb::{ObjectiveConfig, Tape, Tensor, Var};

use super::{bitwise_zero, labels, uniform};

struct Case {
    model: DualHeadModel<f64>,
    emb: LabelEmbedding<f64>,
    x: Tensor<f64>,
    labels: Vec<usize>,
    cfg: ObjectiveConfig,
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let m = rng.random_range(2..=6);
    let cfg = ModelConfig::Mlp(MlpConfig {
        input: rng.random_range(2..=6),
        hidden: (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=6)).collect(),
        labels: m,
    });
    let model = DualHeadModel::<f64>::init(cfg.clone(), rng.random()).unwrap();
    let emb = if rng.random_bool(0.5) {
        LabelEmbedding::Full(FullEmbedding::from_table(uniform(rng, &[m, m]).with_grad()).unwrap())
    } else {
        CompressedEmbedding::random(m, rng.random_range(1..=3), rng).unwrap().into()
    };
    let b = rng.random_range(1..=6);
    let input = cfg.input_shape()[0];
    Case {
        model,
        emb,
        x: uniform(rng, &[b, input]),
        labels: labels(rng, b, m),
        cfg: ObjectiveConfig { mask_wrong: rng.random_bool(0.3), ..Default::default() },
    }
}

struct Recorded {
    tape: Tape<f64>,
    params: Vec<Var>,
    emb: Vec<Var>,
    objective: Objective,
    // all shared features dead: head gradients may cancel to exact zero
    dead: bool,
}

fn record(c: &Case) -> Recorded {
    let mut tape = Tape::new();
    let bound = c.model.bind(&mut tape);
    let x = tape.constant(c.x.clone());
    let out = c.model.forward(&mut tape, &bound, x, true).unwrap();
    let e = c.emb.bind(&mut tape);
    let objective = compute_objective(&mut tape, out.z1, out.z2.unwrap(), &c.labels, &e, &c.cfg).unwrap();
    let emb = match e {
        labelemb::embedding::BoundEmbedding::Full { table } => vec![table],
        labelemb::embedding::BoundEmbedding::Compressed { a, b } => vec![a, b],
    };
    let dead = tape.value(out.h).data().iter().all(|&v| v == 0.0);
    Recorded { tape, params: bound.vars().to_vec(), emb, objective, dead }
}

fn backprop_sum(r: &mut Recorded, terms: &[Var]) {
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = r.tape.add(total, t).unwrap();
    }
    r.tape.backward(total).unwrap();
}

fn any_nonzero(tape: &Tape<f64>, vars: &[Var]) -> bool {
    vars.iter().any(|&v| !bitwise_zero(tape.grad(v)))
}

/// Checks the three separation rules on `cases` random MLP instances.
/// Returns the number of cases checked or the first violation.
pub fn isolation(cases: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case_no in 0..cases {
        let c = random_case(&mut rng);
        let body: Vec<usize> = c.model.body_indices().collect();
        let head1: Vec<usize> = c.model.head1_indices().collect();
        let head2: Vec<usize> = c.model.head2_indices().collect();

        let mut r = record(&c);
        let o = r.objective;
        let teacher_side = [o.teacher_ce.unwrap(), o.hinge.unwrap(), o.emb_learn_ce.unwrap()];
        backprop_sum(&mut r, &teacher_side);
        for &i in &body {
            if !bitwise_zero(r.tape.grad(r.params[i])) {
                return Err(format!("case {case_no}: teacher-side terms reached body parameter {}", c.model.names()[i]));
            }
        }
        for &i in &head1 {
            if !bitwise_zero(r.tape.grad(r.params[i])) {
                return Err(format!("case {case_no}: teacher-side terms reached {}", c.model.names()[i]));
            }
        }
        let h2: Vec<Var> = head2.iter().map(|&i| r.params[i]).collect();
        if !r.dead && !any_nonzero(&r.tape, &h2) {
            return Err(format!("case {case_no}: teacher head received no gradient at all"));
        }

        let prediction_side = [o.pred_ce, o.emb_target_ce.unwrap(), o.teacher_ce.unwrap(), o.hinge.unwrap()];
        backprop_sum(&mut r, &prediction_side);
        for &v in &r.emb {
            if !bitwise_zero(r.tape.grad(v)) {
                return Err(format!("case {case_no}: prediction-side terms reached the embedding"));
            }
        }
        let h1: Vec<Var> = head1.iter().map(|&i| r.params[i]).collect();
        if !r.dead && !any_nonzero(&r.tape, &h1) {
            return Err(format!("case {case_no}: prediction head received no gradient at all"));
        }
    }
    Ok(cases)
}

/// Dropping the teacher head and every term that depends on it leaves the
/// prediction-loss gradients of body and prediction head bitwise unchanged.
pub fn teacher_head_is_removable(cases: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case_no in 0..cases {
        let c = random_case(&mut rng);
        let mut r = record(&c);
        let pred = r.objective.pred_ce;
        r.tape.backward(pred).unwrap();

        let mut tape = Tape::new();
        let bound = c.model.bind(&mut tape);
        let x = tape.constant(c.x.clone());
        let out = c.model.forward(&mut tape, &bound, x, false).unwrap();
        let obj = baseline_objective(&mut tape, out.z1, &c.labels).unwrap();
        tape.backward(obj.total).unwrap();

        for i in c.model.body_indices().chain(c.model.head1_indices()) {
            let (a, b) = (r.tape.grad(r.params[i]), tape.grad(bound.vars()[i]));
            let same = match (a, b) {
                (Some(a), Some(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                (None, None) => true,
                _ => false,
            };
            if !same {
                return Err(format!("case {case_no}: gradient of {} changed", c.model.names()[i]));
            }
        }
    }
    Ok(cases)
}

/// A barriered branch adds nothing to the gradients upstream of the barrier.
pub fn barrier_branch_is_removable(cases: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case_no in 0..cases {
        let (n, k, p) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
        let x = uniform(&mut rng, &[n, k]).with_grad();
        let w = uniform(&mut rng, &[k, p]).with_grad();
        let w2 = uniform(&mut rng, &[k, p]).with_grad();
        let grad_x = |with_branch: bool| {
            let mut t = Tape::new();
            let (xv, wv, w2v) = (t.param(&x), t.param(&w), t.param(&w2));
            let y = t.matmul(xv, wv).unwrap();
            let y = t.relu(y);
            let mut loss = t.sum(y);
            if with_branch {
                let s = t.stop_gradient(xv);
                let z = t.matmul(s, w2v).unwrap();
                let z = t.softmax(z);
                let extra = t.sum(z);
                loss = t.add(loss, extra).unwrap();
            }
            t.backward(loss).unwrap();
            (t.grad(xv).map(<[f64]>::to_vec), t.grad(wv).map(<[f64]>::to_vec))
        };
        let (a, b) = (grad_x(true), grad_x(false));
        let bits = |g: &Option<Vec<f64>>| g.as_ref().map(|g| g.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        if bits(&a.0) != bits(&b.0) || bits(&a.1) != bits(&b.1) {
            return Err(format!("case {case_no}: barriered branch changed upstream gradients"));
        }
    }
    Ok(cases)
}

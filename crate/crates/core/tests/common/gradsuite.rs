//! Finite-difference checks for every tape operation and both objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use labelemb::embedding::BoundEmbedding;
use labelemb::gradcheck::{analytic_gradients, numeric_gradient, relative_error, DEFAULT_STEP};
use labelemb::objective::{compute_objective, pretrained_objective};
use labelemb::{ObjectiveConfig, Result, Tape, Tensor, Var};

use super::{labels, uniform, uniform_off_zero};

pub const TOLERANCE: f64 = 1e-4;

type LossFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct Instance {
    inputs: Vec<Tensor<f64>>,
    /// Inputs whose gradient is compared.
    check: Vec<usize>,
    loss: LossFn,
}

impl Instance {
    fn all(inputs: Vec<Tensor<f64>>, loss: LossFn) -> Self {
        let check = (0..inputs.len()).collect();
        Instance { inputs, check, loss }
    }

    fn worst_error(&self) -> f64 {
        let analytic = analytic_gradients(&self.inputs, &self.loss).expect("forward runs");
        self.check
            .iter()
            .map(|&i| {
                let numeric = numeric_gradient(&self.inputs, i, DEFAULT_STEP, &self.loss).expect("forward runs");
                relative_error(&analytic[i], &numeric)
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

/// Projects any output onto a scalar with fixed random weights so that
/// every output element carries a distinct upstream gradient.
fn project(tape: &mut Tape<f64>, v: Var, w: &[f64]) -> Result<Var> {
    tape.weighted_sum(v, w)
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn distribution(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Values whose 2×2 windows have a clear maximum.
fn well_separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / n as f64).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn matmul(rng: &mut ChaCha8Rng) -> Instance {
    let (n, k, p) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    let w = weights(rng, n * p);
    Instance::all(vec![uniform(rng, &[n, k]), uniform(rng, &[k, p])], Box::new(move |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, &w)
    }))
}

fn add_bias(rng: &mut ChaCha8Rng) -> Instance {
    let (n, m) = (dim(rng, 1, 4), dim(rng, 1, 5));
    let w = weights(rng, n * m);
    Instance::all(vec![uniform(rng, &[n, m]), uniform(rng, &[m])], Box::new(move |t, v| {
        let y = t.add_bias(v[0], v[1])?;
        project(t, y, &w)
    }))
}

fn add(rng: &mut ChaCha8Rng) -> Instance {
    let (n, m) = (dim(rng, 1, 4), dim(rng, 1, 5));
    let w = weights(rng, n * m);
    Instance::all(vec![uniform(rng, &[n, m]), uniform(rng, &[n, m])], Box::new(move |t, v| {
        // a shared operand exercises accumulation
        let y = t.add(v[0], v[1])?;
        let y = t.add(y, v[0])?;
        project(t, y, &w)
    }))
}

fn scale(rng: &mut ChaCha8Rng) -> Instance {
    let n = dim(rng, 1, 8);
    let (w, f) = (weights(rng, n), rng.random_range(-3.0..3.0));
    Instance::all(vec![uniform(rng, &[n])], Box::new(move |t, v| {
        let y = t.scale(v[0], f);
        project(t, y, &w)
    }))
}

fn relu(rng: &mut ChaCha8Rng) -> Instance {
    let n = dim(rng, 1, 10);
    let w = weights(rng, n);
    Instance::all(vec![uniform_off_zero(rng, &[n], 1e-3)], Box::new(move |t, v| {
        let y = t.relu(v[0]);
        project(t, y, &w)
    }))
}

fn reshape(rng: &mut ChaCha8Rng) -> Instance {
    let (a, b) = (dim(rng, 1, 4), dim(rng, 1, 4));
    let w = weights(rng, a * b);
    Instance::all(vec![uniform(rng, &[a, b])], Box::new(move |t, v| {
        let y = t.reshape(v[0], [b, a])?;
        let y = t.matmul(y, v[0])?;
        let y = t.reshape(y, [b * b])?;
        let w2: Vec<f64> = w.iter().cycle().take(b * b).copied().collect();
        project(t, y, &w2)
    }))
}

fn conv2d(rng: &mut ChaCha8Rng) -> Instance {
    let (n, c, f) = (dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 1, 3));
    let (h, wd) = (dim(rng, 2, 6), dim(rng, 2, 6));
    let k = [1, 3, 5][rng.random_range(0..3)];
    let w = weights(rng, n * f * h * wd);
    Instance::all(
        vec![uniform(rng, &[n, c, h, wd]), uniform(rng, &[f, c, k, k]), uniform(rng, &[f])],
        Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            project(t, y, &w)
        }),
    )
}

fn maxpool2d(rng: &mut ChaCha8Rng) -> Instance {
    let (n, c) = (dim(rng, 1, 2), dim(rng, 1, 2));
    let (h, wd) = (2 * dim(rng, 1, 3), 2 * dim(rng, 1, 3));
    let w = weights(rng, n * c * h * wd / 4);
    Instance::all(vec![well_separated(rng, &[n, c, h, wd])], Box::new(move |t, v| {
        let y = t.maxpool2d(v[0])?;
        project(t, y, &w)
    }))
}

fn softmax(rng: &mut ChaCha8Rng) -> Instance {
    let (n, m) = (dim(rng, 1, 3), dim(rng, 2, 6));
    let w = weights(rng, n * m);
    Instance::all(vec![uniform(rng, &[n, m])], Box::new(move |t, v| {
        let y = t.softmax(v[0]);
        project(t, y, &w)
    }))
}

fn softmax_temperature(rng: &mut ChaCha8Rng) -> Instance {
    let (n, m) = (dim(rng, 1, 3), dim(rng, 2, 6));
    let (w, tau) = (weights(rng, n * m), rng.random_range(0.5..4.0));
    Instance::all(vec![uniform(rng, &[n, m])], Box::new(move |t, v| {
        let y = t.softmax_temperature(v[0], tau)?;
        project(t, y, &w)
    }))
}

fn cross_entropy(rng: &mut ChaCha8Rng) -> Instance {
    let (n, m) = (dim(rng, 1, 3), dim(rng, 2, 6));
    let target: Vec<f64> = (0..n).flat_map(|_| distribution(rng, m)).collect();
    let w = weights(rng, n);
    Instance::all(vec![uniform(rng, &[n, m])], Box::new(move |t, v| {
        let tg = t.constant(Tensor::new([n, m], target.clone())?);
        let y = t.cross_entropy(tg, v[0])?;
        project(t, y, &w)
    }))
}

fn gather_rows(rng: &mut ChaCha8Rng) -> Instance {
    let (n, m) = (dim(rng, 1, 4), dim(rng, 1, 4));
    let count = dim(rng, 1, 6);
    let rows = labels(rng, count, n);
    let w = weights(rng, rows.len() * m);
    Instance::all(vec![uniform(rng, &[n, m])], Box::new(move |t, v| {
        let y = t.gather_rows(v[0], &rows)?;
        project(t, y, &w)
    }))
}

fn pick(rng: &mut ChaCha8Rng) -> Instance {
    let (n, m) = (dim(rng, 1, 5), dim(rng, 1, 5));
    let cols = labels(rng, n, m);
    let w = weights(rng, n);
    Instance::all(vec![uniform(rng, &[n, m])], Box::new(move |t, v| {
        let y = t.pick(v[0], &cols)?;
        project(t, y, &w)
    }))
}

fn hinge(order: u8) -> impl Fn(&mut ChaCha8Rng) -> Instance {
    move |rng| {
        let n = dim(rng, 1, 8);
        let alpha: f64 = rng.random_range(0.2..0.8);
        let mut x = Tensor::new([n], (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        for v in x.data_mut() {
            if (*v - alpha).abs() < 1e-3 {
                *v = alpha + 2e-3;
            }
        }
        let w = weights(rng, n);
        Instance::all(vec![x], Box::new(move |t, v| {
            let y = t.hinge(v[0], alpha, order)?;
            project(t, y, &w)
        }))
    }
}

fn weighted_sum(rng: &mut ChaCha8Rng) -> Instance {
    let n = dim(rng, 1, 8);
    let w = weights(rng, n);
    Instance::all(vec![uniform(rng, &[n])], Box::new(move |t, v| t.weighted_sum(v[0], &w)))
}

fn sum_and_mean(rng: &mut ChaCha8Rng) -> Instance {
    let n = dim(rng, 1, 8);
    Instance::all(vec![uniform(rng, &[n]), uniform(rng, &[n])], Box::new(move |t, v| {
        let sq = t.reshape(v[0], [1, n])?;
        let col = t.reshape(v[1], [n, 1])?;
        let dot = t.matmul(sq, col)?;
        let a = t.sum(dot);
        let b = t.mean(v[1]);
        let a = t.reshape(a, [1])?;
        let b = t.reshape(b, [1])?;
        let s = t.add(a, b)?;
        Ok(t.sum(s))
    }))
}

/// Only the weight is checked: a finite difference in `x` also moves the
/// barriered branch, which by design contributes nothing to the gradient.
fn stop_gradient(rng: &mut ChaCha8Rng) -> Instance {
    let (n, k, p) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    let w = weights(rng, n * p);
    Instance {
        inputs: vec![uniform(rng, &[n, k]), uniform(rng, &[k, p])],
        check: vec![1],
        loss: Box::new(move |t, v| {
            let s = t.stop_gradient(v[0]);
            let y = t.matmul(s, v[1])?;
            project(t, y, &w)
        }),
    }
}

fn softmax_row(z: &[f64], tau: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - max) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn ce(target: &[f64], logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    -target.iter().zip(logits).map(|(t, z)| t * (z - lse)).sum::<f64>()
}

fn one_hot(y: usize, m: usize) -> Vec<f64> {
    (0..m).map(|i| if i == y { 1.0 } else { 0.0 }).collect()
}

/// Plain-arithmetic objective with the two detached targets supplied.
struct Reference {
    labels: Vec<usize>,
    m: usize,
    cfg: ObjectiveConfig,
    compressed: Option<usize>,
}

impl Reference {
    fn emb_rows(&self, emb: &[&Tensor<f64>]) -> Vec<Vec<f64>> {
        let m = self.m;
        self.labels
            .iter()
            .map(|&y| match self.compressed {
                None => emb[0].row(y).to_vec(),
                Some(h) => (0..m)
                    .map(|j| (0..h).map(|k| emb[0].data()[y * h + k] * emb[1].data()[k * m + j]).sum::<f64>().max(0.0))
                    .collect(),
            })
            .collect()
    }

    fn frozen(&self, z2: &Tensor<f64>, emb: &[&Tensor<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let se = self.emb_rows(emb).iter().map(|r| softmax_row(r, 1.0)).collect();
        let tg = (0..self.labels.len()).map(|i| softmax_row(z2.row(i), self.cfg.tau)).collect();
        (se, tg)
    }

    fn terms(&self, z1: &Tensor<f64>, z2: &Tensor<f64>, emb: &[&Tensor<f64>], frozen: &(Vec<Vec<f64>>, Vec<Vec<f64>>)) -> [f64; 5] {
        let b = self.labels.len() as f64;
        let rows = self.emb_rows(emb);
        let mut t = [0.0; 5];
        let mut kept = 0usize;
        let mut learn = 0.0;
        for (i, &y) in self.labels.iter().enumerate() {
            let (r1, r2) = (z1.row(i), z2.row(i));
            t[0] += ce(&one_hot(y, self.m), r1) / b;
            t[1] += ce(&frozen.0[i], r1) / b;
            t[2] += ce(&one_hot(y, self.m), r2) / b;
            let d = (softmax_row(r2, 1.0)[y] - self.cfg.alpha).max(0.0);
            t[3] += if self.cfg.p == 1 { d } else { d * d } / b;
            let argmax = (0..self.m).fold(0, |best, j| if r1[j] > r1[best] { j } else { best });
            if !self.cfg.mask_wrong || argmax == y {
                kept += 1;
                learn += ce(&frozen.1[i], &rows[i]);
            }
        }
        t[4] = if kept == 0 { 0.0 } else { learn / kept as f64 };
        t
    }
}

fn objective_instance(rng: &mut ChaCha8Rng, compressed: bool) -> (Vec<Tensor<f64>>, Reference) {
    loop {
        let (b, m) = (dim(rng, 1, 5), dim(rng, 2, 6));
        let cfg = ObjectiveConfig {
            tau: rng.random_range(0.5..4.0),
            alpha: rng.random_range(0.1..0.9),
            p: rng.random_range(1..=2),
            mask_wrong: rng.random_bool(0.7),
            ..Default::default()
        };
        cfg.validate().unwrap();
        let labels = labels(rng, b, m);
        let z1 = uniform(rng, &[b, m]);
        let z2 = uniform(rng, &[b, m]);
        let (emb, h) = if compressed {
            let h = dim(rng, 1, 3);
            (vec![uniform(rng, &[m, h]), uniform(rng, &[h, m])], Some(h))
        } else {
            (vec![uniform(rng, &[m, m])], None)
        };
        let r = Reference { labels, m, cfg, compressed: h };
        // stay clear of the kinks: hinge threshold, ReLU in A·B, argmax ties
        let near_kink = (0..b).any(|i| {
            let p = softmax_row(z2.row(i), 1.0)[r.labels[i]];
            let mut row = z1.row(i).to_vec();
            row.sort_by(|a, c| c.total_cmp(a));
            (p - cfg.alpha).abs() < 1e-3 || (row[0] - row[1]).abs() < 1e-3
        }) || h.is_some_and(|h| {
            (0..m).any(|y| (0..m).any(|j| (0..h).map(|k| emb[0].data()[y * h + k] * emb[1].data()[k * m + j]).sum::<f64>().abs() < 1e-3))
        });
        if !near_kink {
            let mut inputs = vec![z1, z2];
            inputs.extend(emb);
            return (inputs, r);
        }
    }
}

fn bound(vars: &[Var], compressed: bool) -> BoundEmbedding {
    if compressed {
        BoundEmbedding::Compressed { a: vars[2], b: vars[3] }
    } else {
        BoundEmbedding::Full { table: vars[2] }
    }
}

/// Worst relative error of the full objective against central differences
/// of the reference, plus the largest deviation of the reported breakdown.
fn full_objective_case(rng: &mut ChaCha8Rng, compressed: bool) -> (f64, f64) {
    let (inputs, r) = objective_instance(rng, compressed);
    let cfg = r.cfg;
    let labels = r.labels.clone();
    let f = move |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        Ok(compute_objective(t, v[0], v[1], &labels, &bound(v, compressed), &cfg)?.total)
    };
    let analytic = analytic_gradients(&inputs, &f).unwrap();

    let emb_refs: Vec<&Tensor<f64>> = inputs[2..].iter().collect();
    let frozen = r.frozen(&inputs[1], &emb_refs);
    let total = |ins: &[Tensor<f64>]| -> f64 {
        let e: Vec<&Tensor<f64>> = ins[2..].iter().collect();
        r.terms(&ins[0], &ins[1], &e, &frozen).iter().sum()
    };
    let mut worst: f64 = 0.0;
    for (which, a) in analytic.iter().enumerate() {
        let mut work = inputs.clone();
        let numeric: Vec<f64> = (0..work[which].len())
            .map(|j| {
                let orig = work[which].data()[j];
                work[which].data_mut()[j] = orig + DEFAULT_STEP;
                let plus = total(&work);
                work[which].data_mut()[j] = orig - DEFAULT_STEP;
                let minus = total(&work);
                work[which].data_mut()[j] = orig;
                (plus - minus) / (2.0 * DEFAULT_STEP)
            })
            .collect();
        worst = worst.max(relative_error(a, &numeric));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let obj = compute_objective(&mut tape, vars[0], vars[1], &r.labels, &bound(&vars, compressed), &cfg).unwrap();
    let want = r.terms(&inputs[0], &inputs[1], &emb_refs, &frozen);
    let dev = obj.breakdown.components().iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (worst, dev)
}

fn pretrained_case(rng: &mut ChaCha8Rng) -> Instance {
    let (b, m, hidden) = (dim(rng, 1, 5), dim(rng, 2, 6), dim(rng, 1, 4));
    let labels = labels(rng, b, m);
    let table = uniform(rng, &[m, m]);
    // hidden activations and the prediction head o1 = (W, c)
    Instance::all(vec![uniform(rng, &[b, hidden]), uniform(rng, &[hidden, m]), uniform(rng, &[m])], Box::new(move |t, v| {
        let z = t.matmul(v[0], v[1])?;
        let z1 = t.add_bias(z, v[2])?;
        let e = BoundEmbedding::Full { table: t.constant(table.clone()) };
        Ok(pretrained_objective(t, z1, &labels, &e)?.total)
    }))
}

fn run(name: &'static str, instances: usize, rng: &mut ChaCha8Rng, make: impl Fn(&mut ChaCha8Rng) -> Instance) -> OpReport {
    let worst = (0..instances).map(|_| make(rng).worst_error()).fold(0.0, f64::max);
    OpReport { name, instances, worst }
}

/// Every operation and both objectives, `instances` random cases each.
pub fn run_suite(instances: usize, seed: u64) -> Vec<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = vec![
        run("matmul", instances, rng, matmul),
        run("add_bias", instances, rng, add_bias),
        run("add", instances, rng, add),
        run("scale", instances, rng, scale),
        run("relu", instances, rng, relu),
        run("reshape", instances, rng, reshape),
        run("conv2d", instances, rng, conv2d),
        run("maxpool2d", instances, rng, maxpool2d),
        run("softmax", instances, rng, softmax),
        run("softmax_temperature", instances, rng, softmax_temperature),
        run("cross_entropy", instances, rng, cross_entropy),
        run("gather_rows", instances, rng, gather_rows),
        run("pick", instances, rng, pick),
        run("hinge p=1", instances, rng, hinge(1)),
        run("hinge p=2", instances, rng, hinge(2)),
        run("weighted_sum", instances, rng, weighted_sum),
        run("sum/mean", instances, rng, sum_and_mean),
        run("stop_gradient", instances, rng, stop_gradient),
        run("pretrained objective", instances, rng, pretrained_case),
    ];
    for (name, compressed) in [("full objective", false), ("full objective, compressed", true)] {
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let (err, dev) = full_objective_case(rng, compressed);
            // a breakdown that disagrees with the reference counts as a failure
            worst = worst.max(err).max(if dev < 1e-9 { 0.0 } else { 1.0 });
        }
        out.push(OpReport { name, instances, worst });
    }
    out
}

//! Gradient checks shared by the gradient tests and the acceptance suite.

use pcll::data::{Output, Provenance, Sample, TaskKind, Vocab};
use pcll::model::{kl_diag_gauss_var, reparameterize, GaussianVars, Model, ModelConfig};
use pcll::prompting::TaskSpec;
use pcll::replay::{EngineConfig, Learner, TrainItem};
use pcll::tensor::gradcheck::{check, CheckInput, CheckReport};
use pcll::tensor::{Graph, ParamStore, Result, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CheckInput {
    CheckInput::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Reduces any output to a scalar with fixed random weights so every entry of
/// the output gradient is distinct.
fn project(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let (r, c) = g.dims(out);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = g.leaf(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn projected<F>(inputs: &[CheckInput], f: F) -> CheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check(inputs, H, |g, v| {
        let out = f(g, v)?;
        project(g, out)
    })
    .unwrap()
}

/// Finite-difference report for every differentiable graph op.
pub fn op_reports() -> Vec<(&'static str, CheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, 3, 4);
    let b = random(&mut rng, 3, 4);
    let row = random(&mut rng, 1, 4);
    let m = random(&mut rng, 4, 2);
    let wide = random(&mut rng, 3, 5);
    let gamma = random(&mut rng, 1, 5);
    let beta = random(&mut rng, 1, 5);
    let sq = random(&mut rng, 4, 4);
    let logits = random(&mut rng, 4, 6);
    let mut target = Vec::new();
    for _ in 0..2 {
        let mut r: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|p| *p /= s);
        target.extend(r);
    }
    // Probe points sit well away from the clamp's kinks at +-0.5.
    let clampable = CheckInput::new(1, 4, vec![-0.9, -0.2, 0.3, 0.8]);
    let mu = random(&mut rng, 1, 3);
    let logvar = random(&mut rng, 1, 3);
    let p_mu = random(&mut rng, 1, 3);
    let p_lv = random(&mut rng, 1, 3);
    let eps = vec![0.4, -1.3, 0.9];

    vec![
        ("matmul", projected(&[a.clone(), m], |g, v| g.matmul(v[0], v[1]))),
        ("add", projected(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]))),
        ("add_broadcast", projected(&[a.clone(), row.clone()], |g, v| g.add(v[0], v[1]))),
        ("sub", projected(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]))),
        ("mul", projected(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]))),
        ("mul_broadcast", projected(&[a.clone(), row.clone()], |g, v| g.mul(v[0], v[1]))),
        ("scale", projected(&[a.clone()], |g, v| Ok(g.scale(v[0], -1.7)))),
        ("add_scalar", projected(&[a.clone()], |g, v| Ok(g.add_scalar(v[0], 0.3)))),
        ("exp", projected(&[a.clone()], |g, v| Ok(g.exp(v[0])))),
        ("tanh", projected(&[a.clone()], |g, v| Ok(g.tanh(v[0])))),
        ("gelu", projected(&[a.clone()], |g, v| Ok(g.gelu(v[0])))),
        ("transpose", projected(&[a.clone()], |g, v| Ok(g.transpose(v[0])))),
        ("sum", projected(&[a.clone()], |g, v| Ok(g.sum(v[0])))),
        ("mean_rows", projected(&[a.clone()], |g, v| g.mean_axis(v[0], 0))),
        ("mean_cols", projected(&[a.clone()], |g, v| g.mean_axis(v[0], 1))),
        ("concat_cols", projected(&[a.clone(), b.clone()], |g, v| g.concat_cols(&[v[0], v[1]]))),
        ("concat_rows", projected(&[a.clone(), row.clone()], |g, v| g.concat_rows(&[v[0], v[1]]))),
        ("slice_cols", projected(&[a.clone()], |g, v| g.slice_cols(v[0], 1, 3))),
        ("slice_rows", projected(&[a.clone()], |g, v| g.slice_rows(v[0], 1, 3))),
        ("clamp", projected(&[clampable], |g, v| Ok(g.clamp(v[0], -0.5, 0.5)))),
        ("softmax", projected(&[wide.clone()], |g, v| Ok(g.softmax(v[0])))),
        ("normalize", projected(&[wide.clone()], |g, v| Ok(g.normalize(v[0])))),
        ("layer_norm", projected(&[wide.clone(), gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2]))),
        ("masked_softmax", projected(&[sq], |g, v| {
            let m = g.causal_mask(v[0]);
            Ok(g.softmax(m))
        })),
        ("embedding", projected(&[wide], |g, v| g.embedding(v[0], &[2, 0, 2, 1]))),
        ("nll", check(&[logits.clone()], H, |g, v| g.nll(v[0], &[0, 2, 3], &[5, 1, 1])).unwrap()),
        ("soft_cross_entropy", check(&[logits], H, |g, v| g.soft_cross_entropy(v[0], &[1, 3], &target)).unwrap()),
        ("reparameterize", projected(&[mu.clone(), logvar.clone()], |g, v| {
            Ok(reparameterize(g, GaussianVars { mu: v[0], logvar: v[1] }, &eps).unwrap())
        })),
        ("kl_diag_gauss", check(&[mu, logvar, p_mu, p_lv], H, |g, v| {
            Ok(kl_diag_gauss_var(g, GaussianVars { mu: v[0], logvar: v[1] }, GaussianVars { mu: v[2], logvar: v[3] }).unwrap())
        })
        .unwrap()),
    ]
}

pub fn toy_learner() -> (Learner<f64>, Vec<TrainItem>) {
    let specs = vec![TaskSpec::new("travel", TaskKind::Intent), TaskSpec::new("music", TaskKind::Intent)];
    let mut words: Vec<String> = ["book", "flight", "play", "song", "please", "now", "travel", "music"]
        .map(String::from)
        .to_vec();
    words.extend(specs.iter().flat_map(TaskSpec::template_words));
    let vocab = Vocab::from_words(words.iter().map(String::as_str));
    let config = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 12,
        context_len: 48,
        vocab_size: vocab.len(),
        z_dim: 3,
        latent_hidden: 4,
        ..Default::default()
    };
    let mut model = Model::<f64>::new(config, 11).unwrap();
    // Nonzero latent output layers so gradients reach every CVAE parameter.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for t in model.params_mut().iter_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    let learner = Learner::new(model, vocab, specs, EngineConfig::default()).unwrap();
    let items = vec![
        TrainItem {
            task: 1,
            sample: Sample::new("play song now", Output::Intent("music".into())),
        },
        TrainItem {
            task: 0,
            sample: Sample {
                provenance: Provenance::Pseudo,
                ..Sample::new("book flight please", Output::Intent("travel".into()))
            },
        },
    ];
    (learner, items)
}

pub fn batch_value(learner: &Learner<f64>, items: &[TrainItem], teacher: &Model<f64>, eps: &[Vec<f64>]) -> f64 {
    let mut g = Graph::new();
    let loss = learner.batch_loss(&mut g, items, Some(teacher), 0.7, eps).unwrap();
    g.scalar_value(loss)
}

/// Full LM + CVAE + distillation objective on a two-sample batch, one real
/// and one replayed, against central differences on every parameter.
/// Returns the relative error over all probed entries.
pub fn end_to_end_rel_error() -> f64 {
    let (mut learner, items) = toy_learner();
    let mut teacher = learner.model().clone();
    // A teacher that differs from the student makes the distillation terms
    // contribute nonzero gradients.
    for t in teacher.params_mut().iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 0.9);
    }
    let eps = vec![vec![0.3, -0.8, 1.1], vec![-0.5, 0.2, 0.7]];

    let mut g = Graph::new();
    let loss = learner.batch_loss(&mut g, &items, Some(&teacher), 0.7, &eps).unwrap();
    learner.model_mut().params_mut().zero_grad();
    g.backward(loss, learner.model_mut().params_mut()).unwrap();
    let analytic: ParamStore<f64> = learner.model().params().clone();

    let h = 1e-5;
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let names: Vec<String> = analytic.iter().map(|(_, n, _)| n.to_string()).collect();
    for (k, name) in names.iter().enumerate() {
        let id = analytic.id(name).unwrap();
        let size = analytic.get(id).numel();
        // Every entry of small tensors, an even stride through large ones.
        let stride = (size / 24).max(1);
        let grad = analytic.get(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; size]);
        for i in (k % stride..size).step_by(stride) {
            let orig = learner.model().params().get(id).data()[i];
            learner.model_mut().params_mut().get_mut(id).data_mut()[i] = orig + h;
            let plus = batch_value(&learner, &items, &teacher, &eps);
            learner.model_mut().params_mut().get_mut(id).data_mut()[i] = orig - h;
            let minus = batch_value(&learner, &items, &teacher, &eps);
            learner.model_mut().params_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            diff2 += (grad[i] - numeric).powi(2);
            a2 += grad[i].powi(2);
            n2 += numeric.powi(2);
        }
    }
    assert!(a2 > 0.0, "objective has no parameter gradient");
    diff2.sqrt() / (a2.sqrt() + n2.sqrt()).max(1e-12)
}

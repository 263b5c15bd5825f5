//! Built-in invariant suite behind `refshare selftest`.
//!
//! Every property carries its own oracle or closed form and runs at small
//! sizes, so the whole suite finishes in a few seconds.

use std::fmt::Write as _;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attention_probs, mm_attention, pivotal_key_values, pivotal_shared_attention, shared_attention, JointOutput,
    LayerKV, MaskMode, ShareSpec, StreamQkv, TokenMask,
};
use crate::caption::{
    compensate, CaptionClients, CaptionError, CaptionMode, ChatBackend, ChatRequest, SUBJECT_TOKEN_BUDGET,
};
use crate::model::{init_model, ModelError, ToyMMDiT};
use crate::pipeline::{euler_sample, generate_from_images, sample, GenerationConfig, VelocityField};
use crate::schedule::{build_schedule, build_trajectory, compute_mu, sigma, sigma_inverse, NoiseSchedule, ShiftParams};
use crate::tensor::noise;

#[derive(Debug, Clone)]
pub struct PropertyOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
pub struct SelftestReport {
    pub outcomes: Vec<PropertyOutcome>,
    pub elapsed: Duration,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| !o.passed).count()
    }

    /// One `PASS`/`FAIL` line per property followed by a summary line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for o in &self.outcomes {
            let tag = if o.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{tag} {:<32} {:>8.1} ms  {}", o.name, o.elapsed.as_secs_f64() * 1e3, o.detail);
        }
        let _ = writeln!(
            out,
            "{}/{} properties passed in {:.2} s",
            self.outcomes.len() - self.failures(),
            self.outcomes.len(),
            self.elapsed.as_secs_f64()
        );
        out
    }
}

type Check = fn() -> Result<String, String>;

const PROPERTIES: &[(&str, Check)] = &[
    ("schedule_identity", schedule_identity),
    ("shift_direction_ordering", shift_direction_ordering),
    ("sigma_point_values", sigma_point_values),
    ("sigma_inverse_round_trip", sigma_inverse_round_trip),
    ("mu_monotone_in_length", mu_monotone_in_length),
    ("attention_oracle", attention_oracle),
    ("attention_rows_stochastic", attention_rows_stochastic),
    ("attention_reductions", attention_reductions),
    ("reference_permutation", reference_permutation),
    ("mask_modes_diverge", mask_modes_diverge),
    ("lambda_raises_reference_mass", lambda_raises_reference_mass),
    ("trajectory_endpoint", trajectory_endpoint),
    ("sampler_exactness", sampler_exactness),
    ("model_determinism", model_determinism),
    ("empty_mask_is_plain_sampling", empty_mask_is_plain_sampling),
    ("generation_determinism", generation_determinism),
    ("caption_budget", caption_budget),
];

/// Names of every property, in run order.
pub fn property_names() -> Vec<&'static str> {
    PROPERTIES.iter().map(|(n, _)| *n).collect()
}

/// Runs every property. Panics inside a property count as failures.
pub fn run() -> SelftestReport {
    let start = Instant::now();
    let hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let outcomes = PROPERTIES
        .iter()
        .map(|&(name, check)| {
            let t = Instant::now();
            let (passed, detail) = match panic::catch_unwind(AssertUnwindSafe(check)) {
                Ok(Ok(d)) => (true, d),
                Ok(Err(d)) => (false, d),
                Err(p) => (false, format!("panicked: {}", panic_message(&p))),
            };
            PropertyOutcome { name, passed, detail, elapsed: t.elapsed() }
        })
        .collect();
    panic::set_hook(hook);
    SelftestReport { outcomes, elapsed: start.elapsed() }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown".into())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn schedule_identity() -> Result<String, String> {
    let mut worst = 0.0f64;
    for i in 0..=1000 {
        let t = i as f64 / 1000.0;
        worst = worst.max((sigma(t, 0.0).map_err(err)? - t).abs());
    }
    ensure(worst <= 1e-12, || format!("max |sigma(t,0) - t| = {worst:e}"))?;
    ensure(sigma(0.0, 0.0).map_err(err)? == 0.0 && sigma(1.0, 0.0).map_err(err)? == 1.0, || "endpoints moved".into())?;
    Ok(format!("max err {worst:.1e} on 1001 points"))
}

fn shift_direction_ordering() -> Result<String, String> {
    let steps = 1000;
    let curves: Vec<NoiseSchedule<f64>> = [1.0, 0.0, -1.0]
        .iter()
        .map(|&k| build_schedule(steps, &ShiftParams::new(1024, k)))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let (up, none, down) = (&curves[0], &curves[1], &curves[2]);
    for i in 1..steps {
        let (a, b, c) = (up.sigmas[i], none.sigmas[i], down.sigmas[i]);
        ensure(a > b && b > c, || format!("ordering broken at t={}: {a} {b} {c}", none.timesteps[i]))?;
    }
    for i in [0, steps] {
        ensure(up.sigmas[i] == none.sigmas[i] && down.sigmas[i] == none.sigmas[i], || format!("endpoint {i} differs"))?;
    }
    Ok(format!("strict on {} interior points", steps - 1))
}

fn sigma_point_values() -> Result<String, String> {
    let ln2 = std::f64::consts::LN_2;
    let a = sigma(0.5, ln2).map_err(err)?;
    let b = sigma(0.5, -ln2).map_err(err)?;
    ensure((a - 2.0 / 3.0).abs() <= 1e-12 && (b - 1.0 / 3.0).abs() <= 1e-12, || format!("got {a}, {b}"))?;
    let mu = compute_mu(&ShiftParams::new(1024, 1.0)).map_err(err)?;
    ensure((mu - 0.63).abs() <= 1e-9, || format!("mu(1024) = {mu}"))?;
    Ok("sigma(0.5, ±ln 2) = 2/3, 1/3; mu(1024) = 0.63".into())
}

fn sigma_inverse_round_trip() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..2000 {
        let t: f64 = rng.random_range(0.0..=1.0);
        let mu: f64 = rng.random_range(-3.0..3.0);
        let back = sigma_inverse(sigma(t, mu).map_err(err)?, mu).map_err(err)?;
        worst = worst.max((back - t).abs());
    }
    ensure(worst <= 1e-9, || format!("worst round trip error {worst:e}"))?;
    Ok(format!("2000 draws, max err {worst:.1e}"))
}

fn mu_monotone_in_length() -> Result<String, String> {
    let mut last = f64::NEG_INFINITY;
    for len in (16..=8192).step_by(16) {
        let mu = compute_mu(&ShiftParams::new(len, 1.0)).map_err(err)?;
        ensure(mu > last, || format!("mu not increasing at {len}"))?;
        last = mu;
    }
    Ok("strictly increasing over 16..8192".into())
}

type Rows = Vec<Vec<f64>>;

fn oracle_attend(q: &Rows, k: &Rows, v: &Rows) -> Rows {
    let dv = v.first().map_or(0, |r| r.len());
    q.iter()
        .map(|qi| {
            let d = qi.len() as f64;
            let logits: Vec<f64> =
                k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            let mut out = vec![0.0; dv];
            for (wj, vj) in w.iter().zip(v) {
                for c in 0..dv {
                    out[c] += wj / z * vj[c];
                }
            }
            out
        })
        .collect()
}

fn rows(a: &Array3<f64>, h: usize, scale: f64) -> Rows {
    a.index_axis(Axis(0), h).rows().into_iter().map(|r| r.iter().map(|x| x * scale).collect()).collect()
}

fn rand3(rng: &mut ChaCha8Rng, h: usize, n: usize, d: usize) -> Array3<f64> {
    Array3::from_shape_simple_fn((h, n, d), || rng.random_range(-2.0..2.0))
}

fn rand_stream(rng: &mut ChaCha8Rng, h: usize, n: usize, dk: usize, dv: usize) -> StreamQkv<f64> {
    StreamQkv { q: rand3(rng, h, n, dk), k: rand3(rng, h, n, dk), v: rand3(rng, h, n, dv) }
}

struct Instance {
    text: StreamQkv<f64>,
    image: StreamQkv<f64>,
    kv: LayerKV<f64>,
    spec: ShareSpec,
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let heads = rng.random_range(1..=2);
    let dk = rng.random_range(1..=4);
    let dv = rng.random_range(1..=4);
    let n_text = rng.random_range(1..=3);
    let n_img = rng.random_range(1..=3);
    let n_ref = rng.random_range(1..=2);
    let text = rand_stream(rng, heads, n_text, dk, dv);
    let image = rand_stream(rng, heads, n_img, dk, dv);
    let kv = LayerKV::new(rand3(rng, heads, n_ref, dk), rand3(rng, heads, n_ref, dv), 0, 0).unwrap();
    let flags: Vec<bool> = (0..n_ref).map(|_| rng.random_bool(0.6)).collect();
    let mut spec = ShareSpec::plain(1, [0].into(), n_ref);
    spec.mask = TokenMask::from_flags(flags);
    spec.lambda_r = rng.random_range(0.8..1.3);
    spec.lambda_p = rng.random_range(0.8..1.3);
    spec.mask_mode = if rng.random_bool(0.5) { MaskMode::Drop } else { MaskMode::Zero };
    Instance { text, image, kv, spec }
}

fn compare(out: &JointOutput<f64>, inst: &Instance, keys: impl Fn(usize) -> (Rows, Rows)) -> f64 {
    let mut worst = 0.0f64;
    for h in 0..out.text.dim().0 {
        let q: Rows = rows(&inst.text.q, h, 1.0).into_iter().chain(rows(&inst.image.q, h, 1.0)).collect();
        let (k, v) = keys(h);
        let want = oracle_attend(&q, &k, &v);
        let got: Rows = rows(&out.text, h, 1.0).into_iter().chain(rows(&out.image, h, 1.0)).collect();
        for (a, b) in want.iter().flatten().zip(got.iter().flatten()) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

fn attention_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let inst = instance(&mut rng);
        let (t, im, kv, spec) = (&inst.text, &inst.image, &inst.kv, &inst.spec);

        let plain = mm_attention(t, im).map_err(err)?;
        worst = worst.max(compare(&plain, &inst, |h| {
            (
                rows(&t.k, h, 1.0).into_iter().chain(rows(&im.k, h, 1.0)).collect(),
                rows(&t.v, h, 1.0).into_iter().chain(rows(&im.v, h, 1.0)).collect(),
            )
        }));

        let shared = shared_attention(t, im, &kv.keys, &kv.values).map_err(err)?;
        worst = worst.max(compare(&shared, &inst, |h| {
            (
                rows(&kv.keys, h, 1.0).into_iter().chain(rows(&t.k, h, 1.0)).chain(rows(&im.k, h, 1.0)).collect(),
                rows(&kv.values, h, 1.0).into_iter().chain(rows(&t.v, h, 1.0)).chain(rows(&im.v, h, 1.0)).collect(),
            )
        }));

        let pivotal = pivotal_shared_attention(0, spec, t, im, kv).map_err(err)?;
        let flags = spec.mask.flags().to_vec();
        let any = flags.iter().any(|&f| f) || spec.mask_mode == MaskMode::Zero;
        worst = worst.max(compare(&pivotal, &inst, |h| {
            let (mut k, mut v) = (Rows::new(), Rows::new());
            if any {
                for (i, (kr, vr)) in rows(&kv.keys, h, 1.0).into_iter().zip(rows(&kv.values, h, 1.0)).enumerate() {
                    let gate = if flags[i] { 1.0 } else { 0.0 };
                    if flags[i] || spec.mask_mode == MaskMode::Zero {
                        k.push(kr.iter().map(|x| x * gate * spec.lambda_r).collect());
                        v.push(vr.iter().map(|x| x * gate).collect());
                    }
                }
                k.extend(rows(&t.k, h, spec.lambda_p));
            } else {
                k.extend(rows(&t.k, h, 1.0));
            }
            k.extend(rows(&im.k, h, 1.0));
            v.extend(rows(&t.v, h, 1.0));
            v.extend(rows(&im.v, h, 1.0));
            (k, v)
        }));
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e}"))?;
    Ok(format!("200 instances x 3 kernels, max err {worst:.1e}"))
}

fn attention_rows_stochastic() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let q: Array2<f64> = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-4.0..4.0));
        let k = Array2::from_shape_simple_fn((n, 4), || rng.random_range(-4.0..4.0));
        let p = attention_probs(q.view(), k.view());
        ensure(p.iter().all(|&x| (0.0..=1.0).contains(&x)), || "probability outside [0, 1]".into())?;
        for r in p.rows() {
            worst = worst.max((r.sum() - 1.0f64).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("row sum off by {worst:e}"))?;
    Ok(format!("max |row sum - 1| = {worst:.1e}"))
}

fn bit_equal(a: &JointOutput<f64>, b: &JointOutput<f64>) -> bool {
    let same = |x: &Array3<f64>, y: &Array3<f64>| {
        x.dim() == y.dim() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
    };
    same(&a.text, &b.text) && same(&a.image, &b.image)
}

fn attention_reductions() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..100 {
        let inst = instance(&mut rng);
        let n_ref = inst.kv.num_tokens();
        let (t, im, kv) = (&inst.text, &inst.image, &inst.kv);
        let full = ShareSpec::plain(2, [0].into(), n_ref);
        let a = pivotal_shared_attention(0, &full, t, im, kv).map_err(err)?;
        let b = shared_attention(t, im, &kv.keys, &kv.values).map_err(err)?;
        ensure(bit_equal(&a, &b), || format!("instance {i}: unit scale full mask differs from sharing"))?;

        let plain = mm_attention(t, im).map_err(err)?;
        let mut empty = inst.spec.clone();
        empty.num_layers = 2;
        empty.mask = TokenMask::empty(n_ref);
        empty.mask_mode = MaskMode::Drop;
        let c = pivotal_shared_attention(0, &empty, t, im, kv).map_err(err)?;
        ensure(bit_equal(&c, &plain), || format!("instance {i}: empty mask differs from joint attention"))?;

        let mut outside = inst.spec.clone();
        outside.num_layers = 2;
        let kv1 = LayerKV::new(kv.keys.clone(), kv.values.clone(), 1, 0).map_err(err)?;
        let d = pivotal_shared_attention(1, &outside, t, im, &kv1).map_err(err)?;
        ensure(bit_equal(&d, &plain), || format!("instance {i}: non-vital layer differs from joint attention"))?;
    }
    Ok("100 instances, bit-exact".into())
}

fn permute(a: &Array3<f64>, perm: &[usize]) -> Array3<f64> {
    Array3::from_shape_fn(a.dim(), |(h, i, d)| a[[h, perm[i], d]])
}

fn reference_permutation() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let heads = rng.random_range(1..=2);
        let text = rand_stream(&mut rng, heads, 2, 3, 2);
        let image = rand_stream(&mut rng, heads, 3, 3, 2);
        let n = rng.random_range(2..=6);
        let kv = LayerKV::new(rand3(&mut rng, heads, n, 3), rand3(&mut rng, heads, n, 2), 0, 0).map_err(err)?;
        let mut spec = ShareSpec::plain(1, [0].into(), n);
        spec.mask = TokenMask::from_flags((0..n).map(|_| rng.random_bool(0.5)).collect());
        spec.lambda_r = 1.1;
        spec.lambda_p = 1.1;
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let kv_p = LayerKV::new(permute(&kv.keys, &perm), permute(&kv.values, &perm), 0, 0).map_err(err)?;
        let mut spec_p = spec.clone();
        spec_p.mask = spec.mask.permuted(&perm);
        let a = pivotal_shared_attention(0, &spec, &text, &image, &kv).map_err(err)?;
        let b = pivotal_shared_attention(0, &spec_p, &text, &image, &kv_p).map_err(err)?;
        for (x, y) in a.image.iter().chain(a.text.iter()).zip(b.image.iter().chain(b.text.iter())) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("100 permutations, max err {worst:.1e}"))
}

fn mask_modes_diverge() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let text = rand_stream(&mut rng, 2, 2, 4, 3);
    let image = rand_stream(&mut rng, 2, 3, 4, 3);
    let kv = LayerKV::new(rand3(&mut rng, 2, 4, 4), rand3(&mut rng, 2, 4, 3), 0, 0).map_err(err)?;
    let mut spec = ShareSpec::plain(1, [0].into(), 4);
    spec.mask = TokenMask::from_flags(vec![true, false, true, false]);
    let drop = pivotal_shared_attention(0, &spec, &text, &image, &kv).map_err(err)?;
    spec.mask_mode = MaskMode::Zero;
    let zero = pivotal_shared_attention(0, &spec, &text, &image, &kv).map_err(err)?;
    ensure(!bit_equal(&drop, &zero), || "drop and zero masking agree on a partial mask".into())?;
    spec.mask = TokenMask::full(4);
    let full_zero = pivotal_shared_attention(0, &spec, &text, &image, &kv).map_err(err)?;
    spec.mask_mode = MaskMode::Drop;
    let full_drop = pivotal_shared_attention(0, &spec, &text, &image, &kv).map_err(err)?;
    ensure(bit_equal(&full_zero, &full_drop), || "modes differ on a full mask".into())?;
    Ok("partial mask separates modes, full mask does not".into())
}

fn lambda_raises_reference_mass() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    for _ in 0..50 {
        let text = rand_stream(&mut rng, 1, 2, 3, 1);
        let image = rand_stream(&mut rng, 1, 2, 3, 1);
        let kv = LayerKV::new(rand3(&mut rng, 1, 3, 3), Array3::zeros((1, 3, 1)), 0, 0).map_err(err)?;
        let q = ndarray::concatenate(Axis(1), &[text.q.view(), image.q.view()]).map_err(err)?;
        // reference mass grows with lambda_r for queries whose reference logits are all positive
        let positive: Vec<usize> = (0..q.dim().1)
            .filter(|&i| (0..3).all(|j| (0..3).map(|d| q[[0, i, d]] * kv.keys[[0, j, d]]).sum::<f64>() > 0.0))
            .collect();
        let mut last = vec![-1.0; positive.len()];
        for lambda in [0.5, 1.0, 1.05, 1.1, 1.15, 2.0] {
            let mut spec = ShareSpec::plain(1, [0].into(), 3);
            spec.lambda_r = lambda;
            let skv = pivotal_key_values(0, &spec, &text, &image, &kv).map_err(err)?;
            let p = attention_probs(q.slice(s![0, .., ..]), skv.keys.slice(s![0, .., ..]));
            for (slot, &i) in positive.iter().enumerate() {
                let mass: f64 = p.row(i).iter().take(skv.num_reference).sum();
                ensure(mass > last[slot], || format!("mass fell at lambda_r={lambda}"))?;
                last[slot] = mass;
                checked += 1;
            }
        }
    }
    ensure(checked > 0, || "no query with positive reference logits".into())?;
    Ok(format!("{checked} monotone steps"))
}

fn trajectory_endpoint() -> Result<String, String> {
    let z0 = noise::<f64>(4, 16, 12) * 0.3;
    for k in [1.0, 0.0, -1.0] {
        let sched: NoiseSchedule<f64> = build_schedule(30, &ShiftParams::new(1024, k)).map_err(err)?;
        let traj = build_trajectory(&z0, 9, &sched).map_err(err)?;
        ensure(traj.latents.last() == Some(&z0), || format!("k={k}: clean end is not z0"))?;
        ensure(traj.latents.first() == Some(&traj.noise), || format!("k={k}: noisy end is not the noise"))?;
    }
    Ok("z at sigma 0 equals z0 exactly".into())
}

struct TrueVelocity {
    velocity: Array2<f64>,
}

impl VelocityField<f64> for TrueVelocity {
    fn velocity(&self, _z: &Array2<f64>, _sigma: f64, _step: usize) -> Result<Array2<f64>, ModelError> {
        Ok(self.velocity.clone())
    }
}

fn sampler_exactness() -> Result<String, String> {
    let z0 = noise::<f64>(21, 16, 12) * 0.5;
    let eps = noise::<f64>(22, 16, 12);
    let field = TrueVelocity { velocity: &eps - &z0 };
    let mut worst = 0.0f64;
    for steps in [1, 5, 30] {
        let sched: NoiseSchedule<f64> = build_schedule(steps, &ShiftParams::new(1024, 1.0)).map_err(err)?;
        let out = euler_sample(&field, eps.clone(), &sched).map_err(err)?;
        worst = worst.max((&out - &z0).iter().fold(0.0f64, |m, x| m.max(x.abs())));
    }
    ensure(worst <= 1e-5, || format!("max error {worst:e}"))?;
    Ok(format!("steps 1/5/30, max err {worst:.1e}"))
}

fn model_determinism() -> Result<String, String> {
    let config = GenerationConfig::default().model_config();
    let a: ToyMMDiT<f32> = init_model(&config).map_err(err)?;
    let b: ToyMMDiT<f32> = init_model(&config).map_err(err)?;
    ensure(a.weight_checksum() == b.weight_checksum(), || "weight checksum differs across inits".into())?;
    let z = noise::<f32>(1, config.image_tokens, config.latent_channels);
    let p = a.embed_prompt("a photo of a dog");
    let va = a.forward_velocity(&z, 0.5, &p, 3.5, None).map_err(err)?;
    let vb = b.forward_velocity(&z, 0.5, &p, 3.5, None).map_err(err)?;
    ensure(va == vb, || "forward pass differs".into())?;
    ensure(va.iter().all(|x| x.is_finite()), || "non-finite velocity".into())?;
    Ok(format!("weights {}", &a.weight_checksum()[..12]))
}

fn synthetic_inputs(side: u32) -> (RgbImage, GrayImage) {
    let c = side as f32 / 2.0;
    let img = RgbImage::from_fn(side, side, |x, y| {
        let d = ((x as f32 - c).powi(2) + (y as f32 - c).powi(2)).sqrt();
        if d < side as f32 / 4.0 {
            Rgb([230, 120, 40])
        } else {
            Rgb([(x * 255 / side) as u8, 90, (y * 255 / side) as u8])
        }
    });
    let mask = GrayImage::from_fn(side, side, |x, y| {
        let d = ((x as f32 - c).powi(2) + (y as f32 - c).powi(2)).sqrt();
        Luma([if d < side as f32 / 4.0 + 2.0 { 255 } else { 0 }])
    });
    (img, mask)
}

fn empty_mask_is_plain_sampling() -> Result<String, String> {
    let config = GenerationConfig { caption_enabled: false, ..GenerationConfig::default() };
    let side = (config.model.grid_side() * config.patch_size) as u32;
    let (img, _) = synthetic_inputs(side);
    let res = generate_from_images::<f32>(&img, &GrayImage::new(side, side), "a toy in the snow", &config, None)
        .map_err(err)?;
    let model: ToyMMDiT<f32> = init_model(&config.model_config()).map_err(err)?;
    let plain = sample(&model, None, &model.embed_prompt("a toy in the snow"), &config).map_err(err)?;
    let same = res.latent.iter().zip(plain.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same, || "empty mask pipeline differs from plain sampling".into())?;
    Ok("bit-exact".into())
}

fn generation_determinism() -> Result<String, String> {
    let config = GenerationConfig::default();
    let side = (config.model.grid_side() * config.patch_size) as u32;
    let (img, mask) = synthetic_inputs(side);
    let clients = config.caption.clients().map_err(err)?;
    let a = generate_from_images::<f32>(&img, &mask, "a toy on the beach", &config, Some(&clients)).map_err(err)?;
    let b = generate_from_images::<f32>(&img, &mask, "a toy on the beach", &config, Some(&clients)).map_err(err)?;
    ensure(a.image == b.image, || "images differ".into())?;
    ensure(a.metadata == b.metadata, || "metadata differs".into())?;
    Ok(format!("image {}", &a.metadata.image_sha256[..12]))
}

/// Answers every request with a long run of distinct words.
struct Verbose;

impl ChatBackend for Verbose {
    fn complete(&self, _request: &ChatRequest) -> Result<String, CaptionError> {
        Ok((0..200).map(|i| format!("word{i}")).collect::<Vec<_>>().join(" "))
    }

    fn describe(&self) -> String {
        "verbose".into()
    }
}

fn caption_budget() -> Result<String, String> {
    let clients = CaptionClients { vlm: Box::new(Verbose), llm: Box::new(Verbose) };
    let (img, _) = synthetic_inputs(16);
    let bundle = compensate(&img, &clients, CaptionMode::Subject, "toy").map_err(err)?;
    let n = bundle.filtered.split_whitespace().count();
    ensure(n <= SUBJECT_TOKEN_BUDGET, || format!("{n} tokens after filtering"))?;
    ensure(bundle.raw_truncated && bundle.filtered_truncated, || "truncation not flagged".into())?;
    Ok(format!("200-word replies cut to {SUBJECT_TOKEN_BUDGET}"))
}
